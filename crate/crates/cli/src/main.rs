//! Batch front door: estimation on panel CSV files and Monte-Carlo
//! simulation studies, emitting machine-readable results and plot-ready
//! series. Exit codes: 0 success, 1 estimation failure, 2 usage/input error.

mod config;
mod estimate;
mod simulate;

use clap::Parser;

fn main() {
    let cli = config::Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(err) => {
            let payload = serde_json::json!({
                "error": err.message,
                "kind": if err.usage { "usage" } else { "estimation" },
            });
            eprintln!("{payload}");
            if err.usage {
                2
            } else {
                1
            }
        }
    };
    std::process::exit(code);
}

/// Error carrying the exit-code class.
#[derive(Debug)]
pub struct AppError {
    pub message: String,
    pub usage: bool,
}

impl AppError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            usage: true,
        }
    }

    pub fn run(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            usage: false,
        }
    }
}

fn run(cli: config::Cli) -> Result<(), AppError> {
    match cli.command {
        config::Command::Estimate(args) => {
            let resolved = config::resolve_estimate(args)?;
            config::init_thread_pool(resolved.jobs)?;
            estimate::cmd_estimate(&resolved)
        }
        config::Command::Simulate(args) => {
            let resolved = config::resolve_simulate(args)?;
            config::init_thread_pool(resolved.jobs)?;
            simulate::cmd_simulate(&resolved)
        }
    }
}
