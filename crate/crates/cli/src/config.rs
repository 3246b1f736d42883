//! Argument parsing and config-file merging. A JSON config file may supply
//! any field; explicit flags win on conflict. Defaults: h = 0.5, probe rank
//! 8, cube-root block sizes, 1.96 normal intervals.

use crate::AppError;
use clap::{Args, Parser, Subcommand, ValueEnum};
use qtt_core::panel::PanelFormat;
use qtt_core::sim::{DgpFamily, Estimator};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "qtt", version, about = "Quantile treatment effects on the treated in large panels")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Estimate QTT from a panel CSV with bootstrap confidence intervals.
    Estimate(EstimateArgs),
    /// Run a Monte-Carlo simulation study over the built-in DGP families.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage1Arg {
    Iqr,
    Isqr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FormatArg {
    WideCsv,
    LongCsv,
}

impl From<FormatArg> for PanelFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::WideCsv => PanelFormat::WideCsv,
            FormatArg::LongCsv => PanelFormat::LongCsv,
        }
    }
}

#[derive(Args)]
pub struct EstimateArgs {
    /// JSON config file supplying any of the other options.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Panel CSV path.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Input layout.
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
    /// Comma-separated quantile levels, strictly increasing in (0, 1).
    #[arg(long, value_delimiter = ',')]
    pub tau: Vec<f64>,
    /// First-stage estimator.
    #[arg(long, value_enum)]
    pub stage1: Option<Stage1Arg>,
    /// Probe rank for rank selection.
    #[arg(long)]
    pub kmax: Option<usize>,
    /// Fix the number of factors instead of selecting it.
    #[arg(long)]
    pub rank: Option<usize>,
    /// Kernel bandwidth for the smoothed first stage.
    #[arg(long)]
    pub bandwidth: Option<f64>,
    /// Bootstrap replicates; 0 disables inference.
    #[arg(long = "boot-B")]
    pub boot_b: Option<usize>,
    /// Override the pre-treatment block size.
    #[arg(long)]
    pub block_pre: Option<usize>,
    /// Override the post-treatment block size.
    #[arg(long)]
    pub block_post: Option<usize>,
    /// Treated unit labels (wide format; long format reads the flag column).
    #[arg(long, value_delimiter = ',')]
    pub treated: Vec<String>,
    /// First treated period, 1-based (wide format).
    #[arg(long)]
    pub treatment_start: Option<usize>,
    /// RNG seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker thread cap (default: all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Args)]
pub struct SimulateArgs {
    /// JSON config file supplying any of the other options.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// DGP family: baseline, heavy-tail, dependent, quantile-variant.
    #[arg(long)]
    pub family: Option<String>,
    /// Control units N.
    #[arg(long = "N")]
    pub n: Option<usize>,
    /// Time periods T.
    #[arg(long = "T")]
    pub t: Option<usize>,
    /// Monte-Carlo replications.
    #[arg(long = "R")]
    pub r: Option<usize>,
    /// Bootstrap replicates per replication; 0 disables SD/Coverage.
    #[arg(long = "boot-B")]
    pub boot_b: Option<usize>,
    /// Comma-separated estimators: NQTT,SQTT,Oracle,GSCM.
    #[arg(long, value_delimiter = ',')]
    pub estimators: Vec<String>,
    /// Comma-separated quantile levels.
    #[arg(long, value_delimiter = ',')]
    pub tau: Vec<f64>,
    /// Kernel bandwidth for SQTT.
    #[arg(long)]
    pub bandwidth: Option<f64>,
    /// AR coefficient of the dependent-error family.
    #[arg(long)]
    pub dgp_ar: Option<f64>,
    /// Neighbor weight of the dependent-error family.
    #[arg(long)]
    pub dgp_weight: Option<f64>,
    /// Neighbor radius J of the dependent-error family.
    #[arg(long)]
    pub dgp_j: Option<usize>,
    /// Full-scale preset (R = 1000, B = 1000).
    #[arg(long)]
    pub full_scale: bool,
    /// RNG seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker thread cap (default: all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
}

/// File-backed defaults for either subcommand; every field optional.
#[derive(Debug, Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub input: Option<PathBuf>,
    pub format: Option<FormatArg>,
    pub tau: Option<Vec<f64>>,
    pub stage1: Option<Stage1Arg>,
    pub kmax: Option<usize>,
    pub rank: Option<usize>,
    pub bandwidth: Option<f64>,
    pub boot_b: Option<usize>,
    pub block_pre: Option<usize>,
    pub block_post: Option<usize>,
    pub treated: Option<Vec<String>>,
    pub treatment_start: Option<usize>,
    pub family: Option<String>,
    #[serde(rename = "N")]
    pub n: Option<usize>,
    #[serde(rename = "T")]
    pub t: Option<usize>,
    #[serde(rename = "R")]
    pub r: Option<usize>,
    pub estimators: Option<Vec<String>>,
    pub dgp_ar: Option<f64>,
    pub dgp_weight: Option<f64>,
    pub dgp_j: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
}

fn load_file_config(path: &Option<PathBuf>) -> Result<FileConfig, AppError> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| AppError::usage(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| AppError::usage(format!("bad config {}: {e}", p.display())))
        }
    }
}

fn validate_taus(taus: &[f64]) -> Result<(), AppError> {
    if taus.is_empty() {
        return Err(AppError::usage("at least one --tau level is required"));
    }
    for pair in taus.windows(2) {
        if pair[0] >= pair[1] {
            return Err(AppError::usage("tau grid must be strictly increasing"));
        }
    }
    if taus.iter().any(|t| !(0.0 < *t && *t < 1.0)) {
        return Err(AppError::usage("tau levels must lie in (0, 1)"));
    }
    Ok(())
}

/// Fully-resolved estimation run.
#[derive(Debug, serde::Serialize)]
pub struct EstimateConfig {
    pub input: PathBuf,
    pub format: FormatArg,
    pub tau: Vec<f64>,
    pub stage1: Stage1Arg,
    pub kmax: usize,
    pub rank: Option<usize>,
    pub bandwidth: f64,
    pub boot_b: usize,
    pub block_pre: Option<usize>,
    pub block_post: Option<usize>,
    pub treated: Vec<String>,
    pub treatment_start: Option<usize>,
    pub seed: u64,
    pub out: PathBuf,
    pub jobs: Option<usize>,
}

pub fn resolve_estimate(args: EstimateArgs) -> Result<EstimateConfig, AppError> {
    let file = load_file_config(&args.config)?;
    let tau = if args.tau.is_empty() {
        file.tau.unwrap_or_default()
    } else {
        args.tau
    };
    validate_taus(&tau)?;
    let config = EstimateConfig {
        input: args
            .input
            .or(file.input)
            .ok_or_else(|| AppError::usage("--input is required"))?,
        format: args.format.or(file.format).unwrap_or(FormatArg::WideCsv),
        tau,
        stage1: args.stage1.or(file.stage1).unwrap_or(Stage1Arg::Iqr),
        kmax: args.kmax.or(file.kmax).unwrap_or(8),
        rank: args.rank.or(file.rank),
        bandwidth: args.bandwidth.or(file.bandwidth).unwrap_or(0.5),
        boot_b: args.boot_b.or(file.boot_b).unwrap_or(300),
        block_pre: args.block_pre.or(file.block_pre),
        block_post: args.block_post.or(file.block_post),
        treated: if args.treated.is_empty() {
            file.treated.unwrap_or_default()
        } else {
            args.treated
        },
        treatment_start: args.treatment_start.or(file.treatment_start),
        seed: args.seed.or(file.seed).unwrap_or(0),
        out: args
            .out
            .or(file.out)
            .ok_or_else(|| AppError::usage("--out is required"))?,
        jobs: args.jobs.or(file.jobs),
    };
    if config.bandwidth <= 0.0 {
        return Err(AppError::usage("--bandwidth must be positive"));
    }
    Ok(config)
}

/// Fully-resolved simulation run.
#[derive(Debug, serde::Serialize)]
pub struct SimulateConfig {
    pub family: DgpFamily,
    pub n: usize,
    pub t: usize,
    pub replications: usize,
    pub boot_b: usize,
    pub estimators: Vec<Estimator>,
    pub tau: Vec<f64>,
    pub bandwidth: f64,
    pub seed: u64,
    pub out: PathBuf,
    pub jobs: Option<usize>,
}

fn parse_family(
    name: &str,
    ar: Option<f64>,
    weight: Option<f64>,
    j: Option<usize>,
) -> Result<DgpFamily, AppError> {
    match name {
        "baseline" => Ok(DgpFamily::Baseline),
        "heavy-tail" => Ok(DgpFamily::HeavyTail),
        "dependent" => Ok(DgpFamily::Dependent {
            ar: ar.unwrap_or(0.2),
            weight: weight.unwrap_or(0.2),
            j: j.unwrap_or(3),
        }),
        "quantile-variant" => Ok(DgpFamily::QuantileVariant),
        other => Err(AppError::usage(format!(
            "unknown family '{other}'; expected baseline, heavy-tail, dependent, or quantile-variant"
        ))),
    }
}

fn parse_estimators(names: &[String]) -> Result<Vec<Estimator>, AppError> {
    if names.is_empty() {
        return Ok(vec![
            Estimator::Nqtt,
            Estimator::Sqtt,
            Estimator::Oracle,
            Estimator::Gscm,
        ]);
    }
    names
        .iter()
        .map(|n| match n.to_ascii_uppercase().as_str() {
            "NQTT" => Ok(Estimator::Nqtt),
            "SQTT" => Ok(Estimator::Sqtt),
            "ORACLE" => Ok(Estimator::Oracle),
            "GSCM" => Ok(Estimator::Gscm),
            other => Err(AppError::usage(format!(
                "unknown estimator '{other}'; expected NQTT, SQTT, Oracle, or GSCM"
            ))),
        })
        .collect()
}

pub fn resolve_simulate(args: SimulateArgs) -> Result<SimulateConfig, AppError> {
    let file = load_file_config(&args.config)?;
    let tau = if args.tau.is_empty() {
        file.tau.unwrap_or_else(|| vec![0.1, 0.25, 0.5, 0.75, 0.9])
    } else {
        args.tau
    };
    validate_taus(&tau)?;
    let family_name = args
        .family
        .or(file.family)
        .ok_or_else(|| AppError::usage("--family is required"))?;
    let family = parse_family(
        &family_name,
        args.dgp_ar.or(file.dgp_ar),
        args.dgp_weight.or(file.dgp_weight),
        args.dgp_j.or(file.dgp_j),
    )?;
    let estimator_names = if args.estimators.is_empty() {
        file.estimators.unwrap_or_default()
    } else {
        args.estimators
    };
    let (default_r, default_b) = if args.full_scale { (1000, 1000) } else { (200, 300) };
    let config = SimulateConfig {
        family,
        n: args.n.or(file.n).unwrap_or(100),
        t: args.t.or(file.t).unwrap_or(200),
        replications: args.r.or(file.r).unwrap_or(default_r),
        boot_b: args.boot_b.or(file.boot_b).unwrap_or(default_b),
        estimators: parse_estimators(&estimator_names)?,
        tau,
        bandwidth: args.bandwidth.or(file.bandwidth).unwrap_or(0.5),
        seed: args.seed.or(file.seed).unwrap_or(0),
        out: args
            .out
            .or(file.out)
            .ok_or_else(|| AppError::usage("--out is required"))?,
        jobs: args.jobs.or(file.jobs),
    };
    Ok(config)
}

/// Cap worker parallelism across all modules with one knob.
pub fn init_thread_pool(jobs: Option<usize>) -> Result<(), AppError> {
    if let Some(jobs) = jobs {
        if jobs == 0 {
            return Err(AppError::usage("--jobs must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| AppError::usage(format!("thread pool: {e}")))?;
    }
    Ok(())
}
