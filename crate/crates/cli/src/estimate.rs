//! The `estimate` subcommand: two-stage QTT estimation on a panel CSV with
//! blockwise-bootstrap intervals, plus plot-ready curve and pre-trend series.

use crate::config::{EstimateConfig, Stage1Arg};
use crate::AppError;
use qtt_core::inference::{bootstrap_qtt, make_block_plan, BootstrapResult};
use qtt_core::panel::{load_panel, PanelSchema};
use qtt_core::qfm::FitOptions;
use qtt_core::qr::SmoothingSpec;
use qtt_core::qtt::{estimate_qtt, QttEstimate, QttOptions};
use serde_json::json;
use std::path::Path;

pub fn cmd_estimate(config: &EstimateConfig) -> Result<(), AppError> {
    let started = std::time::Instant::now();
    std::fs::create_dir_all(&config.out)
        .map_err(|e| AppError::usage(format!("cannot create {}: {e}", config.out.display())))?;

    let schema = PanelSchema {
        treated_units: config.treated.clone(),
        treatment_start: config.treatment_start,
    };
    let panel = load_panel(&config.input, config.format.into(), &schema)
        .map_err(|e| AppError::usage(format!("loading {}: {e}", config.input.display())))?;

    let smoothing = match config.stage1 {
        Stage1Arg::Iqr => None,
        Stage1Arg::Isqr => Some(
            SmoothingSpec::new(config.bandwidth)
                .map_err(|e| AppError::usage(e.to_string()))?,
        ),
    };
    let options = QttOptions {
        rank: config.rank,
        probe_rank: config.kmax,
        smoothing,
        fit: FitOptions {
            seed: config.seed,
            ..FitOptions::default()
        },
    };

    let mut per_tau: Vec<(QttEstimate, Option<BootstrapResult>)> = Vec::new();
    for &tau in &config.tau {
        let estimate =
            estimate_qtt(&panel, tau, &options).map_err(|e| AppError::run(e.to_string()))?;
        let boot = if config.boot_b > 0 {
            let overrides = match (config.block_pre, config.block_post) {
                (Some(b0), Some(b1)) => Some((b0, b1)),
                (None, None) => None,
                _ => {
                    return Err(AppError::usage(
                        "--block-pre and --block-post must be given together",
                    ))
                }
            };
            let plan = make_block_plan(panel.t0(), panel.t1(), overrides)
                .map_err(|e| AppError::usage(e.to_string()))?;
            Some(
                bootstrap_qtt(&estimate, &plan, config.boot_b, config.seed)
                    .map_err(|e| AppError::run(e.to_string()))?,
            )
        } else {
            None
        };
        write_json(
            &config.out.join(format!("estimate_tau_{tau:.3}.json")),
            &json!({ "estimate": &estimate, "bootstrap": &boot }),
        )?;
        per_tau.push((estimate, boot));
    }

    write_qtt_curve(&config.out.join("qtt_curve.csv"), &per_tau)?;
    write_pretrend(&config.out.join("pretrend.csv"), &panel, &per_tau)?;

    let manifest = json!({
        "command": "estimate",
        "config": config,
        "version": env!("CARGO_PKG_VERSION"),
        "runtime_secs": started.elapsed().as_secs_f64(),
    });
    write_json(&config.out.join("manifest.json"), &manifest)?;
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), AppError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| AppError::run(format!("serialize: {e}")))?;
    std::fs::write(path, text)
        .map_err(|e| AppError::run(format!("write {}: {e}", path.display())))
}

/// Effect-curve series: one row per quantile level.
fn write_qtt_curve(
    path: &Path,
    per_tau: &[(QttEstimate, Option<BootstrapResult>)],
) -> Result<(), AppError> {
    let mut writer =
        csv::Writer::from_path(path).map_err(|e| AppError::run(format!("{}: {e}", path.display())))?;
    writer
        .write_record(["tau", "delta", "ci_lo", "ci_hi"])
        .map_err(|e| AppError::run(e.to_string()))?;
    for (estimate, boot) in per_tau {
        let (lo, hi) = boot
            .as_ref()
            .map_or((String::new(), String::new()), |b| {
                (b.ci[0].to_string(), b.ci[1].to_string())
            });
        writer
            .write_record([
                estimate.tau.to_string(),
                estimate.delta.to_string(),
                lo,
                hi,
            ])
            .map_err(|e| AppError::run(e.to_string()))?;
    }
    writer.flush().map_err(|e| AppError::run(e.to_string()))
}

/// Pre-trend diagnostics: observed treated series next to the predicted
/// counterfactual quantile path for every requested level.
fn write_pretrend(
    path: &Path,
    panel: &qtt_core::PanelData,
    per_tau: &[(QttEstimate, Option<BootstrapResult>)],
) -> Result<(), AppError> {
    let mut writer =
        csv::Writer::from_path(path).map_err(|e| AppError::run(format!("{}: {e}", path.display())))?;
    let mut header = vec!["t".to_string(), "y1".to_string()];
    for (estimate, _) in per_tau {
        header.push(format!("q_{:.3}", estimate.tau));
    }
    writer
        .write_record(&header)
        .map_err(|e| AppError::run(e.to_string()))?;
    let paths: Vec<_> = per_tau
        .iter()
        .map(|(e, _)| e.predict_quantile_path())
        .collect();
    let y1 = &per_tau[0].0.treated_series;
    for t in 0..panel.n_periods() {
        let mut row = vec![(t + 1).to_string(), y1[t].to_string()];
        for p in &paths {
            row.push(p[t].to_string());
        }
        writer
            .write_record(&row)
            .map_err(|e| AppError::run(e.to_string()))?;
    }
    writer.flush().map_err(|e| AppError::run(e.to_string()))
}
