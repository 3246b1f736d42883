//! Second-stage quantile regression of the treated unit on the estimated
//! factors plus a treatment indicator, yielding the quantile treatment effect
//! on the treated (QTT) at one quantile level.

use crate::panel::PanelData;
use crate::qfm::{fit_iqr, fit_isqr, select_rank, FitOptions, QfmError, QfmFit};
use crate::qr::{fit_qr, QrError, QrProblem, SmoothingSpec};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QttError {
    #[error("first-stage factor fit failed: {0}")]
    Qfm(#[from] QfmError),
    #[error("second-stage quantile regression failed: {0}")]
    Qr(#[from] QrError),
    #[error("panel has {0} treated units; use the multi-unit entry point")]
    MultipleTreated(usize),
    #[error("second-stage design is collinear (smallest singular value {0:e})")]
    CollinearDesign(f64),
    #[error("factor-interacted design needs T1 >= r + 1 = {need}, got T1 = {t1}")]
    ShortPostPeriod { t1: usize, need: usize },
    #[error("treated unit index {0} is not in the panel's treated set")]
    UnknownTreatedUnit(usize),
}

/// Which first-stage estimator produced the factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage1Method {
    Iqr,
    Isqr,
    /// Mean-model PCA factors (the synthetic-control comparator).
    Pca,
    /// True simulated factors (infeasible benchmark).
    Oracle,
}

/// First-stage diagnostics carried into the output.
#[derive(Debug, Clone, serde::Serialize)]
pub struct Stage1Summary {
    pub method: Stage1Method,
    pub rank: usize,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Controls for the full two-stage pipeline.
#[derive(Debug, Clone)]
pub struct QttOptions {
    /// Number of factors; `None` selects it by rank minimization.
    pub rank: Option<usize>,
    /// Probe rank for rank selection (clamped below min(N, T)).
    pub probe_rank: usize,
    /// Kernel smoothing for the first stage; the second stage always uses the
    /// plain check loss.
    pub smoothing: Option<SmoothingSpec>,
    pub fit: FitOptions,
}

impl Default for QttOptions {
    fn default() -> Self {
        Self {
            rank: None,
            probe_rank: 8,
            smoothing: None,
            fit: FitOptions::default(),
        }
    }
}

/// A point estimate of the QTT for one treated unit at one quantile level.
#[derive(Debug, Clone, serde::Serialize)]
pub struct QttEstimate {
    /// Which estimator produced this: "NQTT", "SQTT", "GSCM", or "Oracle".
    pub estimator: String,
    pub tau: f64,
    /// The treatment effect delta-hat(tau).
    pub delta: f64,
    /// Treated unit's loading on the estimated factors.
    pub lambda1: Vec<f64>,
    /// Number of factors used.
    pub r: usize,
    pub stage1: Stage1Summary,
    /// Estimated factor path, kept for prediction and bootstrap but not
    /// serialized.
    #[serde(skip)]
    pub factors: DMatrix<f64>,
    /// Treated unit's outcome series, kept for the bootstrap.
    #[serde(skip)]
    pub treated_series: DVector<f64>,
    /// First treated period, 1-based.
    #[serde(skip)]
    pub treatment_start: usize,
}

impl QttEstimate {
    /// Counterfactual quantile path `lambda1' f_t(tau)` over all T periods.
    pub fn predict_quantile_path(&self) -> DVector<f64> {
        let lambda = DVector::from_column_slice(&self.lambda1);
        &self.factors * lambda
    }
}

/// Treatment-path shapes for the time-varying extension; each is linear in
/// its parameters, with `s = t - T0` the post-period index starting at 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GForm {
    /// g(s) = z0.
    Constant,
    /// g(s) = z0 + z1 / s.
    Decay,
    /// g(s) = z0 + z1 s.
    Linear,
    /// g(s) = z0 + z1 s + z2 s^2.
    Quadratic,
}

impl GForm {
    fn basis(&self, s: f64) -> Vec<f64> {
        match self {
            GForm::Constant => vec![1.0],
            GForm::Decay => vec![1.0, 1.0 / s],
            GForm::Linear => vec![1.0, s],
            GForm::Quadratic => vec![1.0, s, s * s],
        }
    }

    fn dim(&self) -> usize {
        match self {
            GForm::Constant => 1,
            GForm::Decay | GForm::Linear => 2,
            GForm::Quadratic => 3,
        }
    }
}

/// QTT with a parametric time-varying treatment path.
#[derive(Debug, Clone, serde::Serialize)]
pub struct TimeVaryingQtt {
    pub tau: f64,
    pub form: GForm,
    /// Parameters of the treatment path, in basis order.
    pub zeta: Vec<f64>,
    /// Implied effect per post-treatment period.
    pub delta_path: Vec<f64>,
    pub lambda1: Vec<f64>,
    pub r: usize,
    pub stage1: Stage1Summary,
}

/// QTT with factor-interacted treatment terms.
#[derive(Debug, Clone, serde::Serialize)]
pub struct FactorInteractedQtt {
    pub tau: f64,
    /// Level shift coefficient.
    pub delta: f64,
    /// Post-treatment shifts of the factor loadings.
    pub gamma: Vec<f64>,
    pub lambda1: Vec<f64>,
    pub r: usize,
    pub stage1: Stage1Summary,
}

/// Run the first stage on the control block (plus covariate pseudo-rows) and
/// return the normalized fit together with a serializable summary.
pub fn first_stage(
    panel: &PanelData,
    tau: f64,
    options: &QttOptions,
) -> Result<(QfmFit, Stage1Summary), QttError> {
    let block = panel.first_stage_block();
    let (n, t) = block.shape();
    let rank = match options.rank {
        Some(r) => r,
        None => {
            let probe = options.probe_rank.min(n.min(t) - 1).max(1);
            select_rank(&block, tau, probe, &options.fit)?.selected
        }
    };
    let fit = match &options.smoothing {
        None => fit_iqr(&block, tau, rank, &options.fit)?,
        Some(sm) => fit_isqr(&block, tau, rank, *sm, &options.fit)?,
    };
    let summary = Stage1Summary {
        method: if options.smoothing.is_some() {
            Stage1Method::Isqr
        } else {
            Stage1Method::Iqr
        },
        rank,
        objective: fit.objective,
        iterations: fit.iterations,
        converged: fit.converged,
    };
    Ok((fit, summary))
}

/// Reject designs whose column-normalized singular spectrum collapses.
fn check_collinearity(design: &DMatrix<f64>) -> Result<(), QttError> {
    let mut standardized = design.clone();
    for mut col in standardized.column_iter_mut() {
        let norm = col.norm();
        if norm > 0.0 {
            col /= norm;
        }
    }
    let sv = standardized.singular_values();
    let min_sv = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min_sv < 1e-8 {
        return Err(QttError::CollinearDesign(min_sv));
    }
    Ok(())
}

/// Second-stage fit of one treated series on `[F | d]`; always the plain
/// (non-smoothed) quantile regression, regardless of the first stage.
pub(crate) fn second_stage_level(
    factors: &DMatrix<f64>,
    y1: &DVector<f64>,
    treatment_start: usize,
    tau: f64,
) -> Result<DVector<f64>, QttError> {
    let t = factors.nrows();
    let r = factors.ncols();
    let mut design = DMatrix::<f64>::zeros(t, r + 1);
    design.columns_mut(0, r).copy_from(factors);
    for s in 0..t {
        design[(s, r)] = f64::from(s + 1 >= treatment_start);
    }
    check_collinearity(&design)?;
    let problem = QrProblem::new(&design, y1, tau);
    Ok(fit_qr(&problem)?)
}

/// Two-stage QTT estimate for a panel with a single treated unit.
pub fn estimate_qtt(
    panel: &PanelData,
    tau: f64,
    options: &QttOptions,
) -> Result<QttEstimate, QttError> {
    if panel.treated_unit_ids().len() != 1 {
        return Err(QttError::MultipleTreated(panel.treated_unit_ids().len()));
    }
    let mut estimates = estimate_qtt_multi(panel, tau, options)?;
    Ok(estimates.remove(0))
}

/// Two-stage QTT estimates for every treated unit, sharing one first-stage
/// factor fit.
pub fn estimate_qtt_multi(
    panel: &PanelData,
    tau: f64,
    options: &QttOptions,
) -> Result<Vec<QttEstimate>, QttError> {
    let (fit, summary) = first_stage(panel, tau, options)?;
    let (_, treated) = panel.split_control_treated();
    let start = panel.treatment_start();
    let mut out = Vec::with_capacity(treated.nrows());
    for row in 0..treated.nrows() {
        let y1 = treated.row(row).transpose();
        let beta = second_stage_level(&fit.factors, &y1, start, tau)?;
        let r = fit.rank();
        out.push(QttEstimate {
            estimator: match summary.method {
                Stage1Method::Isqr => "SQTT".to_string(),
                _ => "NQTT".to_string(),
            },
            tau,
            delta: beta[r],
            lambda1: beta.rows(0, r).iter().cloned().collect(),
            r,
            stage1: summary.clone(),
            factors: fit.factors.clone(),
            treated_series: y1,
            treatment_start: start,
        });
    }
    Ok(out)
}

/// Time-varying extension: replace the level shift with a parametric path
/// `g(t - T0; zeta)` linear in `zeta`.
pub fn estimate_qtt_time_varying(
    panel: &PanelData,
    tau: f64,
    form: GForm,
    options: &QttOptions,
) -> Result<TimeVaryingQtt, QttError> {
    if panel.treated_unit_ids().len() != 1 {
        return Err(QttError::MultipleTreated(panel.treated_unit_ids().len()));
    }
    let (fit, summary) = first_stage(panel, tau, options)?;
    let (_, treated) = panel.split_control_treated();
    let y1 = treated.row(0).transpose();
    let start = panel.treatment_start();
    let t = panel.n_periods();
    let r = fit.rank();
    let k = form.dim();

    let mut design = DMatrix::<f64>::zeros(t, r + k);
    design.columns_mut(0, r).copy_from(&fit.factors);
    for period in start..=t {
        let s = (period - start + 1) as f64;
        for (j, b) in form.basis(s).into_iter().enumerate() {
            design[(period - 1, r + j)] = b;
        }
    }
    check_collinearity(&design)?;
    let problem = QrProblem::new(&design, &y1, tau);
    let beta = fit_qr(&problem)?;
    let zeta: Vec<f64> = beta.rows(r, k).iter().cloned().collect();
    let delta_path = (start..=t)
        .map(|period| {
            let s = (period - start + 1) as f64;
            form.basis(s)
                .iter()
                .zip(&zeta)
                .map(|(b, z)| b * z)
                .sum()
        })
        .collect();
    Ok(TimeVaryingQtt {
        tau,
        form,
        zeta,
        delta_path,
        lambda1: beta.rows(0, r).iter().cloned().collect(),
        r,
        stage1: summary,
    })
}

/// Factor-interacted extension: the design is `[F | F d | d]`, so treatment
/// may shift the loadings as well as the level. Requires T1 >= r + 1 post
/// periods to identify the interactions.
pub fn estimate_qtt_factor_interacted(
    panel: &PanelData,
    tau: f64,
    options: &QttOptions,
) -> Result<FactorInteractedQtt, QttError> {
    if panel.treated_unit_ids().len() != 1 {
        return Err(QttError::MultipleTreated(panel.treated_unit_ids().len()));
    }
    let (fit, summary) = first_stage(panel, tau, options)?;
    let r = fit.rank();
    let t1 = panel.t1();
    if t1 < r + 1 {
        return Err(QttError::ShortPostPeriod { t1, need: r + 1 });
    }
    let (_, treated) = panel.split_control_treated();
    let y1 = treated.row(0).transpose();
    let start = panel.treatment_start();
    let t = panel.n_periods();

    let mut design = DMatrix::<f64>::zeros(t, 2 * r + 1);
    design.columns_mut(0, r).copy_from(&fit.factors);
    for period in start..=t {
        for j in 0..r {
            design[(period - 1, r + j)] = fit.factors[(period - 1, j)];
        }
        design[(period - 1, 2 * r)] = 1.0;
    }
    check_collinearity(&design)?;
    let problem = QrProblem::new(&design, &y1, tau);
    let beta = fit_qr(&problem)?;
    Ok(FactorInteractedQtt {
        tau,
        delta: beta[2 * r],
        gamma: beta.rows(r, r).iter().cloned().collect(),
        lambda1: beta.rows(0, r).iter().cloned().collect(),
        r,
        stage1: summary,
    })
}
