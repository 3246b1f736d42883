//! First-stage quantile factor estimation on the control panel.
//!
//! Estimates quantile-dependent factors and loadings by iterated quantile
//! regression (plain or kernel-smoothed), normalizes the fit to a unique
//! rotation, and selects the number of factors by rank minimization.

use crate::qr::{
    check_loss, fit_qr, fit_sqr_from, qr_objective, smoothed_loss, QrError, QrProblem,
    SmoothingSpec,
};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QfmError {
    #[error("rank must satisfy 1 <= r <= min(N, T) = {max}, got {rank}")]
    InvalidRank { rank: usize, max: usize },
    #[error("probe rank must satisfy r < min(N, T) = {max}, got {rank}")]
    InvalidProbeRank { rank: usize, max: usize },
    #[error("panel must have at least 2 rows and 2 columns, got {rows} x {cols}")]
    TooSmall { rows: usize, cols: usize },
    #[error("factor matrix became numerically rank deficient during iteration")]
    DegenerateFactors,
    #[error("quantile regression subproblem failed: {0}")]
    Qr(#[from] QrError),
    #[error("io error writing fit trace: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error writing fit trace: {0}")]
    Csv(#[from] csv::Error),
}

/// Tuning knobs for the iterated factor fit.
#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Independent random restarts; the lowest-objective fit wins.
    pub restarts: usize,
    /// Cap on full update sweeps per restart.
    pub max_iter: usize,
    /// Relative objective-change convergence threshold.
    pub tol_obj: f64,
    /// Seed for the restart initializations.
    pub seed: u64,
    /// Kernel smoothing for the subproblems; `None` gives plain quantile
    /// regression.
    pub smoothing: Option<SmoothingSpec>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            restarts: 3,
            max_iter: 100,
            tol_obj: 1e-6,
            seed: 0,
            smoothing: None,
        }
    }
}

/// One objective evaluation in the iteration history.
#[derive(Debug, Clone, serde::Serialize)]
pub struct TraceRow {
    pub restart: usize,
    pub iteration: usize,
    pub objective: f64,
}

/// A normalized first-stage fit at one quantile level.
#[derive(Debug, Clone)]
pub struct QfmFit {
    /// Estimated factors, T x r, with F'F/T = I.
    pub factors: DMatrix<f64>,
    /// Estimated loadings, N x r, with L'L/N diagonal and non-increasing.
    pub loadings: DMatrix<f64>,
    pub tau: f64,
    /// Final panel-average check (or smoothed) loss.
    pub objective: f64,
    /// Sweeps used by the winning restart.
    pub iterations: usize,
    /// Whether the winning restart met the objective-change tolerance.
    pub converged: bool,
    /// Objective after every sweep of every restart.
    pub trace: Vec<TraceRow>,
}

impl QfmFit {
    pub fn rank(&self) -> usize {
        self.factors.ncols()
    }

    /// Fitted common component L F', N x T.
    pub fn common_component(&self) -> DMatrix<f64> {
        &self.loadings * self.factors.transpose()
    }

    /// Column norms of the loadings, `diag(L'L / N)`, non-increasing.
    pub fn loading_scales(&self) -> Vec<f64> {
        let n = self.loadings.nrows() as f64;
        (0..self.loadings.ncols())
            .map(|j| self.loadings.column(j).norm_squared() / n)
            .collect()
    }

    /// Write the per-sweep objective history as CSV.
    pub fn write_trace_csv(&self, path: &std::path::Path) -> Result<(), QfmError> {
        let mut writer = csv::Writer::from_path(path)?;
        for row in &self.trace {
            writer.serialize(row)?;
        }
        writer.flush()?;
        Ok(())
    }
}

/// Outcome of the rank-minimization selector.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RankSelection {
    pub selected: usize,
    pub probe_rank: usize,
    /// `diag(L'L / N)` of the probe fit, non-increasing.
    pub scales: Vec<f64>,
    pub threshold: f64,
}

/// Rotate an arbitrary factor/loading pair into the unique normalization:
/// `F'F/T = I`, `L'L/N` diagonal with non-increasing diagonal, and each
/// loading column summing to a nonnegative value (ties broken by making the
/// first nonzero entry positive). The common component `L F'` is preserved
/// exactly.
pub fn normalize(
    factors: &DMatrix<f64>,
    loadings: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>), QfmError> {
    let t = factors.nrows() as f64;
    let gram = factors.transpose() * factors / t;
    let chol = gram.cholesky().ok_or(QfmError::DegenerateFactors)?;
    let l = chol.l();
    // F1 = F L^{-T} gives F1'F1/T = I; loadings co-transform to preserve L F'.
    let l_inv_t = l
        .transpose()
        .try_inverse()
        .ok_or(QfmError::DegenerateFactors)?;
    let f1 = factors * l_inv_t;
    let lam1 = loadings * l;

    let n = loadings.nrows() as f64;
    let b = lam1.transpose() * &lam1 / n;
    let r = b.nrows();
    let eig = b.clone().symmetric_eigen();
    // Sort eigenpairs by non-increasing eigenvalue, keyed on the Rayleigh
    // quotient of each eigenvector column (the returned eigenvalue order is
    // not guaranteed to match the eigenvector columns).
    let quotient: Vec<f64> = (0..r)
        .map(|j| {
            let v = eig.eigenvectors.column(j);
            (&b * v).dot(&v)
        })
        .collect();
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &c| quotient[c].partial_cmp(&quotient[a]).unwrap());
    let mut q = DMatrix::<f64>::zeros(r, r);
    for (dst, &src) in order.iter().enumerate() {
        q.column_mut(dst).copy_from(&eig.eigenvectors.column(src));
    }
    let mut f2 = f1 * &q;
    let mut lam2 = lam1 * &q;

    for j in 0..r {
        let col_sum: f64 = lam2.column(j).sum();
        let flip = if col_sum < 0.0 {
            true
        } else if col_sum > 0.0 {
            false
        } else {
            lam2.column(j)
                .iter()
                .find(|v| **v != 0.0)
                .is_some_and(|v| *v < 0.0)
        };
        if flip {
            lam2.column_mut(j).neg_mut();
            f2.column_mut(j).neg_mut();
        }
    }
    Ok((f2, lam2))
}

/// Panel-average loss of a candidate factor/loading pair.
fn panel_objective(
    y: &DMatrix<f64>,
    factors: &DMatrix<f64>,
    loadings: &DMatrix<f64>,
    tau: f64,
    smoothing: Option<&SmoothingSpec>,
) -> f64 {
    let (n, t) = y.shape();
    let fitted = loadings * factors.transpose();
    let mut total = 0.0;
    for i in 0..n {
        for s in 0..t {
            let u = y[(i, s)] - fitted[(i, s)];
            total += match smoothing {
                None => check_loss(u, tau),
                Some(sm) => smoothed_loss(u, tau, sm.bandwidth),
            };
        }
    }
    total / (n as f64 * t as f64)
}

/// Draw a T x r start whose columns are orthonormal scaled by sqrt(T), so the
/// initial factors already satisfy the normalization scale.
fn random_start(t: usize, rank: usize, rng: &mut impl Rng) -> Result<DMatrix<f64>, QfmError> {
    let raw = DMatrix::from_fn(t, rank, |_, _| {
        rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng)
    });
    let qr = raw.qr();
    let q = qr.q();
    if q.ncols() < rank {
        return Err(QfmError::DegenerateFactors);
    }
    Ok(q.columns(0, rank).into_owned() * (t as f64).sqrt())
}

fn solve_row(
    design: &DMatrix<f64>,
    response: DVector<f64>,
    tau: f64,
    smoothing: Option<&SmoothingSpec>,
    warm: Option<DVector<f64>>,
) -> Result<DVector<f64>, QrError> {
    let problem = QrProblem::new(design, &response, tau);
    match smoothing {
        None => fit_qr(&problem),
        Some(sm) => match warm {
            Some(start) => fit_sqr_from(&problem, sm, start),
            None => crate::qr::fit_sqr(&problem, sm),
        },
    }
}

/// Iterated quantile factor fit (plain check loss). Alternates per-unit
/// loading fits given the factors with per-period factor fits given the
/// loadings until the panel objective stabilizes, over independent restarts.
pub fn fit_iqr(
    y: &DMatrix<f64>,
    tau: f64,
    rank: usize,
    options: &FitOptions,
) -> Result<QfmFit, QfmError> {
    let mut opts = options.clone();
    opts.smoothing = None;
    fit_factors(y, tau, rank, &opts)
}

/// Iterated *smoothed* quantile factor fit: the same alternation with the
/// kernel-smoothed loss and Newton subproblem solves, warm-started across
/// sweeps.
pub fn fit_isqr(
    y: &DMatrix<f64>,
    tau: f64,
    rank: usize,
    smoothing: SmoothingSpec,
    options: &FitOptions,
) -> Result<QfmFit, QfmError> {
    let mut opts = options.clone();
    opts.smoothing = Some(smoothing);
    fit_factors(y, tau, rank, &opts)
}

fn fit_factors(
    y: &DMatrix<f64>,
    tau: f64,
    rank: usize,
    options: &FitOptions,
) -> Result<QfmFit, QfmError> {
    let (n, t) = y.shape();
    if n < 2 || t < 2 {
        return Err(QfmError::TooSmall { rows: n, cols: t });
    }
    let max_rank = n.min(t);
    if rank == 0 || rank > max_rank {
        return Err(QfmError::InvalidRank {
            rank,
            max: max_rank,
        });
    }

    let mut best: Option<QfmFit> = None;
    let mut trace = Vec::new();
    for restart in 0..options.restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        rng.set_stream(restart as u64 + 1);
        let start = random_start(t, rank, &mut rng)?;
        let candidate = run_restart(y, tau, rank, start, options, restart, &mut trace)?;
        let better = best
            .as_ref()
            .is_none_or(|b| candidate.objective < b.objective);
        if better {
            best = Some(candidate);
        }
    }
    let mut fit = best.expect("at least one restart runs");
    fit.trace = trace;
    Ok(fit)
}

fn run_restart(
    y: &DMatrix<f64>,
    tau: f64,
    rank: usize,
    start: DMatrix<f64>,
    options: &FitOptions,
    restart: usize,
    trace: &mut Vec<TraceRow>,
) -> Result<QfmFit, QfmError> {
    let (n, t) = y.shape();
    let smoothing = options.smoothing.as_ref();
    let mut factors = start;
    let mut loadings = DMatrix::<f64>::zeros(n, rank);
    let mut have_warm = false;
    let mut prev_obj = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;

    for sweep in 0..options.max_iter {
        iterations = sweep + 1;
        // Half-step 1: per-unit loadings given the factors.
        let warm_loadings = have_warm.then(|| loadings.clone());
        let rows: Result<Vec<DVector<f64>>, QrError> = (0..n)
            .into_par_iter()
            .map(|i| {
                let warm = warm_loadings
                    .as_ref()
                    .map(|l| l.row(i).transpose());
                solve_row(&factors, y.row(i).transpose(), tau, smoothing, warm)
            })
            .collect();
        let rows = rows?;
        for (i, lam) in rows.iter().enumerate() {
            loadings.row_mut(i).copy_from(&lam.transpose());
        }

        // Half-step 2: per-period factors given the loadings.
        let warm_factors = have_warm.then(|| factors.clone());
        let cols: Result<Vec<DVector<f64>>, QrError> = (0..t)
            .into_par_iter()
            .map(|s| {
                let warm = warm_factors.as_ref().map(|f| f.row(s).transpose());
                solve_row(&loadings, y.column(s).into_owned(), tau, smoothing, warm)
            })
            .collect();
        let cols = cols?;
        for (s, f) in cols.iter().enumerate() {
            factors.row_mut(s).copy_from(&f.transpose());
        }
        have_warm = true;

        let obj = panel_objective(y, &factors, &loadings, tau, smoothing);
        trace.push(TraceRow {
            restart,
            iteration: iterations,
            objective: obj,
        });
        if prev_obj.is_finite()
            && (prev_obj - obj).abs() <= options.tol_obj * prev_obj.abs().max(1.0)
        {
            converged = true;
            break;
        }
        prev_obj = obj;
    }

    let (factors, loadings) = normalize(&factors, &loadings)?;
    let objective = panel_objective(y, &factors, &loadings, tau, smoothing);
    Ok(QfmFit {
        factors,
        loadings,
        tau,
        objective,
        iterations,
        converged,
        trace: Vec::new(),
    })
}

/// Rank minimization: fit at a deliberately generous probe rank, read off the
/// normalized loading scales, and keep the columns whose scale survives the
/// shrinking threshold `scale_1 * min(sqrt(N), sqrt(T))^(-2/3)`. Always uses
/// the plain (non-smoothed) iterated fit.
pub fn select_rank(
    y: &DMatrix<f64>,
    tau: f64,
    probe_rank: usize,
    options: &FitOptions,
) -> Result<RankSelection, QfmError> {
    let (n, t) = y.shape();
    let max = n.min(t);
    if probe_rank == 0 || probe_rank >= max {
        return Err(QfmError::InvalidProbeRank {
            rank: probe_rank,
            max,
        });
    }
    let fit = fit_iqr(y, tau, probe_rank, options)?;
    let scales = fit.loading_scales();
    let l_nt = (n as f64).sqrt().min((t as f64).sqrt());
    let threshold = scales[0] * l_nt.powf(-2.0 / 3.0);
    let selected = scales.iter().filter(|s| **s >= threshold).count();
    Ok(RankSelection {
        selected,
        probe_rank,
        scales,
        threshold,
    })
}

/// First-stage objective of a fit against an arbitrary panel; exposed for
/// diagnostics and tests.
pub fn fit_objective(y: &DMatrix<f64>, fit: &QfmFit) -> f64 {
    panel_objective(y, &fit.factors, &fit.loadings, fit.tau, None)
}

/// Residual of one series against a fitted factor path, `y - F beta`.
pub fn series_objective(
    factors: &DMatrix<f64>,
    response: &DVector<f64>,
    beta: &DVector<f64>,
    tau: f64,
) -> f64 {
    let problem = QrProblem::new(factors, response, tau);
    qr_objective(&problem, beta)
}
