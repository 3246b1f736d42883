//! Blockwise-bootstrap confidence intervals for the QTT.
//!
//! Pre- and post-treatment rows `(y_1t, f_t')` are resampled independently as
//! overlapping (moving) blocks, the treatment indicator is rebuilt as zeros
//! then ones, and the second-stage quantile regression is re-run per
//! replicate. Factors are never re-estimated inside replicates.

use crate::qr::{fit_qr, QrProblem};
use crate::qtt::QttEstimate;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

/// Replicate counts below this trip the low-B warning flag.
pub const LOW_B_THRESHOLD: usize = 100;
/// Runs error out when more than this fraction of replicates fail.
pub const MAX_DROPPED_FRACTION: f64 = 0.05;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("regime length must be >= 1, got T0 = {t0}, T1 = {t1}")]
    EmptyRegime { t0: usize, t1: usize },
    #[error("block size override {size} outside [1, {max}]")]
    BadOverride { size: usize, max: usize },
    #[error("bootstrap needs at least 2 replicates, got {0}")]
    TooFewReplicates(usize),
    #[error("{dropped} of {total} bootstrap replicates failed (> {max:.0}% allowed)")]
    TooManyDropped {
        dropped: usize,
        total: usize,
        max: f64,
    },
}

/// Moving-block sizes and draw counts for the two regimes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BlockPlan {
    /// Pre-treatment block size.
    pub b0: usize,
    /// Pre-treatment blocks drawn per replicate.
    pub l0: usize,
    /// Post-treatment block size.
    pub b1: usize,
    /// Post-treatment blocks drawn per replicate.
    pub l1: usize,
}

/// Build the default cube-root block plan, optionally overriding the block
/// sizes. Draw counts are always `floor(T_d / B_d)`, so the resampled regime
/// has length `L_d * B_d <= T_d` (leftover observations are truncated).
pub fn make_block_plan(
    t0: usize,
    t1: usize,
    override_sizes: Option<(usize, usize)>,
) -> Result<BlockPlan, InferenceError> {
    if t0 == 0 || t1 == 0 {
        return Err(InferenceError::EmptyRegime { t0, t1 });
    }
    let (b0, b1) = match override_sizes {
        Some((b0, b1)) => {
            if b0 == 0 || b0 > t0 {
                return Err(InferenceError::BadOverride { size: b0, max: t0 });
            }
            if b1 == 0 || b1 > t1 {
                return Err(InferenceError::BadOverride { size: b1, max: t1 });
            }
            (b0, b1)
        }
        None => (
            (t0 as f64).powf(1.0 / 3.0).floor().max(1.0) as usize,
            (t1 as f64).powf(1.0 / 3.0).floor().max(1.0) as usize,
        ),
    };
    Ok(BlockPlan {
        b0,
        l0: t0 / b0,
        b1,
        l1: t1 / b1,
    })
}

/// Draw `draws` overlapping blocks of `block` consecutive indices from
/// `0..len`, uniformly over the `len - block + 1` possible starts, and return
/// the concatenated index sequence (length `draws * block`).
pub fn draw_block_indices(
    len: usize,
    block: usize,
    draws: usize,
    rng: &mut impl Rng,
) -> Vec<usize> {
    let starts = len - block + 1;
    let mut idx = Vec::with_capacity(draws * block);
    for _ in 0..draws {
        let start = rng.gen_range(0..starts);
        idx.extend(start..start + block);
    }
    idx
}

/// Resample rows of a `(y_1t, f_t')` series by moving blocks.
pub fn draw_block_sample(
    response: &DVector<f64>,
    factors: &DMatrix<f64>,
    block: usize,
    draws: usize,
    rng: &mut impl Rng,
) -> (DVector<f64>, DMatrix<f64>) {
    let idx = draw_block_indices(response.len(), block, draws, rng);
    let y = DVector::from_iterator(idx.len(), idx.iter().map(|&i| response[i]));
    let f = DMatrix::from_fn(idx.len(), factors.ncols(), |row, col| {
        factors[(idx[row], col)]
    });
    (y, f)
}

/// Bootstrap distribution of delta-hat and the normal-interval CI.
#[derive(Debug, Clone, serde::Serialize)]
pub struct BootstrapResult {
    pub tau: f64,
    pub delta_hat: f64,
    /// Bootstrap sample standard deviation of the replicates.
    pub sd: f64,
    /// Normal interval `delta_hat +/- 1.96 sd` (the canonical interval).
    pub ci: [f64; 2],
    /// Percentile interval; reported for reference but non-canonical.
    pub percentile_ci: [f64; 2],
    /// Requested replicate count.
    #[serde(rename = "B")]
    pub b: usize,
    /// Replicates dropped because the second-stage solver failed.
    pub dropped: usize,
    pub seed: u64,
    pub block_plan: BlockPlan,
    /// True when fewer than [`LOW_B_THRESHOLD`] replicates were requested.
    pub low_b_warning: bool,
    /// Successful replicate values, in replicate order.
    #[serde(skip)]
    pub replicates: Vec<f64>,
}

/// One bootstrap replicate: resample each regime, rebuild the indicator as
/// zeros-then-ones, and re-run the second stage. Returns `None` on solver
/// failure.
fn one_replicate(
    estimate: &QttEstimate,
    plan: &BlockPlan,
    seed: u64,
    replicate: u64,
) -> Option<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate + 1);

    let t0 = estimate.treatment_start - 1;
    let t = estimate.factors.nrows();
    let r = estimate.factors.ncols();
    let y_pre = estimate.treated_series.rows(0, t0).into_owned();
    let f_pre = estimate.factors.rows(0, t0).into_owned();
    let y_post = estimate.treated_series.rows(t0, t - t0).into_owned();
    let f_post = estimate.factors.rows(t0, t - t0).into_owned();

    let (y0, f0) = draw_block_sample(&y_pre, &f_pre, plan.b0, plan.l0, &mut rng);
    let (y1, f1) = draw_block_sample(&y_post, &f_post, plan.b1, plan.l1, &mut rng);

    let n0 = y0.len();
    let n1 = y1.len();
    let mut design = DMatrix::<f64>::zeros(n0 + n1, r + 1);
    let mut response = DVector::<f64>::zeros(n0 + n1);
    design.rows_mut(0, n0).columns_mut(0, r).copy_from(&f0);
    design.rows_mut(n0, n1).columns_mut(0, r).copy_from(&f1);
    for row in n0..n0 + n1 {
        design[(row, r)] = 1.0;
    }
    response.rows_mut(0, n0).copy_from(&y0);
    response.rows_mut(n0, n1).copy_from(&y1);

    let problem = QrProblem::new(&design, &response, estimate.tau);
    fit_qr(&problem).ok().map(|beta| beta[r])
}

/// Blockwise bootstrap of the QTT. Replicate `i` draws from an independent
/// RNG stream of `seed`, so results are reproducible regardless of thread
/// scheduling.
pub fn bootstrap_qtt(
    estimate: &QttEstimate,
    plan: &BlockPlan,
    b: usize,
    seed: u64,
) -> Result<BootstrapResult, InferenceError> {
    if b < 2 {
        return Err(InferenceError::TooFewReplicates(b));
    }
    let raw: Vec<Option<f64>> = (0..b as u64)
        .into_par_iter()
        .map(|i| one_replicate(estimate, plan, seed, i))
        .collect();
    let replicates: Vec<f64> = raw.iter().filter_map(|v| *v).collect();
    let dropped = b - replicates.len();
    if (dropped as f64) > MAX_DROPPED_FRACTION * b as f64 {
        return Err(InferenceError::TooManyDropped {
            dropped,
            total: b,
            max: MAX_DROPPED_FRACTION * 100.0,
        });
    }

    let m = replicates.len() as f64;
    let mean = replicates.iter().sum::<f64>() / m;
    let sd = (replicates.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
    let half = 1.96 * sd;

    let mut sorted = replicates.clone();
    sorted.sort_by(|a, c| a.partial_cmp(c).unwrap());
    let pct = |q: f64| {
        let pos = q * (sorted.len() as f64 - 1.0);
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        sorted[lo] * (1.0 - frac) + sorted[hi] * frac
    };

    Ok(BootstrapResult {
        tau: estimate.tau,
        delta_hat: estimate.delta,
        sd,
        ci: [estimate.delta - half, estimate.delta + half],
        percentile_ci: [pct(0.025), pct(0.975)],
        b,
        dropped,
        seed,
        block_plan: *plan,
        low_b_warning: b < LOW_B_THRESHOLD,
        replicates,
    })
}
