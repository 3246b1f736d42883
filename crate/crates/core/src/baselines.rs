//! Comparator estimators: the PCA-based generalized-synthetic-control
//! pipeline (GSCM) and the infeasible Oracle that uses the true simulated
//! factors.

use crate::panel::PanelData;
use crate::qtt::{second_stage_level, QttError, QttEstimate, Stage1Method, Stage1Summary};
use nalgebra::{DMatrix, DVector};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("PCA rank must satisfy 1 <= r < min(N, T) = {max}, got {rank}")]
    InvalidRank { rank: usize, max: usize },
    #[error("rank range [{lo}, {hi}] invalid for min(N, T) = {max}")]
    InvalidRankRange { lo: usize, hi: usize, max: usize },
    #[error("second stage failed: {0}")]
    Qtt(#[from] QttError),
    #[error("true factor matrix has {got} periods, panel has {t}")]
    FactorPeriodMismatch { got: usize, t: usize },
}

/// Mean-model principal-component factor fit of the control block.
#[derive(Debug, Clone)]
pub struct PcaFit {
    /// sqrt(T)-scaled leading eigenvectors of Y'Y, so F'F/T = I.
    pub factors: DMatrix<f64>,
    /// Least-squares loadings, `Y F / T`.
    pub loadings: DMatrix<f64>,
    pub r: usize,
    /// IC(r) over the candidate set used to pick `r` (empty when the rank was
    /// fixed by the caller).
    pub ic_values: BTreeMap<usize, f64>,
}

/// Eigenvalues of Y'Y in non-increasing order.
fn cross_product_eigen(controls: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let s = controls.transpose() * controls;
    let t = s.nrows();
    let eig = s.clone().symmetric_eigen();
    // Key the sort on the Rayleigh quotient of each eigenvector column; the
    // returned eigenvalue order is not guaranteed to match the columns.
    let quotient: Vec<f64> = (0..t)
        .map(|j| {
            let v = eig.eigenvectors.column(j);
            (&s * v).dot(&v)
        })
        .collect();
    let mut order: Vec<usize> = (0..t).collect();
    order.sort_by(|&a, &b| quotient[b].partial_cmp(&quotient[a]).unwrap());
    let values: Vec<f64> = order.iter().map(|&j| quotient[j]).collect();
    let mut vectors = DMatrix::<f64>::zeros(t, t);
    for (dst, &src) in order.iter().enumerate() {
        vectors.column_mut(dst).copy_from(&eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// Principal-component factors of the control block at a fixed rank.
pub fn pca_factors(controls: &DMatrix<f64>, r: usize) -> Result<PcaFit, BaselineError> {
    let (n, t) = controls.shape();
    let max = n.min(t);
    if r == 0 || r >= max {
        return Err(BaselineError::InvalidRank { rank: r, max });
    }
    let (_, vectors) = cross_product_eigen(controls);
    let mut factors = vectors.columns(0, r).into_owned() * (t as f64).sqrt();
    let mut loadings = controls * &factors / t as f64;
    // Same sign convention as the quantile normalization: loading column sums
    // nonnegative, ties broken by the first nonzero loading entry.
    for j in 0..r {
        let col_sum: f64 = loadings.column(j).sum();
        let flip = if col_sum < 0.0 {
            true
        } else if col_sum > 0.0 {
            false
        } else {
            loadings
                .column(j)
                .iter()
                .find(|v| **v != 0.0)
                .is_some_and(|v| *v < 0.0)
        };
        if flip {
            loadings.column_mut(j).neg_mut();
            factors.column_mut(j).neg_mut();
        }
    }
    Ok(PcaFit {
        factors,
        loadings,
        r,
        ic_values: BTreeMap::new(),
    })
}

/// Information criterion `IC(r) = ln(SSR/(NT)) + r ((N+T)/(NT)) ln(NT/(N+T))`
/// minimized over `r_min..=r_max`; ties go to the smaller rank. SSR is the
/// least-squares residual of the rank-r PCA fit, computed from the eigenvalue
/// tail of Y'Y.
pub fn select_rank_ic(
    controls: &DMatrix<f64>,
    r_min: usize,
    r_max: usize,
) -> Result<(usize, BTreeMap<usize, f64>), BaselineError> {
    let (n, t) = controls.shape();
    let max = n.min(t);
    if r_min == 0 || r_min > r_max || r_max >= max {
        return Err(BaselineError::InvalidRankRange {
            lo: r_min,
            hi: r_max,
            max,
        });
    }
    let (values, _) = cross_product_eigen(controls);
    let nt = (n * t) as f64;
    let penalty_unit = ((n + t) as f64 / nt) * (nt / (n + t) as f64).ln();
    let mut ic_values = BTreeMap::new();
    let mut best = (r_min, f64::INFINITY);
    // Floor the residual at roundoff scale so an exactly low-rank panel does
    // not let numerically-zero tail eigenvalues swamp the penalty.
    let ssr_floor = values.iter().sum::<f64>() * 1e-12 + f64::MIN_POSITIVE;
    for r in r_min..=r_max {
        let ssr: f64 = values.iter().skip(r).map(|v| v.max(0.0)).sum();
        let ic = (ssr.max(ssr_floor) / nt).ln() + r as f64 * penalty_unit;
        ic_values.insert(r, ic);
        if ic < best.1 {
            best = (r, ic);
        }
    }
    Ok((best.0, ic_values))
}

fn stage1_summary(method: Stage1Method, rank: usize) -> Stage1Summary {
    Stage1Summary {
        method,
        rank,
        objective: f64::NAN,
        iterations: 0,
        converged: true,
    }
}

fn second_stage_estimate(
    estimator: &str,
    method: Stage1Method,
    factors: &DMatrix<f64>,
    panel: &PanelData,
    tau: f64,
) -> Result<QttEstimate, BaselineError> {
    let (_, treated) = panel.split_control_treated();
    let y1: DVector<f64> = treated.row(0).transpose();
    let start = panel.treatment_start();
    let beta = second_stage_level(factors, &y1, start, tau)?;
    let r = factors.ncols();
    Ok(QttEstimate {
        estimator: estimator.to_string(),
        tau,
        delta: beta[r],
        lambda1: beta.rows(0, r).iter().cloned().collect(),
        r,
        stage1: stage1_summary(method, r),
        factors: factors.clone(),
        treated_series: y1,
        treatment_start: start,
    })
}

/// GSCM comparator over a grid of quantiles: pick the rank by the information
/// criterion, compute the PCA factors once (they do not depend on tau), and
/// run the second-stage quantile regression at every requested level.
pub fn gscm_qtt_grid(
    panel: &PanelData,
    taus: &[f64],
    r_min: usize,
    r_max: usize,
) -> Result<Vec<QttEstimate>, BaselineError> {
    let (controls, _) = panel.split_control_treated();
    let (r, ic_values) = select_rank_ic(&controls, r_min, r_max)?;
    let mut fit = pca_factors(&controls, r)?;
    fit.ic_values = ic_values;
    taus.iter()
        .map(|&tau| second_stage_estimate("GSCM", Stage1Method::Pca, &fit.factors, panel, tau))
        .collect()
}

/// GSCM comparator at a single quantile level.
pub fn gscm_qtt(
    panel: &PanelData,
    tau: f64,
    r_min: usize,
    r_max: usize,
) -> Result<QttEstimate, BaselineError> {
    Ok(gscm_qtt_grid(panel, &[tau], r_min, r_max)?.remove(0))
}

/// Infeasible oracle: second-stage quantile regression on the true simulated
/// factor paths.
pub fn oracle_qtt(
    panel: &PanelData,
    tau: f64,
    true_factors: &DMatrix<f64>,
) -> Result<QttEstimate, BaselineError> {
    if true_factors.nrows() != panel.n_periods() {
        return Err(BaselineError::FactorPeriodMismatch {
            got: true_factors.nrows(),
            t: panel.n_periods(),
        });
    }
    second_stage_estimate("Oracle", Stage1Method::Oracle, true_factors, panel, tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::Distribution;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = rand_distr::StandardNormal;
        DMatrix::from_fn(rows, cols, |_, _| normal.sample(&mut rng))
    }

    #[test]
    fn exact_rank_one_reconstruction() {
        let f = random_matrix(25, 1, 1);
        let lam = random_matrix(10, 1, 2);
        let y = &lam * f.transpose();
        let fit = pca_factors(&y, 1).unwrap();
        let err = (&fit.loadings * fit.factors.transpose() - &y).amax();
        assert!(err < 1e-8, "reconstruction error {err}");
    }

    #[test]
    fn pca_factors_orthonormal() {
        let y = random_matrix(15, 20, 3);
        let fit = pca_factors(&y, 3).unwrap();
        let gram = fit.factors.transpose() * &fit.factors / 20.0;
        assert_abs_diff_eq!(gram, DMatrix::identity(3, 3), epsilon = 1e-8);
    }

    #[test]
    fn pca_recovers_factor_subspace() {
        // Rank-2 signal plus small noise: fitted factors should span the
        // truth (canonical correlations near 1).
        let t = 120;
        let f_true = random_matrix(t, 2, 4);
        let lam = random_matrix(60, 2, 5);
        let y = &lam * f_true.transpose() + 0.05 * random_matrix(60, t, 6);
        let fit = pca_factors(&y, 2).unwrap();
        // Canonical correlations via SVD of Qf' Qg for orthonormal bases.
        let qf = f_true.clone().qr().q();
        let qg = fit.factors.clone().qr().q();
        let sv = (qf.transpose() * qg).singular_values();
        for s in sv.iter() {
            assert!(*s >= 0.95, "canonical correlation {s}");
        }
    }

    #[test]
    fn ic_selects_true_rank_and_edge_cases() {
        // Exact rank-1 noiseless with range {1..5} picks 1.
        let f = random_matrix(30, 1, 7);
        let lam = random_matrix(12, 1, 8);
        let y = &lam * f.transpose();
        let (r, _) = select_rank_ic(&y, 1, 5).unwrap();
        assert_eq!(r, 1);

        // Pure noise picks r_min: the penalty dominates.
        let noise = random_matrix(40, 60, 9);
        let (r, ic) = select_rank_ic(&noise, 2, 5).unwrap();
        assert_eq!(r, 2);
        assert!(ic.values().all(|v| v.is_finite()));

        // Penalty arithmetic is strictly increasing in r for fixed SSR.
        let (n, t) = (40.0, 60.0);
        let nt = n * t;
        let pen = |r: f64| r * ((n + t) / nt) * (nt / (n + t)).ln();
        assert!(pen(3.0) > pen(2.0) && pen(5.0) > pen(4.0));
    }

    #[test]
    fn rank_two_signal_selected_with_noise() {
        let t = 100;
        let f = random_matrix(t, 2, 10) * 2.0;
        let lam = random_matrix(50, 2, 11);
        let y = &lam * f.transpose() + 0.3 * random_matrix(50, t, 12);
        let (r, _) = select_rank_ic(&y, 1, 5).unwrap();
        assert_eq!(r, 2);
    }

    fn shifted_panel(seed: u64, delta: f64) -> (PanelData, DMatrix<f64>) {
        let n = 20;
        let t = 40;
        let start = 21;
        let f = random_matrix(t, 1, seed);
        let lam = random_matrix(n + 1, 1, seed + 1).add_scalar(2.0);
        let outcomes = DMatrix::from_fn(n + 1, t, |i, s| {
            let base = lam[(i, 0)] * f[(s, 0)];
            if i == 0 && s + 1 >= start {
                base + delta
            } else {
                base
            }
        });
        let labels = (0..=n).map(|i| format!("u{i}")).collect();
        (
            PanelData::new(outcomes, labels, vec![1], start).unwrap(),
            f,
        )
    }

    #[test]
    fn oracle_exact_recovery() {
        let (panel, f_true) = shifted_panel(13, 0.9);
        let est = oracle_qtt(&panel, 0.5, &f_true).unwrap();
        assert_abs_diff_eq!(est.delta, 0.9, epsilon = 1e-6);
        assert_eq!(est.estimator, "Oracle");
    }

    #[test]
    fn gscm_factors_identical_across_tau() {
        let (panel, _) = shifted_panel(17, 0.4);
        let grid = gscm_qtt_grid(&panel, &[0.25, 0.5, 0.75], 1, 3).unwrap();
        assert_eq!(grid.len(), 3);
        assert_eq!(grid[0].factors, grid[1].factors);
        assert_eq!(grid[1].factors, grid[2].factors);
        for est in &grid {
            assert_eq!(est.estimator, "GSCM");
            assert_abs_diff_eq!(est.delta, 0.4, epsilon = 1e-4);
        }
    }
}
