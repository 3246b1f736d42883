//! Scalar building blocks (check loss, score, smoothing kernel) and fitters
//! for standard and kernel-smoothed linear quantile regression.
//!
//! These are the workhorses invoked thousands of times per factor fit, so the
//! solvers are tuned for small column counts (p up to ~10) and moderate row
//! counts (hundreds).

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Stationarity tolerance for the exact quantile regression fit.
pub const TOL_STAT: f64 = 1e-6;
/// Gradient tolerance for the smoothed fit.
pub const TOL_GRAD: f64 = 1e-8;
/// Iteration cap per subproblem, shared by both fitters.
pub const MAX_ITER: usize = 200;

#[derive(Debug, Error)]
pub enum QrError {
    #[error("tau must lie in (0, 1), got {0}")]
    InvalidTau(f64),
    #[error("design has {rows} rows but {cols} columns; need rows >= cols >= 1")]
    BadShape { rows: usize, cols: usize },
    #[error("response length {response} does not match design rows {rows}")]
    DimensionMismatch { response: usize, rows: usize },
    #[error("weights length {weights} does not match design rows {rows}")]
    WeightMismatch { weights: usize, rows: usize },
    #[error("negative weight at row {0}")]
    NegativeWeight(usize),
    #[error("design is numerically rank deficient at column {column}")]
    RankDeficient { column: usize },
    #[error("interior point hit the iteration cap; final duality gap {gap:e}")]
    NoConvergence { gap: f64 },
    #[error("smoothed fit hit the iteration cap; final gradient norm {grad_norm:e}")]
    SmoothedNoConvergence { grad_norm: f64 },
    #[error("bandwidth must be positive, got {0}")]
    BadBandwidth(f64),
}

/// Check function `rho_tau(u) = u * (tau - 1(u <= 0))`.
#[inline]
pub fn check_loss(u: f64, tau: f64) -> f64 {
    if u <= 0.0 {
        u * (tau - 1.0)
    } else {
        u * tau
    }
}

/// Score `psi_tau(u) = tau - 1(u < 0)`. Note the strict inequality: `psi_tau(0) = tau`.
#[inline]
pub fn score_psi(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        tau - 1.0
    } else {
        tau
    }
}

const KC: f64 = 3465.0 / 8192.0;

/// Order-8 polynomial smoothing kernel supported on [-1, 1].
#[inline]
pub fn kernel_k(z: f64) -> f64 {
    if z.abs() >= 1.0 {
        return 0.0;
    }
    let z2 = z * z;
    KC * (7.0 + z2 * (-105.0 + z2 * (462.0 + z2 * (-858.0 + z2 * (715.0 - 221.0 * z2)))))
}

/// Derivative of [`kernel_k`].
#[inline]
pub fn kernel_k_deriv(z: f64) -> f64 {
    if z.abs() >= 1.0 {
        return 0.0;
    }
    let z2 = z * z;
    KC * z * (-210.0 + z2 * (1848.0 + z2 * (-5148.0 + z2 * (5720.0 - 2210.0 * z2))))
}

/// Antiderivative of the kernel polynomial, odd in z, with `P(1) = 1/2`.
#[inline]
fn kernel_antiderivative(z: f64) -> f64 {
    let z2 = z * z;
    KC * z
        * (7.0
            + z2 * (-35.0
                + z2 * (462.0 / 5.0
                    + z2 * (-858.0 / 7.0 + z2 * (715.0 / 9.0 - (221.0 / 11.0) * z2)))))
}

/// Survival-type kernel transform `K(z) = 1 - \int_{-1}^{z} k(s) ds`,
/// computed from the closed-form antiderivative.
#[inline]
pub fn kernel_big_k(z: f64) -> f64 {
    if z <= -1.0 {
        1.0
    } else if z >= 1.0 {
        0.0
    } else {
        0.5 - kernel_antiderivative(z)
    }
}

/// Bandwidth and kernel order for the smoothed quantile objective.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SmoothingSpec {
    pub bandwidth: f64,
    /// Order of the kernel's vanishing moments; the built-in kernel has order 8.
    pub kernel_order: u32,
}

impl SmoothingSpec {
    pub fn new(bandwidth: f64) -> Result<Self, QrError> {
        if bandwidth.is_nan() || bandwidth <= 0.0 || !bandwidth.is_finite() {
            return Err(QrError::BadBandwidth(bandwidth));
        }
        Ok(Self {
            bandwidth,
            kernel_order: 8,
        })
    }
}

/// One linear quantile regression subproblem.
#[derive(Debug, Clone, Copy)]
pub struct QrProblem<'a> {
    pub design: &'a DMatrix<f64>,
    pub response: &'a DVector<f64>,
    pub tau: f64,
    pub weights: Option<&'a DVector<f64>>,
}

impl<'a> QrProblem<'a> {
    pub fn new(design: &'a DMatrix<f64>, response: &'a DVector<f64>, tau: f64) -> Self {
        Self {
            design,
            response,
            tau,
            weights: None,
        }
    }

    pub fn with_weights(mut self, weights: &'a DVector<f64>) -> Self {
        self.weights = Some(weights);
        self
    }

    fn validate(&self) -> Result<(), QrError> {
        let (n, p) = self.design.shape();
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(QrError::InvalidTau(self.tau));
        }
        if p < 1 || n < p {
            return Err(QrError::BadShape { rows: n, cols: p });
        }
        if self.response.len() != n {
            return Err(QrError::DimensionMismatch {
                response: self.response.len(),
                rows: n,
            });
        }
        if let Some(w) = self.weights {
            if w.len() != n {
                return Err(QrError::WeightMismatch {
                    weights: w.len(),
                    rows: n,
                });
            }
            for (i, &wi) in w.iter().enumerate() {
                if wi < 0.0 || !wi.is_finite() {
                    return Err(QrError::NegativeWeight(i));
                }
            }
        }
        Ok(())
    }
}

/// Weighted check-function objective `sum_t w_t rho_tau(y_t - x_t' beta)`.
pub fn qr_objective(problem: &QrProblem, beta: &DVector<f64>) -> f64 {
    let resid = problem.response - problem.design * beta;
    resid
        .iter()
        .enumerate()
        .map(|(i, &u)| {
            let w = problem.weights.map_or(1.0, |w| w[i]);
            w * check_loss(u, problem.tau)
        })
        .sum()
}

/// Minimize the check-function objective by a primal-dual interior point
/// iteration on the standard LP reformulation.
///
/// Ties (intercept-only or degenerate designs where the minimizer set is an
/// interval) resolve to the lower endpoint, matching the left-continuous
/// empirical quantile.
pub fn fit_qr(problem: &QrProblem) -> Result<DVector<f64>, QrError> {
    problem.validate()?;
    let (n, p) = problem.design.shape();

    // Constant single-column design: a weighted empirical quantile with a
    // deterministic left tie-break, which the LP path cannot guarantee.
    if p == 1 {
        let col0 = problem.design[(0, 0)];
        if col0 != 0.0
            && (0..n).all(|i| (problem.design[(i, 0)] - col0).abs() <= 1e-12 * col0.abs())
        {
            return Ok(DVector::from_element(
                1,
                constant_column_quantile(problem, col0),
            ));
        }
    }

    // Fold weights into the rows; rho_tau is positively homogeneous.
    let (x, y) = match problem.weights {
        None => (problem.design.clone(), problem.response.clone()),
        Some(w) => {
            let mut x = problem.design.clone();
            let mut y = problem.response.clone();
            for i in 0..n {
                y[i] *= w[i];
                for j in 0..p {
                    x[(i, j)] *= w[i];
                }
            }
            (x, y)
        }
    };

    interior_point(&x, &y, problem.tau)
}

/// Left tie-break quantile for a design that is a single constant column `c`.
fn constant_column_quantile(problem: &QrProblem, c: f64) -> f64 {
    let n = problem.response.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        problem.response[a]
            .partial_cmp(&problem.response[b])
            .unwrap()
    });
    let weight = |i: usize| problem.weights.map_or(1.0, |w| w[i]);
    let total: f64 = (0..n).map(weight).sum();
    let target = problem.tau * total;
    let eps = 1e-12 * total.max(1.0);

    let mut cum = 0.0;
    let mut lo = problem.response[order[n - 1]];
    let mut lo_pos = n - 1;
    for (pos, &i) in order.iter().enumerate() {
        cum += weight(i);
        if cum >= target - eps {
            lo = problem.response[i];
            lo_pos = pos;
            break;
        }
    }
    // Cumulative weight hits tau exactly: the minimizer set is the interval up
    // to the next observation carrying positive weight.
    let mut hi = lo;
    if (cum - target).abs() <= eps {
        for &i in order.iter().skip(lo_pos + 1) {
            if weight(i) > 0.0 {
                hi = problem.response[i];
                break;
            }
        }
    }
    if c > 0.0 {
        lo / c
    } else {
        hi / c
    }
}

/// Mehrotra-style predictor-corrector on the bounded-variable dual LP
/// `min (-y)'a  s.t.  X'a = (1 - tau) X'1,  0 <= a <= 1`.
/// The regression coefficients are the negated equality multipliers.
fn interior_point(x: &DMatrix<f64>, y: &DVector<f64>, tau: f64) -> Result<DVector<f64>, QrError> {
    let (n, p) = x.shape();
    check_full_rank(x)?;
    let scale = 1.0 + y.amax();
    let tol_gap = 1e-10 * scale;

    // b = (1 - tau) X'1
    let mut b = DVector::zeros(p);
    for j in 0..p {
        let mut s = 0.0;
        for i in 0..n {
            s += x[(i, j)];
        }
        b[j] = (1.0 - tau) * s;
    }

    // Feasible start: a = (1 - tau) 1 satisfies the equality exactly.
    let mut a = DVector::from_element(n, 1.0 - tau);
    let mut s = DVector::from_element(n, tau);
    let mut v = DVector::<f64>::zeros(p);
    let mut z = DVector::from_element(n, scale);
    let mut w = DVector::from_element(n, scale);

    let c: DVector<f64> = -y;

    let mut gap = f64::INFINITY;
    // Best iterate seen so far, kept as a fallback when the barrier system
    // degenerates numerically right at the optimum.
    let mut best_gap = f64::INFINITY;
    let mut best_v = v.clone();
    for _ in 0..MAX_ITER {
        // Residuals.
        let rd = &c - x * &v - &z + &w; // dual: c - Xv - z + w
        let mut rp = b.clone(); // primal: b - X'a
        for j in 0..p {
            let mut acc = 0.0;
            for i in 0..n {
                acc += x[(i, j)] * a[i];
            }
            rp[j] -= acc;
        }

        gap = (a.dot(&z) + s.dot(&w)) / (2.0 * n as f64);
        if !gap.is_finite() {
            break;
        }
        if gap <= tol_gap && rp.amax() <= 1e-9 * scale && rd.amax() <= 1e-8 * scale {
            return Ok(-v);
        }
        if gap < best_gap && rp.amax() <= 1e-7 * scale && rd.amax() <= 1e-6 * scale {
            best_gap = gap;
            best_v = v.clone();
        }

        let e: DVector<f64> = DVector::from_fn(n, |i, _| z[i] / a[i] + w[i] / s[i]);

        // Affine (predictor) direction: sigma = 0, no corrector.
        let (_dv_aff, da_aff, dz_aff, dw_aff) =
            newton_direction(x, &e, &rd, &rp, &a, &s, &z, &w, 0.0, None)?;
        let ds_aff = -&da_aff;

        let alpha_p_aff = step_length(&a, &da_aff).min(step_length(&s, &ds_aff));
        let alpha_d_aff = step_length(&z, &dz_aff).min(step_length(&w, &dw_aff));
        let mu = gap;
        let mu_aff = {
            let mut acc = 0.0;
            for i in 0..n {
                acc += (a[i] + alpha_p_aff * da_aff[i]) * (z[i] + alpha_d_aff * dz_aff[i]);
                acc += (s[i] + alpha_p_aff * ds_aff[i]) * (w[i] + alpha_d_aff * dw_aff[i]);
            }
            acc / (2.0 * n as f64)
        };
        let sigma = (mu_aff / mu).powi(3).clamp(1e-8, 1.0);

        // Corrector.
        let corr = (
            DVector::from_fn(n, |i, _| da_aff[i] * dz_aff[i]),
            DVector::from_fn(n, |i, _| ds_aff[i] * dw_aff[i]),
        );
        let (dv, da, dz, dw) =
            newton_direction(x, &e, &rd, &rp, &a, &s, &z, &w, sigma * mu, Some(&corr))?;
        let ds = -&da;

        let alpha_p = (0.9995 * step_length(&a, &da).min(step_length(&s, &ds))).min(1.0);
        let alpha_d = (0.9995 * step_length(&z, &dz).min(step_length(&w, &dw))).min(1.0);

        a.axpy(alpha_p, &da, 1.0);
        s.axpy(alpha_p, &ds, 1.0);
        v.axpy(alpha_d, &dv, 1.0);
        z.axpy(alpha_d, &dz, 1.0);
        w.axpy(alpha_d, &dw, 1.0);
    }
    // The path-following loop stalled or broke down. Accept the best iterate
    // if it is converged for practical purposes; otherwise report the gap.
    if best_gap <= 1e-5 * scale {
        return Ok(-best_v);
    }
    Err(QrError::NoConvergence { gap })
}

/// Largest alpha in (0, 1] keeping `x + alpha dx > 0` (with a small margin).
fn step_length(x: &DVector<f64>, dx: &DVector<f64>) -> f64 {
    let mut alpha = 1.0f64;
    for i in 0..x.len() {
        if dx[i] < 0.0 {
            alpha = alpha.min(-x[i] / dx[i]);
        }
    }
    alpha
}

/// One Newton step of the barrier system: `(dv, da, dz, dw)`.
type NewtonStep = (DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>);

#[allow(clippy::too_many_arguments)]
fn newton_direction(
    x: &DMatrix<f64>,
    e: &DVector<f64>,
    rd: &DVector<f64>,
    rp: &DVector<f64>,
    a: &DVector<f64>,
    s: &DVector<f64>,
    z: &DVector<f64>,
    w: &DVector<f64>,
    sigma_mu: f64,
    corrector: Option<&(DVector<f64>, DVector<f64>)>,
) -> Result<NewtonStep, QrError> {
    let (n, p) = x.shape();

    // g = -rd + (sigma_mu - a z - cz)/a - (sigma_mu - s w - cw)/s
    let mut g = DVector::zeros(n);
    for i in 0..n {
        let (cz, cw) = match corrector {
            Some((cz, cw)) => (cz[i], cw[i]),
            None => (0.0, 0.0),
        };
        g[i] = -rd[i] + (sigma_mu - a[i] * z[i] - cz) / a[i] - (sigma_mu - s[i] * w[i] - cw) / s[i];
    }

    // Reduced SPD system: (X' E^-1 X) dv = rp - X' E^-1 g.
    let mut m = DMatrix::zeros(p, p);
    let mut rhs = rp.clone();
    for i in 0..n {
        let ei = 1.0 / e[i];
        for j in 0..p {
            let xe = x[(i, j)] * ei;
            rhs[j] -= xe * g[i];
            for l in j..p {
                m[(j, l)] += xe * x[(i, l)];
            }
        }
    }
    for j in 0..p {
        for l in (j + 1)..p {
            m[(l, j)] = m[(j, l)];
        }
    }

    // Near-singular normal matrices are expected close to the optimum (bound
    // weights collapse), so regularize instead of failing; genuine design
    // collinearity was rejected upfront.
    let dv = cholesky_solve_regularized(&m, &rhs);

    // da = E^-1 (X dv + g); dz, dw by back-substitution.
    let mut da = DVector::zeros(n);
    let mut dz = DVector::zeros(n);
    let mut dw = DVector::zeros(n);
    for i in 0..n {
        let mut xv = 0.0;
        for j in 0..p {
            xv += x[(i, j)] * dv[j];
        }
        da[i] = (xv + g[i]) / e[i];
        let (cz, cw) = match corrector {
            Some((cz, cw)) => (cz[i], cw[i]),
            None => (0.0, 0.0),
        };
        dz[i] = (sigma_mu - a[i] * z[i] - cz) / a[i] - z[i] / a[i] * da[i];
        dw[i] = (sigma_mu - s[i] * w[i] - cw) / s[i] + w[i] / s[i] * da[i];
    }
    Ok((dv, da, dz, dw))
}

/// Reject designs with numerically dependent columns, reporting the first
/// offending column, via a pivoted-tolerance Cholesky of X'X.
fn check_full_rank(x: &DMatrix<f64>) -> Result<(), QrError> {
    let (n, p) = x.shape();
    let mut m = DMatrix::<f64>::zeros(p, p);
    for i in 0..n {
        for j in 0..p {
            for l in j..p {
                m[(j, l)] += x[(i, j)] * x[(i, l)];
            }
        }
    }
    let diag: Vec<f64> = (0..p).map(|j| m[(j, j)]).collect();
    for j in 0..p {
        for l in (j + 1)..p {
            m[(l, j)] = m[(j, l)];
        }
    }
    let mut l = m;
    for j in 0..p {
        for k in 0..j {
            let ljk = l[(j, k)];
            for i in j..p {
                l[(i, j)] -= l[(i, k)] * ljk;
            }
        }
        let pivot = l[(j, j)];
        // Compare against the column's own scale so a weak-but-independent
        // column is not mistaken for a dependent one.
        if pivot <= 1e-13 * diag[j].max(1e-300) {
            return Err(QrError::RankDeficient { column: j });
        }
        let root = pivot.sqrt();
        for i in j..p {
            l[(i, j)] /= root;
        }
    }
    Ok(())
}

/// Cholesky solve with a pivot floor; used inside the interior point where
/// the normal matrix legitimately approaches singularity near convergence.
fn cholesky_solve_regularized(m: &DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    let p = m.nrows();
    let max_diag = (0..p).map(|j| m[(j, j)].abs()).fold(0.0f64, f64::max);
    let floor = 1e-13 * max_diag.max(1e-300);
    let mut l = m.clone();
    for j in 0..p {
        for k in 0..j {
            let ljk = l[(j, k)];
            for i in j..p {
                l[(i, j)] -= l[(i, k)] * ljk;
            }
        }
        let root = l[(j, j)].max(floor).sqrt();
        for i in j..p {
            l[(i, j)] /= root;
        }
    }
    let mut sol = rhs.clone();
    for j in 0..p {
        for k in 0..j {
            sol[j] -= l[(j, k)] * sol[k];
        }
        sol[j] /= l[(j, j)];
    }
    for j in (0..p).rev() {
        for k in (j + 1)..p {
            sol[j] -= l[(k, j)] * sol[k];
        }
        sol[j] /= l[(j, j)];
    }
    sol
}

/// Cholesky solve that reports the offending column on a non-positive pivot.
fn cholesky_solve(m: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>, QrError> {
    let p = m.nrows();
    let max_diag = (0..p).map(|j| m[(j, j)].abs()).fold(0.0f64, f64::max);
    let tol = 1e-13 * max_diag.max(1e-300);
    let mut l = m.clone();
    for j in 0..p {
        for k in 0..j {
            let ljk = l[(j, k)];
            for i in j..p {
                l[(i, j)] -= l[(i, k)] * ljk;
            }
        }
        let pivot = l[(j, j)];
        if pivot <= tol {
            return Err(QrError::RankDeficient { column: j });
        }
        let root = pivot.sqrt();
        for i in j..p {
            l[(i, j)] /= root;
        }
    }
    // Forward then backward substitution.
    let mut sol = rhs.clone();
    for j in 0..p {
        for k in 0..j {
            sol[j] -= l[(j, k)] * sol[k];
        }
        sol[j] /= l[(j, j)];
    }
    for j in (0..p).rev() {
        for k in (j + 1)..p {
            sol[j] -= l[(k, j)] * sol[k];
        }
        sol[j] /= l[(j, j)];
    }
    Ok(sol)
}

/// Pointwise smoothed check loss `[tau - K(u/h)] * u`.
#[inline]
pub fn smoothed_loss(u: f64, tau: f64, h: f64) -> f64 {
    (tau - kernel_big_k(u / h)) * u
}

/// Derivative of the smoothed loss in the residual.
#[inline]
pub fn smoothed_score(u: f64, tau: f64, h: f64) -> f64 {
    let z = u / h;
    tau - kernel_big_k(z) + z * kernel_k(z)
}

/// Second derivative of the smoothed loss in the residual.
#[inline]
fn smoothed_curvature(u: f64, h: f64) -> f64 {
    let z = u / h;
    (2.0 * kernel_k(z) + z * kernel_k_deriv(z)) / h
}

/// Weighted smoothed objective `sum_t w_t [tau - K(u_t/h)] u_t`.
pub fn sqr_objective(problem: &QrProblem, smoothing: &SmoothingSpec, beta: &DVector<f64>) -> f64 {
    let resid = problem.response - problem.design * beta;
    resid
        .iter()
        .enumerate()
        .map(|(i, &u)| {
            let w = problem.weights.map_or(1.0, |w| w[i]);
            w * smoothed_loss(u, problem.tau, smoothing.bandwidth)
        })
        .sum()
}

/// Gradient of the smoothed objective in beta.
pub fn sqr_gradient(
    problem: &QrProblem,
    smoothing: &SmoothingSpec,
    beta: &DVector<f64>,
) -> DVector<f64> {
    let (n, p) = problem.design.shape();
    let resid = problem.response - problem.design * beta;
    let mut g = DVector::zeros(p);
    for i in 0..n {
        let w = problem.weights.map_or(1.0, |w| w[i]);
        let psi = smoothed_score(resid[i], problem.tau, smoothing.bandwidth);
        for j in 0..p {
            g[j] -= w * psi * problem.design[(i, j)];
        }
    }
    g
}

/// Minimize the smoothed quantile objective by damped Newton with analytic
/// gradient and Hessian, falling back to gradient descent on a non-PD Hessian.
pub fn fit_sqr(problem: &QrProblem, smoothing: &SmoothingSpec) -> Result<DVector<f64>, QrError> {
    if smoothing.bandwidth.is_nan() || smoothing.bandwidth <= 0.0 {
        return Err(QrError::BadBandwidth(smoothing.bandwidth));
    }
    problem.validate()?;
    let start = least_squares_start(problem)?;
    fit_sqr_from(problem, smoothing, start)
}

/// Same as [`fit_sqr`] but warm-started; used by the iterative factor fits.
pub fn fit_sqr_from(
    problem: &QrProblem,
    smoothing: &SmoothingSpec,
    start: DVector<f64>,
) -> Result<DVector<f64>, QrError> {
    let (n, p) = problem.design.shape();
    let h = smoothing.bandwidth;
    let tau = problem.tau;
    let scale = 1.0 + problem.response.amax();
    let tol = TOL_GRAD * scale * (n as f64).max(1.0);

    let mut beta = start;
    let mut obj = sqr_objective(problem, smoothing, &beta);
    let mut grad_norm = f64::INFINITY;

    // Iterations are cheap (p is the factor rank); give the damped Newton
    // plenty of room before declaring failure.
    for _ in 0..5 * MAX_ITER {
        let resid = problem.response - problem.design * &beta;
        let mut g = DVector::<f64>::zeros(p);
        let mut hess = DMatrix::<f64>::zeros(p, p);
        for i in 0..n {
            let w = problem.weights.map_or(1.0, |w| w[i]);
            let psi = smoothed_score(resid[i], tau, h);
            let curv = smoothed_curvature(resid[i], h);
            for j in 0..p {
                let xij = problem.design[(i, j)];
                g[j] -= w * psi * xij;
                for l in j..p {
                    hess[(j, l)] += w * curv * xij * problem.design[(i, l)];
                }
            }
        }
        for j in 0..p {
            for l in (j + 1)..p {
                hess[(l, j)] = hess[(j, l)];
            }
        }

        grad_norm = g.amax();
        if grad_norm <= tol {
            return Ok(beta);
        }

        // The order-8 kernel makes the Hessian indefinite away from the
        // optimum. Use a modified Newton direction: flip negative
        // eigenvalues and floor their magnitudes, which always yields a
        // well-scaled descent direction (p is at most the factor rank, so
        // the eigendecomposition is trivial).
        let eig = hess.clone().symmetric_eigen();
        let lam_max = eig.eigenvalues.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        let dir = if lam_max <= 1e-300 {
            // Flat region: every residual outside the kernel support.
            -&g
        } else {
            let vt_g = eig.eigenvectors.transpose() * &g;
            let scaled = DVector::from_fn(p, |j, _| {
                -vt_g[j] / eig.eigenvalues[j].abs().max(1e-8 * lam_max)
            });
            &eig.eigenvectors * scaled
        };
        let slope = g.dot(&dir);
        let (dir, slope) = if slope < 0.0 { (dir, slope) } else { (-g.clone(), -g.dot(&g)) };

        // Armijo backtracking.
        let mut t = 1.0f64;
        let mut stepped = false;
        while t >= 1e-14 {
            let cand = &beta + t * &dir;
            let cand_obj = sqr_objective(problem, smoothing, &cand);
            if cand_obj <= obj + 1e-4 * t * slope {
                beta = cand;
                obj = cand_obj;
                stepped = true;
                break;
            }
            t *= 0.5;
        }
        if !stepped {
            // Flat to machine precision along every descent direction.
            if grad_norm <= tol * 100.0 {
                return Ok(beta);
            }
            return Err(QrError::SmoothedNoConvergence { grad_norm });
        }
    }
    // Iteration cap: accept a near-stationary iterate (the alternating
    // factor sweeps only need subproblem accuracy below their own objective
    // tolerance), reject anything genuinely unconverged.
    if grad_norm <= tol * 100.0 {
        return Ok(beta);
    }
    Err(QrError::SmoothedNoConvergence { grad_norm })
}

fn least_squares_start(problem: &QrProblem) -> Result<DVector<f64>, QrError> {
    let (n, p) = problem.design.shape();
    let mut xtx = DMatrix::zeros(p, p);
    let mut xty = DVector::zeros(p);
    for i in 0..n {
        let w = problem.weights.map_or(1.0, |w| w[i]);
        for j in 0..p {
            let xij = problem.design[(i, j)];
            xty[j] += w * xij * problem.response[i];
            for l in j..p {
                xtx[(j, l)] += w * xij * problem.design[(i, l)];
            }
        }
    }
    for j in 0..p {
        for l in (j + 1)..p {
            xtx[(l, j)] = xtx[(j, l)];
        }
    }
    cholesky_solve(&xtx, &xty)
}

/// Largest per-column violation of the subgradient optimality condition,
/// normalized by the weighted column mass and excluding interpolation slack
/// from near-zero residuals. Used by the test suites as the stationarity
/// certificate for [`fit_qr`].
pub fn stationarity_gap(problem: &QrProblem, beta: &DVector<f64>) -> f64 {
    let (n, p) = problem.design.shape();
    let resid = problem.response - problem.design * beta;
    let resid_scale = 1.0 + problem.response.amax();
    let mut worst = 0.0f64;
    for j in 0..p {
        let mut grad = 0.0;
        let mut slack = 0.0;
        let mut mass = 0.0;
        for i in 0..n {
            let w = problem.weights.map_or(1.0, |w| w[i]);
            let xij = problem.design[(i, j)];
            mass += w * xij.abs();
            if resid[i].abs() <= 1e-7 * resid_scale {
                slack += w * xij.abs();
            } else {
                grad += w * xij * score_psi(resid[i], problem.tau);
            }
        }
        let gap = (grad.abs() - slack).max(0.0) / mass.max(1e-300);
        worst = worst.max(gap);
    }
    worst
}
