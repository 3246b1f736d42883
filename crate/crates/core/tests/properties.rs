//! Fast property-based checks of the solver, kernel, normalization,
//! bootstrap, and panel I/O invariants. Everything here runs in seconds.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use qtt_core::inference::{bootstrap_qtt, draw_block_indices, make_block_plan};
use qtt_core::panel::{load_panel, PanelData, PanelFormat, PanelSchema};
use qtt_core::qfm::{fit_iqr, normalize, FitOptions};
use qtt_core::qr::{
    check_loss, fit_qr, kernel_k, qr_objective, sqr_gradient, sqr_objective, stationarity_gap,
    QrProblem, SmoothingSpec,
};
use qtt_core::qtt::{Stage1Method, Stage1Summary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;

fn random_problem(seed: u64, n: usize, p: usize) -> (DMatrix<f64>, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = rand_distr::StandardNormal;
    let mut x = DMatrix::<f64>::from_fn(n, p, |_, _| normal.sample(&mut rng));
    for i in 0..n {
        x[(i, 0)] = 1.0;
    }
    let y = DVector::<f64>::from_fn(n, |_, _| normal.sample(&mut rng));
    (x, y)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// rho_tau(u) = rho_{1-tau}(-u), and the loss is nonnegative.
    #[test]
    fn check_loss_reflection(u in -50.0f64..50.0, tau in 0.01f64..0.99) {
        let a = check_loss(u, tau);
        let b = check_loss(-u, 1.0 - tau);
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        prop_assert!(a >= 0.0);
    }

    /// Adding X c to the response shifts the fit by exactly c.
    #[test]
    fn regression_equivariance(seed in 0u64..500, tau in 0.05f64..0.95) {
        let (x, y) = random_problem(seed, 40, 2);
        let beta = fit_qr(&QrProblem::new(&x, &y, tau)).unwrap();
        let shift = DVector::from_column_slice(&[0.7, -1.3]);
        let y2 = &y + &x * &shift;
        let beta2 = fit_qr(&QrProblem::new(&x, &y2, tau)).unwrap();
        for j in 0..2 {
            prop_assert!((beta2[j] - beta[j] - shift[j]).abs() < 1e-5,
                "shift failed: {} vs {}", beta2[j], beta[j] + shift[j]);
        }
    }

    /// Intercept-only fit matches the exhaustive oracle over all candidate
    /// observations (n <= 12): no candidate has a lower objective.
    #[test]
    fn intercept_only_matches_exhaustive_oracle(
        values in prop::collection::vec(-100.0f64..100.0, 1..12),
        tau in 0.05f64..0.95,
    ) {
        let n = values.len();
        let x = DMatrix::from_element(n, 1, 1.0);
        let y = DVector::from_vec(values.clone());
        let problem = QrProblem::new(&x, &y, tau);
        let beta = fit_qr(&problem).unwrap();
        let fitted_obj = qr_objective(&problem, &beta);
        // The minimum over all of R is attained at some observation.
        let best = values
            .iter()
            .map(|&c| qr_objective(&problem, &DVector::from_element(1, c)))
            .fold(f64::INFINITY, f64::min);
        prop_assert!(fitted_obj <= best + 1e-9 * (1.0 + best.abs()),
            "fit {} worse than oracle {}", fitted_obj, best);
    }

    /// The solver's first-order stationarity certificate holds on random
    /// problems at random quantiles.
    #[test]
    fn solver_stationarity_certificate(seed in 0u64..300, tau in 0.05f64..0.95) {
        let (x, y) = random_problem(seed, 60, 3);
        let problem = QrProblem::new(&x, &y, tau);
        let beta = fit_qr(&problem).unwrap();
        prop_assert!(stationarity_gap(&problem, &beta) <= 1e-6);
    }

    /// Analytic smoothed gradient matches central finite differences.
    #[test]
    fn smoothed_gradient_matches_finite_difference(seed in 0u64..100, tau in 0.1f64..0.9) {
        let (x, y) = random_problem(seed, 30, 2);
        let problem = QrProblem::new(&x, &y, tau);
        let smoothing = SmoothingSpec::new(0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbeef);
        let normal = rand_distr::StandardNormal;
        let beta = DVector::<f64>::from_fn(2, |_, _| normal.sample(&mut rng));
        let grad = sqr_gradient(&problem, &smoothing, &beta);
        let h = 1e-6;
        for j in 0..2 {
            let mut up = beta.clone();
            up[j] += h;
            let mut dn = beta.clone();
            dn[j] -= h;
            let fd = (sqr_objective(&problem, &smoothing, &up)
                - sqr_objective(&problem, &smoothing, &dn))
                / (2.0 * h);
            prop_assert!((grad[j] - fd).abs() < 1e-5 * (1.0 + fd.abs()),
                "grad {} vs fd {}", grad[j], fd);
        }
    }

    /// Normalization preserves the common component and is idempotent for
    /// random shapes and ranks.
    #[test]
    fn normalization_preserves_product(seed in 0u64..200, n in 4usize..15, t in 4usize..20, r in 1usize..4) {
        prop_assume!(r < n.min(t));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = rand_distr::StandardNormal;
        let f = DMatrix::<f64>::from_fn(t, r, |_, _| normal.sample(&mut rng));
        let lam = DMatrix::<f64>::from_fn(n, r, |_, _| normal.sample(&mut rng));
        prop_assume!(normalize(&f, &lam).is_ok());
        let (f1, l1) = normalize(&f, &lam).unwrap();
        let before = &lam * f.transpose();
        let after = &l1 * f1.transpose();
        prop_assert!((before - after).amax() < 1e-8);
        let gram = f1.transpose() * &f1 / t as f64;
        prop_assert!((gram - DMatrix::identity(r, r)).amax() < 1e-8);
        // Idempotence is only well defined when the column scales are
        // separated; near-ties leave a rotational ambiguity.
        let scales: Vec<f64> = (0..r).map(|j| l1.column(j).norm_squared() / n as f64).collect();
        let separated = scales
            .windows(2)
            .all(|p| (p[0] - p[1]).abs() > 1e-3 * p[0].max(1.0));
        if separated {
            let (f2, l2) = normalize(&f1, &l1).unwrap();
            prop_assert!((&f2 - &f1).amax() < 1e-7);
            prop_assert!((&l2 - &l1).amax() < 1e-7);
        }
    }

    /// Every drawn block stays inside its segment, so no replicate row ever
    /// straddles the treatment boundary.
    #[test]
    fn blocks_never_straddle_boundary(seed in 0u64..200, len in 4usize..40, block in 1usize..6) {
        prop_assume!(block <= len);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx = draw_block_indices(len, block, 8, &mut rng);
        prop_assert!(idx.iter().all(|&i| i < len));
        for chunk in idx.chunks(block) {
            for pair in chunk.windows(2) {
                prop_assert_eq!(pair[1], pair[0] + 1);
            }
        }
    }
}

/// Order-8 kernel: unit mass and vanishing moments 1..7 via Simpson
/// quadrature on [-1, 1].
#[test]
fn kernel_moment_conditions() {
    let m = 200_000;
    let simpson = |j: u32| -> f64 {
        let h = 2.0 / m as f64;
        let f = |z: f64| z.powi(j as i32) * kernel_k(z);
        let mut acc = f(-1.0) + f(1.0);
        for i in 1..m {
            let z = -1.0 + i as f64 * h;
            acc += f(z) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    };
    assert!((simpson(0) - 1.0).abs() < 1e-8, "mass {}", simpson(0));
    for j in 1..=7 {
        assert!(simpson(j).abs() < 1e-8, "moment {j} = {}", simpson(j));
    }
}

/// Sign flips and orthogonal rotations of the first-stage factors leave the
/// second-stage treatment coefficient unchanged.
#[test]
fn delta_invariant_to_rotation() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let normal = rand_distr::StandardNormal;
    let t = 60;
    let start = 31;
    let factors = DMatrix::<f64>::from_fn(t, 2, |_, _| normal.sample(&mut rng));
    let y1 = DVector::<f64>::from_fn(t, |s, _| {
        let v: f64 = normal.sample(&mut rng);
        factors[(s, 0)] - 0.5 * factors[(s, 1)] + 0.2 * v + f64::from(s + 1 >= start)
    });
    let fit_delta = |f: &DMatrix<f64>| {
        let mut design = DMatrix::<f64>::zeros(t, 3);
        design.columns_mut(0, 2).copy_from(f);
        for s in 0..t {
            design[(s, 2)] = f64::from(s + 1 >= start);
        }
        fit_qr(&QrProblem::new(&design, &y1, 0.5)).unwrap()[2]
    };
    let base = fit_delta(&factors);
    // Sign flip.
    assert!((fit_delta(&(-&factors)) - base).abs() < 1e-7);
    // Rotation by an arbitrary angle.
    let theta: f64 = 0.83;
    let q = DMatrix::from_row_slice(2, 2, &[theta.cos(), -theta.sin(), theta.sin(), theta.cos()]);
    assert!((fit_delta(&(&factors * q)) - base).abs() < 1e-7);
}

/// Noiseless rank-1 and rank-2 panels are recovered exactly by the iterated
/// fit.
#[test]
fn exact_recovery_noiseless_panels() {
    for (rank, seed) in [(1usize, 5u64), (2, 6)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = rand_distr::StandardNormal;
        let f = DMatrix::<f64>::from_fn(30, rank, |_, _| normal.sample(&mut rng));
        let lam = DMatrix::<f64>::from_fn(18, rank, |_, _| normal.sample(&mut rng));
        let y = &lam * f.transpose();
        let fit = fit_iqr(&y, 0.5, rank, &FitOptions::default()).unwrap();
        assert!(
            fit.objective < 1e-5,
            "rank {rank} objective {}",
            fit.objective
        );
        assert!((fit.common_component() - &y).amax() < 1e-3);
    }
}

/// IQR objective is non-increasing across sweeps up to the solver slack
/// tol_stat (N + T) / (N T).
#[test]
fn objective_monotone_across_sweeps() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let normal = rand_distr::StandardNormal;
    let (n, t) = (20usize, 30usize);
    let f = DMatrix::<f64>::from_fn(t, 2, |_, _| normal.sample(&mut rng));
    let lam = DMatrix::<f64>::from_fn(n, 2, |_, _| normal.sample(&mut rng));
    let mut y = &lam * f.transpose();
    for v in y.iter_mut() {
        let e: f64 = normal.sample(&mut rng);
        *v += 0.4 * e;
    }
    let slack = 1e-6 * (n + t) as f64 / (n * t) as f64;
    for tau in [0.25, 0.5, 0.75] {
        let fit = fit_iqr(&y, tau, 2, &FitOptions::default()).unwrap();
        let mut last: std::collections::HashMap<usize, f64> = Default::default();
        for row in &fit.trace {
            if let Some(prev) = last.get(&row.restart) {
                assert!(
                    row.objective <= prev + slack,
                    "tau {tau}: rose from {prev} to {}",
                    row.objective
                );
            }
            last.insert(row.restart, row.objective);
        }
    }
}

fn intercept_only_estimate(t0: usize, t1: usize, seed: u64) -> qtt_core::qtt::QttEstimate {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = rand_distr::StandardNormal;
    let t = t0 + t1;
    qtt_core::qtt::QttEstimate {
        estimator: "NQTT".to_string(),
        tau: 0.5,
        delta: 0.0,
        lambda1: vec![0.0],
        r: 1,
        stage1: Stage1Summary {
            method: Stage1Method::Iqr,
            rank: 1,
            objective: 0.0,
            iterations: 1,
            converged: true,
        },
        factors: DMatrix::from_element(t, 1, 1.0),
        treated_series: DVector::from_fn(t, |_, _| normal.sample(&mut rng)),
        treatment_start: t0 + 1,
    }
}

/// Block size 1 reduces to the row-iid bootstrap: the replicate distribution
/// matches an independently coded iid bootstrap (two-sample KS < 0.05 at
/// B = 5000).
#[test]
fn block_size_one_reduces_to_iid_bootstrap() {
    // Odd regime lengths keep every resampled median unique, so both
    // implementations target exactly the same statistic.
    let t0 = 31;
    let t1 = 29;
    let b = 5000;
    let est = intercept_only_estimate(t0, t1, 100);
    let plan = make_block_plan(t0, t1, Some((1, 1))).unwrap();
    let blockwise = bootstrap_qtt(&est, &plan, b, 17).unwrap();

    // Independent implementation: plain iid resampling of each regime and a
    // left-quantile median of each resample.
    let pre: Vec<f64> = est.treated_series.rows(0, t0).iter().cloned().collect();
    let post: Vec<f64> = est.treated_series.rows(t0, t1).iter().cloned().collect();
    let median = |mut v: Vec<f64>| {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[(v.len() - 1) / 2]
    };
    let mut rng = ChaCha8Rng::seed_from_u64(12345);
    let mut iid: Vec<f64> = (0..b)
        .map(|_| {
            let p0: Vec<f64> = (0..t0).map(|_| pre[rng.gen_range(0..t0)]).collect();
            let p1: Vec<f64> = (0..t1).map(|_| post[rng.gen_range(0..t1)]).collect();
            median(p1) - median(p0)
        })
        .collect();

    let mut a = blockwise.replicates.clone();
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    iid.sort_by(|x, y| x.partial_cmp(y).unwrap());
    // Two-sample Kolmogorov-Smirnov distance.
    let mut ks = 0.0f64;
    let (mut i, mut j) = (0usize, 0usize);
    while i < a.len() && j < iid.len() {
        if a[i] <= iid[j] {
            i += 1;
        } else {
            j += 1;
        }
        let d = (i as f64 / a.len() as f64 - j as f64 / iid.len() as f64).abs();
        ks = ks.max(d);
    }
    assert!(ks < 0.05, "KS distance {ks}");
}

/// Same seed, same inputs: identical replicates, sd, and interval.
#[test]
fn bootstrap_deterministic_under_fixed_seed() {
    let est = intercept_only_estimate(40, 30, 8);
    let plan = make_block_plan(40, 30, None).unwrap();
    let a = bootstrap_qtt(&est, &plan, 200, 77).unwrap();
    let b = bootstrap_qtt(&est, &plan, 200, 77).unwrap();
    assert_eq!(a.replicates, b.replicates);
    assert_eq!(a.sd, b.sd);
    assert_eq!(a.ci, b.ci);
    assert_eq!(a.percentile_ci, b.percentile_ci);
}

/// Wide and long CSV round-trip to the same panel, and split/merge
/// reconstructs the outcome matrix.
#[test]
fn csv_round_trip_and_split_merge() {
    use std::io::Write;
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let normal = rand_distr::StandardNormal;
    let n_units = 5;
    let t = 8;
    let start = 5;
    let outcomes =
        DMatrix::<f64>::from_fn(n_units, t, |_, _| normal.sample(&mut rng));
    let labels: Vec<String> = (0..n_units).map(|i| format!("unit{i}")).collect();

    // Wide file.
    let mut wide = tempfile::NamedTempFile::new().unwrap();
    writeln!(wide, "t,{}", labels.join(",")).unwrap();
    for s in 0..t {
        let row: Vec<String> = (0..n_units).map(|i| outcomes[(i, s)].to_string()).collect();
        writeln!(wide, "{},{}", s + 1, row.join(",")).unwrap();
    }
    // Long file with the same content.
    let mut long = tempfile::NamedTempFile::new().unwrap();
    writeln!(long, "unit,time,value,treated").unwrap();
    for (i, label) in labels.iter().enumerate() {
        for s in 0..t {
            let flag = u8::from(i == 0 && s + 1 >= start);
            writeln!(long, "{label},{},{},{flag}", s + 1, outcomes[(i, s)]).unwrap();
        }
    }

    let schema = PanelSchema {
        treated_units: vec!["unit0".to_string()],
        treatment_start: Some(start),
    };
    let from_wide = load_panel(wide.path(), PanelFormat::WideCsv, &schema).unwrap();
    let from_long = load_panel(long.path(), PanelFormat::LongCsv, &PanelSchema::default()).unwrap();
    assert_eq!(from_wide.outcomes(), from_long.outcomes());
    assert_eq!(from_wide.treatment_start(), from_long.treatment_start());

    let panel = PanelData::new(outcomes.clone(), labels, vec![1], start).unwrap();
    let (controls, treated) = panel.split_control_treated();
    let mut merged = DMatrix::zeros(n_units, t);
    for (row, &id) in panel.control_unit_ids().iter().enumerate() {
        merged.row_mut(id - 1).copy_from(&controls.row(row));
    }
    for (row, &id) in panel.treated_unit_ids().iter().enumerate() {
        merged.row_mut(id - 1).copy_from(&treated.row(row));
    }
    assert_eq!(merged, outcomes);
}
