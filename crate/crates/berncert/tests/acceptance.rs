//! Release gate: one test per shipping criterion, each ending in a
//! `[PASS]` line with its measured numbers. The two-moons fixture is
//! trained once and shared; every other artifact is rebuilt inside the
//! criterion that owns it.

use std::sync::LazyLock;
use std::time::{Duration, Instant};

use berncert::argmax;
use berncert::attacks::{
    empirical_min_perturbation, AttackConfig, AttackSpace, SmoothedFeatureTarget,
};
use berncert::bernstein::{bernstein_basis, BernsteinSmoother};
use berncert::certify::{
    build_head_smoother, certify, certify_dataset, proposition1_check, CertResult,
};
use berncert::model::{
    noisy_sine, spectral_norm, train_regressor, train_toy, two_moons, Activation, Architecture,
    Dataset, DenseLayer, MlpModel, TrainConfig,
};
use berncert::oracle::{grid_diagonal, nearest_boundary_grid, OracleConfig};
use berncert::solvers::{
    dogleg_step, gauss_newton_step, lm_step, solve, FnSystem, Method, SolverConfig,
};
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Boundary points to ~1e-7 regardless of how shallow the residual slope
/// is at the root.
fn tight_cfg() -> SolverConfig {
    SolverConfig {
        f_tol: 1e-24,
        x_tol: 1e-14,
        ..SolverConfig::default()
    }
}

struct MoonsFixture {
    model: MlpModel,
    sm1: BernsteinSmoother,
    sm4: BernsteinSmoother,
    test: Dataset,
    results_n1: Vec<CertResult>,
    results_n4: Vec<CertResult>,
}

static MOONS: LazyLock<MoonsFixture> = LazyLock::new(|| {
    let mut rng = seeded(37);
    let train = two_moons(500, 0.08, &mut rng);
    let model = train_toy(
        &train,
        &Architecture::default(),
        &TrainConfig::default(),
        &mut rng,
    )
    .expect("fixture training");
    let test = two_moons(200, 0.08, &mut rng);
    let sm1 = build_head_smoother(&model, 1).expect("fixture n=1 smoother");
    let sm4 = build_head_smoother(&model, 4).expect("fixture n=4 smoother");
    let cfg = tight_cfg();
    let results_n1 =
        certify_dataset(&test, &model, &sm1, 2.0, f64::INFINITY, &cfg).expect("n=1 run");
    let results_n4 =
        certify_dataset(&test, &model, &sm4, 2.0, f64::INFINITY, &cfg).expect("n=4 run");
    MoonsFixture {
        model,
        sm1,
        sm4,
        test,
        results_n1,
        results_n4,
    }
});

#[test]
fn criterion_01_bernstein_correctness() {
    let t0 = Instant::now();
    let mut rng = seeded(101);

    // Partition of unity.
    for _ in 0..200 {
        let n = rng.random_range(1..40);
        let x: f64 = rng.random();
        let total: f64 = (0..=n).map(|k| bernstein_basis(n, k, x).unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-12, "unity defect {}", total - 1.0);
    }

    // Endpoint interpolation is exact at the box corners.
    let f = |x: &[f64]| vec![3.5 * x[0] - 1.25 * x[1] + 0.25, (6.0 * x[0]).sin() - x[1]];
    let sm = BernsteinSmoother::precompute_grid(f, 5, 2, 2).unwrap();
    for corner in [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]] {
        let want = f(&corner);
        let got = sm.eval_multi(&corner).unwrap();
        for (w, g) in want.iter().zip(&got) {
            assert_eq!(w.to_bits(), g.to_bits(), "corner {corner:?}");
        }
    }

    // Affine functions are reproduced.
    for _ in 0..20 {
        let a = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let b: f64 = rng.random_range(-1.0..1.0);
        let n = rng.random_range(1..8);
        let sm =
            BernsteinSmoother::precompute_grid(|x| vec![a[0] * x[0] + a[1] * x[1] + b], n, 2, 1)
                .unwrap();
        for _ in 0..20 {
            let x = [rng.random(), rng.random()];
            let want = a[0] * x[0] + a[1] * x[1] + b;
            let got = sm.eval_multi(&x).unwrap()[0];
            assert!((got - want).abs() < 1e-10, "affine defect {}", got - want);
        }
    }

    // Uniform error shrinks with the degree on a fixed Lipschitz target.
    let lipschitz = |x: &[f64]| vec![(x[0] - 0.3).abs() + 0.5 * (3.0 * x[1]).sin()];
    let max_err = |n: usize| -> f64 {
        let sm = BernsteinSmoother::precompute_grid(lipschitz, n, 2, 1).unwrap();
        let mut worst = 0.0f64;
        for i in 0..=20 {
            for j in 0..=20 {
                let x = [i as f64 / 20.0, j as f64 / 20.0];
                let err = (sm.eval_multi(&x).unwrap()[0] - lipschitz(&x)[0]).abs();
                worst = worst.max(err);
            }
        }
        worst
    };
    let (err4, err64) = (max_err(4), max_err(64));
    assert!(err64 < err4, "err(64)={err64} !< err(4)={err4}");

    // Analytic gradients against central differences, 100 random cases.
    for _ in 0..100 {
        let n = rng.random_range(1..6);
        let d = rng.random_range(1..4);
        let k = rng.random_range(1..4);
        let rows = (n + 1usize).pow(d as u32);
        let coeffs: Vec<f64> = (0..rows * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sm = BernsteinSmoother::from_coeffs(n, d, k, coeffs).unwrap();
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(0.05..0.95)).collect();
        let grad = sm.grad_multi(&x).unwrap();
        let h = 1e-5;
        for j in 0..d {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let fp = sm.eval_multi(&xp).unwrap();
            let fm = sm.eval_multi(&xm).unwrap();
            for c in 0..k {
                let fd = (fp[c] - fm[c]) / (2.0 * h);
                let g = grad[(c, j)];
                assert!(
                    (g - fd).abs() < 1e-5 * g.abs().max(1.0),
                    "grad[{c},{j}]={g} fd={fd}"
                );
            }
        }
    }

    let dt = t0.elapsed();
    assert!(dt < Duration::from_secs(10), "took {dt:?}");
    println!("[PASS] criterion 1: bernstein suite (err4={err4:.4}, err64={err64:.4}, {dt:?})");
}

#[test]
fn criterion_02_spectral_normalization() {
    let fx = &*MOONS;
    let t0 = Instant::now();

    for (i, l) in fx.model.layers()[..fx.model.head_index()]
        .iter()
        .enumerate()
    {
        let s = spectral_norm(&l.weight, 500).unwrap();
        assert!((s - 1.0).abs() <= 1e-6, "layer {i} sigma {s}");
    }

    let mut rng = seeded(202);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let a: [f64; 2] = [rng.random_range(-1.5..2.5), rng.random_range(-1.0..1.5)];
        let b: [f64; 2] = [rng.random_range(-1.5..2.5), rng.random_range(-1.0..1.5)];
        let din = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        if din < 1e-9 {
            continue;
        }
        let fa = fx.model.features(&a).unwrap();
        let fb = fx.model.features(&b).unwrap();
        let dout = fa
            .iter()
            .zip(&fb)
            .map(|(u, v)| (u - v) * (u - v))
            .sum::<f64>()
            .sqrt();
        worst = worst.max(dout / din);
        assert!(dout / din <= 1.0 + 1e-6, "ratio {}", dout / din);
    }

    let dt = t0.elapsed();
    assert!(dt < Duration::from_secs(30), "took {dt:?}");
    println!("[PASS] criterion 2: spectral normalization (worst ratio {worst:.6}, {dt:?})");
}

#[test]
fn criterion_03_solver_suite() {
    let t0 = Instant::now();

    // Rosenbrock residuals from the classic start, both second-order methods.
    let rosenbrock = FnSystem::new(
        2,
        2,
        |x: &DVector<f64>| DVector::from_column_slice(&[10.0 * (x[1] - x[0] * x[0]), 1.0 - x[0]]),
        |x: &DVector<f64>| DMatrix::from_row_slice(2, 2, &[-20.0 * x[0], 10.0, -1.0, 0.0]),
    );
    let x0 = DVector::from_column_slice(&[-1.2, 1.0]);
    for method in [Method::Lm, Method::TrustRegion] {
        let cfg = SolverConfig {
            method,
            ..SolverConfig::default()
        };
        let rep = solve(&rosenbrock, &x0, &cfg, false).unwrap();
        assert!(rep.converged, "{method:?} failed");
        assert!(rep.iterations <= 200, "{method:?} took {}", rep.iterations);
        assert!(
            2.0 * rep.residual_norm_sq < 1.49e-8,
            "{method:?} ||Phi||^2 = {}",
            2.0 * rep.residual_norm_sq
        );
    }

    // LM with mu=0 reduces to Gauss-Newton on full-rank problems.
    let mut rng = seeded(303);
    for _ in 0..25 {
        let j = DMatrix::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0))
            + DMatrix::identity(6, 3) * 2.0;
        let phi = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
        let gap = (lm_step(&j, &phi, 0.0).unwrap() - gauss_newton_step(&j, &phi).unwrap()).norm();
        assert!(gap <= 1e-10, "LM/GN gap {gap}");
    }

    // Dogleg subproblem never predicts an increase, including rank-deficient
    // Jacobians.
    for case in 0..100 {
        let m = rng.random_range(1..5usize);
        let n = rng.random_range(1..5usize);
        let mut j = DMatrix::from_fn(m, n, |_, _| rng.random_range(-2.0..2.0));
        if case % 5 == 0 && m > 1 {
            let first = j.row(0).into_owned();
            j.set_row(m - 1, &first);
        }
        let phi = DVector::from_fn(m, |_, _| rng.random_range(-2.0..2.0));
        let delta = rng.random_range(1e-3..2.0);
        let s = dogleg_step(&j, &phi, delta).unwrap();
        let g = j.transpose() * &phi;
        let predicted = -g.dot(&s) - 0.5 * (&j * &s).norm_squared();
        assert!(predicted >= -1e-12, "case {case}: predicted {predicted}");
    }

    // Singular Jacobians still produce finite damped steps.
    let j = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
    let phi = DVector::from_column_slice(&[3.0, -1.0]);
    let h = lm_step(&j, &phi, 1e-3).unwrap();
    assert!(h.iter().all(|v| v.is_finite()));

    let dt = t0.elapsed();
    assert!(dt < Duration::from_secs(10), "took {dt:?}");
    println!("[PASS] criterion 3: solver suite ({dt:?})");
}

#[test]
fn criterion_04_analytic_certification() {
    let t0 = Instant::now();
    let mut rng = seeded(404);
    for t in [0.3, 0.5, 0.7] {
        // Logits (x_1, 2t - x_1): the decision boundary is the line x_1 = t.
        let layer = DenseLayer {
            weight: DMatrix::from_row_slice(2, 2, &[1.0, 0.0, -1.0, 0.0]),
            bias: DVector::from_column_slice(&[0.0, 2.0 * t]),
            act: Activation::Id,
        };
        let model = MlpModel::new(vec![layer], 0).unwrap();
        let sm = build_head_smoother(&model, 1).unwrap();
        let mut anchors = 0;
        while anchors < 20 {
            let x = [rng.random_range(0.02..0.98), rng.random_range(0.02..0.98)];
            if (x[0] - t).abs() < 0.02 {
                continue;
            }
            anchors += 1;
            for p in [2.0, f64::INFINITY] {
                let res = certify(&x, None, &model, &sm, p, f64::INFINITY, &tight_cfg()).unwrap();
                assert!(res.converged, "t={t} x={x:?} p={p}");
                let want = (x[0] - t).abs();
                assert!(
                    (res.radius - want).abs() <= 1e-6,
                    "t={t} x={x:?} p={p}: R={} want {want}",
                    res.radius
                );
            }
        }
    }
    let dt = t0.elapsed();
    assert!(dt < Duration::from_secs(5), "took {dt:?}");
    println!("[PASS] criterion 4: analytic certification ({dt:?})");
}

#[test]
fn criterion_05_soundness_vs_oracle() {
    let fx = &*MOONS;
    let t0 = Instant::now();
    let cfg = OracleConfig::for_dim(2).unwrap();
    let slack = grid_diagonal(2, cfg.grid_resolution, 2.0).unwrap();

    let mut checked = 0usize;
    let mut violations = 0usize;
    for (sm, results) in [(&fx.sm1, &fx.results_n1), (&fx.sm4, &fx.results_n4)] {
        let classify = |z: &[f64]| Ok(argmax(&sm.eval_multi(z)?));
        for r in results.iter().filter(|r| r.converged && r.radius > 0.0) {
            let found = nearest_boundary_grid(&classify, &r.anchor, &cfg).unwrap();
            let hit = found.expect("moons smoother has a boundary in the box");
            checked += 1;
            if hit.distance < r.radius - slack {
                violations += 1;
                eprintln!(
                    "anchor {:?}: oracle {} < certified {} - {slack}",
                    r.anchor, hit.distance, r.radius
                );
            }
        }
    }
    assert!(checked > 0);
    assert_eq!(violations, 0, "{violations}/{checked} unsound radii");

    let dt = t0.elapsed();
    assert!(dt < Duration::from_secs(300), "took {dt:?}");
    println!("[PASS] criterion 5: oracle soundness ({checked} radii, 0 violations, {dt:?})");
}

#[test]
fn criterion_06_proposition1_sampling() {
    let fx = &*MOONS;
    let t0 = Instant::now();
    let mut rng = seeded(606);

    let mut clean = 0usize;
    let mut total = 0usize;
    for r in fx
        .results_n4
        .iter()
        .filter(|r| r.converged && r.radius > 0.0)
    {
        let check = proposition1_check(r, &fx.sm4, 1000, 0.999, &mut rng).unwrap();
        total += 1;
        if check.violations == 0 {
            clean += 1;
        } else {
            // Exceptions must be explained by residual slack, not by a bad
            // radius from a clean root.
            assert!(
                2.0 * r.residual_norm_sq > 1.49e-8,
                "anchor {:?} flipped {} times with residual {}",
                r.anchor,
                check.violations,
                r.residual_norm_sq
            );
        }
    }
    assert!(total > 0);
    let rate = clean as f64 / total as f64;
    assert!(rate >= 0.95, "only {clean}/{total} points are flip-free");

    let dt = t0.elapsed();
    assert!(dt < Duration::from_secs(300), "took {dt:?}");
    println!("[PASS] criterion 6: proposition-1 sampling ({clean}/{total} clean, {dt:?})");
}

#[test]
fn criterion_07_empirical_upper_bound() {
    let fx = &*MOONS;
    let t0 = Instant::now();
    let target = SmoothedFeatureTarget::new(&fx.sm4);

    let mut held = 0usize;
    let mut total = 0usize;
    for r in fx
        .results_n4
        .iter()
        .filter(|r| r.converged && r.radius > 0.0)
    {
        let budgets: Vec<f64> = [0.25, 0.5, 0.75, 0.9, 0.99]
            .iter()
            .map(|f| f * r.radius)
            .collect();
        let cfg = AttackConfig {
            norm: 2.0,
            epsilon: budgets[budgets.len() - 1],
            steps: 60,
            step_size: None,
            space: AttackSpace::Feature,
        };
        let found =
            empirical_min_perturbation(&target, &r.anchor, r.prediction, &budgets, &cfg).unwrap();
        total += 1;
        if found.is_none() {
            held += 1;
        }
    }
    assert!(total > 0);
    let rate = held as f64 / total as f64;
    assert!(
        rate >= 0.98,
        "PGD beat the certificate on {}/{total} points",
        total - held
    );

    let dt = t0.elapsed();
    assert!(dt < Duration::from_secs(300), "took {dt:?}");
    println!("[PASS] criterion 7: empirical upper bound ({held}/{total} held, {dt:?})");
}

#[test]
fn criterion_08_c_sweep() {
    let fx = &*MOONS;
    let t0 = Instant::now();
    let cfg = tight_cfg();
    let low = certify_dataset(&fx.test, &fx.model, &fx.sm4, 2.0, 2.0, &cfg).unwrap();
    let high = certify_dataset(&fx.test, &fx.model, &fx.sm4, 2.0, 10.0, &cfg).unwrap();

    let mut sum_low = 0.0;
    let mut sum_high = 0.0;
    let mut count = 0usize;
    for (a, b) in low.iter().zip(&high) {
        if a.converged && b.converged {
            sum_low += a.radius;
            sum_high += b.radius;
            count += 1;
        }
    }
    assert!(count > 0);
    let (mean_low, mean_high) = (sum_low / count as f64, sum_high / count as f64);
    assert!(
        mean_high >= mean_low,
        "mean radius C=10 ({mean_high}) < C=2 ({mean_low})"
    );

    let dt = t0.elapsed();
    assert!(dt < Duration::from_secs(120), "took {dt:?}");
    println!(
        "[PASS] criterion 8: C-sweep (mean C=2 {mean_low:.4} <= mean C=10 {mean_high:.4}, {dt:?})"
    );
}

#[test]
fn criterion_09_n_sweep() {
    let t0 = Instant::now();
    // Fixed demo head with a curved boundary; an affine head would make
    // every degree agree with the base raster and test nothing.
    let mut rng = seeded(909);
    let hidden = DenseLayer {
        weight: DMatrix::from_fn(6, 2, |_, _| rng.random_range(-6.0..6.0)),
        bias: DVector::from_fn(6, |_, _| rng.random_range(-3.0..3.0)),
        act: Activation::Sigmoid,
    };
    let out = DenseLayer {
        weight: DMatrix::from_fn(2, 6, |_, _| rng.random_range(-2.0..2.0)),
        bias: DVector::zeros(2),
        act: Activation::Id,
    };
    let model = MlpModel::new(vec![hidden, out], 0).unwrap();

    let res = 64usize;
    let mut fractions = Vec::new();
    for n in [1usize, 4, 16, 64] {
        let sm = build_head_smoother(&model, n).unwrap();
        let mut differ = 0usize;
        for i in 0..res {
            for j in 0..res {
                let z = [(i as f64 + 0.5) / res as f64, (j as f64 + 0.5) / res as f64];
                let base = argmax(&model.head_logits(&z).unwrap());
                let smooth = argmax(&sm.eval_multi(&z).unwrap());
                differ += usize::from(base != smooth);
            }
        }
        fractions.push(differ as f64 / (res * res) as f64);
    }
    assert!(
        fractions[0] > 0.0,
        "degree 1 already matches; fixture is too tame"
    );
    for w in fractions.windows(2) {
        assert!(
            w[1] <= w[0],
            "disagreement rose along the degree sweep: {fractions:?}"
        );
    }

    let dt = t0.elapsed();
    assert!(dt < Duration::from_secs(120), "took {dt:?}");
    println!("[PASS] criterion 9: n-sweep disagreement {fractions:?} ({dt:?})");
}

#[test]
fn criterion_10_regression_demo() {
    let t0 = Instant::now();
    let mut rng = seeded(1010);
    let data = noisy_sine(64, 0.15, &mut rng);
    let cfg = TrainConfig {
        epochs: 4000,
        learning_rate: 0.1,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let base = train_regressor(&data, &[48, 48], &cfg, &mut rng).unwrap();
    let sm = BernsteinSmoother::precompute_grid(
        |x| base.logits(&[x[0]]).expect("regressor evaluation"),
        8,
        1,
        1,
    )
    .unwrap();

    let grid = 256usize;
    let tv = |f: &dyn Fn(f64) -> f64| -> f64 {
        let mut total = 0.0;
        let mut prev = f(0.0);
        for i in 1..grid {
            let cur = f(i as f64 / (grid - 1) as f64);
            total += (cur - prev).abs();
            prev = cur;
        }
        total
    };
    let tv_base = tv(&|x| base.logits(&[x]).unwrap()[0]);
    let tv_smooth = tv(&|x| sm.eval_multi(&[x]).unwrap()[0]);
    assert!(
        tv_smooth <= tv_base,
        "smoothing raised total variation: {tv_smooth} > {tv_base}"
    );

    let dt = t0.elapsed();
    assert!(dt < Duration::from_secs(60), "took {dt:?}");
    println!("[PASS] criterion 10: regression demo (TV {tv_base:.3} -> {tv_smooth:.3}, {dt:?})");
}

#[test]
fn criterion_11_determinism() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_berncert");
    let run = |args: &[&str]| {
        let out = std::process::Command::new(bin)
            .args(args)
            .current_dir(dir.path())
            .output()
            .expect("spawn berncert");
        assert!(
            out.status.success(),
            "berncert {args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    };
    run(&[
        "synth",
        "two-moons",
        "--out",
        "d.csv",
        "--samples",
        "80",
        "--noise",
        "0.08",
        "--seed",
        "7",
    ]);
    run(&[
        "train", "d.csv", "--out", "m.json", "--epochs", "300", "--seed", "7",
    ]);
    for out in ["r1.csv", "r2.csv"] {
        run(&[
            "certify", "m.json", "d.csv", "--out", out, "--n", "4", "--seed", "7", "--jobs", "4",
        ]);
    }
    let a = std::fs::read(dir.path().join("r1.csv")).unwrap();
    let b = std::fs::read(dir.path().join("r2.csv")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b, "repeated certify runs differ");

    let dt = t0.elapsed();
    println!(
        "[PASS] criterion 11: determinism ({} byte CSV, {dt:?})",
        a.len()
    );
}

#[test]
fn criterion_12_throughput() {
    // d=5 features into K=10 classes; degree 1 keeps the grid at 2^5.
    let weight = DMatrix::from_fn(10, 5, |r, c| ((r * 5 + c) % 7) as f64 / 7.0 - 0.4);
    let bias = DVector::from_fn(10, |r, _| r as f64 * 0.05);
    let layer = DenseLayer {
        weight,
        bias,
        act: Activation::Id,
    };
    let model = MlpModel::new(vec![layer], 0).unwrap();
    let sm = build_head_smoother(&model, 1).unwrap();
    let anchor = [0.3, 0.6, 0.4, 0.55, 0.45];

    let t0 = Instant::now();
    let res = certify(
        &anchor,
        None,
        &model,
        &sm,
        2.0,
        f64::INFINITY,
        &SolverConfig::default(),
    )
    .unwrap();
    let dt = t0.elapsed();
    assert!(res.radius.is_finite());
    assert!(dt < Duration::from_secs(1), "took {dt:?}");
    println!(
        "[PASS] criterion 12: throughput (one d=5 K=10 example in {dt:?}, R={:.4})",
        res.radius
    );
}
