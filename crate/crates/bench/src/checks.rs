//! Analytic and structural checks behind the `check` subcommand.
//!
//! Each check returns a [`CheckOutcome`] rather than panicking so the CLI
//! can print one line per check and keep going.

use std::f64::consts::PI;

use smoothfbo::drift::{DgpConfig, DriftKind, DriftSchedule};
use smoothfbo::funcgrad::{func_grad_exact, solve_inner_linear, Objective, SolverConfig};
use smoothfbo::losses::{
    empirical_loss, Batch, PointwiseLoss, Sample, SquaredOuterLoss, WeightedSquaredInnerLoss,
};
use smoothfbo::models::{
    init_network, FeatureMap, InitScheme, InitSpec, LinearPredictor, OptimizerKind,
};
use smoothfbo::numkit::{gaussian_matrix, mlp_backward, mlp_forward, Activation, GradTape, Rng};
use smoothfbo::outer_loop::{
    linear_reduction_check, run_estimation_mode, run_fbo_baseline, run_oracle_mode, Constraint,
    DriftingQuadratic, EstimationConfig, FunctionalEstimator, OracleSpec, ProbeConfig,
    TheoremConstants,
};
use smoothfbo::smoother::{variance_probe, HypergradWindow};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self {
            name,
            passed,
            detail,
        }
    }

    fn error(name: &'static str, e: impl std::fmt::Display) -> Self {
        Self::new(name, false, format!("error: {e}"))
    }

    pub fn line(&self) -> String {
        format!(
            "{} {}: {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

fn scalar_model() -> LinearPredictor {
    LinearPredictor::zeros(FeatureMap::identity(1, false))
}

fn two_point() -> (Batch, Batch) {
    let inner = Batch::slot_means(vec![
        Sample::new(vec![1.0], vec![1.0], 0),
        Sample::new(vec![2.0], vec![3.0], 1),
    ])
    .expect("non-empty");
    let outer = Batch::uniform(vec![Sample::new(vec![1.0], vec![1.0], 0)]).expect("non-empty");
    (inner, outer)
}

/// Exact hypergradient of the two-point weighted least-squares problem at
/// `λ = (1, 1)` against `(−0.064, 0.064)` and central differences.
pub fn two_point_hypergradient() -> CheckOutcome {
    const NAME: &str = "two-point hypergradient";
    let run = || -> smoothfbo::Result<(Vec<f64>, Vec<f64>)> {
        let (inner, outer) = two_point();
        let obj = Objective {
            inner_loss: &WeightedSquaredInnerLoss,
            outer_loss: &SquaredOuterLoss,
            inner: &inner,
            outer: &outer,
        };
        let (hg, _, _) = func_grad_exact(
            &[1.0, 1.0],
            &scalar_model(),
            &scalar_model(),
            &obj,
            0.0,
            0.0,
        )?;
        let value = |l: &[f64]| -> smoothfbo::Result<f64> {
            let h = solve_inner_linear(l, &scalar_model(), &WeightedSquaredInnerLoss, &inner, 0.0)?;
            empirical_loss(&SquaredOuterLoss, l, &h, &outer)
        };
        let eps = 1e-5;
        let mut fd = Vec::new();
        for i in 0..2 {
            let (mut lp, mut lm) = (vec![1.0, 1.0], vec![1.0, 1.0]);
            lp[i] += eps;
            lm[i] -= eps;
            fd.push((value(&lp)? - value(&lm)?) / (2.0 * eps));
        }
        Ok((hg.total, fd))
    };
    match run() {
        Ok((g, fd)) => {
            let expect = [-0.064, 0.064];
            let abs_ok = g.iter().zip(expect).all(|(a, b)| (a - b).abs() <= 1e-9);
            let fd_ok = g
                .iter()
                .zip(&fd)
                .all(|(a, b)| (a - b).abs() <= 1e-4 * b.abs());
            CheckOutcome::new(
                NAME,
                abs_ok && fd_ok,
                format!("g = {g:?}, finite differences = {fd:?}"),
            )
        }
        Err(e) => CheckOutcome::error(NAME, e),
    }
}

/// Functional and parametric implicit hypergradients on random linear
/// instances.
pub fn linear_reduction(instances: usize, seed: u64) -> CheckOutcome {
    const NAME: &str = "functional = parametric on linear models";
    let base = Rng::new(seed);
    let mut worst = 0.0f64;
    for i in 0..instances as u64 {
        let mut rng = base.fork_indexed("instance", i);
        let (p, k, slots, n) = (3, 4, 3, 12);
        let phi = gaussian_matrix(&mut rng, k, p, 0.0, 1.0);
        let tmpl = LinearPredictor::zeros(FeatureMap::new(phi, true));
        let mut inner = Vec::new();
        for j in 0..n {
            let x: Vec<f64> = (0..p).map(|_| rng.gaussian()).collect();
            inner.push(Sample::new(x, vec![rng.gaussian()], j % slots));
        }
        let outer: Vec<Sample> = (0..6)
            .map(|_| {
                Sample::new(
                    (0..p).map(|_| rng.gaussian()).collect(),
                    vec![rng.gaussian()],
                    0,
                )
            })
            .collect();
        let lambda: Vec<f64> = (0..slots).map(|_| 0.2 + rng.uniform()).collect();
        let res = (|| {
            let inner = Batch::slot_means(inner)?;
            let outer = Batch::uniform(outer)?;
            let obj = Objective {
                inner_loss: &WeightedSquaredInnerLoss,
                outer_loss: &SquaredOuterLoss,
                inner: &inner,
                outer: &outer,
            };
            linear_reduction_check(&lambda, &tmpl, &obj, 1e-3)
        })();
        match res {
            Ok(r) => worst = worst.max(r.max_abs_diff()),
            Err(e) => return CheckOutcome::error(NAME, e),
        }
    }
    CheckOutcome::new(
        NAME,
        worst <= 1e-6,
        format!("{instances} instances, max |diff| = {worst:e}"),
    )
}

/// Mean per-coordinate variance of the window average of i.i.d. `N(0, 1)`
/// estimates, for each `w`.
pub fn smoothed_variance(w: usize, replicates: usize, seed: u64) -> smoothfbo::Result<f64> {
    let rng = Rng::new(seed).fork_indexed("variance-law", w as u64);
    let report = variance_probe(replicates, &rng, |stream| {
        let mut window = HypergradWindow::new(w)?;
        let mut out = Vec::new();
        for _ in 0..w {
            let g = [1.0 + stream.gaussian(), -2.0 + stream.gaussian()];
            out = window.push_and_smooth(&g)?;
        }
        Ok(out)
    })?;
    Ok(report.mean_variance())
}

pub fn variance_law(replicates: usize, seed: u64) -> CheckOutcome {
    const NAME: &str = "variance of the w-average is 1/w";
    let mut parts = Vec::new();
    let mut ok = true;
    for w in [1usize, 4, 16] {
        match smoothed_variance(w, replicates, seed) {
            Ok(v) => {
                let target = 1.0 / w as f64;
                let pass = (v - target).abs() <= 0.1 * target;
                ok &= pass;
                parts.push(format!("w={w}: {v:.4} (target {target:.4})"));
            }
            Err(e) => return CheckOutcome::error(NAME, e),
        }
    }
    CheckOutcome::new(NAME, ok, parts.join(", "))
}

/// Settings of the drifting-quadratic regret-bound check.
#[derive(Debug, Clone, Copy)]
pub struct BoundSetup {
    pub dim: usize,
    pub curvature: f64,
    pub amplitude: f64,
    pub omega: f64,
    pub sigma_f: f64,
    pub radius: f64,
    pub rounds: u64,
    pub seeds: u64,
}

impl Default for BoundSetup {
    fn default() -> Self {
        Self {
            dim: 2,
            curvature: 1.0,
            amplitude: 1.0,
            omega: 2.0 * PI / 200.0,
            sigma_f: 0.5,
            radius: 5.0,
            rounds: 2000,
            seeds: 20,
        }
    }
}

/// `(w, largest true smoothed regret over seeds, bound)` per window.
pub fn regret_bound_table(
    setup: &BoundSetup,
    windows: &[usize],
) -> smoothfbo::Result<Vec<(usize, f64, f64)>> {
    let p = DriftingQuadratic::new(setup.dim, setup.curvature, setup.amplitude, setup.omega);
    let spec = OracleSpec {
        sigma_f: setup.sigma_f,
    };
    let r = setup.radius;
    let q = p.q_over_box(r, setup.rounds);
    let v1t = p.v1t_over_box(r, setup.rounds);
    let mut out = Vec::new();
    for &w in windows {
        let bound = TheoremConstants {
            l: setup.curvature,
            q,
            sigma_f_sq: spec.total_variance(setup.dim),
            w,
            t: setup.rounds,
            v1t,
        }
        .bound();
        let mut worst = 0.0f64;
        for seed in 1..=setup.seeds {
            let run = run_oracle_mode(
                &p,
                &spec,
                vec![r; setup.dim],
                Constraint::Box { lo: -r, hi: r },
                1.0 / setup.curvature,
                w,
                setup.rounds,
                &Rng::new(seed),
            )?;
            worst = worst.max(run.true_blr());
        }
        out.push((w, worst, bound));
    }
    Ok(out)
}

pub fn regret_bound() -> CheckOutcome {
    const NAME: &str = "regret bound on the drifting quadratic";
    match regret_bound_table(&BoundSetup::default(), &[1, 10, 100]) {
        Ok(rows) => {
            let ok = rows.iter().all(|(_, m, b)| m <= b);
            let detail = rows
                .iter()
                .map(|(w, m, b)| format!("w={w}: {m:.1} <= {b:.1}"))
                .collect::<Vec<_>>()
                .join(", ");
            CheckOutcome::new(NAME, ok, detail)
        }
        Err(e) => CheckOutcome::error(NAME, e),
    }
}

/// Benchmark estimator with the default architecture and solver settings.
pub fn default_estimator(
    input_dim: usize,
    rng: &Rng,
) -> smoothfbo::Result<FunctionalEstimator<smoothfbo::numkit::Network, smoothfbo::numkit::Network>>
{
    let dims = vec![input_dim, 32, 32, 1];
    let h = init_network(
        &InitSpec::new(InitScheme::FanIn, "inner"),
        dims.clone(),
        Activation::Gelu,
        rng,
    )?;
    let a = init_network(
        &InitSpec::new(InitScheme::FanIn, "adjoint"),
        dims,
        Activation::Gelu,
        rng,
    )?;
    let solver = SolverConfig::new(5, 1e-4, 0.0, OptimizerKind::Adam);
    FunctionalEstimator::new(h, a, solver, solver)
}

/// Window-1 smoothing against the unsmoothed baseline, compared as CSV
/// bytes.
pub fn window_one_matches_baseline(rounds: u64, seed: u64) -> CheckOutcome {
    const NAME: &str = "w=1 equals unsmoothed baseline";
    let run = || -> smoothfbo::Result<(Vec<u8>, Vec<u8>)> {
        let rng = Rng::new(seed);
        let sched = DriftSchedule::random(
            DriftKind::Sinusoidal {
                beta: 1.0,
                omega: 2.0 * PI / 200.0,
            },
            8,
            &rng,
        )?;
        let est = default_estimator(8, &rng)?;
        let cfg = EstimationConfig {
            rounds,
            window: 1,
            alpha: 1e-3,
            constraint: Constraint::NonnegativeOrthant,
            lambda0: vec![1.0; 5],
            dgp: DgpConfig::default(),
            probe: ProbeConfig::default(),
        };
        let a = run_estimation_mode(&sched, &cfg, est.clone(), &rng)?;
        let b = run_fbo_baseline(&sched, &cfg, est, &rng)?;
        let (mut x, mut y) = (Vec::new(), Vec::new());
        a.ledger.write_csv(&mut x).expect("memory");
        b.ledger.write_csv(&mut y).expect("memory");
        Ok((x, y))
    };
    match run() {
        Ok((a, b)) => CheckOutcome::new(
            NAME,
            a == b,
            format!("{rounds} rounds, {} ledger bytes", a.len()),
        ),
        Err(e) => CheckOutcome::error(NAME, e),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckReport {
    pub coords: usize,
    pub max_abs_diff: f64,
    /// Worst relative error among coordinates whose absolute difference
    /// exceeds 1e-8.
    pub worst_rel: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.worst_rel < 1e-5
    }
}

/// `mlp_backward` against central differences (step 1e-6) on `coords`
/// evenly spread parameters.
pub fn mlp_gradcheck(
    dims: &[usize],
    activation: Activation,
    coords: usize,
    seed: u64,
) -> smoothfbo::Result<GradcheckReport> {
    let rng = Rng::new(seed);
    let mut net = init_network(
        &InitSpec::new(InitScheme::Gaussian { std: 0.5 }, "gradcheck"),
        dims.to_vec(),
        activation,
        &rng,
    )?;
    let mut g = rng.fork("gradcheck-input");
    let x: Vec<f64> = (0..dims[0]).map(|_| g.gaussian()).collect();
    let out_dim = *dims.last().expect("non-empty dims");
    let cot: Vec<f64> = (0..out_dim).map(|_| g.gaussian()).collect();
    let mut tape = GradTape::new();
    mlp_forward(&net, &x, Some(&mut tape))?;
    let analytic = mlp_backward(&net, &mut tape, &cot)?.to_vec();
    let scalar = |net: &smoothfbo::numkit::Network| -> smoothfbo::Result<f64> {
        Ok(mlp_forward(net, &x, None)?
            .iter()
            .zip(&cot)
            .map(|(a, b)| a * b)
            .sum())
    };
    let n = net.num_params();
    let stride = (n / coords.max(1)).max(1);
    let eps = 1e-6;
    let mut report = GradcheckReport {
        coords: 0,
        max_abs_diff: 0.0,
        worst_rel: 0.0,
    };
    for i in (0..n).step_by(stride) {
        let orig = net.params()[i];
        net.params_mut()[i] = orig + eps;
        let fp = scalar(&net)?;
        net.params_mut()[i] = orig - eps;
        let fm = scalar(&net)?;
        net.params_mut()[i] = orig;
        let fd = (fp - fm) / (2.0 * eps);
        let diff = (analytic[i] - fd).abs();
        report.coords += 1;
        report.max_abs_diff = report.max_abs_diff.max(diff);
        if diff > 1e-8 {
            report.worst_rel = report.worst_rel.max(diff / analytic[i].abs().max(fd.abs()));
        }
    }
    Ok(report)
}

/// Worst relative error (floored at scale 1) of a loss's four derivatives
/// against central differences at step 1e-6 over `cases` random points.
pub fn loss_identity_error(
    loss: &dyn PointwiseLoss,
    cases: usize,
    seed: u64,
) -> smoothfbo::Result<f64> {
    let base = Rng::new(seed);
    let eps = 1e-6;
    let mut worst = 0.0f64;
    let mut note = |a: f64, b: f64| {
        worst = worst.max((a - b).abs() / a.abs().max(b.abs()).max(1.0));
    };
    for c in 0..cases as u64 {
        let mut rng = base.fork_indexed("case", c);
        let k = 1 + rng.below(4);
        let m = 1 + rng.below(3);
        let lambda: Vec<f64> = (0..k).map(|_| 2.0 * rng.uniform()).collect();
        let v: Vec<f64> = (0..m).map(|_| rng.gaussian()).collect();
        let s = Sample::new(
            vec![],
            (0..m).map(|_| rng.gaussian()).collect(),
            rng.below(k),
        );
        let d = loss.derivatives(&lambda, &v, &s)?;
        for j in 0..m {
            let (mut vp, mut vm) = (v.clone(), v.clone());
            vp[j] += eps;
            vm[j] -= eps;
            note(
                d.d_v[j],
                (loss.value(&lambda, &vp, &s)? - loss.value(&lambda, &vm, &s)?) / (2.0 * eps),
            );
            let (gp, gm) = (loss.d_v(&lambda, &vp, &s)?, loss.d_v(&lambda, &vm, &s)?);
            for i in 0..m {
                note(d.d2_v.get(i, j), (gp[i] - gm[i]) / (2.0 * eps));
            }
            let (lp, lm) = (
                loss.d_lambda(&lambda, &vp, &s)?,
                loss.d_lambda(&lambda, &vm, &s)?,
            );
            for i in 0..k {
                note(d.d2_lambda_v.get(i, j), (lp[i] - lm[i]) / (2.0 * eps));
            }
        }
        for i in 0..k {
            let (mut lp, mut lm) = (lambda.clone(), lambda.clone());
            lp[i] += eps;
            lm[i] -= eps;
            note(
                d.d_lambda[i],
                (loss.value(&lp, &v, &s)? - loss.value(&lm, &v, &s)?) / (2.0 * eps),
            );
        }
    }
    Ok(worst)
}

pub fn gradient_checks() -> CheckOutcome {
    const NAME: &str = "gradient checks";
    let run = || -> smoothfbo::Result<(GradcheckReport, f64, f64)> {
        let mlp = mlp_gradcheck(&[8, 32, 32, 1], Activation::Gelu, 64, 11)?;
        let inner = loss_identity_error(&WeightedSquaredInnerLoss, 1000, 12)?;
        let outer = loss_identity_error(&SquaredOuterLoss, 1000, 13)?;
        Ok((mlp, inner, outer))
    };
    match run() {
        Ok((mlp, inner, outer)) => CheckOutcome::new(
            NAME,
            mlp.passed() && mlp.coords >= 50 && inner < 1e-5 && outer < 1e-5,
            format!(
                "mlp {} coords, max abs diff {:.2e}, rel err {:.2e}; inner loss {inner:.2e}, outer loss {outer:.2e}",
                mlp.coords, mlp.max_abs_diff, mlp.worst_rel
            ),
        ),
        Err(e) => CheckOutcome::error(NAME, e),
    }
}

/// The quick suite run by `smoothfbo check`.
pub fn run_all() -> Vec<CheckOutcome> {
    vec![
        two_point_hypergradient(),
        linear_reduction(100, 1),
        variance_law(10_000, 1),
        regret_bound(),
        window_one_matches_baseline(200, 1),
        gradient_checks(),
    ]
}
