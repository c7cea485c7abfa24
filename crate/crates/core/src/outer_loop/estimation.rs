//! Projected smoothed descent on estimated hypergradients of the drifting
//! regression problem.
//!
//! Per round `t`: draw the round's data, estimate `∇̂F_t(λ_t)` with a
//! [`RoundEstimator`], smooth over the last `w` estimates, log, step and
//! project. Round `t` reads data from the run stream as described in
//! [`crate::drift`] and gives the estimator the sub-stream
//! `("hypergrad", t)`.

use super::project::{Constraint, OuterParams};
use crate::drift::{sample_round, DgpConfig, DriftSchedule, RoundData};
use crate::error::{Error, Result};
use crate::funcgrad::{
    func_grad, func_grad_exact, AdjointConfig, Hypergrad, InnerConfig, Objective,
};
use crate::losses::{empirical_loss, SquaredOuterLoss, WeightedSquaredInnerLoss};
use crate::models::{LinearPredictor, Predictor, Trainable};
use crate::numkit::{norm, Rng};
use crate::smoother::{variance_probe, HypergradWindow, RegretLedger, RoundDiagnostics};

#[derive(Debug, Clone, PartialEq)]
pub struct RoundEstimate {
    pub hypergrad: Hypergrad,
    /// Outer empirical loss of the fitted inner model.
    pub outer_loss: f64,
    pub inner_err_proxy: f64,
    pub adjoint_err_proxy: f64,
}

/// Produces one hypergradient estimate per round, carrying whatever model
/// state it needs between rounds.
pub trait RoundEstimator: Clone {
    fn estimate(
        &mut self,
        lambda: &[f64],
        data: &RoundData,
        rng: &mut Rng,
    ) -> Result<RoundEstimate>;
}

fn round_objective<'a>(
    inner: &'a crate::losses::Batch,
    outer: &'a crate::losses::Batch,
) -> Objective<'a> {
    Objective {
        inner_loss: &WeightedSquaredInnerLoss,
        outer_loss: &SquaredOuterLoss,
        inner,
        outer,
    }
}

/// Fits inner and adjoint models by iterative optimisation, optionally
/// warm-starting both from the previous round.
#[derive(Debug, Clone)]
pub struct FunctionalEstimator<P, Q> {
    pub h: Trainable<P>,
    pub a: Trainable<Q>,
    h_init: Trainable<P>,
    a_init: Trainable<Q>,
    pub inner: InnerConfig,
    pub adjoint: AdjointConfig,
    pub warm_start: bool,
    /// Fraction of each round batch used for the final hypergradient sum.
    pub fraction: f64,
}

impl<P: Predictor, Q: Predictor> FunctionalEstimator<P, Q> {
    pub fn new(h: P, a: Q, inner: InnerConfig, adjoint: AdjointConfig) -> Result<Self> {
        inner.validate()?;
        adjoint.validate()?;
        let h = Trainable::new(h, inner.optimizer);
        let a = Trainable::new(a, adjoint.optimizer);
        Ok(Self {
            h_init: h.clone(),
            a_init: a.clone(),
            h,
            a,
            inner,
            adjoint,
            warm_start: true,
            fraction: 1.0,
        })
    }
}

impl<P: Predictor, Q: Predictor> RoundEstimator for FunctionalEstimator<P, Q> {
    fn estimate(
        &mut self,
        lambda: &[f64],
        data: &RoundData,
        rng: &mut Rng,
    ) -> Result<RoundEstimate> {
        if !self.warm_start {
            self.h = self.h_init.clone();
            self.a = self.a_init.clone();
        }
        let inner = data.inner_batch()?;
        let outer = data.outer_batch()?;
        let obj = round_objective(&inner, &outer);
        let hg = func_grad(
            lambda,
            &mut self.h,
            &mut self.a,
            &obj,
            &self.inner,
            &self.adjoint,
            self.fraction,
            rng,
        )?;
        let outer_loss = empirical_loss(&SquaredOuterLoss, lambda, &self.h.model, &outer)?;
        Ok(RoundEstimate {
            inner_err_proxy: hg.inner.final_grad_norm,
            adjoint_err_proxy: hg.adjoint.final_grad_norm,
            hypergrad: hg,
            outer_loss,
        })
    }
}

/// Solves both subproblems exactly over linear models.
#[derive(Debug, Clone)]
pub struct ExactLinearEstimator {
    pub h: LinearPredictor,
    pub a: LinearPredictor,
    pub ridge: f64,
}

impl RoundEstimator for ExactLinearEstimator {
    fn estimate(
        &mut self,
        lambda: &[f64],
        data: &RoundData,
        _rng: &mut Rng,
    ) -> Result<RoundEstimate> {
        let inner = data.inner_batch()?;
        let outer = data.outer_batch()?;
        let obj = round_objective(&inner, &outer);
        let (hg, h, a) = func_grad_exact(lambda, &self.h, &self.a, &obj, self.ridge, self.ridge)?;
        let outer_loss = empirical_loss(&SquaredOuterLoss, lambda, &h, &outer)?;
        self.h = h;
        self.a = a;
        Ok(RoundEstimate {
            inner_err_proxy: hg.inner.final_grad_norm,
            adjoint_err_proxy: hg.adjoint.final_grad_norm,
            hypergrad: hg,
            outer_loss,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    /// Replicates per probe; 0 disables probing.
    pub replicates: usize,
    /// Probe on rounds that are multiples of this.
    pub every: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            replicates: 0,
            every: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRow {
    pub t: u64,
    pub variance: Vec<f64>,
}

impl ProbeRow {
    pub fn mean_variance(&self) -> f64 {
        if self.variance.is_empty() {
            return 0.0;
        }
        self.variance.iter().sum::<f64>() / self.variance.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimationConfig {
    pub rounds: u64,
    /// Smoothing window `w`.
    pub window: usize,
    pub alpha: f64,
    pub constraint: Constraint,
    /// Initial weights, one per data slot.
    pub lambda0: Vec<f64>,
    pub dgp: DgpConfig,
    pub probe: ProbeConfig,
}

impl EstimationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::InvalidArgument("window must be >= 1".into()));
        }
        if self.lambda0.len() != self.dgp.window {
            return Err(Error::ShapeMismatch {
                context: "lambda0 vs data slots",
                expected: self.dgp.window,
                got: self.lambda0.len(),
            });
        }
        if self.probe.replicates == 1 || (self.probe.replicates > 0 && self.probe.every == 0) {
            return Err(Error::InvalidArgument(
                "probe needs >= 2 replicates and every >= 1".into(),
            ));
        }
        self.constraint.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimationRun {
    pub ledger: RegretLedger,
    pub probes: Vec<ProbeRow>,
}

fn diverged(t: u64) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(_) => Error::Diverged { round: t },
        other => other,
    }
}

fn diagnostics(est: &RoundEstimate, lambda: &[f64]) -> RoundDiagnostics {
    RoundDiagnostics {
        outer_loss: est.outer_loss,
        g_exp_norm: norm(&est.hypergrad.g_exp),
        g_imp_norm: norm(&est.hypergrad.g_imp),
        inner_err_proxy: est.inner_err_proxy,
        adjoint_err_proxy: est.adjoint_err_proxy,
        lambda: lambda.to_vec(),
    }
}

/// Variance of the smoothed estimator at frozen `(λ, models)`: each
/// replicate re-estimates the last `w` rounds on fresh data and averages
/// with divisor `w`.
fn probe_round<E: RoundEstimator>(
    schedule: &DriftSchedule,
    cfg: &EstimationConfig,
    w: usize,
    estimator: &E,
    lambda: &[f64],
    t: u64,
    rng: &Rng,
) -> Result<ProbeRow> {
    let base = rng.fork_indexed("probe-round", t);
    let rep = variance_probe(cfg.probe.replicates, &base, |stream| {
        let mut sum = vec![0.0; lambda.len()];
        for i in 0..w as u64 {
            if i >= t {
                break;
            }
            let data = sample_round(schedule, &stream.fork_indexed("data", i), t - i, &cfg.dgp)?;
            let mut e = estimator.clone();
            let g = e.estimate(lambda, &data, &mut stream.fork_indexed("hypergrad", i))?;
            for (s, x) in sum.iter_mut().zip(&g.hypergrad.total) {
                *s += x;
            }
        }
        Ok(sum.into_iter().map(|s| s / w as f64).collect())
    })?;
    Ok(ProbeRow {
        t,
        variance: rep.variance,
    })
}

fn probe_due(cfg: &EstimationConfig, t: u64) -> bool {
    cfg.probe.replicates >= 2 && t.is_multiple_of(cfg.probe.every)
}

/// Smoothed online descent with window `cfg.window`.
pub fn run_estimation_mode<E: RoundEstimator>(
    schedule: &DriftSchedule,
    cfg: &EstimationConfig,
    mut estimator: E,
    rng: &Rng,
) -> Result<EstimationRun> {
    cfg.validate()?;
    let mut params = OuterParams::new(cfg.lambda0.clone(), cfg.constraint, cfg.alpha)?;
    let mut window = HypergradWindow::new(cfg.window)?;
    let mut ledger = RegretLedger::new();
    let mut probes = Vec::new();
    for t in 1..=cfg.rounds {
        let lambda = params.lambda().to_vec();
        let data = sample_round(schedule, rng, t, &cfg.dgp)?;
        let est = estimator
            .estimate(&lambda, &data, &mut rng.fork_indexed("hypergrad", t))
            .map_err(diverged(t))?;
        let smoothed = window
            .push_and_smooth(&est.hypergrad.total)
            .map_err(diverged(t))?;
        if probe_due(cfg, t) {
            probes.push(probe_round(
                schedule, cfg, cfg.window, &estimator, &lambda, t, rng,
            )?);
        }
        ledger.blr_update(t, &smoothed, diagnostics(&est, &lambda))?;
        params.step(&smoothed).map_err(diverged(t))?;
    }
    Ok(EstimationRun { ledger, probes })
}

/// Unsmoothed online descent: each round steps on its own estimate.
/// `cfg.window` is ignored.
pub fn run_fbo_baseline<E: RoundEstimator>(
    schedule: &DriftSchedule,
    cfg: &EstimationConfig,
    mut estimator: E,
    rng: &Rng,
) -> Result<EstimationRun> {
    cfg.validate()?;
    let mut params = OuterParams::new(cfg.lambda0.clone(), cfg.constraint, cfg.alpha)?;
    let mut ledger = RegretLedger::new();
    let mut probes = Vec::new();
    for t in 1..=cfg.rounds {
        let lambda = params.lambda().to_vec();
        let data = sample_round(schedule, rng, t, &cfg.dgp)?;
        let est = estimator
            .estimate(&lambda, &data, &mut rng.fork_indexed("hypergrad", t))
            .map_err(diverged(t))?;
        let g = &est.hypergrad.total;
        if probe_due(cfg, t) {
            probes.push(probe_round(schedule, cfg, 1, &estimator, &lambda, t, rng)?);
        }
        ledger.blr_update(t, g, diagnostics(&est, &lambda))?;
        params.step(g).map_err(diverged(t))?;
    }
    Ok(EstimationRun { ledger, probes })
}
