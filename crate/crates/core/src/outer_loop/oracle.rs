//! Projected smoothed descent against a synthetic unbiased hypergradient
//! oracle on an analytic problem, where the smoothness constant, the
//! objective bound and the function variation are all known exactly.

use std::io::Write;

use super::project::{Constraint, OuterParams};
use crate::error::{Error, Result};
use crate::numkit::{norm_sq, Rng};
use crate::smoother::{HypergradWindow, RegretLedger, RoundDiagnostics};

/// A sequence of outer objectives `F_t` with closed-form gradients.
pub trait AnalyticProblem {
    fn dim(&self) -> usize;
    fn value(&self, t: u64, lambda: &[f64]) -> f64;
    fn grad(&self, t: u64, lambda: &[f64]) -> Vec<f64>;
    /// Lipschitz constant of `∇F_t`.
    fn smoothness(&self) -> f64;
}

/// `F_t(λ) = (L/2)‖λ − c_t‖²` with `c_t = offset + amplitude·sin(ω t)·𝟙`.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftingQuadratic {
    pub curvature: f64,
    pub amplitude: f64,
    pub omega: f64,
    pub offset: Vec<f64>,
}

impl DriftingQuadratic {
    pub fn new(dim: usize, curvature: f64, amplitude: f64, omega: f64) -> Self {
        Self {
            curvature,
            amplitude,
            omega,
            offset: vec![0.0; dim],
        }
    }

    pub fn stationary(center: Vec<f64>, curvature: f64) -> Self {
        Self {
            curvature,
            amplitude: 0.0,
            omega: 0.0,
            offset: center,
        }
    }

    pub fn center(&self, t: u64) -> Vec<f64> {
        let s = self.amplitude * (self.omega * t as f64).sin();
        self.offset.iter().map(|o| o + s).collect()
    }

    /// `sup |F_t(λ)|` over `t ∈ 1..=rounds + 1` and `λ ∈ [−r, r]^d`.
    pub fn q_over_box(&self, radius: f64, rounds: u64) -> f64 {
        (1..=rounds + 1)
            .map(|t| {
                let far: f64 = self
                    .center(t)
                    .iter()
                    .map(|c| (radius + c.abs()).powi(2))
                    .sum();
                0.5 * self.curvature * far
            })
            .fold(0.0, f64::max)
    }

    /// `Σ_{t=1}^{T} sup_λ |F_{t+1}(λ) − F_t(λ)|` over `λ ∈ [−r, r]^d`.
    /// The difference is affine in `λ`, so the supremum sits on a corner:
    /// `(L/2)(2r‖c_t − c_{t+1}‖₁ + |‖c_{t+1}‖² − ‖c_t‖²|)`.
    pub fn v1t_over_box(&self, radius: f64, rounds: u64) -> f64 {
        (1..=rounds)
            .map(|t| {
                let c = self.center(t);
                let c1 = self.center(t + 1);
                let l1: f64 = c.iter().zip(&c1).map(|(a, b)| (a - b).abs()).sum();
                0.5 * self.curvature * (2.0 * radius * l1 + (norm_sq(&c1) - norm_sq(&c)).abs())
            })
            .sum()
    }
}

impl AnalyticProblem for DriftingQuadratic {
    fn dim(&self) -> usize {
        self.offset.len()
    }

    fn value(&self, t: u64, lambda: &[f64]) -> f64 {
        let c = self.center(t);
        0.5 * self.curvature
            * lambda
                .iter()
                .zip(&c)
                .map(|(l, c)| (l - c).powi(2))
                .sum::<f64>()
    }

    fn grad(&self, t: u64, lambda: &[f64]) -> Vec<f64> {
        let c = self.center(t);
        lambda
            .iter()
            .zip(&c)
            .map(|(l, c)| self.curvature * (l - c))
            .collect()
    }

    fn smoothness(&self) -> f64 {
        self.curvature
    }
}

/// Unbiased oracle: the true gradient plus i.i.d. `N(0, sigma_f²)` noise per
/// coordinate, so the total variance is `dim · sigma_f²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleSpec {
    pub sigma_f: f64,
}

impl OracleSpec {
    pub fn query<P: AnalyticProblem + ?Sized>(
        &self,
        problem: &P,
        t: u64,
        lambda: &[f64],
        rng: &mut Rng,
    ) -> Vec<f64> {
        problem
            .grad(t, lambda)
            .into_iter()
            .map(|g| g + self.sigma_f * rng.gaussian())
            .collect()
    }

    pub fn total_variance(&self, dim: usize) -> f64 {
        dim as f64 * self.sigma_f * self.sigma_f
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoremConstants {
    pub l: f64,
    pub q: f64,
    /// Bound on `E‖estimate − ∇F_t‖²`.
    pub sigma_f_sq: f64,
    pub w: usize,
    pub t: u64,
    pub v1t: f64,
}

impl TheoremConstants {
    /// `2L(2TQ/w + V_{1,T} + Tσ_f²/(2Lw))`.
    pub fn bound(&self) -> f64 {
        let (t, w) = (self.t as f64, self.w as f64);
        2.0 * self.l * (2.0 * t * self.q / w + self.v1t + t * self.sigma_f_sq / (2.0 * self.l * w))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleRun {
    /// Regret of the smoothed estimates that drove the updates.
    pub ledger: RegretLedger,
    /// `‖(1/w) Σ_i ∇F_{t−i}(λ_{t−i})‖²` per round.
    pub true_terms: Vec<f64>,
    /// `λ_1, …, λ_{T+1}`.
    pub trajectory: Vec<Vec<f64>>,
}

impl OracleRun {
    pub fn true_blr(&self) -> f64 {
        self.true_terms.iter().sum()
    }

    /// CSV `t,true_blr_term,true_blr_cum`.
    pub fn write_true_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,true_blr_term,true_blr_cum")?;
        let mut cum = 0.0;
        for (i, term) in self.true_terms.iter().enumerate() {
            cum += term;
            writeln!(out, "{},{},{}", i + 1, term, cum)?;
        }
        Ok(())
    }
}

/// `T` rounds of `λ_{t+1} = Π(λ_t − α·smoothed_t)`. Round `t` draws its
/// noise from `rng.fork_indexed("oracle-noise", t)`.
#[allow(clippy::too_many_arguments)]
pub fn run_oracle_mode<P: AnalyticProblem + ?Sized>(
    problem: &P,
    spec: &OracleSpec,
    lambda1: Vec<f64>,
    constraint: Constraint,
    alpha: f64,
    w: usize,
    rounds: u64,
    rng: &Rng,
) -> Result<OracleRun> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "oracle step size must be > 0, got {alpha}"
        )));
    }
    if lambda1.len() != problem.dim() {
        return Err(Error::ShapeMismatch {
            context: "run_oracle_mode lambda1",
            expected: problem.dim(),
            got: lambda1.len(),
        });
    }
    let mut params = OuterParams::new(lambda1, constraint, alpha)?;
    let mut est_window = HypergradWindow::new(w)?;
    let mut true_window = HypergradWindow::new(w)?;
    let mut ledger = RegretLedger::new();
    let mut true_terms = Vec::with_capacity(rounds as usize);
    let mut trajectory = vec![params.lambda().to_vec()];
    for t in 1..=rounds {
        let lambda = params.lambda().to_vec();
        let truth = problem.grad(t, &lambda);
        let mut noise = rng.fork_indexed("oracle-noise", t);
        let est = spec.query(problem, t, &lambda, &mut noise);
        let smoothed = est_window.push_and_smooth(&est)?;
        let true_smoothed = true_window.push_and_smooth(&truth)?;
        true_terms.push(norm_sq(&true_smoothed));
        let diag = RoundDiagnostics {
            outer_loss: problem.value(t, &lambda),
            g_exp_norm: norm_sq(&est).sqrt(),
            g_imp_norm: 0.0,
            inner_err_proxy: 0.0,
            adjoint_err_proxy: 0.0,
            lambda,
        };
        ledger.blr_update(t, &smoothed, diag)?;
        params.step(&smoothed).map_err(|e| match e {
            Error::NonFinite(_) => Error::Diverged { round: t },
            other => other,
        })?;
        trajectory.push(params.lambda().to_vec());
    }
    Ok(OracleRun {
        ledger,
        true_terms,
        trajectory,
    })
}
