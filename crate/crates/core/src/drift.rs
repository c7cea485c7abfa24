//! Drifting single-neuron data-generating process.
//!
//! Targets are `y = σ(W_tᵀx + b_t) + ζ` with `x ~ N(0, I)` and
//! `ζ ~ N(0, noise_std²)`. The truth parameters `(W_t, b_t)` move along a
//! fixed unit direction in `ℝ^{d+1}`:
//!
//! - sinusoidal: `(W_t, b_t) = (W₀, b₀) + β·sin(ω t)·u`
//! - jump: a square wave, `(W₀, b₀)` on even intervals and
//!   `(W₀, b₀) + magnitude·u` on odd ones, switching at multiples of
//!   `interval`.
//!
//! Random streams (all forked from the run seed):
//! `("inputs", s)` / `("noise", s)` for the minibatch observed at time `s`,
//! and `("holdout-inputs", t)` / `("holdout-noise", t)` for the outer
//! holdout batch of round `t`. The minibatch of time `s` is the same object
//! in every window that contains it.

use std::io::Write;

use crate::error::{Error, Result};
use crate::losses::{Batch, Sample};
use crate::numkit::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DriftKind {
    Sinusoidal { beta: f64, omega: f64 },
    Jump { interval: u64, magnitude: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftSchedule {
    kind: DriftKind,
    w0: Vec<f64>,
    b0: f64,
    direction: Vec<f64>,
}

impl DriftSchedule {
    /// Explicit base point and direction (normalised here).
    pub fn with_direction(
        kind: DriftKind,
        w0: Vec<f64>,
        b0: f64,
        direction: Vec<f64>,
    ) -> Result<Self> {
        if direction.len() != w0.len() + 1 {
            return Err(Error::ShapeMismatch {
                context: "DriftSchedule direction",
                expected: w0.len() + 1,
                got: direction.len(),
            });
        }
        let n = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::InvalidArgument(
                "drift direction must be non-zero".into(),
            ));
        }
        if let DriftKind::Jump { interval: 0, .. } = kind {
            return Err(Error::InvalidArgument("jump interval must be >= 1".into()));
        }
        let direction = direction.into_iter().map(|v| v / n).collect();
        Ok(Self {
            kind,
            w0,
            b0,
            direction,
        })
    }

    /// Base point `W₀ ~ N(0, I/d)`, `b₀ = 0`, and a uniformly random unit
    /// direction, all drawn from `rng`'s `"truth-base"` and
    /// `"drift-direction"` sub-streams.
    pub fn random(kind: DriftKind, input_dim: usize, rng: &Rng) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::InvalidArgument("input_dim must be >= 1".into()));
        }
        let mut base = rng.fork("truth-base");
        let scale = 1.0 / (input_dim as f64).sqrt();
        let w0 = (0..input_dim).map(|_| scale * base.gaussian()).collect();
        let mut dir = rng.fork("drift-direction");
        let direction = (0..=input_dim).map(|_| dir.gaussian()).collect();
        Self::with_direction(kind, w0, 0.0, direction)
    }

    pub fn kind(&self) -> DriftKind {
        self.kind
    }

    pub fn input_dim(&self) -> usize {
        self.w0.len()
    }

    pub fn direction(&self) -> &[f64] {
        &self.direction
    }

    fn offset(&self, t: u64) -> f64 {
        match self.kind {
            DriftKind::Sinusoidal { beta, omega } => beta * (omega * t as f64).sin(),
            DriftKind::Jump {
                interval,
                magnitude,
            } => {
                if (t / interval) % 2 == 1 {
                    magnitude
                } else {
                    0.0
                }
            }
        }
    }

    /// `(W_t, b_t)`.
    pub fn truth_params(&self, t: u64) -> (Vec<f64>, f64) {
        let c = self.offset(t);
        let d = self.w0.len();
        let w = self
            .w0
            .iter()
            .zip(&self.direction[..d])
            .map(|(w, u)| w + c * u)
            .collect();
        (w, self.b0 + c * self.direction[d])
    }

    /// Noiseless target `σ(W_tᵀx + b_t)`.
    pub fn truth(&self, t: u64, x: &[f64]) -> Result<f64> {
        let (w, b) = self.truth_params(t);
        if x.len() != w.len() {
            return Err(Error::ShapeMismatch {
                context: "DriftSchedule::truth",
                expected: w.len(),
                got: x.len(),
            });
        }
        let z = w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + b;
        Ok(sigmoid(z))
    }

    /// CSV with header `t,w_0..w_{d-1},b` for rounds `0..=rounds`.
    pub fn write_trajectory<W: Write>(&self, rounds: u64, mut out: W) -> std::io::Result<()> {
        let d = self.input_dim();
        let mut header = vec!["t".to_string()];
        header.extend((0..d).map(|i| format!("w_{i}")));
        header.push("b".into());
        writeln!(out, "{}", header.join(","))?;
        for t in 0..=rounds {
            let (w, b) = self.truth_params(t);
            let mut row = vec![t.to_string()];
            row.extend(w.iter().map(|v| v.to_string()));
            row.push(b.to_string());
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DgpConfig {
    pub batch_size: usize,
    pub noise_std: f64,
    /// Number of past minibatches in the inner window.
    pub window: usize,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            noise_std: 0.05,
            window: 5,
        }
    }
}

/// Data for one outer round `t`: the inner window
/// `{t − window, …, t − 1}` (clipped at 0) and a fresh holdout batch drawn
/// at time `t`. Inner samples carry slot `t − 1 − s`, so slot 0 is the most
/// recent minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundData {
    pub t: u64,
    pub inner: Vec<Sample>,
    pub outer: Vec<Sample>,
}

impl RoundData {
    pub fn inner_batch(&self) -> Result<Batch> {
        Batch::slot_means(self.inner.clone())
    }

    pub fn outer_batch(&self) -> Result<Batch> {
        Batch::uniform(self.outer.clone())
    }
}

fn draw_samples(
    schedule: &DriftSchedule,
    time: u64,
    inputs: &mut Rng,
    noise: &mut Rng,
    batch_size: usize,
    noise_std: f64,
    slot: usize,
) -> Result<Vec<Sample>> {
    let d = schedule.input_dim();
    (0..batch_size)
        .map(|_| {
            let x: Vec<f64> = (0..d).map(|_| inputs.gaussian()).collect();
            let y = schedule.truth(time, &x)? + noise_std * noise.gaussian();
            Ok(Sample::new(x, vec![y], slot))
        })
        .collect()
}

/// The minibatch observed at time `s`, tagged with `slot`.
pub fn sample_batch(
    schedule: &DriftSchedule,
    rng: &Rng,
    s: u64,
    cfg: &DgpConfig,
    slot: usize,
) -> Result<Vec<Sample>> {
    check_cfg(cfg)?;
    let mut inputs = rng.fork_indexed("inputs", s);
    let mut noise = rng.fork_indexed("noise", s);
    draw_samples(
        schedule,
        s,
        &mut inputs,
        &mut noise,
        cfg.batch_size,
        cfg.noise_std,
        slot,
    )
}

fn check_cfg(cfg: &DgpConfig) -> Result<()> {
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    if !(cfg.noise_std >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise std must be >= 0, got {}",
            cfg.noise_std
        )));
    }
    if cfg.window == 0 {
        return Err(Error::InvalidArgument("data window must be >= 1".into()));
    }
    Ok(())
}

pub fn sample_round(
    schedule: &DriftSchedule,
    rng: &Rng,
    t: u64,
    cfg: &DgpConfig,
) -> Result<RoundData> {
    check_cfg(cfg)?;
    let first = t.saturating_sub(cfg.window as u64);
    let mut inner = Vec::with_capacity(cfg.batch_size * cfg.window);
    for s in first..t {
        let slot = (t - 1 - s) as usize;
        inner.extend(sample_batch(schedule, rng, s, cfg, slot)?);
    }
    let mut inputs = rng.fork_indexed("holdout-inputs", t);
    let mut noise = rng.fork_indexed("holdout-noise", t);
    let outer = draw_samples(
        schedule,
        t,
        &mut inputs,
        &mut noise,
        cfg.batch_size,
        cfg.noise_std,
        0,
    )?;
    Ok(RoundData { t, inner, outer })
}
