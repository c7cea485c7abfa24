use crate::error::{Error, Result};
use crate::numkit::linalg::all_finite;

/// Feasible set of the outer variable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Constraint {
    NonnegativeOrthant,
    /// The same interval `[lo, hi]` on every coordinate.
    Box {
        lo: f64,
        hi: f64,
    },
    Unconstrained,
}

impl Constraint {
    pub fn validate(&self) -> Result<()> {
        if let Constraint::Box { lo, hi } = *self {
            if !(lo <= hi) {
                return Err(Error::InvalidBox { lo, hi });
            }
        }
        Ok(())
    }

    pub fn contains(&self, lambda: &[f64]) -> bool {
        match *self {
            Constraint::NonnegativeOrthant => lambda.iter().all(|&l| l >= 0.0),
            Constraint::Box { lo, hi } => lambda.iter().all(|&l| l >= lo && l <= hi),
            Constraint::Unconstrained => true,
        }
    }

    /// Euclidean projection; coordinate-wise clamping for both sets.
    pub fn project(&self, lambda: &[f64]) -> Result<Vec<f64>> {
        self.validate()?;
        Ok(match *self {
            Constraint::NonnegativeOrthant => lambda.iter().map(|&l| l.max(0.0)).collect(),
            Constraint::Box { lo, hi } => lambda.iter().map(|&l| l.clamp(lo, hi)).collect(),
            Constraint::Unconstrained => lambda.to_vec(),
        })
    }
}

pub fn project(lambda: &[f64], constraint: &Constraint) -> Result<Vec<f64>> {
    constraint.project(lambda)
}

/// The outer variable with its feasible set and step size.
#[derive(Debug, Clone, PartialEq)]
pub struct OuterParams {
    lambda: Vec<f64>,
    constraint: Constraint,
    alpha: f64,
}

impl OuterParams {
    /// `lambda` is projected onto the constraint. `alpha = 0` is allowed and
    /// freezes the outer variable.
    pub fn new(lambda: Vec<f64>, constraint: Constraint, alpha: f64) -> Result<Self> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "outer step size must be finite and >= 0, got {alpha}"
            )));
        }
        if !all_finite(&lambda) {
            return Err(Error::NonFinite("initial outer parameters"));
        }
        let lambda = constraint.project(&lambda)?;
        Ok(Self {
            lambda,
            constraint,
            alpha,
        })
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn constraint(&self) -> Constraint {
        self.constraint
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `λ ← Π(λ − α g)`.
    pub fn step(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.lambda.len() {
            return Err(Error::ShapeMismatch {
                context: "OuterParams::step",
                expected: self.lambda.len(),
                got: g.len(),
            });
        }
        let moved: Vec<f64> = self
            .lambda
            .iter()
            .zip(g)
            .map(|(l, d)| l - self.alpha * d)
            .collect();
        if !all_finite(&moved) {
            return Err(Error::NonFinite("outer parameters"));
        }
        self.lambda = self.constraint.project(&moved)?;
        Ok(())
    }
}
