//! Point-wise losses `ℓ(λ, v, x, y)` and their derivatives in the
//! prediction `v` and the outer variable `λ`.
//!
//! The functional hypergradient only ever touches a loss through these five
//! quantities: the value, `∂_v ℓ`, the Hessian `∂²_v ℓ` (integrand of the
//! inner loss's second functional derivative), `∂_λ ℓ`, and the cross
//! derivative `∂²_{λ,v} ℓ` of shape `dim(λ) × dim(v)`.

use crate::error::{ensure_len, Error, Result};
use crate::models::Predictor;
use crate::numkit::Mat64;

/// One labelled observation. `slot` tags which component of `λ` weighs it
/// (the window position its minibatch came from); losses that ignore `λ`
/// ignore the slot too.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub slot: usize,
}

impl Sample {
    pub fn new(x: Vec<f64>, y: Vec<f64>, slot: usize) -> Self {
        Self { x, y, slot }
    }
}

/// Samples with quadrature weights; an empirical loss is `Σ wᵢ ℓᵢ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    samples: Vec<Sample>,
    weights: Vec<f64>,
}

impl Batch {
    /// Equal weights `1/n`: the plain minibatch mean.
    pub fn uniform(samples: Vec<Sample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyBatch("Batch::uniform"));
        }
        let w = 1.0 / samples.len() as f64;
        let weights = vec![w; samples.len()];
        Ok(Self { samples, weights })
    }

    /// Weight `1/|B_s|` for a sample of slot `s`, so the empirical loss is
    /// the sum over slots of per-slot minibatch means. No extra division by
    /// the number of slots.
    pub fn slot_means(samples: Vec<Sample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyBatch("Batch::slot_means"));
        }
        let max_slot = samples.iter().map(|s| s.slot).max().unwrap_or(0);
        let mut counts = vec![0usize; max_slot + 1];
        for s in &samples {
            counts[s.slot] += 1;
        }
        let weights = samples
            .iter()
            .map(|s| 1.0 / counts[s.slot] as f64)
            .collect();
        Ok(Self { samples, weights })
    }

    pub fn weighted(samples: Vec<Sample>, weights: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyBatch("Batch::weighted"));
        }
        ensure_len("Batch::weighted", samples.len(), weights.len())?;
        Ok(Self { samples, weights })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Sample, f64)> {
        self.samples.iter().zip(self.weights.iter().copied())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossDerivs {
    pub value: f64,
    pub d_v: Vec<f64>,
    pub d2_v: Mat64,
    pub d_lambda: Vec<f64>,
    pub d2_lambda_v: Mat64,
}

pub trait PointwiseLoss: Send + Sync {
    fn value(&self, lambda: &[f64], v: &[f64], s: &Sample) -> Result<f64>;
    fn d_v(&self, lambda: &[f64], v: &[f64], s: &Sample) -> Result<Vec<f64>>;
    fn d2_v(&self, lambda: &[f64], v: &[f64], s: &Sample) -> Result<Mat64>;
    fn d_lambda(&self, lambda: &[f64], v: &[f64], s: &Sample) -> Result<Vec<f64>>;
    fn d2_lambda_v(&self, lambda: &[f64], v: &[f64], s: &Sample) -> Result<Mat64>;

    fn derivatives(&self, lambda: &[f64], v: &[f64], s: &Sample) -> Result<LossDerivs> {
        Ok(LossDerivs {
            value: self.value(lambda, v, s)?,
            d_v: self.d_v(lambda, v, s)?,
            d2_v: self.d2_v(lambda, v, s)?,
            d_lambda: self.d_lambda(lambda, v, s)?,
            d2_lambda_v: self.d2_lambda_v(lambda, v, s)?,
        })
    }
}

fn residual(v: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    ensure_len("loss prediction vs target", y.len(), v.len())?;
    Ok(v.iter().zip(y).map(|(a, b)| a - b).collect())
}

fn sq(r: &[f64]) -> f64 {
    r.iter().map(|x| x * x).sum()
}

/// `λ_s · ‖v − y‖²` for a sample of slot `s`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct WeightedSquaredInnerLoss;

impl WeightedSquaredInnerLoss {
    fn weight(lambda: &[f64], slot: usize) -> Result<f64> {
        lambda.get(slot).copied().ok_or(Error::SlotOutOfRange {
            slot,
            dim: lambda.len(),
        })
    }
}

impl PointwiseLoss for WeightedSquaredInnerLoss {
    fn value(&self, lambda: &[f64], v: &[f64], s: &Sample) -> Result<f64> {
        Ok(Self::weight(lambda, s.slot)? * sq(&residual(v, &s.y)?))
    }

    fn d_v(&self, lambda: &[f64], v: &[f64], s: &Sample) -> Result<Vec<f64>> {
        let l = Self::weight(lambda, s.slot)?;
        Ok(residual(v, &s.y)?
            .into_iter()
            .map(|r| 2.0 * l * r)
            .collect())
    }

    fn d2_v(&self, lambda: &[f64], v: &[f64], s: &Sample) -> Result<Mat64> {
        let l = Self::weight(lambda, s.slot)?;
        ensure_len("loss prediction vs target", s.y.len(), v.len())?;
        Ok(Mat64::scaled_identity(v.len(), 2.0 * l))
    }

    fn d_lambda(&self, lambda: &[f64], v: &[f64], s: &Sample) -> Result<Vec<f64>> {
        Self::weight(lambda, s.slot)?;
        let mut g = vec![0.0; lambda.len()];
        g[s.slot] = sq(&residual(v, &s.y)?);
        Ok(g)
    }

    fn d2_lambda_v(&self, lambda: &[f64], v: &[f64], s: &Sample) -> Result<Mat64> {
        Self::weight(lambda, s.slot)?;
        let r = residual(v, &s.y)?;
        let mut m = Mat64::zeros(lambda.len(), v.len());
        for (j, rj) in r.iter().enumerate() {
            m.set(s.slot, j, 2.0 * rj);
        }
        Ok(m)
    }
}

/// `‖v − y‖²`, independent of `λ`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SquaredOuterLoss;

impl PointwiseLoss for SquaredOuterLoss {
    fn value(&self, _lambda: &[f64], v: &[f64], s: &Sample) -> Result<f64> {
        Ok(sq(&residual(v, &s.y)?))
    }

    fn d_v(&self, _lambda: &[f64], v: &[f64], s: &Sample) -> Result<Vec<f64>> {
        Ok(residual(v, &s.y)?.into_iter().map(|r| 2.0 * r).collect())
    }

    fn d2_v(&self, _lambda: &[f64], v: &[f64], s: &Sample) -> Result<Mat64> {
        ensure_len("loss prediction vs target", s.y.len(), v.len())?;
        Ok(Mat64::scaled_identity(v.len(), 2.0))
    }

    fn d_lambda(&self, lambda: &[f64], v: &[f64], s: &Sample) -> Result<Vec<f64>> {
        ensure_len("loss prediction vs target", s.y.len(), v.len())?;
        Ok(vec![0.0; lambda.len()])
    }

    fn d2_lambda_v(&self, lambda: &[f64], v: &[f64], s: &Sample) -> Result<Mat64> {
        ensure_len("loss prediction vs target", s.y.len(), v.len())?;
        Ok(Mat64::zeros(lambda.len(), v.len()))
    }
}

/// All derivatives of [`WeightedSquaredInnerLoss`] at one point.
pub fn weighted_sq_derivatives(
    lambda: &[f64],
    slot: usize,
    v: &[f64],
    y: &[f64],
) -> Result<LossDerivs> {
    let s = Sample::new(Vec::new(), y.to_vec(), slot);
    WeightedSquaredInnerLoss.derivatives(lambda, v, &s)
}

/// `Σ wᵢ ℓ(λ, h(xᵢ), xᵢ, yᵢ)` over the batch.
pub fn empirical_loss<P: Predictor>(
    loss: &dyn PointwiseLoss,
    lambda: &[f64],
    model: &P,
    batch: &Batch,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("empirical_loss"));
    }
    let mut total = 0.0;
    for (s, w) in batch.iter() {
        let v = model.forward(&s.x, None)?;
        total += w * loss.value(lambda, &v, s)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{FeatureMap, LinearPredictor};

    #[test]
    fn hand_arithmetic_scalar_case() {
        let d = weighted_sq_derivatives(&[1.0], 0, &[3.0], &[1.0]).unwrap();
        assert_eq!(d.value, 4.0);
        assert_eq!(d.d_v, vec![4.0]);
        assert_eq!(d.d2_v.as_slice(), &[2.0]);
        assert_eq!(d.d_lambda, vec![4.0]);
        assert_eq!(d.d2_lambda_v.as_slice(), &[4.0]);
    }

    #[test]
    fn zero_weight_boundary() {
        let d = weighted_sq_derivatives(&[0.0, 2.0], 0, &[3.0, 1.0], &[1.0, 1.0]).unwrap();
        assert_eq!(d.value, 0.0);
        assert_eq!(d.d_v, vec![0.0, 0.0]);
        assert!(d.d2_v.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(d.d_lambda, vec![4.0, 0.0]);
        assert_eq!(d.d2_lambda_v.row(0), &[4.0, 0.0]);
        assert_eq!(d.d2_lambda_v.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn slot_out_of_range() {
        assert_eq!(
            weighted_sq_derivatives(&[1.0], 1, &[0.0], &[0.0]).unwrap_err(),
            Error::SlotOutOfRange { slot: 1, dim: 1 }
        );
    }

    #[test]
    fn outer_loss_has_no_lambda_dependence() {
        let s = Sample::new(vec![], vec![1.0, 2.0], 0);
        let d = SquaredOuterLoss
            .derivatives(&[3.0, 4.0, 5.0], &[0.0, 0.0], &s)
            .unwrap();
        assert_eq!(d.value, 5.0);
        assert_eq!(d.d_lambda, vec![0.0; 3]);
        assert_eq!((d.d2_lambda_v.rows(), d.d2_lambda_v.cols()), (3, 2));
        assert!(d.d2_lambda_v.as_slice().iter().all(|&v| v == 0.0));
    }

    fn const_model(c: f64) -> LinearPredictor {
        LinearPredictor::new(FeatureMap::new(Mat64::zeros(0, 1), true), vec![c]).unwrap()
    }

    #[test]
    fn empirical_loss_means() {
        let same = vec![Sample::new(vec![0.0], vec![1.0], 0); 3];
        let b = Batch::uniform(same).unwrap();
        let l = empirical_loss(&SquaredOuterLoss, &[], &const_model(3.0), &b).unwrap();
        assert!((l - 4.0).abs() < 1e-15);

        let b = Batch::uniform(vec![
            Sample::new(vec![0.0], vec![1.0], 0),
            Sample::new(vec![0.0], vec![-1.0], 0),
        ])
        .unwrap();
        // residuals 2 and 4: losses 4 and 16
        let l = empirical_loss(&SquaredOuterLoss, &[], &const_model(3.0), &b).unwrap();
        assert!((l - 10.0).abs() < 1e-15);

        let b = Batch::uniform(vec![Sample::new(vec![0.0], vec![2.0], 0); 2]).unwrap();
        assert_eq!(
            empirical_loss(&SquaredOuterLoss, &[], &const_model(2.0), &b).unwrap(),
            0.0
        );
    }

    #[test]
    fn empty_batches_rejected() {
        assert!(Batch::uniform(vec![]).is_err());
        assert!(Batch::slot_means(vec![]).is_err());
    }

    #[test]
    fn slot_mean_weights() {
        let s = |slot| Sample::new(vec![0.0], vec![0.0], slot);
        let b = Batch::slot_means(vec![s(0), s(1), s(1), s(1)]).unwrap();
        assert_eq!(b.weights(), &[1.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]);
    }
}
