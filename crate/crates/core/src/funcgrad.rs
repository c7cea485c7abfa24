//! Functional hypergradient: inner fit, adjoint fit, and their combination
//! `g_exp + g_imp`.
//!
//! With `h` the fitted inner prediction function and `a` the fitted adjoint
//! function, the estimator is
//!
//! ```text
//! g_exp = Σ_j w̃_j ∂_λ ℓ_out(λ, h(x̃_j), ỹ_j)
//! g_imp = Σ_i w_i ∂²_{λ,v} ℓ_in(λ, h(x_i), y_i) · a(x_i)
//! ```
//!
//! where `a` minimises the quadratic
//! `Σ_i w_i ½ a(x_i)ᵀ ∂²_v ℓ_in a(x_i) + Σ_j w̃_j a(x̃_j)ᵀ ∂_v ℓ_out + ½ρ‖ξ‖²`.
//! The weights are those of the [`Batch`]es, so the inner quadratic and the
//! implicit term share one measure.

use crate::error::{Error, Result};
use crate::losses::{Batch, PointwiseLoss};
use crate::models::{LinearPredictor, OptimizerKind, Predictor, Trainable};
use crate::numkit::linalg::all_finite;
use crate::numkit::{norm, GradTape, Mat64, Rng};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub steps: usize,
    pub lr: f64,
    /// Coefficient `ρ` of the penalty `½ρ‖θ‖²`.
    pub ridge: f64,
    pub optimizer: OptimizerKind,
}

pub type InnerConfig = SolverConfig;
pub type AdjointConfig = SolverConfig;

impl SolverConfig {
    pub fn new(steps: usize, lr: f64, ridge: f64, optimizer: OptimizerKind) -> Self {
        Self {
            steps,
            lr,
            ridge,
            optimizer,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidArgument("solver steps must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "solver lr must be finite and >= 0, got {}",
                self.lr
            )));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "ridge must be finite and >= 0, got {}",
                self.ridge
            )));
        }
        Ok(())
    }
}

/// Losses and data of one hypergradient evaluation.
#[derive(Clone, Copy)]
pub struct Objective<'a> {
    pub inner_loss: &'a dyn PointwiseLoss,
    pub outer_loss: &'a dyn PointwiseLoss,
    pub inner: &'a Batch,
    pub outer: &'a Batch,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SolveReport {
    /// Objective before the first step.
    pub initial_loss: f64,
    /// Objective after the last step.
    pub final_loss: f64,
    /// Parameter-gradient norm after the last step.
    pub final_grad_norm: f64,
    /// Some point Hessian `∂²_v ℓ_in` had a negative eigenvalue.
    pub indefinite: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypergrad {
    pub g_exp: Vec<f64>,
    pub g_imp: Vec<f64>,
    pub total: Vec<f64>,
    pub inner: SolveReport,
    pub adjoint: SolveReport,
}

impl Hypergrad {
    fn assemble(
        g_exp: Vec<f64>,
        g_imp: Vec<f64>,
        inner: SolveReport,
        adjoint: SolveReport,
    ) -> Self {
        let total = g_exp.iter().zip(&g_imp).map(|(a, b)| a + b).collect();
        Self {
            g_exp,
            g_imp,
            total,
            inner,
            adjoint,
        }
    }
}

fn check_lambda(lambda: &[f64]) -> Result<()> {
    if !all_finite(lambda) {
        return Err(Error::NonFinite("outer parameters"));
    }
    Ok(())
}

fn add_ridge(params: &[f64], ridge: f64, loss: &mut f64, grad: &mut [f64]) {
    if ridge > 0.0 {
        *loss += 0.5 * ridge * params.iter().map(|p| p * p).sum::<f64>();
        for (g, p) in grad.iter_mut().zip(params) {
            *g += ridge * p;
        }
    }
}

/// Inner objective `Σ w ℓ_in + ½ρ‖θ‖²` and its parameter gradient.
pub fn inner_objective<P: Predictor>(
    lambda: &[f64],
    model: &P,
    loss: &dyn PointwiseLoss,
    batch: &Batch,
    ridge: f64,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("inner objective"));
    }
    let mut tape = GradTape::new();
    let mut value = 0.0;
    for (s, w) in batch.iter() {
        let v = model.forward(&s.x, Some(&mut tape))?;
        value += w * loss.value(lambda, &v, s)?;
        let g: Vec<f64> = loss
            .d_v(lambda, &v, s)?
            .into_iter()
            .map(|d| w * d)
            .collect();
        model.backward(&mut tape, &g)?;
    }
    let mut grad = tape.take_grad();
    add_ridge(model.params(), ridge, &mut value, &mut grad);
    Ok((value, grad))
}

/// Fits the inner model with `cfg.steps` optimizer steps, in place.
pub fn inner_opt<P: Predictor>(
    lambda: &[f64],
    h: &mut Trainable<P>,
    loss: &dyn PointwiseLoss,
    batch: &Batch,
    cfg: &InnerConfig,
) -> Result<SolveReport> {
    cfg.validate()?;
    check_lambda(lambda)?;
    let mut initial = None;
    for _ in 0..cfg.steps {
        let (value, grad) = inner_objective(lambda, &h.model, loss, batch, cfg.ridge)?;
        if !value.is_finite() || !all_finite(&grad) {
            return Err(Error::NonFinite("inner loss"));
        }
        initial.get_or_insert(value);
        h.opt.step(&mut h.model, &grad, cfg.lr)?;
    }
    let (value, grad) = inner_objective(lambda, &h.model, loss, batch, cfg.ridge)?;
    if !value.is_finite() || !all_finite(&grad) {
        return Err(Error::NonFinite("inner loss"));
    }
    Ok(SolveReport {
        initial_loss: initial.unwrap_or(value),
        final_loss: value,
        final_grad_norm: norm(&grad),
        indefinite: false,
    })
}

/// The adjoint quadratic frozen at a fitted inner model: per-sample weighted
/// Hessians on the inner batch and weighted outer gradients on the outer
/// batch.
#[derive(Debug, Clone)]
pub struct AdjointQuadratic {
    inner_x: Vec<Vec<f64>>,
    hessians: Vec<Mat64>,
    outer_x: Vec<Vec<f64>>,
    linear: Vec<Vec<f64>>,
    indefinite: bool,
}

const PSD_TOL: f64 = 1e-10;

impl AdjointQuadratic {
    pub fn assemble<P: Predictor>(lambda: &[f64], h: &P, obj: &Objective<'_>) -> Result<Self> {
        if obj.inner.is_empty() || obj.outer.is_empty() {
            return Err(Error::EmptyBatch("adjoint quadratic"));
        }
        let mut inner_x = Vec::with_capacity(obj.inner.len());
        let mut hessians = Vec::with_capacity(obj.inner.len());
        let mut indefinite = false;
        for (s, w) in obj.inner.iter() {
            let v = h.forward(&s.x, None)?;
            let mut hess = obj.inner_loss.d2_v(lambda, &v, s)?;
            let scale = hess.as_slice().iter().fold(0.0f64, |m, x| m.max(x.abs()));
            if !hess.is_psd(PSD_TOL * scale.max(1.0)) {
                indefinite = true;
            }
            hess.as_mut_slice().iter_mut().for_each(|x| *x *= w);
            inner_x.push(s.x.clone());
            hessians.push(hess);
        }
        let mut outer_x = Vec::with_capacity(obj.outer.len());
        let mut linear = Vec::with_capacity(obj.outer.len());
        for (s, w) in obj.outer.iter() {
            let v = h.forward(&s.x, None)?;
            let d = obj.outer_loss.d_v(lambda, &v, s)?;
            outer_x.push(s.x.clone());
            linear.push(d.into_iter().map(|x| w * x).collect());
        }
        Ok(Self {
            inner_x,
            hessians,
            outer_x,
            linear,
            indefinite,
        })
    }

    pub fn indefinite(&self) -> bool {
        self.indefinite
    }

    /// Value and parameter gradient of the adjoint objective at `a`.
    pub fn objective<Q: Predictor>(&self, a: &Q, ridge: f64) -> Result<(f64, Vec<f64>)> {
        let mut tape = GradTape::new();
        let mut value = 0.0;
        for (x, hess) in self.inner_x.iter().zip(&self.hessians) {
            let av = a.forward(x, Some(&mut tape))?;
            let ha = hess.matvec(&av)?;
            value += 0.5 * av.iter().zip(&ha).map(|(p, q)| p * q).sum::<f64>();
            a.backward(&mut tape, &ha)?;
        }
        for (x, d) in self.outer_x.iter().zip(&self.linear) {
            let av = a.forward(x, Some(&mut tape))?;
            value += av.iter().zip(d).map(|(p, q)| p * q).sum::<f64>();
            a.backward(&mut tape, d)?;
        }
        let mut grad = tape.take_grad();
        add_ridge(a.params(), ridge, &mut value, &mut grad);
        Ok((value, grad))
    }
}

/// Fits the adjoint model with `cfg.steps` optimizer steps, in place.
pub fn adjoint_opt<P: Predictor, Q: Predictor>(
    lambda: &[f64],
    a: &mut Trainable<Q>,
    h: &P,
    obj: &Objective<'_>,
    cfg: &AdjointConfig,
) -> Result<SolveReport> {
    cfg.validate()?;
    check_lambda(lambda)?;
    let quad = AdjointQuadratic::assemble(lambda, h, obj)?;
    let mut initial = None;
    for _ in 0..cfg.steps {
        let (value, grad) = quad.objective(&a.model, cfg.ridge)?;
        if !value.is_finite() || !all_finite(&grad) {
            return Err(Error::NonFinite("adjoint loss"));
        }
        initial.get_or_insert(value);
        a.opt.step(&mut a.model, &grad, cfg.lr)?;
    }
    let (value, grad) = quad.objective(&a.model, cfg.ridge)?;
    if !value.is_finite() || !all_finite(&grad) {
        return Err(Error::NonFinite("adjoint loss"));
    }
    Ok(SolveReport {
        initial_loss: initial.unwrap_or(value),
        final_loss: value,
        final_grad_norm: norm(&grad),
        indefinite: quad.indefinite(),
    })
}

/// Explicit and implicit parts of the hypergradient for fitted `h` and `a`.
pub fn hypergrad_terms<P: Predictor, Q: Predictor>(
    lambda: &[f64],
    h: &P,
    a: &Q,
    obj: &Objective<'_>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let k = lambda.len();
    let mut g_exp = vec![0.0; k];
    for (s, w) in obj.outer.iter() {
        let v = h.forward(&s.x, None)?;
        let d = obj.outer_loss.d_lambda(lambda, &v, s)?;
        for (g, di) in g_exp.iter_mut().zip(&d) {
            *g += w * di;
        }
    }
    let mut g_imp = vec![0.0; k];
    for (s, w) in obj.inner.iter() {
        let v = h.forward(&s.x, None)?;
        let av = a.forward(&s.x, None)?;
        let cross = obj.inner_loss.d2_lambda_v(lambda, &v, s)?;
        let c = cross.matvec(&av)?;
        for (g, ci) in g_imp.iter_mut().zip(&c) {
            *g += w * ci;
        }
    }
    Ok((g_exp, g_imp))
}

/// Random subsample of a batch, reweighted by `n / m` so that weighted sums
/// stay unbiased.
pub fn subsample_batch(batch: &Batch, fraction: f64, rng: &mut Rng) -> Result<Batch> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "subsample fraction must be in (0, 1], got {fraction}"
        )));
    }
    let n = batch.len();
    let m = ((fraction * n as f64).ceil() as usize).clamp(1, n);
    if m == n {
        return Ok(batch.clone());
    }
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..m {
        let j = i + rng.below(n - i);
        idx.swap(i, j);
    }
    idx.truncate(m);
    idx.sort_unstable();
    let scale = n as f64 / m as f64;
    let samples = idx.iter().map(|&i| batch.samples()[i].clone()).collect();
    let weights = idx.iter().map(|&i| batch.weights()[i] * scale).collect();
    Batch::weighted(samples, weights)
}

/// Hypergradient estimate: fits `h` then `a` (both in place, so they carry
/// over as warm starts) and combines the two terms. With `fraction < 1` the
/// final combination uses a random subsample of both batches drawn from
/// `rng`.
#[allow(clippy::too_many_arguments)]
pub fn func_grad<P: Predictor, Q: Predictor>(
    lambda: &[f64],
    h: &mut Trainable<P>,
    a: &mut Trainable<Q>,
    obj: &Objective<'_>,
    inner_cfg: &InnerConfig,
    adjoint_cfg: &AdjointConfig,
    fraction: f64,
    rng: &mut Rng,
) -> Result<Hypergrad> {
    let inner = inner_opt(lambda, h, obj.inner_loss, obj.inner, inner_cfg)?;
    let adjoint = adjoint_opt(lambda, a, &h.model, obj, adjoint_cfg)?;
    let (g_exp, g_imp) = if fraction < 1.0 {
        let sub_in = subsample_batch(obj.inner, fraction, rng)?;
        let sub_out = subsample_batch(obj.outer, fraction, rng)?;
        let sub = Objective {
            inner: &sub_in,
            outer: &sub_out,
            ..*obj
        };
        hypergrad_terms(lambda, &h.model, &a.model, &sub)?
    } else {
        hypergrad_terms(lambda, &h.model, &a.model, obj)?
    };
    if !all_finite(&g_exp) || !all_finite(&g_imp) {
        return Err(Error::NonFinite("hypergradient"));
    }
    Ok(Hypergrad::assemble(g_exp, g_imp, inner, adjoint))
}

fn outer_products(
    batch: &Batch,
    model: &LinearPredictor,
    mut weight: impl FnMut(usize) -> Result<f64>,
) -> Result<Mat64> {
    let p = model.num_params();
    let mut m = Mat64::zeros(p, p);
    for (i, s) in batch.samples().iter().enumerate() {
        let phi = model.feature_map().features(&s.x)?;
        let c = weight(i)?;
        for r in 0..p {
            for q in 0..p {
                m.add_at(r, q, c * phi[r] * phi[q]);
            }
        }
    }
    Ok(m)
}

/// Exact minimiser of the inner objective over a linear model, valid when
/// `ℓ_in` is quadratic in `v` (one Newton step is then exact).
pub fn solve_inner_linear(
    lambda: &[f64],
    model: &LinearPredictor,
    loss: &dyn PointwiseLoss,
    batch: &Batch,
    ridge: f64,
) -> Result<LinearPredictor> {
    check_lambda(lambda)?;
    let (_, grad) = inner_objective(lambda, model, loss, batch, ridge)?;
    let mut hess = outer_products(batch, model, |i| {
        let s = &batch.samples()[i];
        let v = model.forward(&s.x, None)?;
        Ok(batch.weights()[i] * loss.d2_v(lambda, &v, s)?.get(0, 0))
    })?;
    for r in 0..hess.rows() {
        hess.add_at(r, r, ridge);
    }
    let step = hess.solve(&grad)?;
    let theta = model
        .theta()
        .iter()
        .zip(&step)
        .map(|(t, s)| t - s)
        .collect();
    model.with_theta(theta)
}

/// Exact minimiser `ξ* = −A⁻¹b` of the adjoint quadratic over a linear model.
pub fn solve_adjoint_linear<P: Predictor>(
    lambda: &[f64],
    a: &LinearPredictor,
    h: &P,
    obj: &Objective<'_>,
    ridge: f64,
) -> Result<LinearPredictor> {
    check_lambda(lambda)?;
    let quad = AdjointQuadratic::assemble(lambda, h, obj)?;
    let p = a.num_params();
    let mut mat = Mat64::zeros(p, p);
    for (x, hess) in quad.inner_x.iter().zip(&quad.hessians) {
        let phi = a.feature_map().features(x)?;
        let c = hess.get(0, 0);
        for r in 0..p {
            for q in 0..p {
                mat.add_at(r, q, c * phi[r] * phi[q]);
            }
        }
    }
    for r in 0..p {
        mat.add_at(r, r, ridge);
    }
    let mut b = vec![0.0; p];
    for (x, d) in quad.outer_x.iter().zip(&quad.linear) {
        let phi = a.feature_map().features(x)?;
        for (bi, f) in b.iter_mut().zip(&phi) {
            *bi += d[0] * f;
        }
    }
    let xi = mat.solve(&b)?;
    a.with_theta(xi.into_iter().map(|v| -v).collect())
}

/// Hypergradient with both subproblems solved exactly over linear models.
/// Returns the estimate and the two solutions.
pub fn func_grad_exact(
    lambda: &[f64],
    h: &LinearPredictor,
    a: &LinearPredictor,
    obj: &Objective<'_>,
    inner_ridge: f64,
    adjoint_ridge: f64,
) -> Result<(Hypergrad, LinearPredictor, LinearPredictor)> {
    let h_star = solve_inner_linear(lambda, h, obj.inner_loss, obj.inner, inner_ridge)?;
    let a_star = solve_adjoint_linear(lambda, a, &h_star, obj, adjoint_ridge)?;
    let (g_exp, g_imp) = hypergrad_terms(lambda, &h_star, &a_star, obj)?;
    let (il, ig) = inner_objective(lambda, &h_star, obj.inner_loss, obj.inner, inner_ridge)?;
    let quad = AdjointQuadratic::assemble(lambda, &h_star, obj)?;
    let (al, ag) = quad.objective(&a_star, adjoint_ridge)?;
    let report = |l: f64, g: &[f64], indefinite| SolveReport {
        initial_loss: l,
        final_loss: l,
        final_grad_norm: norm(g),
        indefinite,
    };
    Ok((
        Hypergrad::assemble(
            g_exp,
            g_imp,
            report(il, &ig, false),
            report(al, &ag, quad.indefinite()),
        ),
        h_star,
        a_star,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{empirical_loss, Sample, SquaredOuterLoss, WeightedSquaredInnerLoss};
    use crate::models::FeatureMap;

    fn scalar_model(theta: f64) -> LinearPredictor {
        LinearPredictor::new(FeatureMap::identity(1, false), vec![theta]).unwrap()
    }

    fn const_model(c: f64) -> LinearPredictor {
        LinearPredictor::new(FeatureMap::new(Mat64::zeros(0, 1), true), vec![c]).unwrap()
    }

    /// Two inner points in separate slots and one outer point.
    fn two_point() -> (Batch, Batch) {
        let inner = Batch::slot_means(vec![
            Sample::new(vec![1.0], vec![1.0], 0),
            Sample::new(vec![2.0], vec![3.0], 1),
        ])
        .unwrap();
        let outer = Batch::uniform(vec![Sample::new(vec![1.0], vec![1.0], 0)]).unwrap();
        (inner, outer)
    }

    fn sgd(steps: usize, lr: f64, ridge: f64) -> SolverConfig {
        SolverConfig::new(steps, lr, ridge, OptimizerKind::Sgd)
    }

    #[test]
    fn zero_lr_keeps_model() {
        let (inner, _) = two_point();
        let mut h = Trainable::new(scalar_model(0.3), OptimizerKind::Sgd);
        inner_opt(
            &[1.0, 1.0],
            &mut h,
            &WeightedSquaredInnerLoss,
            &inner,
            &sgd(20, 0.0, 0.0),
        )
        .unwrap();
        assert_eq!(h.model.theta(), &[0.3]);
    }

    #[test]
    fn ridge_only_shrinks_geometrically() {
        let (inner, _) = two_point();
        let (lr, rho, m) = (0.05, 0.7, 30);
        let mut h = Trainable::new(scalar_model(2.0), OptimizerKind::Sgd);
        inner_opt(
            &[0.0, 0.0],
            &mut h,
            &WeightedSquaredInnerLoss,
            &inner,
            &sgd(m, lr, rho),
        )
        .unwrap();
        let expect = 2.0 * (1.0 - lr * rho).powi(m as i32);
        assert!((h.model.theta()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn weighted_least_squares_fit() {
        let (inner, _) = two_point();
        let mut h = Trainable::new(scalar_model(0.0), OptimizerKind::Sgd);
        let rep = inner_opt(
            &[1.0, 1.0],
            &mut h,
            &WeightedSquaredInnerLoss,
            &inner,
            &sgd(500, 0.02, 0.0),
        )
        .unwrap();
        assert!((h.model.theta()[0] - 1.4).abs() < 1e-3);
        assert!(rep.final_loss <= rep.initial_loss);
        let exact = solve_inner_linear(
            &[1.0, 1.0],
            &scalar_model(0.0),
            &WeightedSquaredInnerLoss,
            &inner,
            0.0,
        )
        .unwrap();
        assert!((exact.theta()[0] - 1.4).abs() < 1e-12);
    }

    #[test]
    fn divergent_lr_is_an_error() {
        let (inner, _) = two_point();
        let mut h = Trainable::new(scalar_model(1.0), OptimizerKind::Sgd);
        let err = inner_opt(
            &[1.0, 1.0],
            &mut h,
            &WeightedSquaredInnerLoss,
            &inner,
            &sgd(5000, 10.0, 0.0),
        );
        assert!(matches!(err, Err(Error::NonFinite(_))));
    }

    #[test]
    fn perfect_fit_gives_zero_adjoint() {
        let (inner, _) = two_point();
        let outer = Batch::uniform(vec![Sample::new(vec![1.0], vec![1.4], 0)]).unwrap();
        let obj = Objective {
            inner_loss: &WeightedSquaredInnerLoss,
            outer_loss: &SquaredOuterLoss,
            inner: &inner,
            outer: &outer,
        };
        let h = scalar_model(1.4);
        let mut a = Trainable::new(scalar_model(0.0), OptimizerKind::Sgd);
        let rep = adjoint_opt(&[1.0, 1.0], &mut a, &h, &obj, &sgd(25, 0.1, 0.0)).unwrap();
        assert_eq!(a.model.theta(), &[0.0]);
        assert_eq!(rep.final_loss, 0.0);
    }

    #[test]
    fn constant_adjoint_converges_to_minus_g_over_c() {
        // inner: one sample at weight 1, λ=1.5 ⇒ C = 2·1.5 = 3
        // outer: h=0 vs y=-1 ⇒ d = 2·(0-(-1)) = 2
        let inner = Batch::uniform(vec![Sample::new(vec![0.0], vec![0.0], 0)]).unwrap();
        let outer = Batch::uniform(vec![Sample::new(vec![0.0], vec![-1.0], 0)]).unwrap();
        let obj = Objective {
            inner_loss: &WeightedSquaredInnerLoss,
            outer_loss: &SquaredOuterLoss,
            inner: &inner,
            outer: &outer,
        };
        let h = const_model(0.0);
        let mut a = Trainable::new(const_model(0.0), OptimizerKind::Sgd);
        adjoint_opt(&[1.5], &mut a, &h, &obj, &sgd(400, 0.1, 0.0)).unwrap();
        assert!((a.model.theta()[0] + 2.0 / 3.0).abs() < 1e-10);
        let exact = solve_adjoint_linear(&[1.5], &const_model(0.0), &h, &obj, 0.0).unwrap();
        assert!((exact.theta()[0] + 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn adjoint_matches_assembled_quadratic() {
        // Unit weights everywhere: C-integrand 2I on the inner batch.
        let mut rng = Rng::new(3);
        let inner_s: Vec<Sample> = (0..6)
            .map(|_| {
                Sample::new(
                    vec![rng.gaussian(), rng.gaussian()],
                    vec![rng.gaussian()],
                    0,
                )
            })
            .collect();
        let outer_s: Vec<Sample> = (0..4)
            .map(|_| {
                Sample::new(
                    vec![rng.gaussian(), rng.gaussian()],
                    vec![rng.gaussian()],
                    0,
                )
            })
            .collect();
        let inner = Batch::uniform(inner_s.clone()).unwrap();
        let outer = Batch::uniform(outer_s.clone()).unwrap();
        let obj = Objective {
            inner_loss: &WeightedSquaredInnerLoss,
            outer_loss: &SquaredOuterLoss,
            inner: &inner,
            outer: &outer,
        };
        let fm = FeatureMap::identity(2, true);
        let h = LinearPredictor::new(fm.clone(), vec![0.3, -0.2, 0.1]).unwrap();
        let a = solve_adjoint_linear(&[1.0], &LinearPredictor::zeros(fm.clone()), &h, &obj, 0.0)
            .unwrap();
        // Direct assembly: A = (1/n) Σ 2 φφᵀ, b = (1/m) Σ 2 (h(x̃) − ỹ) φ(x̃)
        let phi = |x: &[f64]| vec![x[0], x[1], 1.0];
        let mut amat = Mat64::zeros(3, 3);
        for s in &inner_s {
            let f = phi(&s.x);
            for r in 0..3 {
                for q in 0..3 {
                    amat.add_at(r, q, 2.0 * f[r] * f[q] / 6.0);
                }
            }
        }
        let mut b = vec![0.0; 3];
        for s in &outer_s {
            let f = phi(&s.x);
            let r = 0.3 * s.x[0] - 0.2 * s.x[1] + 0.1 - s.y[0];
            for i in 0..3 {
                b[i] += 2.0 * r * f[i] / 4.0;
            }
        }
        let xi = amat.solve(&b).unwrap();
        for i in 0..3 {
            assert!((a.theta()[i] + xi[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_adjoint_gives_zero_implicit_term() {
        let (inner, outer) = two_point();
        let obj = Objective {
            inner_loss: &WeightedSquaredInnerLoss,
            outer_loss: &SquaredOuterLoss,
            inner: &inner,
            outer: &outer,
        };
        let (ge, gi) =
            hypergrad_terms(&[1.0, 1.0], &scalar_model(1.2), &scalar_model(0.0), &obj).unwrap();
        assert_eq!(gi, vec![0.0, 0.0]);
        assert_eq!(ge, vec![0.0, 0.0]);
    }

    #[test]
    fn lambda_free_inner_loss_gives_zero_implicit_term() {
        let (inner, outer) = two_point();
        let obj = Objective {
            inner_loss: &SquaredOuterLoss,
            outer_loss: &SquaredOuterLoss,
            inner: &inner,
            outer: &outer,
        };
        let (_, gi) =
            hypergrad_terms(&[1.0, 1.0], &scalar_model(1.2), &scalar_model(-3.0), &obj).unwrap();
        assert_eq!(gi, vec![0.0, 0.0]);
    }

    fn two_point_value(lambda: &[f64]) -> f64 {
        let (inner, outer) = two_point();
        let h = solve_inner_linear(
            lambda,
            &scalar_model(0.0),
            &WeightedSquaredInnerLoss,
            &inner,
            0.0,
        )
        .unwrap();
        empirical_loss(&SquaredOuterLoss, lambda, &h, &outer).unwrap()
    }

    #[test]
    fn two_point_hypergradient() {
        let (inner, outer) = two_point();
        let obj = Objective {
            inner_loss: &WeightedSquaredInnerLoss,
            outer_loss: &SquaredOuterLoss,
            inner: &inner,
            outer: &outer,
        };
        let (hg, h, _) = func_grad_exact(
            &[1.0, 1.0],
            &scalar_model(0.0),
            &scalar_model(0.0),
            &obj,
            0.0,
            0.0,
        )
        .unwrap();
        assert!((h.theta()[0] - 1.4).abs() < 1e-12);
        // θ*(λ) = (λ₀ + 6λ₁)/(λ₀ + 4λ₁), dθ*/dλ = (-2λ₁, 2λ₀)/(λ₀+4λ₁)², F = (θ*-1)²
        let expect = [-0.064, 0.064];
        for i in 0..2 {
            assert!((hg.total[i] - expect[i]).abs() < 1e-12, "{:?}", hg.total);
            assert_eq!(hg.total[i], hg.g_exp[i] + hg.g_imp[i]);
        }
        let eps = 1e-5;
        for i in 0..2 {
            let mut lp = vec![1.0, 1.0];
            let mut lm = vec![1.0, 1.0];
            lp[i] += eps;
            lm[i] -= eps;
            let fd = (two_point_value(&lp) - two_point_value(&lm)) / (2.0 * eps);
            assert!((fd - hg.total[i]).abs() < 1e-4 * hg.total[i].abs());
        }
    }

    #[test]
    fn iterative_matches_exact_on_linear_problem() {
        let (inner, outer) = two_point();
        let obj = Objective {
            inner_loss: &WeightedSquaredInnerLoss,
            outer_loss: &SquaredOuterLoss,
            inner: &inner,
            outer: &outer,
        };
        let mut h = Trainable::new(scalar_model(0.0), OptimizerKind::Sgd);
        let mut a = Trainable::new(scalar_model(0.0), OptimizerKind::Sgd);
        let mut rng = Rng::new(0);
        let hg = func_grad(
            &[1.0, 1.0],
            &mut h,
            &mut a,
            &obj,
            &sgd(2000, 0.02, 0.0),
            &sgd(2000, 0.02, 0.0),
            1.0,
            &mut rng,
        )
        .unwrap();
        assert!((hg.total[0] + 0.064).abs() < 1e-6);
        assert!((hg.total[1] - 0.064).abs() < 1e-6);
    }

    #[test]
    fn adjoint_descent_is_monotone_below_inverse_curvature() {
        let mut rng = Rng::new(11);
        let mk = |rng: &mut Rng, n| -> Vec<Sample> {
            (0..n)
                .map(|i| {
                    Sample::new(
                        vec![rng.gaussian(), rng.gaussian()],
                        vec![rng.gaussian()],
                        i % 2,
                    )
                })
                .collect()
        };
        let inner = Batch::slot_means(mk(&mut rng, 10)).unwrap();
        let outer = Batch::uniform(mk(&mut rng, 5)).unwrap();
        let obj = Objective {
            inner_loss: &WeightedSquaredInnerLoss,
            outer_loss: &SquaredOuterLoss,
            inner: &inner,
            outer: &outer,
        };
        let fm = FeatureMap::identity(2, true);
        let h = LinearPredictor::new(fm.clone(), vec![0.5, 0.5, 0.0]).unwrap();
        let lambda = [0.8, 1.3];
        // largest eigenvalue of the quadratic's Hessian
        let zero = LinearPredictor::zeros(fm.clone());
        let quad = AdjointQuadratic::assemble(&lambda, &h, &obj).unwrap();
        let mut amat = Mat64::zeros(3, 3);
        for k in 0..3 {
            let mut e = vec![0.0; 3];
            e[k] = 1.0;
            let (_, g1) = quad.objective(&zero.with_theta(e).unwrap(), 0.0).unwrap();
            let (_, g0) = quad.objective(&zero, 0.0).unwrap();
            for r in 0..3 {
                amat.set(r, k, g1[r] - g0[r]);
            }
        }
        let mut v = vec![1.0, 1.0, 1.0];
        for _ in 0..200 {
            let w = amat.matvec(&v).unwrap();
            let n = norm(&w);
            v = w.into_iter().map(|x| x / n).collect();
        }
        let lmax = norm(&amat.matvec(&v).unwrap());
        let lr = 0.9 / lmax;
        let mut a = Trainable::new(zero, OptimizerKind::Sgd);
        let mut prev = f64::INFINITY;
        for _ in 0..50 {
            let rep = adjoint_opt(&lambda, &mut a, &h, &obj, &sgd(1, lr, 0.0)).unwrap();
            assert!(rep.initial_loss <= prev + 1e-15);
            assert!(rep.final_loss <= rep.initial_loss + 1e-15);
            prev = rep.final_loss;
        }
    }

    #[test]
    fn subsample_keeps_weight_mass() {
        let (inner, _) = two_point();
        let mut rng = Rng::new(1);
        let sub = subsample_batch(&inner, 0.5, &mut rng).unwrap();
        assert_eq!(sub.len(), 1);
        let total: f64 = sub.weights().iter().sum();
        assert!((total - 2.0).abs() < 1e-12);
        assert_eq!(subsample_batch(&inner, 1.0, &mut rng).unwrap(), inner);
        assert!(subsample_batch(&inner, 0.0, &mut rng).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(sgd(0, 0.1, 0.0).validate().is_err());
        assert!(sgd(1, -0.1, 0.0).validate().is_err());
        assert!(sgd(1, 0.1, -1.0).validate().is_err());
        assert!(sgd(1, 0.1, 0.0).validate().is_ok());
    }
}
