//! Comparator-sequence measurements: the function variation `V_{1,T}`, the
//! parametric path variation `H_{2,T}`, and the reduction of the functional
//! hypergradient to the parametric one for linear predictors.
//!
//! Suprema over `λ` are maxima over a finite grid, see [`lambda_grid`].

use super::oracle::AnalyticProblem;
use crate::drift::{DgpConfig, DriftSchedule};
use crate::error::{Error, Result};
use crate::funcgrad::{func_grad_exact, Objective};
use crate::losses::{Batch, PointwiseLoss};
use crate::models::{LinearPredictor, Predictor};
use crate::numkit::{Mat64, Rng};

/// `points` values per coordinate spanning `[lo_i, hi_i]`, all combinations.
/// With more than three coordinates the grid lives on a random
/// three-dimensional slice through the box centre: three orthonormal
/// directions drawn from `rng.fork("grid-directions")`, each scanned over
/// the box's extent along it, with points clamped back into the box.
pub fn lambda_grid(lo: &[f64], hi: &[f64], points: usize, rng: &Rng) -> Result<Vec<Vec<f64>>> {
    if lo.len() != hi.len() {
        return Err(Error::ShapeMismatch {
            context: "lambda_grid bounds",
            expected: lo.len(),
            got: hi.len(),
        });
    }
    if lo.is_empty() || points == 0 {
        return Err(Error::InvalidArgument(
            "lambda grid needs >= 1 coordinate and >= 1 point".into(),
        ));
    }
    for (&l, &h) in lo.iter().zip(hi) {
        if !(l <= h) {
            return Err(Error::InvalidBox { lo: l, hi: h });
        }
    }
    let ticks = |a: f64, b: f64| -> Vec<f64> {
        if points == 1 {
            vec![0.5 * (a + b)]
        } else {
            (0..points)
                .map(|i| a + (b - a) * i as f64 / (points - 1) as f64)
                .collect()
        }
    };
    let k = lo.len();
    if k <= 3 {
        let mut grid = vec![Vec::new()];
        for i in 0..k {
            let tk = ticks(lo[i], hi[i]);
            grid = grid
                .into_iter()
                .flat_map(|p| {
                    tk.iter().map(move |&v| {
                        let mut q = p.clone();
                        q.push(v);
                        q
                    })
                })
                .collect();
        }
        return Ok(grid);
    }
    let mut r = rng.fork("grid-directions");
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    while dirs.len() < 3 {
        let mut u: Vec<f64> = (0..k).map(|_| r.gaussian()).collect();
        for d in &dirs {
            let c: f64 = u.iter().zip(d).map(|(a, b)| a * b).sum();
            u.iter_mut().zip(d).for_each(|(a, b)| *a -= c * b);
        }
        let n = u.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-8 {
            dirs.push(u.into_iter().map(|a| a / n).collect());
        }
    }
    let centre: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| 0.5 * (a + b)).collect();
    let reach: Vec<f64> = dirs
        .iter()
        .map(|d| {
            d.iter()
                .enumerate()
                .map(|(i, u)| 0.5 * u.abs() * (hi[i] - lo[i]))
                .sum()
        })
        .collect();
    let s = ticks(-1.0, 1.0);
    let mut grid = Vec::with_capacity(points.pow(3));
    for &a in &s {
        for &b in &s {
            for &c in &s {
                let p = (0..k)
                    .map(|i| {
                        let v = centre[i]
                            + a * reach[0] * dirs[0][i]
                            + b * reach[1] * dirs[1][i]
                            + c * reach[2] * dirs[2][i];
                        v.clamp(lo[i], hi[i])
                    })
                    .collect();
                grid.push(p);
            }
        }
    }
    Ok(grid)
}

/// Coordinate-wise bounding box of a trajectory.
pub fn bounding_box(trajectory: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let first = trajectory
        .first()
        .ok_or(Error::EmptyBatch("bounding_box"))?;
    let mut lo = first.clone();
    let mut hi = first.clone();
    for p in trajectory {
        for i in 0..lo.len() {
            lo[i] = lo[i].min(p[i]);
            hi[i] = hi[i].max(p[i]);
        }
    }
    Ok((lo, hi))
}

/// `Σ_{t=1}^{T} max_{λ ∈ grid} |F_{t+1}(λ) − F_t(λ)|`.
pub fn measure_v1t<P: AnalyticProblem + ?Sized>(
    problem: &P,
    grid: &[Vec<f64>],
    rounds: u64,
) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::EmptyBatch("measure_v1t grid"));
    }
    Ok((1..=rounds)
        .map(|t| {
            grid.iter()
                .map(|l| (problem.value(t + 1, l) - problem.value(t, l)).abs())
                .fold(0.0, f64::max)
        })
        .sum())
}

/// Monte-Carlo estimate of `V_{1,T}` on the regression problem.
#[derive(Debug, Clone, PartialEq)]
pub struct McVariation {
    pub value: f64,
    /// Standard error of `value`: per-round errors at the maximising grid
    /// point, combined in quadrature.
    pub std_error: f64,
    pub per_round: Vec<f64>,
}

/// Population outer objective of the regression problem is available in
/// closed form up to an expectation over `x`: the inner minimiser over all
/// functions is `h*_{t,λ} = Σ_k λ_k f_{t−1−k} / Σ_k λ_k` (truths of the
/// slots in the window), so `F_t(λ) = E_x (f_t(x) − h*_{t,λ}(x))² + σ²`.
/// Each round uses `samples` common inputs from `rng.fork_indexed("v1t", t)`
/// for both `F_t` and `F_{t+1}`. Grid points with zero total weight on the
/// available slots leave `h*` undetermined and are skipped.
pub fn measure_v1t_regression(
    schedule: &DriftSchedule,
    dgp: &DgpConfig,
    grid: &[Vec<f64>],
    rounds: u64,
    samples: usize,
    rng: &Rng,
) -> Result<McVariation> {
    if grid.is_empty() {
        return Err(Error::EmptyBatch("measure_v1t_regression grid"));
    }
    if samples < 2 {
        return Err(Error::InvalidArgument(
            "need >= 2 Monte-Carlo samples".into(),
        ));
    }
    for g in grid {
        if g.len() != dgp.window {
            return Err(Error::ShapeMismatch {
                context: "measure_v1t_regression grid point",
                expected: dgp.window,
                got: g.len(),
            });
        }
    }
    let d = schedule.input_dim();
    let gap = |t: u64, lam: &[f64], x: &[f64], ft: f64| -> Result<Option<f64>> {
        let mut num = 0.0;
        let mut den = 0.0;
        for (k, &l) in lam.iter().enumerate() {
            if (k as u64) + 1 > t {
                break;
            }
            num += l * schedule.truth(t - 1 - k as u64, x)?;
            den += l;
        }
        if den <= 0.0 {
            return Ok(None);
        }
        Ok(Some((ft - num / den).powi(2)))
    };
    let mut per_round = Vec::with_capacity(rounds as usize);
    let mut var_sum = 0.0;
    for t in 1..=rounds {
        let mut r = rng.fork_indexed("v1t", t);
        let xs: Vec<Vec<f64>> = (0..samples)
            .map(|_| (0..d).map(|_| r.gaussian()).collect())
            .collect();
        let f_now: Vec<f64> = xs
            .iter()
            .map(|x| schedule.truth(t, x))
            .collect::<Result<_>>()?;
        let f_next: Vec<f64> = xs
            .iter()
            .map(|x| schedule.truth(t + 1, x))
            .collect::<Result<_>>()?;
        let mut best = (0.0f64, 0.0f64);
        for lam in grid {
            let mut diffs = Vec::with_capacity(samples);
            for (i, x) in xs.iter().enumerate() {
                match (gap(t + 1, lam, x, f_next[i])?, gap(t, lam, x, f_now[i])?) {
                    (Some(a), Some(b)) => diffs.push(a - b),
                    _ => break,
                }
            }
            if diffs.len() != samples {
                continue;
            }
            let n = samples as f64;
            let mean = diffs.iter().sum::<f64>() / n;
            let var = diffs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            if mean.abs() > best.0 {
                best = (mean.abs(), var / n);
            }
        }
        per_round.push(best.0);
        var_sum += best.1;
    }
    Ok(McVariation {
        value: per_round.iter().sum(),
        std_error: var_sum.sqrt(),
        per_round,
    })
}

/// Exact inner minimiser over a linear model, from explicitly assembled
/// normal equations.
fn normal_equations(
    lambda: &[f64],
    template: &LinearPredictor,
    loss: &dyn PointwiseLoss,
    batch: &Batch,
    ridge: f64,
) -> Result<(LinearPredictor, Mat64)> {
    let p = template.num_params();
    let mut hess = Mat64::scaled_identity(p, ridge);
    let mut grad: Vec<f64> = template.theta().iter().map(|t| ridge * t).collect();
    for (s, w) in batch.iter() {
        let phi = template.feature_map().features(&s.x)?;
        let v = template.forward(&s.x, None)?;
        let c = w * loss.d2_v(lambda, &v, s)?.get(0, 0);
        let g = w * loss.d_v(lambda, &v, s)?[0];
        for r in 0..p {
            grad[r] += g * phi[r];
            for q in 0..p {
                hess.add_at(r, q, c * phi[r] * phi[q]);
            }
        }
    }
    let step = hess.solve(&grad)?;
    let theta = template
        .theta()
        .iter()
        .zip(&step)
        .map(|(t, s)| t - s)
        .collect();
    Ok((template.with_theta(theta)?, hess))
}

/// Implicit-differentiation hypergradient in parameter space:
/// `∂_λ L_out − ∂²_{λθ} L_in (∂²_θ L_in)⁻¹ ∂_θ L_out` at `θ*_λ`.
pub fn parametric_hypergradient(
    lambda: &[f64],
    template: &LinearPredictor,
    obj: &Objective<'_>,
    ridge: f64,
) -> Result<Vec<f64>> {
    let (model, hess) = normal_equations(lambda, template, obj.inner_loss, obj.inner, ridge)?;
    let p = model.num_params();
    let k = lambda.len();
    let mut d_lambda = vec![0.0; k];
    let mut d_theta = vec![0.0; p];
    for (s, w) in obj.outer.iter() {
        let v = model.forward(&s.x, None)?;
        let phi = model.feature_map().features(&s.x)?;
        let g = obj.outer_loss.d_v(lambda, &v, s)?[0];
        for (dt, f) in d_theta.iter_mut().zip(&phi) {
            *dt += w * g * f;
        }
        for (dl, x) in d_lambda
            .iter_mut()
            .zip(obj.outer_loss.d_lambda(lambda, &v, s)?)
        {
            *dl += w * x;
        }
    }
    let mut cross = Mat64::zeros(k, p);
    for (s, w) in obj.inner.iter() {
        let v = model.forward(&s.x, None)?;
        let phi = model.feature_map().features(&s.x)?;
        let m = obj.inner_loss.d2_lambda_v(lambda, &v, s)?;
        for r in 0..k {
            for (q, f) in phi.iter().enumerate() {
                cross.add_at(r, q, w * m.get(r, 0) * f);
            }
        }
    }
    let z = hess.solve(&d_theta)?;
    let implicit = cross.matvec(&z)?;
    Ok(d_lambda.iter().zip(&implicit).map(|(a, b)| a - b).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearReduction {
    pub functional: Vec<f64>,
    pub parametric: Vec<f64>,
}

impl LinearReduction {
    pub fn max_abs_diff(&self) -> f64 {
        self.functional
            .iter()
            .zip(&self.parametric)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Functional hypergradient (exact inner and adjoint solves, both with
/// `ridge`) next to the parametric one.
pub fn linear_reduction_check(
    lambda: &[f64],
    template: &LinearPredictor,
    obj: &Objective<'_>,
    ridge: f64,
) -> Result<LinearReduction> {
    let (hg, _, _) = func_grad_exact(lambda, template, template, obj, ridge, ridge)?;
    Ok(LinearReduction {
        functional: hg.total,
        parametric: parametric_hypergradient(lambda, template, obj, ridge)?,
    })
}

/// `max_{λ ∈ grid} ‖θ*_{prev,λ} − θ*_{cur,λ}‖²`, one term of `H_{2,T}`.
pub fn h2t_term(
    grid: &[Vec<f64>],
    template: &LinearPredictor,
    loss: &dyn PointwiseLoss,
    prev: &Batch,
    cur: &Batch,
    ridge: f64,
) -> Result<f64> {
    if grid.is_empty() {
        return Err(Error::EmptyBatch("h2t_term grid"));
    }
    let mut best = 0.0f64;
    for lam in grid {
        let (a, _) = normal_equations(lam, template, loss, prev, ridge)?;
        let (b, _) = normal_equations(lam, template, loss, cur, ridge)?;
        let d: f64 = a
            .theta()
            .iter()
            .zip(b.theta())
            .map(|(x, y)| (x - y).powi(2))
            .sum();
        best = best.max(d);
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drift::DriftKind;
    use crate::losses::{Sample, SquaredOuterLoss, WeightedSquaredInnerLoss};
    use crate::models::FeatureMap;
    use crate::outer_loop::oracle::DriftingQuadratic;

    struct LinearDrift {
        delta: f64,
    }

    impl AnalyticProblem for LinearDrift {
        fn dim(&self) -> usize {
            2
        }
        fn value(&self, t: u64, l: &[f64]) -> f64 {
            let c = self.delta * t as f64;
            0.5 * l.iter().map(|x| (x - c).powi(2)).sum::<f64>()
        }
        fn grad(&self, t: u64, l: &[f64]) -> Vec<f64> {
            let c = self.delta * t as f64;
            l.iter().map(|x| x - c).collect()
        }
        fn smoothness(&self) -> f64 {
            1.0
        }
    }

    #[test]
    fn stationary_problem_has_no_variation() {
        let p = DriftingQuadratic::stationary(vec![0.2, 0.1], 1.0);
        let grid = lambda_grid(&[-1.0, -1.0], &[1.0, 1.0], 5, &Rng::new(0)).unwrap();
        assert_eq!(measure_v1t(&p, &grid, 50).unwrap(), 0.0);
        assert!(measure_v1t(&p, &[], 50).is_err());
    }

    #[test]
    fn linear_drift_hand_formula() {
        let delta = 0.1;
        let p = LinearDrift { delta };
        let grid = lambda_grid(&[-1.0, -1.0], &[1.0, 1.0], 5, &Rng::new(0)).unwrap();
        let rounds = 7;
        let mut expect = 0.0;
        for t in 1..=rounds {
            let (c0, c1) = (delta * t as f64, delta * (t + 1) as f64);
            let mut best = 0.0f64;
            for l in &grid {
                let a: f64 = l.iter().map(|x| 0.5 * (x - c1).powi(2)).sum();
                let b: f64 = l.iter().map(|x| 0.5 * (x - c0).powi(2)).sum();
                best = best.max((a - b).abs());
            }
            expect += best;
        }
        assert!((measure_v1t(&p, &grid, rounds).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn grid_shapes() {
        let g = lambda_grid(&[0.0, 0.0], &[1.0, 2.0], 3, &Rng::new(0)).unwrap();
        assert_eq!(g.len(), 9);
        assert!(g.contains(&vec![0.5, 2.0]));
        let g = lambda_grid(&[0.0; 5], &[1.0; 5], 5, &Rng::new(0)).unwrap();
        assert_eq!(g.len(), 125);
        assert!(g
            .iter()
            .all(|p| p.iter().all(|&x| (0.0..=1.0).contains(&x))));
        assert!(g.contains(&vec![0.5; 5]));
    }

    #[test]
    fn regression_variation_is_zero_without_drift_and_reported_with_error() {
        let dgp = DgpConfig {
            window: 3,
            ..DgpConfig::default()
        };
        let grid = lambda_grid(&[0.5; 3], &[1.5; 3], 2, &Rng::new(0)).unwrap();
        let still = DriftSchedule::random(
            DriftKind::Sinusoidal {
                beta: 0.0,
                omega: 0.1,
            },
            4,
            &Rng::new(1),
        )
        .unwrap();
        let mc = measure_v1t_regression(&still, &dgp, &grid, 20, 200, &Rng::new(2)).unwrap();
        assert!(mc.value < 1e-25, "{}", mc.value);
        let moving = DriftSchedule::random(
            DriftKind::Sinusoidal {
                beta: 1.0,
                omega: 0.1,
            },
            4,
            &Rng::new(1),
        )
        .unwrap();
        let mc = measure_v1t_regression(&moving, &dgp, &grid, 20, 10_000, &Rng::new(2)).unwrap();
        assert!(mc.value > 0.0 && mc.std_error > 0.0 && mc.std_error < mc.value);
        assert_eq!(mc.per_round.len(), 20);
    }

    fn two_point() -> (Batch, Batch) {
        let inner = Batch::slot_means(vec![
            Sample::new(vec![1.0], vec![1.0], 0),
            Sample::new(vec![2.0], vec![3.0], 1),
        ])
        .unwrap();
        let outer = Batch::uniform(vec![Sample::new(vec![1.0], vec![1.0], 0)]).unwrap();
        (inner, outer)
    }

    #[test]
    fn two_point_reduction() {
        let (inner, outer) = two_point();
        let obj = Objective {
            inner_loss: &WeightedSquaredInnerLoss,
            outer_loss: &SquaredOuterLoss,
            inner: &inner,
            outer: &outer,
        };
        let tmpl = LinearPredictor::zeros(FeatureMap::identity(1, false));
        let r = linear_reduction_check(&[1.0, 1.0], &tmpl, &obj, 0.0).unwrap();
        assert!((r.parametric[0] + 0.064).abs() < 1e-12);
        assert!((r.parametric[1] - 0.064).abs() < 1e-12);
        assert!(r.max_abs_diff() < 1e-6);
    }

    #[test]
    fn ridge_only_inner_problem() {
        let (inner, outer) = two_point();
        let silent = Batch::weighted(inner.samples().to_vec(), vec![0.0, 0.0]).unwrap();
        let obj = Objective {
            inner_loss: &WeightedSquaredInnerLoss,
            outer_loss: &SquaredOuterLoss,
            inner: &silent,
            outer: &outer,
        };
        let tmpl = LinearPredictor::new(FeatureMap::identity(1, false), vec![0.4]).unwrap();
        let r = linear_reduction_check(&[1.0, 2.0], &tmpl, &obj, 0.5).unwrap();
        assert_eq!(r.functional, vec![0.0, 0.0]);
        assert_eq!(r.parametric, vec![0.0, 0.0]);
    }

    #[test]
    fn stationary_data_has_no_path_variation() {
        let (inner, _) = two_point();
        let tmpl = LinearPredictor::zeros(FeatureMap::identity(1, false));
        let grid = lambda_grid(&[0.5, 0.5], &[2.0, 2.0], 3, &Rng::new(0)).unwrap();
        assert_eq!(
            h2t_term(&grid, &tmpl, &WeightedSquaredInnerLoss, &inner, &inner, 0.0).unwrap(),
            0.0
        );
        let shifted = Batch::slot_means(vec![
            Sample::new(vec![1.0], vec![2.0], 0),
            Sample::new(vec![2.0], vec![3.0], 1),
        ])
        .unwrap();
        assert!(
            h2t_term(
                &grid,
                &tmpl,
                &WeightedSquaredInnerLoss,
                &inner,
                &shifted,
                0.0
            )
            .unwrap()
                > 0.0
        );
    }
}
