//! Feed-forward networks with reverse-mode parameter gradients.
//!
//! Parameter layout (frozen; ledgers and checkpoints depend on it): layers
//! are concatenated in order, each layer stored as its row-major
//! `out × in` weight matrix followed by its `out` biases. Hidden layers
//! apply the activation; the output layer is always affine.

use super::dual::{Dual, Scalar};
use crate::error::{ensure_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Gelu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply<S: Scalar>(self, u: S) -> S {
        match self {
            Activation::Gelu => u.gelu(),
            Activation::Identity => u,
        }
    }

    #[inline]
    fn derivative<S: Scalar>(self, u: S) -> S {
        match self {
            Activation::Gelu => u.gelu_prime(),
            Activation::Identity => S::from_f64(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    dims: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
}

impl Network {
    /// Number of parameters for the layer widths `dims` (input first).
    pub fn param_count(dims: &[usize]) -> usize {
        dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn new(dims: Vec<usize>, activation: Activation, params: Vec<f64>) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "network needs at least two positive layer widths, got {dims:?}"
            )));
        }
        ensure_len(
            "Network::new params",
            Self::param_count(&dims),
            params.len(),
        )?;
        Ok(Self {
            dims,
            activation,
            params,
        })
    }

    pub fn zeros(dims: Vec<usize>, activation: Activation) -> Result<Self> {
        let n = Self::param_count(&dims);
        Self::new(dims, activation, vec![0.0; n])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// `(weight_offset, bias_offset, fan_in, fan_out)` for each layer.
    pub fn layer_offsets(&self) -> Vec<(usize, usize, usize, usize)> {
        layer_offsets(&self.dims)
    }

    /// Forward pass in dual arithmetic at `params + ε·dir`, then a dual
    /// reverse pass seeded by `output_grad(v, v̇)`. Accumulates the gradient
    /// into `grad_acc` and its directional derivative along `dir` into
    /// `hvp_acc`. Returns the output and its tangent `J·dir`.
    pub fn second_order<F>(
        &self,
        x: &[f64],
        dir: &[f64],
        output_grad: F,
        grad_acc: &mut [f64],
        hvp_acc: &mut [f64],
    ) -> Result<(Vec<f64>, Vec<f64>)>
    where
        F: FnOnce(&[f64], &[f64]) -> Result<(Vec<f64>, Vec<f64>)>,
    {
        ensure_len("Network::second_order input", self.input_dim(), x.len())?;
        ensure_len(
            "Network::second_order direction",
            self.num_params(),
            dir.len(),
        )?;
        ensure_len(
            "Network::second_order grad_acc",
            self.num_params(),
            grad_acc.len(),
        )?;
        ensure_len(
            "Network::second_order hvp_acc",
            self.num_params(),
            hvp_acc.len(),
        )?;
        let params: Vec<Dual> = self
            .params
            .iter()
            .zip(dir)
            .map(|(&p, &d)| Dual::new(p, d))
            .collect();
        let xd: Vec<Dual> = x.iter().map(|&v| Dual::new(v, 0.0)).collect();
        let mut pre = Vec::new();
        let mut post = Vec::new();
        let out = forward_kernel(
            &self.dims,
            self.activation,
            &params,
            &xd,
            &mut pre,
            &mut post,
        );
        let v: Vec<f64> = out.iter().map(|d| d.re).collect();
        let vdot: Vec<f64> = out.iter().map(|d| d.eps).collect();
        let (g, gdot) = output_grad(&v, &vdot)?;
        ensure_len(
            "Network::second_order output grad",
            self.output_dim(),
            g.len(),
        )?;
        ensure_len(
            "Network::second_order output grad tangent",
            self.output_dim(),
            gdot.len(),
        )?;
        let seed: Vec<Dual> = g
            .iter()
            .zip(&gdot)
            .map(|(&a, &b)| Dual::new(a, b))
            .collect();
        let mut acc = vec![Dual::default(); self.num_params()];
        backward_kernel(
            &self.dims,
            self.activation,
            &params,
            &pre,
            &post,
            &seed,
            &mut acc,
        );
        for ((ga, ha), d) in grad_acc.iter_mut().zip(hvp_acc.iter_mut()).zip(&acc) {
            *ga += d.re;
            *ha += d.eps;
        }
        Ok((v, vdot))
    }
}

fn layer_offsets(dims: &[usize]) -> Vec<(usize, usize, usize, usize)> {
    let mut off = 0;
    dims.windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let wo = off;
            let bo = off + fan_in * fan_out;
            off = bo + fan_out;
            (wo, bo, fan_in, fan_out)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum TapeKind {
    Network(Activation),
    Linear,
}

/// Activation cache of the most recent forward pass plus a flat gradient
/// accumulator aligned with the parameter layout.
#[derive(Debug, Clone, Default)]
pub struct GradTape {
    kind: Option<TapeKind>,
    layout: Vec<usize>,
    pub(crate) pre: Vec<Vec<f64>>,
    pub(crate) post: Vec<Vec<f64>>,
    grad: Vec<f64>,
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    /// The accumulated parameter gradient.
    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    /// Zeroes the accumulator; cached activations are kept.
    pub fn reset_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn take_grad(&mut self) -> Vec<f64> {
        let n = self.grad.len();
        std::mem::replace(&mut self.grad, vec![0.0; n])
    }

    pub(crate) fn begin(&mut self, kind: TapeKind, layout: &[usize], num_params: usize) {
        if self.kind != Some(kind) || self.layout != layout || self.grad.len() != num_params {
            self.kind = Some(kind);
            self.layout = layout.to_vec();
            self.grad = vec![0.0; num_params];
        }
    }

    pub(crate) fn check(&self, kind: TapeKind, layout: &[usize]) -> Result<()> {
        match self.kind {
            None => Err(Error::MissingTape),
            Some(k) if k != kind || self.layout != layout => Err(Error::StaleTape),
            Some(_) => Ok(()),
        }
    }

    pub(crate) fn grad_mut(&mut self) -> &mut [f64] {
        &mut self.grad
    }
}

/// Network output at `x`; with a tape, activations are cached for
/// [`mlp_backward`].
pub fn mlp_forward(net: &Network, x: &[f64], tape: Option<&mut GradTape>) -> Result<Vec<f64>> {
    ensure_len("mlp_forward input", net.input_dim(), x.len())?;
    match tape {
        Some(tape) => {
            tape.begin(
                TapeKind::Network(net.activation),
                &net.dims,
                net.num_params(),
            );
            let (mut pre, mut post) = (
                std::mem::take(&mut tape.pre),
                std::mem::take(&mut tape.post),
            );
            let out = forward_kernel(
                &net.dims,
                net.activation,
                &net.params,
                x,
                &mut pre,
                &mut post,
            );
            tape.pre = pre;
            tape.post = post;
            Ok(out)
        }
        None => {
            let (mut pre, mut post) = (Vec::new(), Vec::new());
            Ok(forward_kernel(
                &net.dims,
                net.activation,
                &net.params,
                x,
                &mut pre,
                &mut post,
            ))
        }
    }
}

/// Accumulates `∂(output_grad · h(x))/∂θ` into the tape and returns the
/// accumulator.
pub fn mlp_backward<'t>(
    net: &Network,
    tape: &'t mut GradTape,
    output_grad: &[f64],
) -> Result<&'t [f64]> {
    tape.check(TapeKind::Network(net.activation), &net.dims)?;
    ensure_len(
        "mlp_backward output_grad",
        net.output_dim(),
        output_grad.len(),
    )?;
    let GradTape {
        pre, post, grad, ..
    } = tape;
    backward_kernel(
        &net.dims,
        net.activation,
        &net.params,
        pre,
        post,
        output_grad,
        grad,
    );
    Ok(&tape.grad)
}

fn forward_kernel<S: Scalar>(
    dims: &[usize],
    act: Activation,
    params: &[S],
    x: &[S],
    pre: &mut Vec<Vec<S>>,
    post: &mut Vec<Vec<S>>,
) -> Vec<S> {
    let layers = layer_offsets(dims);
    let n = layers.len();
    pre.resize(n, Vec::new());
    post.resize(n, Vec::new());
    post[0].clear();
    post[0].extend_from_slice(x);
    for (l, &(wo, bo, fan_in, fan_out)) in layers.iter().enumerate() {
        let mut z = Vec::with_capacity(fan_out);
        {
            let input = &post[l];
            for o in 0..fan_out {
                let row = &params[wo + o * fan_in..wo + (o + 1) * fan_in];
                let mut acc = params[bo + o];
                for (w, a) in row.iter().zip(input) {
                    acc += *w * *a;
                }
                z.push(acc);
            }
        }
        if l + 1 < n {
            let next: Vec<S> = z.iter().map(|&u| act.apply(u)).collect();
            post[l + 1] = next;
        }
        pre[l] = z;
    }
    pre[n - 1].clone()
}

fn backward_kernel<S: Scalar>(
    dims: &[usize],
    act: Activation,
    params: &[S],
    pre: &[Vec<S>],
    post: &[Vec<S>],
    output_grad: &[S],
    acc: &mut [S],
) {
    let layers = layer_offsets(dims);
    let mut delta: Vec<S> = output_grad.to_vec();
    for l in (0..layers.len()).rev() {
        let (wo, bo, fan_in, fan_out) = layers[l];
        let input = &post[l];
        for o in 0..fan_out {
            let d = delta[o];
            let row = &mut acc[wo + o * fan_in..wo + (o + 1) * fan_in];
            for (g, a) in row.iter_mut().zip(input) {
                *g += d * *a;
            }
            acc[bo + o] += d;
        }
        if l > 0 {
            let mut prev = vec![S::from_f64(0.0); fan_in];
            for o in 0..fan_out {
                let d = delta[o];
                let row = &params[wo + o * fan_in..wo + (o + 1) * fan_in];
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += *w * d;
                }
            }
            for (p, &z) in prev.iter_mut().zip(&pre[l - 1]) {
                *p = *p * act.derivative(z);
            }
            delta = prev;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::dual::gelu;
    use crate::numkit::Rng;

    fn random_net(dims: Vec<usize>, act: Activation, seed: u64) -> Network {
        let mut rng = Rng::new(seed);
        let n = Network::param_count(&dims);
        let p = (0..n).map(|_| 0.7 * rng.gaussian()).collect();
        Network::new(dims, act, p).unwrap()
    }

    #[test]
    fn layout_param_count() {
        assert_eq!(
            Network::param_count(&[8, 32, 32, 1]),
            8 * 32 + 32 + 32 * 32 + 32 + 32 + 1
        );
        let net = Network::zeros(vec![2, 3, 1], Activation::Gelu).unwrap();
        assert_eq!(net.layer_offsets(), vec![(0, 6, 2, 3), (9, 12, 3, 1)]);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Network::zeros(vec![4, 5, 5, 2], Activation::Gelu).unwrap();
        let out = mlp_forward(&net, &[1.0, -2.0, 3.0, 0.5], None).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut p = vec![0.0; 12];
        for i in 0..3 {
            p[i * 3 + i] = 1.0;
        }
        let net = Network::new(vec![3, 3], Activation::Gelu, p).unwrap();
        let x = [0.3, -1.0, 2.0];
        assert_eq!(mlp_forward(&net, &x, None).unwrap(), x.to_vec());
    }

    #[test]
    fn forward_matches_scalar_loop() {
        let net = random_net(vec![3, 4, 2, 2], Activation::Gelu, 5);
        let x = [0.2, -0.7, 1.3];
        let p = net.params();
        // straight-line recomputation, layout written out by hand
        let mut h1 = [0.0; 4];
        for o in 0..4 {
            let mut s = p[12 + o];
            for i in 0..3 {
                s += p[o * 3 + i] * x[i];
            }
            h1[o] = gelu(s);
        }
        let mut h2 = [0.0; 2];
        for o in 0..2 {
            let mut s = p[16 + 8 + o];
            for i in 0..4 {
                s += p[16 + o * 4 + i] * h1[i];
            }
            h2[o] = gelu(s);
        }
        let mut y = [0.0; 2];
        for o in 0..2 {
            let mut s = p[26 + 4 + o];
            for i in 0..2 {
                s += p[26 + o * 2 + i] * h2[i];
            }
            y[o] = s;
        }
        let got = mlp_forward(&net, &x, None).unwrap();
        for (g, e) in got.iter().zip(&y) {
            assert!((g - e).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_output_grad_gives_zero_gradient() {
        let net = random_net(vec![2, 3, 1], Activation::Gelu, 1);
        let mut tape = GradTape::new();
        mlp_forward(&net, &[0.5, 0.1], Some(&mut tape)).unwrap();
        let g = mlp_backward(&net, &mut tape, &[0.0]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_layer_gradient_is_outer_product() {
        let net = random_net(vec![3, 2], Activation::Gelu, 2);
        let x = [1.0, 2.0, -1.0];
        let g = [0.5, -2.0];
        let mut tape = GradTape::new();
        mlp_forward(&net, &x, Some(&mut tape)).unwrap();
        let grad = mlp_backward(&net, &mut tape, &g).unwrap().to_vec();
        for o in 0..2 {
            for i in 0..3 {
                assert_eq!(grad[o * 3 + i], g[o] * x[i]);
            }
            assert_eq!(grad[6 + o], g[o]);
        }
    }

    #[test]
    fn backward_without_forward_is_an_error() {
        let net = random_net(vec![2, 2], Activation::Gelu, 3);
        let mut tape = GradTape::new();
        assert_eq!(
            mlp_backward(&net, &mut tape, &[1.0, 1.0]).unwrap_err(),
            Error::MissingTape
        );
        let other = random_net(vec![2, 3, 2], Activation::Gelu, 3);
        mlp_forward(&other, &[0.0, 1.0], Some(&mut tape)).unwrap();
        assert_eq!(
            mlp_backward(&net, &mut tape, &[1.0, 1.0]).unwrap_err(),
            Error::StaleTape
        );
    }

    #[test]
    fn repeated_backward_accumulates() {
        let net = random_net(vec![2, 3, 1], Activation::Gelu, 4);
        let mut tape = GradTape::new();
        mlp_forward(&net, &[0.5, -0.4], Some(&mut tape)).unwrap();
        let once = mlp_backward(&net, &mut tape, &[1.0]).unwrap().to_vec();
        let twice = mlp_backward(&net, &mut tape, &[1.0]).unwrap().to_vec();
        for (a, b) in once.iter().zip(&twice) {
            assert!((2.0 * a - b).abs() < 1e-15);
        }
        assert_eq!(twice.len(), net.num_params());
    }

    #[test]
    fn input_shape_mismatch() {
        let net = random_net(vec![2, 3, 1], Activation::Gelu, 4);
        assert!(mlp_forward(&net, &[1.0], None).is_err());
        let mut tape = GradTape::new();
        mlp_forward(&net, &[1.0, 0.0], Some(&mut tape)).unwrap();
        assert!(mlp_backward(&net, &mut tape, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn second_order_matches_gradient_differences() {
        // Hessian-vector product of ½‖h(x)‖² against differences of gradients.
        let net = random_net(vec![3, 5, 4, 2], Activation::Gelu, 9);
        let x = [0.4, -0.9, 1.1];
        let mut rng = Rng::new(10);
        let dir: Vec<f64> = (0..net.num_params()).map(|_| rng.gaussian()).collect();
        let n = net.num_params();
        let mut g = vec![0.0; n];
        let mut hv = vec![0.0; n];
        net.second_order(
            &x,
            &dir,
            |v, vd| Ok((v.to_vec(), vd.to_vec())),
            &mut g,
            &mut hv,
        )
        .unwrap();
        let grad_at = |p: Vec<f64>| {
            let net = Network::new(net.dims().to_vec(), Activation::Gelu, p).unwrap();
            let mut tape = GradTape::new();
            let out = mlp_forward(&net, &x, Some(&mut tape)).unwrap();
            mlp_backward(&net, &mut tape, &out).unwrap().to_vec()
        };
        let h = 1e-6;
        let plus: Vec<f64> = net
            .params()
            .iter()
            .zip(&dir)
            .map(|(p, d)| p + h * d)
            .collect();
        let minus: Vec<f64> = net
            .params()
            .iter()
            .zip(&dir)
            .map(|(p, d)| p - h * d)
            .collect();
        let (gp, gm) = (grad_at(plus), grad_at(minus));
        let g0 = grad_at(net.params().to_vec());
        for i in 0..n {
            let fd = (gp[i] - gm[i]) / (2.0 * h);
            assert!(
                (fd - hv[i]).abs() <= 1e-6 * (1.0 + fd.abs()),
                "i={i} fd={fd} hv={}",
                hv[i]
            );
            assert!((g0[i] - g[i]).abs() < 1e-13);
        }
    }
}
