//! Predictor and adjoint function families.
//!
//! Both [`Network`] and [`LinearPredictor`] implement [`Predictor`], the
//! interface the inner and adjoint solvers train against. Models are plain
//! values: cloning copies the parameters, which is how warm starts are
//! carried from one round to the next.

use crate::error::{ensure_len, Error, Result};
use crate::numkit::linalg::all_finite;
use crate::numkit::mlp::TapeKind;
use crate::numkit::{mlp_backward, mlp_forward, Activation, GradTape, Mat64, Network, Rng};

pub trait Predictor: Clone + Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];

    fn num_params(&self) -> usize {
        self.params().len()
    }

    /// Model output at `x`, caching what [`Predictor::backward`] needs when a
    /// tape is given.
    fn forward(&self, x: &[f64], tape: Option<&mut GradTape>) -> Result<Vec<f64>>;

    /// Accumulates `∂(output_grad · h(x))/∂θ` for the last taped forward pass.
    fn backward(&self, tape: &mut GradTape, output_grad: &[f64]) -> Result<()>;

    /// See [`Network::second_order`].
    fn second_order<F>(
        &self,
        x: &[f64],
        dir: &[f64],
        output_grad: F,
        grad_acc: &mut [f64],
        hvp_acc: &mut [f64],
    ) -> Result<(Vec<f64>, Vec<f64>)>
    where
        F: FnOnce(&[f64], &[f64]) -> Result<(Vec<f64>, Vec<f64>)>;
}

/// Model output at `x`.
pub fn predict<P: Predictor>(model: &P, x: &[f64]) -> Result<Vec<f64>> {
    model.forward(x, None)
}

impl Predictor for Network {
    fn input_dim(&self) -> usize {
        Network::input_dim(self)
    }
    fn output_dim(&self) -> usize {
        Network::output_dim(self)
    }
    fn params(&self) -> &[f64] {
        Network::params(self)
    }
    fn params_mut(&mut self) -> &mut [f64] {
        Network::params_mut(self)
    }
    fn forward(&self, x: &[f64], tape: Option<&mut GradTape>) -> Result<Vec<f64>> {
        mlp_forward(self, x, tape)
    }
    fn backward(&self, tape: &mut GradTape, output_grad: &[f64]) -> Result<()> {
        mlp_backward(self, tape, output_grad).map(|_| ())
    }
    fn second_order<F>(
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
        Network::second_order(self, x, dir, output_grad, grad_acc, hvp_acc)
    }
}

/// Fixed linear feature map `φ(x) = [M x ; 1]` (the constant feature only
/// when `bias` is set).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    matrix: Mat64,
    bias: bool,
}

impl FeatureMap {
    pub fn new(matrix: Mat64, bias: bool) -> Self {
        Self { matrix, bias }
    }

    pub fn identity(input_dim: usize, bias: bool) -> Self {
        Self::new(Mat64::identity(input_dim), bias)
    }

    pub fn input_dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn num_features(&self) -> usize {
        self.matrix.rows() + usize::from(self.bias)
    }

    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut phi = self.matrix.matvec(x)?;
        if self.bias {
            phi.push(1.0);
        }
        Ok(phi)
    }
}

/// Scalar-output predictor `h(x) = φ(x)·θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPredictor {
    features: FeatureMap,
    theta: Vec<f64>,
}

impl LinearPredictor {
    pub fn new(features: FeatureMap, theta: Vec<f64>) -> Result<Self> {
        ensure_len("LinearPredictor::new", features.num_features(), theta.len())?;
        Ok(Self { features, theta })
    }

    pub fn zeros(features: FeatureMap) -> Self {
        let n = features.num_features();
        Self {
            features,
            theta: vec![0.0; n],
        }
    }

    pub fn feature_map(&self) -> &FeatureMap {
        &self.features
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn with_theta(&self, theta: Vec<f64>) -> Result<Self> {
        Self::new(self.features.clone(), theta)
    }
}

impl Predictor for LinearPredictor {
    fn input_dim(&self) -> usize {
        self.features.input_dim()
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn params(&self) -> &[f64] {
        &self.theta
    }
    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    fn forward(&self, x: &[f64], tape: Option<&mut GradTape>) -> Result<Vec<f64>> {
        ensure_len("LinearPredictor input", self.input_dim(), x.len())?;
        let phi = self.features.features(x)?;
        let v = phi.iter().zip(&self.theta).map(|(a, b)| a * b).sum();
        if let Some(tape) = tape {
            tape.begin(TapeKind::Linear, &[phi.len(), 1], self.theta.len());
            tape.post = vec![phi];
            tape.pre.clear();
        }
        Ok(vec![v])
    }

    fn backward(&self, tape: &mut GradTape, output_grad: &[f64]) -> Result<()> {
        tape.check(TapeKind::Linear, &[self.theta.len(), 1])?;
        ensure_len("LinearPredictor output_grad", 1, output_grad.len())?;
        let g = output_grad[0];
        let phi = tape.post[0].clone();
        for (acc, p) in tape.grad_mut().iter_mut().zip(&phi) {
            *acc += g * p;
        }
        Ok(())
    }

    fn second_order<F>(
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
        ensure_len("LinearPredictor direction", self.theta.len(), dir.len())?;
        ensure_len("LinearPredictor grad_acc", self.theta.len(), grad_acc.len())?;
        ensure_len("LinearPredictor hvp_acc", self.theta.len(), hvp_acc.len())?;
        let phi = self.features.features(x)?;
        let v = vec![phi.iter().zip(&self.theta).map(|(a, b)| a * b).sum::<f64>()];
        let vdot = vec![phi.iter().zip(dir).map(|(a, b)| a * b).sum::<f64>()];
        let (g, gdot) = output_grad(&v, &vdot)?;
        ensure_len("LinearPredictor output grad", 1, g.len())?;
        ensure_len("LinearPredictor output grad tangent", 1, gdot.len())?;
        for ((ga, ha), p) in grad_acc.iter_mut().zip(hvp_acc.iter_mut()).zip(&phi) {
            *ga += g[0] * p;
            *ha += gdot[0] * p;
        }
        Ok((v, vdot))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitScheme {
    Zeros,
    /// Every parameter i.i.d. `N(0, std²)`.
    Gaussian {
        std: f64,
    },
    /// Weights i.i.d. `N(0, 1/fan_in)`, biases zero.
    FanIn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitSpec {
    pub scheme: InitScheme,
    /// Names the RNG sub-stream the parameters are drawn from.
    pub label: String,
}

impl InitSpec {
    pub fn new(scheme: InitScheme, label: impl Into<String>) -> Self {
        Self {
            scheme,
            label: label.into(),
        }
    }
}

pub fn init_network(
    spec: &InitSpec,
    dims: Vec<usize>,
    activation: Activation,
    rng: &Rng,
) -> Result<Network> {
    let mut net = Network::zeros(dims, activation)?;
    let mut stream = rng.fork(&spec.label);
    match spec.scheme {
        InitScheme::Zeros => {}
        InitScheme::Gaussian { std } => {
            if !(std >= 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "init std must be >= 0, got {std}"
                )));
            }
            net.params_mut()
                .iter_mut()
                .for_each(|p| *p = std * stream.gaussian());
        }
        InitScheme::FanIn => {
            for (wo, _bo, fan_in, fan_out) in net.layer_offsets() {
                let std = 1.0 / (fan_in as f64).sqrt();
                for p in &mut net.params_mut()[wo..wo + fan_in * fan_out] {
                    *p = std * stream.gaussian();
                }
            }
        }
    }
    Ok(net)
}

/// `θ ← θ − lr·g`.
pub fn sgd_step<P: Predictor>(model: &mut P, grad: &[f64], lr: f64) -> Result<()> {
    ensure_len("sgd_step", model.num_params(), grad.len())?;
    check_lr(lr)?;
    if !all_finite(grad) {
        return Err(Error::NonFinite("sgd_step gradient"));
    }
    for (p, g) in model.params_mut().iter_mut().zip(grad) {
        *p -= lr * g;
    }
    Ok(())
}

fn check_lr(lr: f64) -> Result<()> {
    if lr.is_finite() && lr >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "learning rate must be finite and >= 0, got {lr}"
        )))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(format!(
                "unknown optimizer '{other}' (expected sgd or adam)"
            )),
        }
    }
}

/// Adam with the usual defaults (β₁ = 0.9, β₂ = 0.999, ε = 1e-8) and bias
/// correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Optimizer state carried alongside a model.
#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerState {
    Sgd,
    Adam(AdamState),
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, num_params: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => OptimizerState::Sgd,
            OptimizerKind::Adam => OptimizerState::Adam(AdamState {
                m: vec![0.0; num_params],
                v: vec![0.0; num_params],
                t: 0,
            }),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            OptimizerState::Sgd => OptimizerKind::Sgd,
            OptimizerState::Adam(_) => OptimizerKind::Adam,
        }
    }

    pub fn step<P: Predictor>(&mut self, model: &mut P, grad: &[f64], lr: f64) -> Result<()> {
        match self {
            OptimizerState::Sgd => sgd_step(model, grad, lr),
            OptimizerState::Adam(st) => {
                ensure_len("adam step", model.num_params(), grad.len())?;
                ensure_len("adam state", st.m.len(), grad.len())?;
                check_lr(lr)?;
                if !all_finite(grad) {
                    return Err(Error::NonFinite("adam gradient"));
                }
                st.t += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(st.t as i32);
                let c2 = 1.0 - ADAM_BETA2.powi(st.t as i32);
                for (((p, g), m), v) in model
                    .params_mut()
                    .iter_mut()
                    .zip(grad)
                    .zip(st.m.iter_mut())
                    .zip(st.v.iter_mut())
                {
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                }
                Ok(())
            }
        }
    }
}

/// A model together with its optimizer state; the unit that is warm-started
/// between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainable<P> {
    pub model: P,
    pub opt: OptimizerState,
}

impl<P: Predictor> Trainable<P> {
    pub fn new(model: P, kind: OptimizerKind) -> Self {
        let opt = OptimizerState::new(kind, model.num_params());
        Self { model, opt }
    }
}
