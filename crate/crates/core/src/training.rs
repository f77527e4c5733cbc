//! Full-batch gradient descent and surrogate gradient learning on the loss
//! `½‖f(X) − Y‖²`, with optional tracking of the empirical kernel.

use serde::{Deserialize, Serialize};

use crate::activations::Surrogate;
use crate::data::Dataset;
use crate::empirical::kernel_gram;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::network::{gemm, Network};

/// Abort threshold relative to the initial loss.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainRule {
    GradientDescent,
    /// Surrogate gradient learning: the backward pass uses the given surrogate.
    Sgl(Surrogate),
}

impl TrainRule {
    /// Derivative used by the backward pass of `net`.
    pub fn backward(&self, net: &Network) -> Result<Surrogate> {
        match self {
            TrainRule::GradientDescent => net.config.activation.derivative(),
            TrainRule::Sgl(s) => Ok(s.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub eta: f64,
    pub steps: usize,
    pub rule: TrainRule,
    /// Record the empirical kernel drift every this many steps.
    pub record_kernel_every: Option<usize>,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(eta: f64, steps: usize, rule: TrainRule) -> Self {
        TrainConfig { eta, steps, rule, record_kernel_every: None, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::InvalidConfig(format!("eta = {} must be positive", self.eta)));
        }
        if self.record_kernel_every == Some(0) {
            return Err(Error::InvalidConfig("record_kernel_every must be positive".into()));
        }
        Ok(())
    }
}

/// Kernel drift at one recorded step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftSample {
    pub step: usize,
    /// `‖Î_t(X, X) − Î_0(X, X)‖_F`.
    pub to_init: f64,
    /// `‖Î_t(X, X) − I(X, X)‖_F` when a reference kernel was supplied.
    pub to_analytic: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainTrace {
    /// Loss before each step, plus the final loss (`steps + 1` entries).
    pub loss: Vec<f64>,
    pub drift: Vec<DriftSample>,
    pub network: Network,
}

impl TrainTrace {
    pub fn final_loss(&self) -> f64 {
        *self.loss.last().expect("loss recorded at step 0")
    }

    /// Mean squared error per training point at the end of training.
    pub fn final_mse(&self, points: usize) -> f64 {
        2.0 * self.final_loss() / points as f64
    }

    pub fn max_drift(&self) -> f64 {
        self.drift.iter().fold(0.0, |m, d| m.max(d.to_init))
    }
}

/// Training stopped early; the trace up to the failure is kept.
#[derive(Debug, thiserror::Error)]
#[error("{error}")]
pub struct TrainFailure {
    pub error: Error,
    pub trace: Box<TrainTrace>,
}

impl From<TrainFailure> for Error {
    fn from(f: TrainFailure) -> Error {
        f.error
    }
}

struct Kernels<'a> {
    s1: Surrogate,
    s2: Surrogate,
    init: Matrix,
    analytic: Option<&'a Matrix>,
}

impl Kernels<'_> {
    fn sample(&self, net: &Network, data: &Dataset, step: usize) -> Result<DriftSample> {
        let k = kernel_gram(net, &self.s1, &self.s2, &data.inputs)?.matrix;
        let to_init = k.sub(&self.init)?.frobenius_norm();
        let to_analytic = match self.analytic {
            Some(a) => Some(k.sub(a)?.frobenius_norm()),
            None => None,
        };
        Ok(DriftSample { step, to_init, to_analytic })
    }
}

/// Trains `net` on `data`.
pub fn train(net: Network, data: &Dataset, cfg: &TrainConfig) -> std::result::Result<TrainTrace, TrainFailure> {
    train_tracked(net, data, cfg, None)
}

/// Trains `net`, measuring kernel drift against `analytic` when given.
///
/// Each step is `θ ← θ − η J̃(X)ᵀ (f(X) − Y)` where `J̃` uses the rule's backward
/// derivative while the forward pass keeps the activation.
pub fn train_tracked(
    mut net: Network,
    data: &Dataset,
    cfg: &TrainConfig,
    analytic: Option<&Matrix>,
) -> std::result::Result<TrainTrace, TrainFailure> {
    let fail = |error: Error, net: Network, loss: Vec<f64>, drift: Vec<DriftSample>| TrainFailure {
        error,
        trace: Box::new(TrainTrace { loss, drift, network: net }),
    };
    if let Err(e) = check_inputs(&net, data, cfg) {
        return Err(fail(e, net, vec![], vec![]));
    }
    let backward = match cfg.rule.backward(&net) {
        Ok(b) => b,
        Err(e) => return Err(fail(e, net, vec![], vec![])),
    };
    let kernels = match cfg.record_kernel_every {
        Some(_) => {
            let built = net.config.activation.derivative().and_then(|s1| {
                let init = kernel_gram(&net, &s1, &backward, &data.inputs)?.matrix;
                Ok(Kernels { s1, s2: backward.clone(), init, analytic })
            });
            match built {
                Ok(k) => Some(k),
                Err(e) => return Err(fail(e, net, vec![], vec![])),
            }
        }
        None => None,
    };

    let mut state = match Workspace::new(&net, data) {
        Ok(s) => s,
        Err(e) => return Err(fail(e, net, vec![], vec![])),
    };
    let mut loss = Vec::with_capacity(cfg.steps + 1);
    let mut drift = Vec::new();
    for step in 0..=cfg.steps {
        if let (Some(k), Some(every)) = (&kernels, cfg.record_kernel_every) {
            if step % every == 0 || step == cfg.steps {
                match k.sample(&net, data, step) {
                    Ok(s) => drift.push(s),
                    Err(e) => return Err(fail(e, net, loss, drift)),
                }
            }
        }
        let l = state.forward(&net);
        loss.push(l);
        if !l.is_finite() || l > DIVERGENCE_FACTOR * loss[0].max(f64::MIN_POSITIVE) {
            return Err(fail(Error::NonFiniteLoss { step, loss: l }, net, loss, drift));
        }
        if step < cfg.steps {
            state.backward_update(&mut net, &backward, cfg.eta);
        }
    }
    Ok(TrainTrace { loss, drift, network: net })
}

fn check_inputs(net: &Network, data: &Dataset, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidConfig("empty dataset".into()));
    }
    if data.input_dim() != net.config.input_dim() {
        return Err(Error::DimensionMismatch { expected: net.config.input_dim(), got: data.input_dim() });
    }
    if data.output_dim() != net.config.output_dim() {
        return Err(Error::DimensionMismatch { expected: net.config.output_dim(), got: data.output_dim() });
    }
    Ok(())
}

/// Buffers reused across steps. All matrices are `width × d`.
struct Workspace {
    d: usize,
    targets: Vec<f64>,
    acts: Vec<Vec<f64>>,
    preacts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
}

impl Workspace {
    fn new(net: &Network, data: &Dataset) -> Result<Self> {
        let d = data.len();
        let w = &net.config.widths;
        let acts = (0..net.depth()).map(|l| vec![0.0; w[l] * d]).collect::<Vec<_>>();
        let mut ws = Workspace {
            d,
            targets: data.target_matrix()?.transpose().into_vec(),
            acts,
            preacts: (1..=net.depth()).map(|l| vec![0.0; w[l] * d]).collect(),
            deltas: (1..=net.depth()).map(|l| vec![0.0; w[l] * d]).collect(),
        };
        ws.acts[0].copy_from_slice(data.input_matrix()?.transpose().as_slice());
        Ok(ws)
    }

    /// Forward pass; returns `½‖f(X) − Y‖²`.
    fn forward(&mut self, net: &Network) -> f64 {
        let cfg = &net.config;
        let d = self.d;
        let depth = net.depth();
        for l in 1..=depth {
            let (rows, cols) = (cfg.widths[l], cfg.widths[l - 1]);
            let layer = &net.layers[l - 1];
            let h = &mut self.preacts[l - 1];
            for i in 0..rows {
                let b = cfg.sigma_b * layer.biases[i];
                h[i * d..(i + 1) * d].iter_mut().for_each(|v| *v = b);
            }
            gemm(rows, cols, d, cfg.weight_scale(l), layer.weights.as_slice(), false, &self.acts[l - 1], false, 1.0, h);
            if l < depth {
                let act = cfg.activation;
                let (h, a) = (&self.preacts[l - 1], &mut self.acts[l]);
                for (ai, &hi) in a.iter_mut().zip(h) {
                    *ai = act.eval(hi);
                }
            }
        }
        let out = &self.preacts[depth - 1];
        let delta = &mut self.deltas[depth - 1];
        let mut loss = 0.0;
        for ((dv, &f), &y) in delta.iter_mut().zip(out).zip(&self.targets) {
            *dv = f - y;
            loss += *dv * *dv;
        }
        0.5 * loss
    }

    /// Back-propagates the residual with `backward` and applies the update.
    fn backward_update(&mut self, net: &mut Network, backward: &Surrogate, eta: f64) {
        let d = self.d;
        let depth = net.depth();
        let (sigma_b, widths) = (net.config.sigma_b, net.config.widths.clone());
        for l in (1..=depth).rev() {
            let (rows, cols) = (widths[l], widths[l - 1]);
            let c = net.config.weight_scale(l);
            if l > 1 {
                let (lower, upper) = self.deltas.split_at_mut(l - 1);
                let next = &mut lower[l - 2];
                gemm(cols, rows, d, c, net.layers[l - 1].weights.as_slice(), true, &upper[0], false, 0.0, next);
                for (v, &h) in next.iter_mut().zip(&self.preacts[l - 2]) {
                    *v *= backward.eval(h);
                }
            }
            let delta = &self.deltas[l - 1];
            let layer = &mut net.layers[l - 1];
            gemm(rows, d, cols, -eta * c, delta, false, &self.acts[l - 1], true, 1.0, layer.weights.as_mut_slice());
            for i in 0..rows {
                let s: f64 = delta[i * d..(i + 1) * d].iter().sum();
                layer.biases[i] -= eta * sigma_b * s;
            }
        }
    }
}

/// Drift of the empirical kernel along a stored trajectory of networks.
pub fn kernel_drift(
    trajectory: &[(usize, Network)],
    data: &Dataset,
    s1: &Surrogate,
    s2: &Surrogate,
    analytic: Option<&Matrix>,
) -> Result<Vec<DriftSample>> {
    let Some((_, first)) = trajectory.first() else {
        return Ok(vec![]);
    };
    let init = kernel_gram(first, s1, s2, &data.inputs)?.matrix;
    let k = Kernels { s1: s1.clone(), s2: s2.clone(), init, analytic };
    trajectory.iter().map(|(step, net)| k.sample(net, data, *step)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activations::Activation;
    use crate::data::make_sphere_dataset;
    use crate::empirical::quasi_jacobian;
    use crate::network::NetworkConfig;

    fn setup(width: usize, act: Activation) -> (Network, Dataset) {
        let cfg = NetworkConfig::uniform(2, width, 3, 1, act, 3);
        (Network::init(cfg).unwrap(), make_sphere_dataset(6, 1).unwrap())
    }

    #[test]
    fn zero_steps_leave_network_unchanged() {
        let (net, data) = setup(8, Activation::erf_m(2.0).unwrap());
        let trace = train(net.clone(), &data, &TrainConfig::new(0.1, 0, TrainRule::GradientDescent)).unwrap();
        assert_eq!(trace.network, net);
        assert_eq!(trace.loss.len(), 1);
    }

    #[test]
    fn one_step_matches_jacobian_update() {
        let (net, data) = setup(5, Activation::erf_m(2.0).unwrap());
        let s = Surrogate::Rect { w: 1.0 };
        let eta = 0.05;
        let trace = train(net.clone(), &data, &TrainConfig::new(eta, 1, TrainRule::Sgl(s.clone()))).unwrap();
        let mut theta = net.flat_parameters();
        for (x, y) in data.inputs.iter().zip(&data.targets) {
            let r = net.eval(x).unwrap()[0] - y[0];
            let j = quasi_jacobian(&net, &s, x).unwrap().matrix;
            for (t, g) in theta.iter_mut().zip(j.row(0)) {
                *t -= eta * g * r;
            }
        }
        let got = trace.network.flat_parameters();
        for (a, b) in got.iter().zip(&theta) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn sgl_with_true_derivative_is_gradient_descent() {
        let (net, data) = setup(7, Activation::erf_m(2.0).unwrap());
        let gd = train(net.clone(), &data, &TrainConfig::new(0.1, 20, TrainRule::GradientDescent)).unwrap();
        let sgl = train(net, &data, &TrainConfig::new(0.1, 20, TrainRule::Sgl(Surrogate::ErfDeriv { m: 2.0 }))).unwrap();
        assert_eq!(gd.network, sgl.network);
        assert_eq!(gd.loss, sgl.loss);
    }

    #[test]
    fn sign_networks_need_a_surrogate() {
        let (net, data) = setup(4, Activation::Sign);
        let err = train(net.clone(), &data, &TrainConfig::new(0.1, 1, TrainRule::GradientDescent)).unwrap_err();
        assert!(matches!(err.error, Error::MissingSurrogate(_)));
        let ok = train(net, &data, &TrainConfig::new(0.1, 50, TrainRule::Sgl(Surrogate::derf()))).unwrap();
        assert!(ok.final_loss() < ok.loss[0]);
    }

    #[test]
    fn divergence_is_reported_with_trace() {
        let (net, data) = setup(16, Activation::erf_m(2.0).unwrap());
        let err = train(net, &data, &TrainConfig::new(50.0, 200, TrainRule::GradientDescent)).unwrap_err();
        assert!(matches!(err.error, Error::NonFiniteLoss { .. }));
        assert!(!err.trace.loss.is_empty());
    }

    #[test]
    fn drift_starts_at_zero() {
        let (net, data) = setup(10, Activation::erf_m(2.0).unwrap());
        let mut cfg = TrainConfig::new(0.1, 0, TrainRule::Sgl(Surrogate::derf()));
        cfg.record_kernel_every = Some(5);
        let trace = train(net.clone(), &data, &cfg).unwrap();
        assert_eq!(trace.drift.len(), 1);
        assert_eq!(trace.drift[0].to_init, 0.0);
        cfg.steps = 10;
        let trace = train(net, &data, &cfg).unwrap();
        assert_eq!(trace.drift.iter().map(|d| d.step).collect::<Vec<_>>(), vec![0, 5, 10]);
        assert!(trace.max_drift() > 0.0);
    }
}
