//! Fully connected networks in the NTK parametrization.
//!
//! Layer `l` computes `h⁽ˡ⁾ = σ_w/√n_{l−1} · W⁽ˡ⁾ a⁽ˡ⁻¹⁾ + σ_b · b⁽ˡ⁾` with
//! `a⁽⁰⁾ = x` and `a⁽ˡ⁾ = σ(h⁽ˡ⁾)`. The output is the last preactivation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activations::Activation;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{derive_seed, Stream};

/// Architecture and initialization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// `n_0, …, n_L`.
    pub widths: Vec<usize>,
    pub sigma_w: f64,
    pub sigma_b: f64,
    /// Multiplier applied to the last layer at initialization.
    #[serde(default = "one")]
    pub kappa: f64,
    pub activation: Activation,
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl NetworkConfig {
    pub fn new(widths: Vec<usize>, activation: Activation, seed: u64) -> Self {
        NetworkConfig { widths, sigma_w: 1.0, sigma_b: 0.1, kappa: 1.0, activation, seed }
    }

    /// `n_0 = input_dim`, `depth − 1` hidden layers of width `width`, and `n_L = output_dim`.
    pub fn uniform(input_dim: usize, width: usize, depth: usize, output_dim: usize, activation: Activation, seed: u64) -> Self {
        let mut widths = vec![input_dim];
        widths.extend(std::iter::repeat_n(width, depth.saturating_sub(1)));
        widths.push(output_dim);
        NetworkConfig::new(widths, activation, seed)
    }

    pub fn with_sigmas(mut self, sigma_w: f64, sigma_b: f64) -> Self {
        self.sigma_w = sigma_w;
        self.sigma_b = sigma_b;
        self
    }

    pub fn with_kappa(mut self, kappa: f64) -> Self {
        self.kappa = kappa;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn depth(&self) -> usize {
        self.widths.len().saturating_sub(1)
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated config has widths")
    }

    /// `P = Σ n_l (n_{l−1} + 1)`.
    pub fn parameter_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::InvalidConfig("depth must be at least 1".into()));
        }
        if self.widths.contains(&0) {
            return Err(Error::InvalidConfig("all widths must be at least 1".into()));
        }
        if !(self.sigma_w > 0.0) || !self.sigma_w.is_finite() {
            return Err(Error::InvalidConfig(format!("sigma_w = {} must be positive", self.sigma_w)));
        }
        if !(self.sigma_b >= 0.0) || !self.sigma_b.is_finite() {
            return Err(Error::InvalidConfig(format!("sigma_b = {} must be nonnegative", self.sigma_b)));
        }
        if !(self.kappa > 0.0 && self.kappa <= 1.0) {
            return Err(Error::InvalidConfig(format!("kappa = {} must lie in (0, 1]", self.kappa)));
        }
        Ok(())
    }

    /// `σ_w / √n_{l−1}` for layer `l ∈ 1..=L`.
    pub fn weight_scale(&self, l: usize) -> f64 {
        self.sigma_w / (self.widths[l - 1] as f64).sqrt()
    }
}

/// One layer's parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `n_l × n_{l−1}`.
    pub weights: Matrix,
    pub biases: Vec<f64>,
}

/// An MLP with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub config: NetworkConfig,
    pub layers: Vec<Layer>,
}

/// Result of a single-input forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub output: Vec<f64>,
    /// `h⁽¹⁾, …, h⁽ᴸ⁾`; the last entry equals `output`.
    pub preacts: Vec<Vec<f64>>,
}

/// Result of a batched forward pass; column `j` belongs to input `j`.
#[derive(Debug, Clone)]
pub struct BatchForward {
    /// `a⁽⁰⁾, …, a⁽ᴸ⁻¹⁾` as `n_l × d` matrices (`a⁽⁰⁾` is the input).
    pub acts: Vec<Matrix>,
    /// `h⁽¹⁾, …, h⁽ᴸ⁾` as `n_l × d` matrices.
    pub preacts: Vec<Matrix>,
}

impl BatchForward {
    pub fn output(&self) -> &Matrix {
        self.preacts.last().expect("at least one layer")
    }
}

const MAGIC: &[u8; 8] = b"SGNTKNET";

/// `C = alpha · op(A) · op(B) + beta · C` on row-major buffers.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted lengths match the strides for every (i, j) index used.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

impl Network {
    /// Draws all parameters iid `N(0, 1)` from the counter stream `(seed, layer, entry)`.
    /// Entries of a layer are numbered weights first (row-major), then biases.
    pub fn init(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let depth = config.depth();
        let layers = (1..=depth)
            .map(|l| {
                let (rows, cols) = (config.widths[l], config.widths[l - 1]);
                let mut stream = Stream::new(config.seed, l as u64);
                let mut w = vec![0.0; rows * cols];
                stream.fill_normal(&mut w);
                let mut b = vec![0.0; rows];
                stream.fill_normal(&mut b);
                if l == depth && config.kappa != 1.0 {
                    w.iter_mut().chain(b.iter_mut()).for_each(|v| *v *= config.kappa);
                }
                Layer { weights: Matrix::from_vec(rows, cols, w).expect("sizes match"), biases: b }
            })
            .collect();
        Ok(Network { config, layers })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn activation(&self) -> Activation {
        self.config.activation
    }

    pub fn parameter_count(&self) -> usize {
        self.config.parameter_count()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.config.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.config.input_dim(), got: x.len() });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Forward> {
        self.check_input(x)?;
        let act = self.config.activation;
        let mut preacts = Vec::with_capacity(self.depth());
        let mut a = x.to_vec();
        for (idx, layer) in self.layers.iter().enumerate() {
            let c = self.config.weight_scale(idx + 1);
            let mut h = layer.weights.matvec(&a)?;
            for (hi, bi) in h.iter_mut().zip(&layer.biases) {
                *hi = c * *hi + self.config.sigma_b * bi;
            }
            a = h.iter().map(|&z| act.eval(z)).collect();
            preacts.push(h);
        }
        let output = preacts.last().cloned().unwrap_or_default();
        Ok(Forward { output, preacts })
    }

    /// Network output for one input.
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.output)
    }

    /// Forward pass over the rows of `inputs` (`d × n_0`).
    pub fn forward_batch(&self, inputs: &Matrix) -> Result<BatchForward> {
        if inputs.cols() != self.config.input_dim() {
            return Err(Error::DimensionMismatch { expected: self.config.input_dim(), got: inputs.cols() });
        }
        let d = inputs.rows();
        let act = self.config.activation;
        let mut acts = vec![inputs.transpose()];
        let mut preacts = Vec::with_capacity(self.depth());
        for (idx, layer) in self.layers.iter().enumerate() {
            let (rows, cols) = layer.weights.shape();
            let c = self.config.weight_scale(idx + 1);
            let mut h = Matrix::zeros(rows, d);
            for i in 0..rows {
                let b = self.config.sigma_b * layer.biases[i];
                h.row_mut(i).iter_mut().for_each(|v| *v = b);
            }
            let prev = acts.last().expect("input present");
            gemm(rows, cols, d, c, layer.weights.as_slice(), false, prev.as_slice(), false, 1.0, h.as_mut_slice());
            if idx + 1 < self.depth() {
                let mut a = h.clone();
                a.as_mut_slice().iter_mut().for_each(|v| *v = act.eval(*v));
                acts.push(a);
            }
            preacts.push(h);
        }
        Ok(BatchForward { acts, preacts })
    }

    /// Outputs for the rows of `inputs`, as a `d × n_L` matrix.
    pub fn predict(&self, inputs: &Matrix) -> Result<Matrix> {
        Ok(self.forward_batch(inputs)?.output().transpose())
    }

    /// All parameters, layer by layer, weights (row-major) before biases.
    pub fn flat_parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for layer in &self.layers {
            out.extend_from_slice(layer.weights.as_slice());
            out.extend_from_slice(&layer.biases);
        }
        out
    }

    pub fn set_flat_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.parameter_count() {
            return Err(Error::DimensionMismatch { expected: self.parameter_count(), got: params.len() });
        }
        let mut off = 0;
        for layer in &mut self.layers {
            let nw = layer.weights.as_slice().len();
            layer.weights.as_mut_slice().copy_from_slice(&params[off..off + nw]);
            off += nw;
            let nb = layer.biases.len();
            layer.biases.copy_from_slice(&params[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let net: Network = serde_json::from_str(s)?;
        net.check_shapes()?;
        Ok(net)
    }

    /// Binary layout: magic, header length (u64 LE), JSON config header, then the
    /// flat parameter vector as f64 LE.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.config)?;
        let mut out = Vec::with_capacity(16 + header.len() + 8 * self.parameter_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for p in self.flat_parameters() {
            out.extend_from_slice(&p.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |why: &str| Error::Parse { input: "network bytes".into(), reason: why.into() };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let config: NetworkConfig = serde_json::from_slice(body)?;
        let mut net = Network::init(config)?;
        let rest = &bytes[16 + hlen..];
        if rest.len() != 8 * net.parameter_count() {
            return Err(bad("parameter block has wrong length"));
        }
        let params: Vec<f64> = rest
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        net.set_flat_parameters(&params)?;
        Ok(net)
    }

    fn check_shapes(&self) -> Result<()> {
        self.config.validate()?;
        if self.layers.len() != self.config.depth() {
            return Err(Error::DimensionMismatch { expected: self.config.depth(), got: self.layers.len() });
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let want = (self.config.widths[l + 1], self.config.widths[l]);
            if layer.weights.shape() != want || layer.biases.len() != want.0 {
                return Err(Error::DimensionMismatch { expected: want.0 * want.1, got: layer.weights.as_slice().len() });
            }
        }
        Ok(())
    }
}

/// Sample mean and covariance of stacked network outputs over an ensemble.
///
/// The stacked vector has entry `slot·(p·n_L) + point·n_L + output` where `slot`
/// is 0, or 1 for the second activation in paired mode.
#[derive(Debug, Clone)]
pub struct EnsembleStats {
    pub count: usize,
    pub points: usize,
    pub outputs: usize,
    pub slots: usize,
    pub mean: Vec<f64>,
    pub cov: Matrix,
    /// Standard error of every covariance entry.
    pub cov_se: Matrix,
    /// Standard error of every mean entry.
    pub mean_se: Vec<f64>,
}

impl EnsembleStats {
    pub fn index(&self, slot: usize, point: usize, output: usize) -> usize {
        slot * self.points * self.outputs + point * self.outputs + output
    }

    /// `Cov[f_slot_a(x_i)_o, f_slot_b(x_j)_o]`.
    pub fn covariance(&self, a: (usize, usize), b: (usize, usize), output: usize) -> (f64, f64) {
        let i = self.index(a.0, a.1, output);
        let j = self.index(b.0, b.1, output);
        (self.cov[(i, j)], self.cov_se[(i, j)])
    }
}

/// Seed of ensemble member `k` under root `seed`.
pub fn member_seed(seed: u64, k: usize) -> u64 {
    derive_seed(seed, "member", k as u64)
}

/// Initializes `count` networks and gathers output statistics at `points`.
/// With `paired = Some(σ₂)` every member is also evaluated with `σ₂` in place of
/// the configured activation on the same weights.
pub fn ensemble_statistics(
    config: &NetworkConfig,
    count: usize,
    points: &[Vec<f64>],
    paired: Option<Activation>,
) -> Result<EnsembleStats> {
    config.validate()?;
    if count < 2 {
        return Err(Error::InvalidConfig("ensemble statistics need count ≥ 2".into()));
    }
    let inputs = Matrix::from_rows(points)?;
    let slots = if paired.is_some() { 2 } else { 1 };
    let samples: Vec<Vec<f64>> = (0..count)
        .into_par_iter()
        .map(|k| -> Result<Vec<f64>> {
            let mut net = Network::init(config.clone().with_seed(member_seed(config.seed, k)))?;
            let mut v = net.predict(&inputs)?.into_vec();
            if let Some(a2) = paired {
                net.config.activation = a2;
                v.extend(net.predict(&inputs)?.into_vec());
            }
            Ok(v)
        })
        .collect::<Result<_>>()?;
    let dim = samples[0].len();
    let n = count as f64;
    let mean: Vec<f64> = (0..dim).map(|i| samples.iter().map(|s| s[i]).sum::<f64>() / n).collect();
    let mut cov = Matrix::zeros(dim, dim);
    let mut cov_se = Matrix::zeros(dim, dim);
    for i in 0..dim {
        for j in 0..=i {
            let prods: Vec<f64> = samples.iter().map(|s| (s[i] - mean[i]) * (s[j] - mean[j])).collect();
            let c = prods.iter().sum::<f64>() / (n - 1.0);
            let pm = prods.iter().sum::<f64>() / n;
            let pv = prods.iter().map(|p| (p - pm).powi(2)).sum::<f64>() / (n - 1.0);
            let se = (pv / n).sqrt();
            cov[(i, j)] = c;
            cov[(j, i)] = c;
            cov_se[(i, j)] = se;
            cov_se[(j, i)] = se;
        }
    }
    let mean_se = (0..dim).map(|i| (cov[(i, i)] / n).sqrt()).collect();
    Ok(EnsembleStats {
        count,
        points: points.len(),
        outputs: config.output_dim(),
        slots,
        mean,
        cov,
        cov_se,
        mean_se,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn erf2() -> Activation {
        Activation::erf_m(2.0).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_counts_parameters() {
        let cfg = NetworkConfig::new(vec![2, 5, 3, 1], erf2(), 9);
        let a = Network::init(cfg.clone()).unwrap();
        let b = Network::init(cfg.clone()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.parameter_count(), 5 * 3 + 3 * 6 + 4);
        assert_eq!(a.flat_parameters().len(), a.parameter_count());
        let c = Network::init(cfg.with_seed(10)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_entries_are_standard_normal() {
        let cfg = NetworkConfig::new(vec![100, 100, 1], erf2(), 1);
        let net = Network::init(cfg).unwrap();
        let w = net.layers[0].weights.as_slice();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 4.0 / n.sqrt());
        assert!((var - 1.0).abs() < 4.0 * (2.0 / n).sqrt());
    }

    #[test]
    fn kappa_scales_last_layer() {
        let cfg = NetworkConfig::new(vec![3, 400, 50], erf2(), 4);
        let a = Network::init(cfg.clone()).unwrap();
        let b = Network::init(cfg.with_kappa(0.2)).unwrap();
        assert_eq!(a.layers[0], b.layers[0]);
        let w = b.layers[1].weights.as_slice();
        let sd = (w.iter().map(|x| x * x).sum::<f64>() / w.len() as f64).sqrt();
        assert!((sd - 0.2).abs() < 0.01);
        let x = [0.3, -0.2, 0.9];
        let fa = a.eval(&x).unwrap();
        let fb = b.eval(&x).unwrap();
        for (u, v) in fa.iter().zip(&fb) {
            assert!((0.2 * u - v).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let cfg = NetworkConfig::new(vec![2, 7, 7, 1], erf2(), 3).with_sigmas(1.0, 0.0);
        let net = Network::init(cfg).unwrap();
        assert_eq!(net.eval(&[0.0, 0.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn single_layer_is_affine() {
        let cfg = NetworkConfig::new(vec![3, 2], erf2(), 5).with_sigmas(1.3, 0.4);
        let net = Network::init(cfg).unwrap();
        let x = [0.5, -1.0, 2.0];
        let f = net.eval(&x).unwrap();
        let c = 1.3 / 3f64.sqrt();
        for (i, &fi) in f.iter().enumerate() {
            let w = net.layers[0].weights.row(i);
            let expected = c * (w[0] * x[0] + w[1] * x[1] + w[2] * x[2]) + 0.4 * net.layers[0].biases[i];
            assert_eq!(fi, expected);
        }
    }

    #[test]
    fn hand_computed_two_layer() {
        let cfg = NetworkConfig::new(vec![1, 2, 1], erf2(), 0).with_sigmas(1.0, 0.5);
        let mut net = Network::init(cfg).unwrap();
        net.set_flat_parameters(&[0.5, -1.0, 0.2, 0.1, 2.0, 3.0, -0.4]).unwrap();
        let x = 0.7;
        let h1 = [0.5 * x + 0.5 * 0.2, -x + 0.5 * 0.1];
        let a1 = [libm::erf(2.0 * h1[0]), libm::erf(2.0 * h1[1])];
        let f = (2.0 * a1[0] + 3.0 * a1[1]) / 2f64.sqrt() + 0.5 * -0.4;
        let out = net.forward(&[x]).unwrap();
        assert!((out.output[0] - f).abs() < 1e-15);
        assert_eq!(out.preacts[0], h1.to_vec());
    }

    #[test]
    fn batch_matches_single() {
        let cfg = NetworkConfig::new(vec![2, 9, 4, 2], erf2(), 8);
        let net = Network::init(cfg).unwrap();
        let pts = vec![vec![1.0, 0.0], vec![0.3, -0.8], vec![-0.5, 0.5]];
        let out = net.predict(&Matrix::from_rows(&pts).unwrap()).unwrap();
        for (i, p) in pts.iter().enumerate() {
            let f = net.eval(p).unwrap();
            for o in 0..2 {
                assert!((out[(i, o)] - f[o]).abs() < 1e-13);
            }
        }
        assert!(net.eval(&[1.0]).is_err());
    }

    #[test]
    fn serialization_round_trips() {
        let cfg = NetworkConfig::new(vec![2, 6, 1], Activation::Sign, 12).with_kappa(0.5);
        let net = Network::init(cfg).unwrap();
        assert_eq!(Network::from_json(&net.to_json().unwrap()).unwrap(), net);
        assert_eq!(Network::from_bytes(&net.to_bytes().unwrap()).unwrap(), net);
        assert!(Network::from_bytes(b"garbage").is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(Network::init(NetworkConfig::new(vec![2], erf2(), 0)).is_err());
        assert!(Network::init(NetworkConfig::new(vec![2, 0, 1], erf2(), 0)).is_err());
        assert!(Network::init(NetworkConfig::new(vec![2, 3, 1], erf2(), 0).with_kappa(1.5)).is_err());
    }

    #[test]
    fn paired_mode_with_same_activation_is_identical() {
        let cfg = NetworkConfig::new(vec![2, 16, 1], erf2(), 2);
        let pts = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let s = ensemble_statistics(&cfg, 5, &pts, Some(erf2())).unwrap();
        for p in 0..2 {
            assert_eq!(s.mean[s.index(0, p, 0)], s.mean[s.index(1, p, 0)]);
            assert_eq!(s.covariance((0, p), (0, p), 0).0, s.covariance((1, p), (1, p), 0).0);
        }
    }
}
