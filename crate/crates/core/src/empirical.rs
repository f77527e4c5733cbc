//! Quasi-Jacobians and empirical (generalized) neural tangent kernels of a
//! finite network.
//!
//! The quasi-Jacobian replaces `σ̇` by a surrogate `σ̃` in the backward
//! recursion. With `δ⁽ᴸ⁾ = e_o` and `δ⁽ˡ⁻¹⁾ = c_l W⁽ˡ⁾ᵀ δ⁽ˡ⁾ ⊙ σ̃(h⁽ˡ⁻¹⁾)`, where
//! `c_l = σ_w/√n_{l−1}`, the entry for `W⁽ˡ⁾_ij` is `δ⁽ˡ⁾_i c_l a⁽ˡ⁻¹⁾_j` and the
//! entry for `b⁽ˡ⁾_i` is `δ⁽ˡ⁾_i σ_b`.

use std::fmt::Write as _;

use crate::activations::{ScalarMap, Surrogate};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::network::{gemm, Network};

/// `n_L × P` quasi-Jacobian of a network at one input.
#[derive(Debug, Clone, PartialEq)]
pub struct QuasiJacobian {
    pub matrix: Matrix,
    pub activation: String,
    pub surrogate: String,
}

fn layer_offsets(net: &Network) -> Vec<usize> {
    let mut offs = Vec::with_capacity(net.depth() + 1);
    let mut off = 0;
    offs.push(0);
    for w in net.config.widths.windows(2) {
        off += w[1] * (w[0] + 1);
        offs.push(off);
    }
    offs
}

/// Quasi-Jacobian of `net` at `x` with backward map `surrogate`.
pub fn quasi_jacobian(net: &Network, surrogate: &Surrogate, x: &[f64]) -> Result<QuasiJacobian> {
    let fwd = net.forward(x)?;
    let cfg = &net.config;
    let depth = net.depth();
    let n_out = cfg.output_dim();
    let offs = layer_offsets(net);
    let act = cfg.activation;
    let mut acts: Vec<Vec<f64>> = vec![x.to_vec()];
    for h in &fwd.preacts[..depth - 1] {
        acts.push(h.iter().map(|&z| act.eval(z)).collect());
    }
    let mut jac = Matrix::zeros(n_out, net.parameter_count());
    for o in 0..n_out {
        let mut delta = vec![0.0; n_out];
        delta[o] = 1.0;
        for l in (1..=depth).rev() {
            let c = cfg.weight_scale(l);
            let a = &acts[l - 1];
            let (rows, cols) = (cfg.widths[l], cfg.widths[l - 1]);
            let row = jac.row_mut(o);
            let base = offs[l - 1];
            for i in 0..rows {
                let di = delta[i];
                for j in 0..cols {
                    row[base + i * cols + j] = di * c * a[j];
                }
                row[base + rows * cols + i] = di * cfg.sigma_b;
            }
            if l > 1 {
                let w = &net.layers[l - 1].weights;
                let h = &fwd.preacts[l - 2];
                delta = (0..cols)
                    .map(|j| {
                        let s: f64 = (0..rows).map(|i| w[(i, j)] * delta[i]).sum();
                        c * s * surrogate.eval(h[j])
                    })
                    .collect();
            }
        }
    }
    Ok(QuasiJacobian { matrix: jac, activation: act.to_string(), surrogate: surrogate.to_string() })
}

/// `Î(x, y) = J^{σ̃₁}(x) J^{σ̃₂}(y)ᵀ`, an `n_L × n_L` matrix.
pub fn empirical_generalized_ntk(
    net: &Network,
    s1: &Surrogate,
    s2: &Surrogate,
    x: &[f64],
    y: &[f64],
) -> Result<Matrix> {
    let j1 = quasi_jacobian(net, s1, x)?;
    let j2 = quasi_jacobian(net, s2, y)?;
    j1.matrix.matmul(&j2.matrix.transpose())
}

/// Activations and backward signals of a batch of inputs.
struct Cache {
    /// `a⁽ˡ⁻¹⁾` for `l = 1..=L`, each `n_{l−1} × d`.
    acts: Vec<Matrix>,
    /// `δ⁽ˡ⁾` for `l = 1..=L`, each `n_l × (d·n_L)`; column `p·n_L + o`.
    deltas: Vec<Matrix>,
}

fn backward_cache(net: &Network, surrogate: &dyn ScalarMap, inputs: &Matrix) -> Result<Cache> {
    let fwd = net.forward_batch(inputs)?;
    let cfg = &net.config;
    let depth = net.depth();
    let d = inputs.rows();
    let n_out = cfg.output_dim();
    let cols = d * n_out;
    let mut deltas = vec![Matrix::zeros(0, 0); depth];
    let mut top = Matrix::zeros(n_out, cols);
    for p in 0..d {
        for o in 0..n_out {
            top[(o, p * n_out + o)] = 1.0;
        }
    }
    deltas[depth - 1] = top;
    for l in (2..=depth).rev() {
        let (rows, prev) = (cfg.widths[l], cfg.widths[l - 1]);
        let mut next = Matrix::zeros(prev, cols);
        gemm(
            prev,
            rows,
            cols,
            cfg.weight_scale(l),
            net.layers[l - 1].weights.as_slice(),
            true,
            deltas[l - 1].as_slice(),
            false,
            0.0,
            next.as_mut_slice(),
        );
        let h = &fwd.preacts[l - 2];
        for j in 0..prev {
            let hrow = h.row(j);
            let srow: Vec<f64> = hrow.iter().map(|&z| surrogate.eval(z)).collect();
            for (k, v) in next.row_mut(j).iter_mut().enumerate() {
                *v *= srow[k / n_out];
            }
        }
        deltas[l - 2] = next;
    }
    Ok(Cache { acts: fwd.acts, deltas })
}

/// Empirical kernel between two point sets; entry `(p·n_L + o, q·n_L + o′)`
/// holds `Î(x_p, y_q)_{o o′}`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalKernel {
    pub outputs: usize,
    pub rows: usize,
    pub cols: usize,
    pub matrix: Matrix,
}

impl EmpiricalKernel {
    /// The `n_L × n_L` block for the pair `(x_i, y_j)`.
    pub fn block(&self, i: usize, j: usize) -> Matrix {
        let n = self.outputs;
        Matrix::from_fn(n, n, |a, b| self.matrix[(i * n + a, j * n + b)])
    }

    /// CSV with a header row of point indices (`p` or `p:o` for several outputs).
    pub fn to_csv(&self) -> String {
        let label = |p: usize, o: usize| if self.outputs == 1 { p.to_string() } else { format!("{p}:{o}") };
        let mut s = String::from("index");
        for q in 0..self.cols {
            for o in 0..self.outputs {
                let _ = write!(s, ",{}", label(q, o));
            }
        }
        s.push('\n');
        for p in 0..self.rows {
            for o in 0..self.outputs {
                s.push_str(&label(p, o));
                for v in self.matrix.row(p * self.outputs + o) {
                    let _ = write!(s, ",{v:.17e}");
                }
                s.push('\n');
            }
        }
        s
    }
}

/// `Î` between every pair of `xs × ys`, computed layer by layer as
/// `Σ_l (c_l² a_xᵀ a_y + σ_b²) · δ₁ᵀ δ₂` without forming Jacobians.
pub fn kernel_gram_between(
    net: &Network,
    s1: &Surrogate,
    s2: &Surrogate,
    xs: &[Vec<f64>],
    ys: &[Vec<f64>],
) -> Result<EmpiricalKernel> {
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::InvalidConfig("kernel_gram needs at least one point".into()));
    }
    let cfg = &net.config;
    let n_out = cfg.output_dim();
    let xm = Matrix::from_rows(xs)?;
    let ym = Matrix::from_rows(ys)?;
    let c1 = backward_cache(net, s1, &xm)?;
    let same = s1 == s2 && xs == ys;
    let c2_owned;
    let c2 = if same {
        &c1
    } else {
        c2_owned = backward_cache(net, s2, &ym)?;
        &c2_owned
    };
    let (dx, dy) = (xs.len(), ys.len());
    let (rows, cols) = (dx * n_out, dy * n_out);
    let mut out = Matrix::zeros(rows, cols);
    let b2 = cfg.sigma_b * cfg.sigma_b;
    for l in 1..=net.depth() {
        let c = cfg.weight_scale(l);
        let (width, prev) = (cfg.widths[l], cfg.widths[l - 1]);
        let mut aa = Matrix::zeros(dx, dy);
        gemm(dx, prev, dy, c * c, c1.acts[l - 1].as_slice(), true, c2.acts[l - 1].as_slice(), false, 0.0, aa.as_mut_slice());
        let mut dd = Matrix::zeros(rows, cols);
        gemm(rows, width, cols, 1.0, c1.deltas[l - 1].as_slice(), true, c2.deltas[l - 1].as_slice(), false, 0.0, dd.as_mut_slice());
        for i in 0..rows {
            let p = i / n_out;
            let orow = out.row_mut(i);
            for (j, (o, dv)) in orow.iter_mut().zip(dd.row(i)).enumerate() {
                *o += (aa[(p, j / n_out)] + b2) * dv;
            }
        }
    }
    Ok(EmpiricalKernel { outputs: n_out, rows: dx, cols: dy, matrix: out })
}

/// `Î` over all pairs of `points`.
pub fn kernel_gram(net: &Network, s1: &Surrogate, s2: &Surrogate, points: &[Vec<f64>]) -> Result<EmpiricalKernel> {
    kernel_gram_between(net, s1, s2, points, points)
}

/// The true derivative of the network's activation.
pub fn true_derivative(net: &Network) -> Result<Surrogate> {
    net.config.activation.derivative()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activations::Activation;
    use crate::network::NetworkConfig;

    fn net(widths: Vec<usize>, seed: u64) -> Network {
        Network::init(NetworkConfig::new(widths, Activation::erf_m(2.0).unwrap(), seed)).unwrap()
    }

    #[test]
    fn single_layer_entries() {
        let n = net(vec![3, 2], 1);
        let x = [0.2, -0.4, 1.0];
        for s in [Surrogate::derf(), Surrogate::Zero] {
            let j = quasi_jacobian(&n, &s, &x).unwrap().matrix;
            let c = 1.0 / 3f64.sqrt();
            for o in 0..2 {
                for k in 0..3 {
                    assert_eq!(j[(o, o * 3 + k)], c * x[k]);
                    assert_eq!(j[(1 - o, o * 3 + k)], 0.0);
                }
                assert_eq!(j[(o, 6 + o)], 0.1);
            }
        }
    }

    #[test]
    fn zero_surrogate_kills_lower_layers() {
        let n = net(vec![2, 5, 4, 1], 2);
        let j = quasi_jacobian(&n, &Surrogate::Zero, &[0.3, 0.7]).unwrap().matrix;
        let lower = 5 * 3 + 4 * 6;
        assert!(j.row(0)[..lower].iter().all(|&v| v == 0.0));
        assert!(j.row(0)[lower..].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn true_jacobian_matches_finite_differences() {
        let mut n = net(vec![2, 6, 5, 2], 3);
        let d = true_derivative(&n).unwrap();
        let x = [0.4, -0.9];
        let j = quasi_jacobian(&n, &d, &x).unwrap().matrix;
        let params = n.flat_parameters();
        let h = 1e-5;
        for p in 0..params.len() {
            let mut q = params.clone();
            q[p] += h;
            n.set_flat_parameters(&q).unwrap();
            let fp = n.eval(&x).unwrap();
            q[p] -= 2.0 * h;
            n.set_flat_parameters(&q).unwrap();
            let fm = n.eval(&x).unwrap();
            for o in 0..2 {
                let fd = (fp[o] - fm[o]) / (2.0 * h);
                assert!((fd - j[(o, p)]).abs() <= 1e-6 * j[(o, p)].abs().max(1e-3), "p={p}");
            }
        }
    }

    #[test]
    fn factorized_gram_matches_jacobian_products() {
        let n = net(vec![2, 7, 3, 2], 4);
        let pts = vec![vec![1.0, 0.0], vec![0.1, 0.9], vec![-0.6, 0.2]];
        let (s1, s2) = (true_derivative(&n).unwrap(), Surrogate::Rect { w: 1.0 });
        let g = kernel_gram(&n, &s1, &s2, &pts).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let direct = empirical_generalized_ntk(&n, &s1, &s2, &pts[i], &pts[j]).unwrap();
                assert!(g.block(i, j).sub(&direct).unwrap().max_abs() < 1e-12);
            }
        }
    }

    #[test]
    fn symmetric_when_slots_agree() {
        let n = net(vec![2, 8, 8, 1], 5);
        let d = true_derivative(&n).unwrap();
        let pts: Vec<Vec<f64>> = (0..6).map(|k| crate::kernels::circle_point(k as f64)).collect();
        let g = kernel_gram(&n, &d, &d, &pts).unwrap();
        assert!(g.matrix.is_symmetric(1e-14));
        let swapped = kernel_gram(&n, &Surrogate::derf(), &d, &pts).unwrap();
        let g2 = kernel_gram(&n, &d, &Surrogate::derf(), &pts).unwrap();
        assert!(g2.matrix.sub(&swapped.matrix.transpose()).unwrap().max_abs() < 1e-13);
    }

    #[test]
    fn csv_has_index_header() {
        let n = net(vec![2, 3, 1], 6);
        let d = true_derivative(&n).unwrap();
        let g = kernel_gram(&n, &d, &d, &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let csv = g.to_csv();
        assert!(csv.starts_with("index,0,1\n0,"));
        assert_eq!(csv.lines().count(), 3);
    }
}
