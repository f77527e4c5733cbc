//! Infinite-width kernels: the NNGP kernel Σ, its derivative kernel Σ̇, the NTK Θ,
//! the two-activation kernels Σ₁,₂ and Σ̃₁,₂, and the surrogate-gradient NTK I,
//! for finite `m` and in the sign limit `m → ∞`.
//!
//! All kernels share one recursion over depth. Level 1 is
//! `Σ⁽¹⁾(x, y) = σ_w²/n₀ ⟨x, y⟩ + σ_b²`; level `l + 1` applies
//! `σ_w² E[σ₁(Z₁) σ₂(Z₂)] + σ_b²` under the level-`l` covariance of
//! `(h₁(x), h₂(y))`. The tangent kernels accumulate
//! `K⁽ˡ⁺¹⁾ = Σ₁,₂⁽ˡ⁺¹⁾ + K⁽ˡ⁾ · σ_w² E[σ̃₁(Z₁) σ̃₂(Z₂)]`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;

use crate::activations::{Activation, Backward, ScalarMap, Surrogate};
use crate::dual::{erf_deriv_times, expect_1d, gh_expect, t_erf_ab, tdot_erf_ab, Cov2};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const DEFAULT_ORDER: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelKind {
    Nngp,
    NngpDot,
    Ntk,
    CrossNngp,
    SurrogateSigma,
    SgNtk,
}

impl std::str::FromStr for KernelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "nngp" => KernelKind::Nngp,
            "nngp-dot" => KernelKind::NngpDot,
            "ntk" => KernelKind::Ntk,
            "cross-nngp" => KernelKind::CrossNngp,
            "surrogate-sigma" => KernelKind::SurrogateSigma,
            "sgntk" | "sg-ntk" => KernelKind::SgNtk,
            _ => return Err(Error::Parse { input: s.into(), reason: "unknown kernel kind".into() }),
        })
    }
}

/// How expectations are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelMode {
    /// Closed forms for erf-family terms, exact one-dimensional reductions for a
    /// derivative paired with an arbitrary surrogate.
    ClosedForm,
    /// Tensor Gauss–Hermite quadrature for every expectation.
    Quadrature { order: usize },
    /// `m → ∞`: erf activations become `sign`, their derivatives become deltas.
    SignLimit,
}

/// One side of a kernel: the forward activation and the backward rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slot {
    pub activation: Activation,
    pub backward: Backward,
}

impl Slot {
    pub fn new(activation: Activation) -> Self {
        Slot { activation, backward: Backward::True }
    }
}

/// A kernel definition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub depth: usize,
    pub sigma_w: f64,
    pub sigma_b: f64,
    pub slot1: Slot,
    pub slot2: Slot,
    pub mode: KernelMode,
    /// Quadrature order for terms without a closed form.
    pub order: usize,
}

/// A kernel entry, or a marker for the divergent diagonal of the sign-limit NTK.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum KernelValue {
    Finite(f64),
    /// Grows like `coeff · m^power` as `m → ∞`.
    Divergent { coeff: f64, power: u32 },
}

impl KernelValue {
    pub fn finite(&self) -> Option<f64> {
        match *self {
            KernelValue::Finite(v) => Some(v),
            KernelValue::Divergent { .. } => None,
        }
    }

    pub fn is_divergent(&self) -> bool {
        matches!(self, KernelValue::Divergent { .. })
    }

    /// The finite value, or `DivergentKernel` carrying the given position.
    pub fn expect_finite(&self, row: usize, col: usize) -> Result<f64> {
        self.finite().ok_or(Error::DivergentKernel { row, col })
    }

    fn mul(self, other: KernelValue) -> KernelValue {
        use KernelValue::*;
        match (self, other) {
            (Finite(a), Finite(b)) => Finite(a * b),
            (Finite(a), Divergent { coeff, power }) | (Divergent { coeff, power }, Finite(a)) => {
                if a == 0.0 {
                    Finite(0.0)
                } else {
                    Divergent { coeff: coeff * a, power }
                }
            }
            (Divergent { coeff: c1, power: p1 }, Divergent { coeff: c2, power: p2 }) => {
                Divergent { coeff: c1 * c2, power: p1 + p2 }
            }
        }
    }

    fn add(self, v: f64) -> KernelValue {
        match self {
            KernelValue::Finite(a) => KernelValue::Finite(a + v),
            d => d,
        }
    }
}

impl fmt::Display for KernelValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelValue::Finite(v) => write!(f, "{v}"),
            KernelValue::Divergent { .. } => f.write_str("DIV"),
        }
    }
}

/// Dense kernel matrix whose entries may be divergent.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<KernelValue>,
}

impl KernelMatrix {
    pub fn get(&self, i: usize, j: usize) -> KernelValue {
        self.values[i * self.cols + j]
    }

    pub fn has_divergent(&self) -> bool {
        self.values.iter().any(KernelValue::is_divergent)
    }

    /// Converts to a real matrix, failing on the first divergent entry.
    pub fn to_matrix(&self) -> Result<Matrix> {
        let mut m = Matrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                m[(i, j)] = self.get(i, j).expect_finite(i, j)?;
            }
        }
        Ok(m)
    }
}

/// Expectation factor after mode resolution.
#[derive(Clone)]
enum Factor<'a> {
    /// `erf(a·z)`; `a = ∞` is `sign`.
    Erf(f64),
    /// `a·erf′(a·z)`; `a = ∞` is `2δ(z)`.
    ErfDeriv(f64),
    Generic(&'a dyn ScalarMap),
}

fn erf_map(a: f64) -> Activation {
    if a.is_infinite() {
        Activation::Sign
    } else {
        Activation::Erf { m: a }
    }
}

/// `E[f₁(Z₁) f₂(Z₂)]`; `+∞` signals a divergent delta–delta product.
fn pair_expect(c: &Cov2, f1: &Factor, f2: &Factor, mode: KernelMode, order: usize) -> Result<f64> {
    use Factor::*;
    if let KernelMode::Quadrature { order: q } = mode {
        return quadrature_pair(c, f1, f2, q);
    }
    match (f1, f2) {
        (Erf(a), Erf(b)) => t_erf_ab(c, *a, *b),
        (ErfDeriv(a), ErfDeriv(b)) => tdot_erf_ab(c, *a, *b),
        (ErfDeriv(a), Erf(b)) => erf_deriv_times(c, *a, &erf_map(*b), order),
        (Erf(a), ErfDeriv(b)) => erf_deriv_times(&c.swapped(), *b, &erf_map(*a), order),
        (ErfDeriv(a), Generic(g)) => erf_deriv_times(c, *a, *g, order),
        (Generic(g), ErfDeriv(b)) => erf_deriv_times(&c.swapped(), *b, *g, order),
        (Erf(a), Generic(g)) => generic_pair(c, &erf_map(*a), *g, order),
        (Generic(g), Erf(b)) => generic_pair(c, *g, &erf_map(*b), order),
        (Generic(g1), Generic(g2)) => generic_pair(c, *g1, *g2, order),
    }
}

fn quadrature_pair(c: &Cov2, f1: &Factor, f2: &Factor, order: usize) -> Result<f64> {
    let d1;
    let d2;
    let a1;
    let a2;
    let g1: &dyn ScalarMap = match f1 {
        Factor::Erf(a) => {
            a1 = erf_map(*a);
            &a1
        }
        Factor::ErfDeriv(a) if a.is_finite() => {
            d1 = Surrogate::ErfDeriv { m: *a };
            &d1
        }
        Factor::ErfDeriv(_) => {
            return Err(Error::PreconditionViolated("quadrature mode cannot integrate a delta".into()))
        }
        Factor::Generic(g) => *g,
    };
    let g2: &dyn ScalarMap = match f2 {
        Factor::Erf(a) => {
            a2 = erf_map(*a);
            &a2
        }
        Factor::ErfDeriv(a) if a.is_finite() => {
            d2 = Surrogate::ErfDeriv { m: *a };
            &d2
        }
        Factor::ErfDeriv(_) => {
            return Err(Error::PreconditionViolated("quadrature mode cannot integrate a delta".into()))
        }
        Factor::Generic(g) => *g,
    };
    generic_pair(c, g1, g2, order)
}

/// Tensor quadrature, with exactly degenerate covariances reduced to one dimension.
fn generic_pair(c: &Cov2, g1: &dyn ScalarMap, g2: &dyn ScalarMap, order: usize) -> Result<f64> {
    c.validate()?;
    if c.s11 > 0.0 && c.s22 > 0.0 && c.det() <= 0.0 {
        let k = c.s12 / c.s11;
        let prod = |z: f64| g1.eval(z) * g2.eval(k * z);
        return expect_1d(&prod, 0.0, c.s11, order);
    }
    gh_expect(c, g1, g2, order)
}

/// Level state of the recursion for one input pair.
#[derive(Debug, Clone, Copy)]
struct Level {
    cov: Cov2,
    /// σ_w² E[σ̃₁ σ̃₂] under the previous level (absent at level 1).
    dot: Option<KernelValue>,
    /// Tangent-kernel accumulator.
    tangent: KernelValue,
}

impl KernelSpec {
    /// A kernel of `kind` on a single activation, σ_w = 1, σ_b = 0.1 and true
    /// derivatives; `sign` selects the sign-limit mode.
    pub fn new(kind: KernelKind, depth: usize, activation: Activation) -> Self {
        let mode = if activation == Activation::Sign { KernelMode::SignLimit } else { KernelMode::ClosedForm };
        KernelSpec {
            kind,
            depth,
            sigma_w: 1.0,
            sigma_b: 0.1,
            slot1: Slot::new(activation),
            slot2: Slot::new(activation),
            mode,
            order: DEFAULT_ORDER,
        }
    }

    pub fn nngp(depth: usize, activation: Activation) -> Self {
        KernelSpec::new(KernelKind::Nngp, depth, activation)
    }

    pub fn ntk(depth: usize, activation: Activation) -> Self {
        KernelSpec::new(KernelKind::Ntk, depth, activation)
    }

    /// `I` with the true derivative in slot 1 and `surrogate` in slot 2.
    pub fn sg_ntk(depth: usize, activation: Activation, surrogate: Surrogate) -> Self {
        KernelSpec::new(KernelKind::SgNtk, depth, activation).with_backward2(Backward::Surrogate(surrogate))
    }

    pub fn cross_nngp(depth: usize, a1: Activation, a2: Activation) -> Self {
        let mut s = KernelSpec::new(KernelKind::CrossNngp, depth, a1);
        s.slot2.activation = a2;
        s
    }

    pub fn with_sigmas(mut self, sigma_w: f64, sigma_b: f64) -> Self {
        self.sigma_w = sigma_w;
        self.sigma_b = sigma_b;
        self
    }

    pub fn with_mode(mut self, mode: KernelMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_kind(mut self, kind: KernelKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn with_depth(mut self, depth: usize) -> Self {
        self.depth = depth;
        self
    }

    pub fn with_order(mut self, order: usize) -> Self {
        self.order = order;
        self
    }

    pub fn with_backward1(mut self, b: Backward) -> Self {
        self.slot1.backward = b;
        self
    }

    pub fn with_backward2(mut self, b: Backward) -> Self {
        self.slot2.backward = b;
        self
    }

    /// The same kernel with slot roles exchanged.
    pub fn swapped_slots(&self) -> Self {
        let mut s = self.clone();
        std::mem::swap(&mut s.slot1, &mut s.slot2);
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::InvalidConfig("kernel depth must be at least 1".into()));
        }
        if !(self.sigma_w > 0.0) || !(self.sigma_b >= 0.0) {
            return Err(Error::InvalidConfig("need sigma_w > 0 and sigma_b ≥ 0".into()));
        }
        let tanh = |s: &Slot| s.activation == Activation::Tanh;
        match self.mode {
            KernelMode::ClosedForm if tanh(&self.slot1) || tanh(&self.slot2) => Err(Error::PreconditionViolated(
                "closed-form mode requires erf-family activations".into(),
            )),
            KernelMode::SignLimit if tanh(&self.slot1) || tanh(&self.slot2) => Err(Error::PreconditionViolated(
                "sign-limit mode requires erf-family or sign activations".into(),
            )),
            KernelMode::Quadrature { order } if !(8..=256).contains(&order) => {
                Err(Error::InvalidConfig(format!("quadrature order {order} outside [8, 256]")))
            }
            _ => Ok(()),
        }
    }

    fn forward_factor(&self, a: &Activation) -> Factor<'static> {
        match (*a, self.mode) {
            (Activation::Erf { .. }, KernelMode::SignLimit) | (Activation::Sign, _) => Factor::Erf(f64::INFINITY),
            (Activation::Erf { m }, _) => Factor::Erf(m),
            (Activation::Tanh, _) => Factor::Generic(&TANH),
        }
    }

    fn backward_factor<'a>(&self, slot: &Slot, resolved: &'a Option<Surrogate>) -> Result<Factor<'a>> {
        match (&slot.backward, slot.activation, self.mode) {
            (Backward::True, Activation::Erf { .. }, KernelMode::SignLimit) | (Backward::True, Activation::Sign, _) => {
                Ok(Factor::ErfDeriv(f64::INFINITY))
            }
            (Backward::True, Activation::Erf { m }, _) => Ok(Factor::ErfDeriv(m)),
            (Backward::Surrogate(Surrogate::ErfDeriv { m }), _, _) => Ok(Factor::ErfDeriv(*m)),
            _ => Ok(Factor::Generic(resolved.as_ref().expect("resolved surrogate present"))),
        }
    }

    fn resolve(&self, slot: &Slot) -> Result<Option<Surrogate>> {
        match (&slot.backward, slot.activation) {
            (Backward::True, Activation::Tanh) => Ok(Some(Surrogate::Sech2 { beta: 1.0 })),
            (Backward::True, _) => Ok(None),
            (Backward::Surrogate(s), _) => Ok(Some(s.clone())),
        }
    }

    /// Runs the recursion for slots `(s1, s2)` at inputs `(x, y)` up to `depth`.
    fn recurse(&self, s1: &Slot, s2: &Slot, x: &[f64], y: &[f64], depth: usize, tangent: bool) -> Result<Level> {
        self.validate()?;
        if x.len() != y.len() {
            return Err(Error::DimensionMismatch { expected: x.len(), got: y.len() });
        }
        if x.is_empty() {
            return Err(Error::DimensionMismatch { expected: 1, got: 0 });
        }
        let n0 = x.len() as f64;
        let (w2, b2) = (self.sigma_w * self.sigma_w, self.sigma_b * self.sigma_b);
        let dotp = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
        let cov = Cov2 { s11: w2 / n0 * dotp(x, x) + b2, s22: w2 / n0 * dotp(y, y) + b2, s12: w2 / n0 * dotp(x, y) + b2 };
        if cov.s11 <= 0.0 || cov.s22 <= 0.0 {
            return Err(Error::ZeroDiagonal);
        }
        if self.mode == KernelMode::SignLimit && depth >= 2 && !cov.is_invertible() && x != y {
            return Err(Error::NonParallelRequired);
        }
        let mut level = Level { cov, dot: None, tangent: KernelValue::Finite(cov.s12) };
        let (f1, f2) = (self.forward_factor(&s1.activation), self.forward_factor(&s2.activation));
        let (r1, r2) = if tangent { (self.resolve(s1)?, self.resolve(s2)?) } else { (None, None) };
        let (order, mode) = (self.order, self.mode);
        for _ in 2..=depth {
            let c = level.cov;
            let dot = if tangent {
                let d1 = self.backward_factor(s1, &r1)?;
                let d2 = self.backward_factor(s2, &r2)?;
                let e = pair_expect(&c, &d1, &d2, mode, order)?;
                Some(if e.is_infinite() {
                    let rate = std::f64::consts::FRAC_2_PI * std::f64::consts::SQRT_2 / (c.s11 + c.s22).sqrt();
                    KernelValue::Divergent { coeff: w2 * rate, power: 1 }
                } else {
                    KernelValue::Finite(w2 * e)
                })
            } else {
                None
            };
            let diag1 = pair_expect(&Cov2::diagonal(c.s11)?, &f1, &f1, mode, order)?;
            let diag2 = if s1.activation == s2.activation && c.s11 == c.s22 {
                diag1
            } else {
                pair_expect(&Cov2::diagonal(c.s22)?, &f2, &f2, mode, order)?
            };
            let cross = pair_expect(&c, &f1, &f2, mode, order)?;
            let next = Cov2 { s11: w2 * diag1 + b2, s22: w2 * diag2 + b2, s12: w2 * cross + b2 };
            let tangent_next = match dot {
                Some(d) => level.tangent.mul(d).add(next.s12),
                None => KernelValue::Finite(next.s12),
            };
            level = Level { cov: next, dot, tangent: tangent_next };
        }
        Ok(level)
    }

    fn single_slot(&self) -> Slot {
        Slot::new(self.slot1.activation)
    }

    /// `Σ⁽ᴸ⁾(x, y)` for the slot-1 activation.
    pub fn nngp_value(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let s = self.single_slot();
        Ok(self.recurse(&s, &s, x, y, self.depth, false)?.cov.s12)
    }

    /// `Σ̇⁽ᴸ⁾(x, y)` for the slot-1 activation; requires `L ≥ 2`.
    pub fn nngp_dot_value(&self, x: &[f64], y: &[f64]) -> Result<KernelValue> {
        self.require_depth(2)?;
        let s = self.single_slot();
        Ok(self.recurse(&s, &s, x, y, self.depth, true)?.dot.expect("depth ≥ 2"))
    }

    /// `Θ⁽ᴸ⁾(x, y)` for the slot-1 activation.
    pub fn ntk_value(&self, x: &[f64], y: &[f64]) -> Result<KernelValue> {
        let s = self.single_slot();
        Ok(self.recurse(&s, &s, x, y, self.depth, true)?.tangent)
    }

    /// `Σ₁,₂⁽ᴸ⁾(x, y)`.
    pub fn cross_nngp_value(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        Ok(self.recurse(&self.slot1, &self.slot2, x, y, self.depth, false)?.cov.s12)
    }

    /// `Σ̃₁,₂⁽ᴸ⁾(x, y) = σ_w² E[σ̃₁(Z₁) σ̃₂(Z₂)]`; requires `L ≥ 2`.
    pub fn surrogate_sigma_value(&self, x: &[f64], y: &[f64]) -> Result<KernelValue> {
        self.require_depth(2)?;
        Ok(self.recurse(&self.slot1, &self.slot2, x, y, self.depth, true)?.dot.expect("depth ≥ 2"))
    }

    /// `I⁽ᴸ⁾(x, y)`.
    pub fn sg_ntk_value(&self, x: &[f64], y: &[f64]) -> Result<KernelValue> {
        Ok(self.recurse(&self.slot1, &self.slot2, x, y, self.depth, true)?.tangent)
    }

    fn require_depth(&self, min: usize) -> Result<()> {
        if self.depth < min {
            return Err(Error::InvalidConfig(format!("{:?} needs depth ≥ {min}", self.kind)));
        }
        Ok(())
    }

    /// Evaluates the kernel selected by `kind`.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<KernelValue> {
        match self.kind {
            KernelKind::Nngp => self.nngp_value(x, y).map(KernelValue::Finite),
            KernelKind::NngpDot => self.nngp_dot_value(x, y),
            KernelKind::Ntk => self.ntk_value(x, y),
            KernelKind::CrossNngp => self.cross_nngp_value(x, y).map(KernelValue::Finite),
            KernelKind::SurrogateSigma => self.surrogate_sigma_value(x, y),
            KernelKind::SgNtk => self.sg_ntk_value(x, y),
        }
    }

    /// Kernel between every row point and every column point.
    pub fn gram(&self, xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<KernelMatrix> {
        let values = (0..xs.len() * ys.len())
            .into_par_iter()
            .map(|k| self.eval(&xs[k / ys.len()], &ys[k % ys.len()]))
            .collect::<Result<Vec<_>>>()?;
        Ok(KernelMatrix { rows: xs.len(), cols: ys.len(), values })
    }

    /// Finite kernel matrix, failing on divergent entries.
    pub fn gram_matrix(&self, xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<Matrix> {
        self.gram(xs, ys)?.to_matrix()
    }
}

static TANH: fn(f64) -> f64 = f64::tanh;

/// Fitted exponent `α` of `Θ_∞(z) ∼ (1 − z)^{−α}` as `z → 1` on the unit circle.
///
/// Evaluates the sign-limit NTK between `(1, 0)` and `(cos t, sin t)` at `points`
/// values of `1 − z` spaced logarithmically over `window` and returns minus the
/// least-squares slope of `log Θ` against `log(1 − z)`.
pub fn singular_exponent(spec: &KernelSpec, window: (f64, f64), points: usize) -> Result<f64> {
    let spec = spec.clone().with_kind(KernelKind::Ntk).with_mode(KernelMode::SignLimit);
    spec.require_depth(2)?;
    let (lo, hi) = window;
    if !(lo > 0.0 && hi > lo && hi < 1.0) || points < 2 {
        return Err(Error::InvalidConfig("fit window must satisfy 0 < lo < hi < 1".into()));
    }
    let x = [1.0, 0.0];
    let mut xs = Vec::with_capacity(points);
    let mut ys = Vec::with_capacity(points);
    for k in 0..points {
        let u = lo.ln() + (hi.ln() - lo.ln()) * k as f64 / (points - 1) as f64;
        let one_minus_z = u.exp();
        let z = 1.0 - one_minus_z;
        let y = [z, (1.0 - z * z).max(0.0).sqrt()];
        let v = spec.ntk_value(&x, &y)?.expect_finite(0, k)?;
        xs.push(u);
        ys.push(v.ln());
    }
    let n = points as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = xs.iter().map(|a| (a - mx).powi(2)).sum();
    Ok(-sxy / sxx)
}

/// Unit-circle point at angle `t`.
pub fn circle_point(t: f64) -> Vec<f64> {
    vec![t.cos(), t.sin()]
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_2_PI;

    fn erf(m: f64) -> Activation {
        Activation::erf_m(m).unwrap()
    }

    #[test]
    fn base_case_orthogonal_inputs() {
        let s = KernelSpec::nngp(1, erf(2.0));
        assert!((s.nngp_value(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 0.01).abs() < 1e-15);
        let t = KernelSpec::ntk(1, erf(2.0));
        assert_eq!(t.ntk_value(&[1.0, 0.0], &[0.6, 0.8]).unwrap(), KernelValue::Finite(0.5 * 0.6 + 0.01));
    }

    #[test]
    fn sign_limit_diagonal_values() {
        let s = KernelSpec::nngp(3, Activation::Sign);
        let x = [0.6, 0.8];
        assert!((s.nngp_value(&x, &x).unwrap() - 1.01).abs() < 1e-14);
        assert!(KernelSpec::ntk(3, Activation::Sign).ntk_value(&x, &x).unwrap().is_divergent());
        let d = KernelSpec::new(KernelKind::NngpDot, 3, Activation::Sign).nngp_dot_value(&x, &x).unwrap();
        match d {
            KernelValue::Divergent { coeff, power } => {
                assert_eq!(power, 1);
                assert!((coeff - FRAC_2_PI / 1.01f64.sqrt()).abs() < 1e-14);
            }
            _ => panic!("expected divergence"),
        }
    }

    #[test]
    fn sign_limit_dot_generic_pair() {
        let spec = KernelSpec::new(KernelKind::NngpDot, 3, Activation::Sign);
        let x = [1.0, 0.0];
        let y = circle_point(1.0);
        let s2 = KernelSpec::nngp(2, Activation::Sign).nngp_value(&x, &y).unwrap();
        let expected = FRAC_2_PI / (1.01f64.powi(2) - s2 * s2).sqrt();
        let got = spec.nngp_dot_value(&x, &y).unwrap().finite().unwrap();
        assert!((got - expected).abs() < 1e-13);
    }

    #[test]
    fn parallel_inputs_need_bias() {
        let spec = KernelSpec::ntk(3, Activation::Sign).with_sigmas(1.0, 0.0);
        assert_eq!(spec.ntk_value(&[1.0, 0.0], &[2.0, 0.0]), Err(Error::NonParallelRequired));
        assert_eq!(spec.ntk_value(&[1.0, 0.0], &[-1.0, 0.0]), Err(Error::NonParallelRequired));
        assert!(spec.ntk_value(&[1.0, 0.0], &[1.0, 0.0]).unwrap().is_divergent());
        let biased = KernelSpec::ntk(3, Activation::Sign);
        assert!(biased.ntk_value(&[1.0, 0.0], &[2.0, 0.0]).unwrap().finite().is_some());
        assert_eq!(
            KernelSpec::nngp(2, erf(1.0)).with_sigmas(1.0, 0.0).nngp_value(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::ZeroDiagonal)
        );
    }

    #[test]
    fn finite_m_dot_matches_direct_formula() {
        let spec = KernelSpec::new(KernelKind::NngpDot, 2, erf(1.0));
        let x = circle_point(0.3);
        let v = spec.nngp_dot_value(&x, &x).unwrap().finite().unwrap();
        let expected = FRAC_2_PI / ((0.51f64 + 0.5).powi(2) - 0.51f64.powi(2)).sqrt();
        assert!((v - expected).abs() < 1e-14);
    }

    #[test]
    fn cross_nngp_reduces_to_nngp() {
        let x = circle_point(0.2);
        let y = circle_point(1.4);
        let a = KernelSpec::cross_nngp(3, erf(2.0), erf(2.0)).cross_nngp_value(&x, &y).unwrap();
        let b = KernelSpec::nngp(3, erf(2.0)).nngp_value(&x, &y).unwrap();
        assert_eq!(a, b);
        let l1 = KernelSpec::cross_nngp(1, erf(2.0), Activation::Sign).cross_nngp_value(&x, &y).unwrap();
        assert!((l1 - (0.5 * (0.2f64 - 1.4).cos() + 0.01)).abs() < 1e-15);
    }

    #[test]
    fn sg_ntk_sign_limit_closed_forms() {
        let spec = KernelSpec::sg_ntk(3, Activation::Sign, Surrogate::derf());
        let x = [1.0, 0.0];
        let diag = spec.surrogate_sigma_value(&x, &x).unwrap().finite().unwrap();
        assert!((diag - 2f64.sqrt() * FRAC_2_PI / 1.01f64.sqrt()).abs() < 1e-14);
        let y = circle_point(0.9);
        let s = KernelSpec::nngp(2, Activation::Sign).nngp_value(&x, &y).unwrap();
        let det = 1.01f64 * 1.01 - s * s;
        let off = spec.surrogate_sigma_value(&x, &y).unwrap().finite().unwrap();
        assert!((off - FRAC_2_PI / (det + 1.01 / 2.0).sqrt()).abs() < 1e-13);
        assert!(spec.sg_ntk_value(&x, &x).unwrap().finite().is_some());
    }

    #[test]
    fn slot_swap_identity() {
        let spec = KernelSpec::sg_ntk(3, erf(2.0), Surrogate::derf());
        let x = circle_point(0.1);
        let y = circle_point(2.0);
        let a = spec.sg_ntk_value(&x, &y).unwrap();
        let b = spec.swapped_slots().sg_ntk_value(&y, &x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn generic_surrogate_matches_closed_form() {
        let derf = Surrogate::derf();
        let opaque = Surrogate::custom("derf-opaque", derf.bound(), derf.lipschitz(), crate::activations::erf_prime);
        for act in [erf(2.0), erf(100.0), Activation::Sign] {
            let a = KernelSpec::sg_ntk(3, act, derf.clone());
            let b = KernelSpec::sg_ntk(3, act, opaque.clone());
            for t in [0.0, 0.4, 2.5] {
                let (x, y) = (circle_point(0.0), circle_point(t));
                let u = a.sg_ntk_value(&x, &y).unwrap().finite().unwrap();
                let v = b.sg_ntk_value(&x, &y).unwrap().finite().unwrap();
                assert!((u - v).abs() < 1e-10, "{act} t={t}: {u} vs {v}");
            }
        }
    }

    #[test]
    fn quadrature_mode_agrees_with_closed_form() {
        let x = circle_point(0.3);
        let y = circle_point(1.1);
        for depth in 1..=4 {
            let cf = KernelSpec::ntk(depth, erf(2.0));
            let q = cf.clone().with_mode(KernelMode::Quadrature { order: 128 });
            let a = cf.ntk_value(&x, &y).unwrap().finite().unwrap();
            let b = q.ntk_value(&x, &y).unwrap().finite().unwrap();
            assert!((a - b).abs() < 1e-8, "depth {depth}: {a} vs {b}");
        }
    }

    #[test]
    fn tanh_needs_quadrature() {
        let spec = KernelSpec::ntk(2, Activation::Tanh);
        assert!(spec.ntk_value(&[1.0, 0.0], &[0.0, 1.0]).is_err());
        let q = spec.with_mode(KernelMode::Quadrature { order: 64 });
        let v = q.ntk_value(&[1.0, 0.0], &[0.0, 1.0]).unwrap().finite().unwrap();
        assert!(v.is_finite() && v > 0.0);
    }

    #[test]
    fn gram_marks_divergent_diagonal() {
        let pts = vec![circle_point(0.0), circle_point(1.0)];
        let g = KernelSpec::ntk(2, Activation::Sign).gram(&pts, &pts).unwrap();
        assert!(g.get(0, 0).is_divergent() && g.get(1, 1).is_divergent());
        assert!(g.get(0, 1).finite().is_some());
        assert_eq!(g.to_matrix(), Err(Error::DivergentKernel { row: 0, col: 0 }));
    }
}
