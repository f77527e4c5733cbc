//! Expectations `E[g₁(Z₁) g₂(Z₂)]` under a centred bivariate Gaussian.
//!
//! Closed forms cover every pairing of `erf(a·z)` and `erf′`-type derivatives,
//! including the sign limit `a = ∞`. A derivative `d/dz erf(a·z)` paired with an
//! arbitrary function reduces exactly to a one-dimensional Gaussian expectation,
//! which stays accurate for large `a`. Everything else goes through tensor
//! Gauss–Hermite quadrature.

use std::collections::HashMap;
use std::f64::consts::{FRAC_2_PI, PI};
use std::sync::{Arc, Mutex, OnceLock};

use crate::activations::ScalarMap;
use crate::error::{Error, Result};
use crate::linalg::{eig_sym, Matrix};
use crate::rng::{streams, Stream};

/// Tolerance for arcsine arguments slightly outside `[-1, 1]`.
pub const ARCSIN_TOL: f64 = 1e-9;
/// Correlations are clamped to this magnitude before factorization.
pub const RHO_CLAMP: f64 = 1.0 - 1e-12;
/// Relative determinant below which a covariance is treated as singular.
pub const SINGULAR_TOL: f64 = 1e-14;
const MAX_ADAPTIVE_ORDER: usize = 256;

/// Covariance of a centred bivariate Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cov2 {
    pub s11: f64,
    pub s22: f64,
    pub s12: f64,
}

impl Cov2 {
    pub fn new(s11: f64, s22: f64, s12: f64) -> Result<Self> {
        let c = Cov2 { s11, s22, s12 };
        c.validate()?;
        Ok(c)
    }

    /// Covariance of `(Z, Z)` with `Var Z = s`.
    pub fn diagonal(s: f64) -> Result<Self> {
        Cov2::new(s, s, s)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.s11.is_finite() && self.s22.is_finite() && self.s12.is_finite();
        if !finite || self.s11 < 0.0 || self.s22 < 0.0 {
            return Err(self.invalid());
        }
        if self.det() < -1e-12 * (self.s11 * self.s22).max(1.0) {
            return Err(self.invalid());
        }
        Ok(())
    }

    fn invalid(&self) -> Error {
        Error::InvalidCov { s11: self.s11, s22: self.s22, s12: self.s12 }
    }

    pub fn det(&self) -> f64 {
        self.s11 * self.s22 - self.s12 * self.s12
    }

    pub fn is_invertible(&self) -> bool {
        self.det() > SINGULAR_TOL * self.s11 * self.s22
    }

    pub fn swapped(&self) -> Cov2 {
        Cov2 { s11: self.s22, s22: self.s11, s12: self.s12 }
    }

    pub fn scaled(&self, k: f64) -> Cov2 {
        Cov2 { s11: k * self.s11, s22: k * self.s22, s12: k * self.s12 }
    }
}

fn clamped_arcsin(arg: f64, c: &Cov2) -> Result<f64> {
    if !arg.is_finite() || arg.abs() > 1.0 + ARCSIN_TOL {
        return Err(c.invalid());
    }
    Ok(arg.clamp(-1.0, 1.0).asin())
}

#[inline]
fn shift(a: f64) -> f64 {
    // 1/(2a²); zero in the sign limit.
    if a.is_infinite() {
        0.0
    } else {
        0.5 / (a * a)
    }
}

/// `E[erf(aZ₁) erf(bZ₂)] = (2/π) arcsin(s12 / √((s11 + 1/2a²)(s22 + 1/2b²)))`.
/// `a` or `b` may be infinite, in which case the factor is `sign`.
pub fn t_erf_ab(c: &Cov2, a: f64, b: f64) -> Result<f64> {
    c.validate()?;
    let d = ((c.s11 + shift(a)) * (c.s22 + shift(b))).sqrt();
    if d == 0.0 {
        return Ok(0.0);
    }
    Ok(FRAC_2_PI * clamped_arcsin(c.s12 / d, c)?)
}

/// `E[a·erf′(aZ₁) · b·erf′(bZ₂)] = (2/π) ((s11 + 1/2a²)(s22 + 1/2b²) − s12²)^{-1/2}`.
/// Returns `+∞` when both scales are infinite and `c` is singular.
pub fn tdot_erf_ab(c: &Cov2, a: f64, b: f64) -> Result<f64> {
    c.validate()?;
    let p = (c.s11 + shift(a)) * (c.s22 + shift(b));
    let d = p - c.s12 * c.s12;
    if d <= SINGULAR_TOL * p || p == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(FRAC_2_PI / d.sqrt())
}

/// `T(Σ) = E[erf(Z₁) erf(Z₂)]`.
pub fn t_erf(c: &Cov2) -> Result<f64> {
    t_erf_ab(c, 1.0, 1.0)
}

/// `Ṫ(Σ) = E[erf′(Z₁) erf′(Z₂)] = (4/π)|I + 2Σ|^{-1/2}`.
pub fn tdot_erf(c: &Cov2) -> Result<f64> {
    tdot_erf_ab(c, 1.0, 1.0)
}

fn check_m(m: f64) -> Result<()> {
    if !(m > 0.0) || m.is_nan() {
        return Err(Error::InvalidScale(m));
    }
    Ok(())
}

/// `T_m(Σ) = E[erf_m(Z₁) erf_m(Z₂)] = T(m²Σ)`.
pub fn t_erf_m(c: &Cov2, m: f64) -> Result<f64> {
    check_m(m)?;
    t_erf_ab(c, m, m)
}

/// `Ṫ_m(Σ) = E[erf_m′(Z₁) erf_m′(Z₂)] = (2/π)|Σ + I/(2m²)|^{-1/2}`.
pub fn tdot_erf_m(c: &Cov2, m: f64) -> Result<f64> {
    check_m(m)?;
    tdot_erf_ab(c, m, m)
}

/// `E[a·erf′(aZ₁) g(Z₂)]` by exact reduction to a one-dimensional expectation.
///
/// Conditioning on `Z₂` turns the derivative factor into a Gaussian in `Z₂`, which
/// merges with the density of `Z₂`. `a = ∞` gives the delta-function limit
/// `√(2/π) s11^{-1/2} E_{Y∼N(0,|Σ|/s11)}[g(Y)]`.
pub fn erf_deriv_times(c: &Cov2, a: f64, g: &dyn ScalarMap, order: usize) -> Result<f64> {
    c.validate()?;
    check_m(a)?;
    let det = c.det().max(0.0);
    if a.is_infinite() {
        if c.s11 <= 0.0 {
            return Ok(f64::INFINITY);
        }
        let tau2 = det / c.s11;
        return Ok((2.0 / PI).sqrt() / c.s11.sqrt() * expect_1d(g, 0.0, tau2, order)?);
    }
    let k = 2.0 * a / PI.sqrt();
    if c.s22 <= 0.0 {
        return Ok(k / (1.0 + 2.0 * a * a * c.s11).sqrt() * g.eval(0.0));
    }
    let v = det / c.s22;
    let q = 1.0 + 2.0 * a * a * v;
    let r = c.s12 / c.s22;
    let alpha = a * a * r * r / q;
    let tau2 = 1.0 / (1.0 / c.s22 + 2.0 * alpha);
    Ok(k / q.sqrt() * (tau2 / c.s22).sqrt() * expect_1d(g, 0.0, tau2, order)?)
}

/// Nodes and weights of a Gauss rule.
#[derive(Debug)]
pub struct GaussRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

fn golub_welsch(order: usize, offdiag: impl Fn(usize) -> f64, mu0: f64) -> Result<GaussRule> {
    let jm = Matrix::from_fn(order, order, |i, j| {
        if i + 1 == j {
            offdiag(j)
        } else if j + 1 == i {
            offdiag(i)
        } else {
            0.0
        }
    });
    let e = eig_sym(&jm)?;
    let mut nodes = e.eigenvalues;
    let mut weights: Vec<f64> = (0..order).map(|k| mu0 * e.eigenvectors[(0, k)].powi(2)).collect();
    // The rules are symmetric; enforce it exactly.
    for i in 0..order / 2 {
        let j = order - 1 - i;
        let x = 0.5 * (nodes[j] - nodes[i]);
        nodes[i] = -x;
        nodes[j] = x;
        let w = 0.5 * (weights[i] + weights[j]);
        weights[i] = w;
        weights[j] = w;
    }
    if order % 2 == 1 {
        nodes[order / 2] = 0.0;
    }
    Ok(GaussRule { nodes, weights })
}

type RuleCache = Mutex<HashMap<usize, Arc<GaussRule>>>;

fn cached(cache: &'static OnceLock<RuleCache>, order: usize, build: impl FnOnce() -> Result<GaussRule>) -> Result<Arc<GaussRule>> {
    let map = cache.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(r) = map.lock().expect("rule cache poisoned").get(&order) {
        return Ok(r.clone());
    }
    let rule = Arc::new(build()?);
    map.lock().expect("rule cache poisoned").insert(order, rule.clone());
    Ok(rule)
}

/// Gauss–Hermite rule for the weight `exp(−x²)`.
pub fn gauss_hermite(order: usize) -> Result<Arc<GaussRule>> {
    static CACHE: OnceLock<RuleCache> = OnceLock::new();
    cached(&CACHE, order, || golub_welsch(order, |k| (k as f64 / 2.0).sqrt(), PI.sqrt()))
}

/// Gauss–Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(order: usize) -> Result<Arc<GaussRule>> {
    static CACHE: OnceLock<RuleCache> = OnceLock::new();
    cached(&CACHE, order, || {
        golub_welsch(order, |k| k as f64 / ((4 * k * k - 1) as f64).sqrt(), 2.0)
    })
}

fn check_order(order: usize) -> Result<()> {
    if !(2..=512).contains(&order) {
        return Err(Error::InvalidConfig(format!("quadrature order {order} outside [2, 512]")));
    }
    Ok(())
}

fn expect_1d_with(
    f: &mut dyn FnMut(f64) -> f64,
    support: Option<(f64, f64)>,
    mean: f64,
    var: f64,
    order: usize,
) -> Result<f64> {
    if var <= 0.0 {
        return Ok(f(mean));
    }
    let sd = var.sqrt();
    if let Some((a, b)) = support {
        let lo = a.max(mean - 12.0 * sd);
        let hi = b.min(mean + 12.0 * sd);
        if lo >= hi {
            return Ok(0.0);
        }
        let rule = gauss_legendre(order)?;
        let (half, mid) = (0.5 * (hi - lo), 0.5 * (hi + lo));
        let norm = 1.0 / (sd * (2.0 * PI).sqrt());
        let mut s = 0.0;
        for (x, w) in rule.nodes.iter().zip(&rule.weights) {
            let y = mid + half * x;
            let u = (y - mean) / sd;
            s += w * f(y) * (-0.5 * u * u).exp();
        }
        return Ok(s * half * norm);
    }
    let rule = gauss_hermite(order)?;
    let scale = std::f64::consts::SQRT_2 * sd;
    let mut s = 0.0;
    for (x, w) in rule.nodes.iter().zip(&rule.weights) {
        s += w * f(mean + scale * x);
    }
    Ok(s / PI.sqrt())
}

/// `E[g(Y)]` for `Y ∼ N(mean, var)`. Maps with compact support are integrated
/// by Gauss–Legendre over the support, everything else by Gauss–Hermite.
/// The rule starts at `order` and is doubled until two successive estimates
/// agree or the order reaches 256.
pub fn expect_1d(g: &dyn ScalarMap, mean: f64, var: f64, order: usize) -> Result<f64> {
    check_order(order)?;
    let mut n = order;
    let mut prev = expect_1d_with(&mut |y| g.eval(y), g.support(), mean, var, n)?;
    while n < MAX_ADAPTIVE_ORDER {
        n = (2 * n).min(MAX_ADAPTIVE_ORDER);
        let cur = expect_1d_with(&mut |y| g.eval(y), g.support(), mean, var, n)?;
        if (cur - prev).abs() <= 1e-14 * cur.abs().max(f64::MIN_POSITIVE) {
            return Ok(cur);
        }
        prev = cur;
    }
    Ok(prev)
}

/// Tensor-product Gauss–Hermite estimate of `E[g₁(Z₁) g₂(Z₂)]`.
pub fn gh_expect(c: &Cov2, g1: &dyn ScalarMap, g2: &dyn ScalarMap, order: usize) -> Result<f64> {
    c.validate()?;
    check_order(order)?;
    if g1.support().is_some() && g2.support().is_none() {
        return gh_expect(&c.swapped(), g2, g1, order);
    }
    if c.s11 <= 0.0 {
        return Ok(g1.eval(0.0) * expect_1d(g2, 0.0, c.s22, order)?);
    }
    let rho = if c.s22 > 0.0 {
        let r = c.s12 / (c.s11 * c.s22).sqrt();
        r.signum() * r.abs().min(RHO_CLAMP)
    } else {
        0.0
    };
    let slope = rho * (c.s22 / c.s11).sqrt();
    let cond_var = c.s22 * (1.0 - rho * rho);
    let support2 = g2.support();
    let mut err = None;
    let mut outer = |z1: f64| {
        let v1 = g1.eval(z1);
        if v1 == 0.0 {
            return 0.0;
        }
        let inner =
            expect_1d_with(&mut |z2| g2.eval(z2), support2, slope * z1, cond_var, order);
        match inner {
            Ok(v) => v1 * v,
            Err(e) => {
                err = Some(e);
                0.0
            }
        }
    };
    let v = expect_1d_with(&mut outer, g1.support(), 0.0, c.s11, order)?;
    match err {
        Some(e) => Err(e),
        None => Ok(v),
    }
}

/// Pre-drawn standard normal pairs for repeated Monte-Carlo estimates.
pub struct MonteCarlo {
    u: Vec<f64>,
    v: Vec<f64>,
}

impl MonteCarlo {
    pub fn new(samples: usize, seed: u64) -> Self {
        let mut s = Stream::new(seed, streams::MONTE_CARLO);
        let mut u = vec![0.0; samples];
        let mut v = vec![0.0; samples];
        for i in 0..samples {
            u[i] = s.next_normal();
            v[i] = s.next_normal();
        }
        MonteCarlo { u, v }
    }

    pub fn samples(&self) -> usize {
        self.u.len()
    }

    /// Estimate and standard error of `E[g₁(Z₁) g₂(Z₂)]`.
    pub fn expect(&self, c: &Cov2, g1: &dyn ScalarMap, g2: &dyn ScalarMap) -> Result<(f64, f64)> {
        c.validate()?;
        let l11 = c.s11.sqrt();
        let (l21, l22) = if l11 > 0.0 {
            let l21 = c.s12 / l11;
            (l21, (c.s22 - l21 * l21).max(0.0).sqrt())
        } else {
            (0.0, c.s22.sqrt())
        };
        let n = self.u.len();
        if n < 2 {
            return Err(Error::InvalidConfig("Monte-Carlo needs at least 2 samples".into()));
        }
        let (mut sum, mut sum2) = (0.0, 0.0);
        for i in 0..n {
            let z1 = l11 * self.u[i];
            let z2 = l21 * self.u[i] + l22 * self.v[i];
            let p = g1.eval(z1) * g2.eval(z2);
            sum += p;
            sum2 += p * p;
        }
        let mean = sum / n as f64;
        let var = ((sum2 - n as f64 * mean * mean) / (n - 1) as f64).max(0.0);
        Ok((mean, (var / n as f64).sqrt()))
    }
}

/// Monte-Carlo estimate and standard error of `E[g₁(Z₁) g₂(Z₂)]`.
pub fn mc_expect(
    c: &Cov2,
    g1: &dyn ScalarMap,
    g2: &dyn ScalarMap,
    samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    c.validate()?;
    MonteCarlo::new(samples, seed).expect(c, g1, g2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activations::{erf, erf_prime, Activation, Surrogate};

    #[test]
    fn t_erf_values() {
        assert_eq!(t_erf(&Cov2::new(1.0, 2.0, 0.0).unwrap()).unwrap(), 0.0);
        let v = t_erf(&Cov2::new(1.0, 1.0, 1.0).unwrap()).unwrap();
        assert!((v - FRAC_2_PI * (2.0_f64 / 3.0).asin()).abs() < 1e-15);
        assert!((v - 0.46456).abs() < 1e-5);
        let v = t_erf(&Cov2::new(1.0, 1.0, 0.5).unwrap()).unwrap();
        assert!((v - 0.21635).abs() < 1e-5);
    }

    #[test]
    fn tdot_erf_values() {
        let v = tdot_erf(&Cov2::new(1.0, 1.0, 0.0).unwrap()).unwrap();
        assert!((v - 4.0 / (3.0 * PI)).abs() < 1e-15);
        let v = tdot_erf(&Cov2::new(1.0, 1.0, 1.0).unwrap()).unwrap();
        assert!((v - 4.0 / (PI * 5f64.sqrt())).abs() < 1e-15);
        let v = tdot_erf_m(&Cov2::new(1.0, 1.0, 1.0).unwrap(), 1.0).unwrap();
        assert!((v - FRAC_2_PI / 1.25f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn t_erf_m_is_t_of_scaled_cov() {
        let c = Cov2::new(0.7, 1.3, 0.4).unwrap();
        let a = t_erf_m(&c, 3.0).unwrap();
        let b = t_erf(&c.scaled(9.0)).unwrap();
        assert!((a - b).abs() < 1e-15);
        let big = t_erf_m(&Cov2::new(1.0, 1.0, 1.0).unwrap(), 1e6).unwrap();
        assert!((big - 1.0).abs() < 1e-5);
        assert!(matches!(t_erf_m(&c, 0.0), Err(Error::InvalidScale(_))));
    }

    #[test]
    fn singular_diagonal_tdot_m() {
        let s = 0.8;
        for m in [1.0, 10.0, 100.0] {
            let v = tdot_erf_m(&Cov2::diagonal(s).unwrap(), m).unwrap();
            let expected = FRAC_2_PI * m / (s + 0.25 / (m * m)).sqrt();
            assert!((v - expected).abs() < 1e-10 * expected);
        }
    }

    #[test]
    fn invalid_covariances() {
        assert!(Cov2::new(-1.0, 1.0, 0.0).is_err());
        assert!(Cov2::new(1.0, 1.0, 1.5).is_err());
        assert!(Cov2::new(f64::NAN, 1.0, 0.0).is_err());
        assert!(Cov2::new(1.0, 1.0, 1.0 + 1e-14).is_ok());
    }

    #[test]
    fn gauss_rules_integrate_polynomials() {
        let gh = gauss_hermite(20).unwrap();
        let m2: f64 = gh.nodes.iter().zip(&gh.weights).map(|(x, w)| w * x * x).sum();
        assert!((m2 - PI.sqrt() / 2.0).abs() < 1e-13);
        let gl = gauss_legendre(10).unwrap();
        let i4: f64 = gl.nodes.iter().zip(&gl.weights).map(|(x, w)| w * x.powi(4)).sum();
        assert!((i4 - 0.4).abs() < 1e-14);
    }

    #[test]
    fn gh_identity_is_covariance() {
        let c = Cov2::new(1.7, 0.4, -0.6).unwrap();
        let id = |z: f64| z;
        let v = gh_expect(&c, &id, &id, 8).unwrap();
        assert!((v - c.s12).abs() < 1e-10);
    }

    #[test]
    fn gh_matches_closed_forms() {
        let c = Cov2::new(1.2, 0.8, 0.5).unwrap();
        let e = gh_expect(&c, &erf, &erf, 64).unwrap();
        assert!((e - t_erf(&c).unwrap()).abs() < 1e-8);
        let d = gh_expect(&c, &erf_prime, &erf_prime, 64).unwrap();
        assert!((d - tdot_erf(&c).unwrap()).abs() < 1e-8);
        let a = Activation::erf_m(2.0).unwrap();
        let b = Activation::erf_m(5.0).unwrap();
        let e = gh_expect(&c, &a, &b, 128).unwrap();
        assert!((e - t_erf_ab(&c, 2.0, 5.0).unwrap()).abs() < 1e-7);
    }

    #[test]
    fn reduction_matches_closed_form() {
        let c = Cov2::new(0.9, 1.1, 0.3).unwrap();
        for a in [1.0, 3.0, 100.0] {
            let g = Surrogate::ErfDeriv { m: 2.0 };
            let red = erf_deriv_times(&c, a, &g, 64).unwrap();
            let closed = tdot_erf_ab(&c, a, 2.0).unwrap();
            assert!((red - closed).abs() < 1e-10 * closed, "a={a}: {red} vs {closed}");
        }
        let g = Surrogate::derf();
        let red = erf_deriv_times(&c, f64::INFINITY, &g, 64).unwrap();
        let closed = tdot_erf_ab(&c, f64::INFINITY, 1.0).unwrap();
        assert!((red - closed).abs() < 1e-12);
        let diag = Cov2::diagonal(0.5).unwrap();
        let red = erf_deriv_times(&diag, f64::INFINITY, &g, 64).unwrap();
        assert!((red - (2.0 / PI).sqrt() / 0.5f64.sqrt() * g.eval(0.0)).abs() < 1e-14);
    }

    #[test]
    fn compact_support_quadrature() {
        let c = Cov2::new(1.0, 1.0, 0.6).unwrap();
        let rect = Surrogate::Rect { w: 1.0 };
        let one = |_: f64| 1.0;
        let v = gh_expect(&c, &rect, &one, 64).unwrap();
        let exact = erf(0.5 / 2f64.sqrt());
        assert!((v - exact).abs() < 1e-12);
        let red = erf_deriv_times(&c, 1.0, &rect, 64).unwrap();
        let mc = mc_expect(&c, &erf_prime, &rect, 400_000, 9).unwrap();
        assert!((red - mc.0).abs() < 4.0 * mc.1);
    }

    #[test]
    fn mc_identity_and_erf_pair() {
        let c = Cov2::new(1.0, 2.0, 0.7).unwrap();
        let id = |z: f64| z;
        let (e, se) = mc_expect(&c, &id, &id, 200_000, 1).unwrap();
        assert!((e - 0.7).abs() < 4.0 * se);
        let (e, se) = mc_expect(&c, &erf, &erf, 200_000, 2).unwrap();
        assert!((e - t_erf(&c).unwrap()).abs() < 4.0 * se);
        let sign = Activation::Sign;
        let (e, se) = mc_expect(&c, &sign, &sign, 200_000, 3).unwrap();
        assert!((e - t_erf_m(&c, 1e6).unwrap()).abs() < 4.0 * se);
    }
}
