//! Activation functions, their derivatives, and surrogate derivatives.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};

pub const FRAC_2_SQRT_PI: f64 = std::f64::consts::FRAC_2_SQRT_PI;

/// A real function of one real variable, as consumed by quadrature and the
/// quasi-Jacobian recursion.
pub trait ScalarMap: Send + Sync {
    fn eval(&self, z: f64) -> f64;

    /// Closed interval outside of which the map vanishes, if there is one.
    fn support(&self) -> Option<(f64, f64)> {
        None
    }
}

impl<F: Fn(f64) -> f64 + Send + Sync> ScalarMap for F {
    fn eval(&self, z: f64) -> f64 {
        self(z)
    }
}

/// `erf(z)`.
#[inline]
pub fn erf(z: f64) -> f64 {
    libm::erf(z)
}

/// `erf′(z) = 2/√π · exp(−z²)`.
#[inline]
pub fn erf_prime(z: f64) -> f64 {
    FRAC_2_SQRT_PI * (-z * z).exp()
}

/// Bound `|σ(u)| ≤ c + m|u|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub c: f64,
    pub m: f64,
}

/// Forward activation σ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Activation {
    /// `erf(m·z)`.
    Erf { m: f64 },
    /// `sign(z)` with `sign(0) = 0`.
    Sign,
    Tanh,
}

impl Activation {
    pub fn erf_m(m: f64) -> Result<Self> {
        if !(m > 0.0) || !m.is_finite() {
            return Err(Error::InvalidScale(m));
        }
        Ok(Activation::Erf { m })
    }

    pub fn sign() -> Self {
        Activation::Sign
    }

    #[inline]
    pub fn eval(&self, z: f64) -> f64 {
        match *self {
            Activation::Erf { m } => erf(m * z),
            Activation::Sign => {
                if z > 0.0 {
                    1.0
                } else if z < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => z.tanh(),
        }
    }

    /// The true derivative, or `MissingSurrogate` where it is zero almost everywhere
    /// and carries no gradient information.
    pub fn derivative(&self) -> Result<Surrogate> {
        match *self {
            Activation::Erf { m } => Ok(Surrogate::ErfDeriv { m }),
            Activation::Tanh => Ok(Surrogate::Sech2 { beta: 1.0 }),
            Activation::Sign => Err(Error::MissingSurrogate(self.to_string())),
        }
    }

    pub fn has_derivative(&self) -> bool {
        self.derivative().is_ok()
    }

    pub fn envelope(&self) -> Envelope {
        Envelope { c: 1.0, m: 0.0 }
    }

    pub fn is_odd(&self) -> bool {
        true
    }
}

impl ScalarMap for Activation {
    fn eval(&self, z: f64) -> f64 {
        Activation::eval(self, z)
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Erf { m } => write!(f, "erf:m={m}"),
            Activation::Sign => f.write_str("sign"),
            Activation::Tanh => f.write_str("tanh"),
        }
    }
}

fn parse_param(input: &str, body: &str, keys: &[&str]) -> Result<f64> {
    let err = |reason: &str| Error::Parse { input: input.to_string(), reason: reason.to_string() };
    let (k, v) = body.split_once('=').ok_or_else(|| err("expected key=value"))?;
    if !keys.contains(&k.trim()) {
        return Err(err(&format!("unknown parameter `{k}`")));
    }
    let x: f64 = v.trim().parse().map_err(|_| err("not a number"))?;
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::InvalidScale(x));
    }
    Ok(x)
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (head, body) = s.split_once(':').map_or((s, None), |(h, b)| (h, Some(b)));
        match (head, body) {
            ("erf", None) => Activation::erf_m(1.0),
            ("erf", Some(b)) => Activation::erf_m(parse_param(s, b, &["m"])?),
            ("sign", None) => Ok(Activation::Sign),
            ("tanh", None) => Ok(Activation::Tanh),
            _ => Err(Error::Parse { input: s.to_string(), reason: "unknown activation".into() }),
        }
    }
}

impl TryFrom<String> for Activation {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Activation> for String {
    fn from(a: Activation) -> String {
        a.to_string()
    }
}

/// A user-supplied surrogate derivative.
#[derive(Clone)]
pub struct CustomSurrogate {
    pub name: String,
    pub f: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub bound: f64,
    pub lipschitz: f64,
}

impl fmt::Debug for CustomSurrogate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomSurrogate").field("name", &self.name).finish_non_exhaustive()
    }
}

/// Derivative used in the backward pass: either a true derivative or a surrogate.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Surrogate {
    /// `d/dz erf(m·z) = 2m/√π · exp(−m²z²)`; `derf` is `m = 1`.
    ErfDeriv { m: f64 },
    /// `1{|z| ≤ w/2}`.
    Rect { w: f64 },
    /// `β·sech²(βz)`.
    Sech2 { beta: f64 },
    Zero,
    Custom(CustomSurrogate),
}

impl PartialEq for Surrogate {
    fn eq(&self, other: &Self) -> bool {
        use Surrogate::*;
        match (self, other) {
            (ErfDeriv { m: a }, ErfDeriv { m: b }) => a == b,
            (Rect { w: a }, Rect { w: b }) => a == b,
            (Sech2 { beta: a }, Sech2 { beta: b }) => a == b,
            (Zero, Zero) => true,
            (Custom(a), Custom(b)) => Arc::ptr_eq(&a.f, &b.f),
            _ => false,
        }
    }
}

impl Surrogate {
    pub fn derf() -> Self {
        Surrogate::ErfDeriv { m: 1.0 }
    }

    pub fn custom(
        name: impl Into<String>,
        bound: f64,
        lipschitz: f64,
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Surrogate::Custom(CustomSurrogate { name: name.into(), f: Arc::new(f), bound, lipschitz })
    }

    #[inline]
    pub fn eval(&self, z: f64) -> f64 {
        match self {
            Surrogate::ErfDeriv { m } => m * erf_prime(m * z),
            Surrogate::Rect { w } => {
                if z.abs() <= 0.5 * w {
                    1.0
                } else {
                    0.0
                }
            }
            Surrogate::Sech2 { beta } => {
                let c = (beta * z).cosh();
                if c.is_finite() {
                    beta / (c * c)
                } else {
                    0.0
                }
            }
            Surrogate::Zero => 0.0,
            Surrogate::Custom(c) => (c.f)(z),
        }
    }

    /// `B` with `|σ̃| ≤ B`.
    pub fn bound(&self) -> f64 {
        match self {
            Surrogate::ErfDeriv { m } => m * FRAC_2_SQRT_PI,
            Surrogate::Rect { .. } => 1.0,
            Surrogate::Sech2 { beta } => *beta,
            Surrogate::Zero => 0.0,
            Surrogate::Custom(c) => c.bound,
        }
    }

    /// Lipschitz constant; infinite for discontinuous surrogates.
    pub fn lipschitz(&self) -> f64 {
        match self {
            Surrogate::ErfDeriv { m } => m * m * FRAC_2_SQRT_PI * (2.0 / std::f64::consts::E).sqrt(),
            Surrogate::Rect { .. } => f64::INFINITY,
            Surrogate::Sech2 { beta } => 4.0 * beta * beta / (3.0 * 3f64.sqrt()),
            Surrogate::Zero => 0.0,
            Surrogate::Custom(c) => c.lipschitz,
        }
    }
}

impl ScalarMap for Surrogate {
    fn eval(&self, z: f64) -> f64 {
        Surrogate::eval(self, z)
    }

    fn support(&self) -> Option<(f64, f64)> {
        match self {
            Surrogate::Rect { w } => Some((-0.5 * w, 0.5 * w)),
            _ => None,
        }
    }
}

impl fmt::Display for Surrogate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Surrogate::ErfDeriv { m } if *m == 1.0 => f.write_str("derf"),
            Surrogate::ErfDeriv { m } => write!(f, "derf:m={m}"),
            Surrogate::Rect { w } => write!(f, "rect:w={w}"),
            Surrogate::Sech2 { beta } => write!(f, "sech2:b={beta}"),
            Surrogate::Zero => f.write_str("zero"),
            Surrogate::Custom(c) => write!(f, "custom:{}", c.name),
        }
    }
}

impl FromStr for Surrogate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (head, body) = s.split_once(':').map_or((s, None), |(h, b)| (h, Some(b)));
        match (head, body) {
            ("derf", None) => Ok(Surrogate::derf()),
            ("derf", Some(b)) => Ok(Surrogate::ErfDeriv { m: parse_param(s, b, &["m"])? }),
            ("rect", None) => Ok(Surrogate::Rect { w: 1.0 }),
            ("rect", Some(b)) => Ok(Surrogate::Rect { w: parse_param(s, b, &["w"])? }),
            ("sech2", None) => Ok(Surrogate::Sech2 { beta: 1.0 }),
            ("sech2", Some(b)) => Ok(Surrogate::Sech2 { beta: parse_param(s, b, &["b", "beta"])? }),
            ("zero", None) => Ok(Surrogate::Zero),
            _ => Err(Error::Parse { input: s.to_string(), reason: "unknown surrogate".into() }),
        }
    }
}

impl TryFrom<String> for Surrogate {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Surrogate> for String {
    fn from(s: Surrogate) -> String {
        s.to_string()
    }
}

/// Backward rule for one slot: the activation's own derivative or a surrogate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Backward {
    True,
    Surrogate(Surrogate),
}

impl Backward {
    /// Resolves to a concrete derivative map for `activation`.
    pub fn resolve(&self, activation: &Activation) -> Result<Surrogate> {
        match self {
            Backward::True => activation.derivative(),
            Backward::Surrogate(s) => Ok(s.clone()),
        }
    }
}

impl fmt::Display for Backward {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Backward::True => f.write_str("true"),
            Backward::Surrogate(s) => s.fmt(f),
        }
    }
}

impl FromStr for Backward {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "true" | "exact" => Ok(Backward::True),
            other => Ok(Backward::Surrogate(other.parse()?)),
        }
    }
}

impl TryFrom<String> for Backward {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Backward> for String {
    fn from(b: Backward) -> String {
        b.to_string()
    }
}

/// High-accuracy reference implementations used to cross-check the library.
pub mod reference {
    /// `erf` from its positive-term Taylor series for `|x| < 3` and the
    /// continued fraction for `erfc` beyond.
    pub fn erf(x: f64) -> f64 {
        let a = x.abs();
        let v = if a == 0.0 {
            0.0
        } else if a < 3.0 {
            let mut term = a;
            let mut sum = a;
            let mut n = 0.0;
            loop {
                n += 1.0;
                term *= 2.0 * a * a / (2.0 * n + 1.0);
                sum += term;
                if term <= 1e-17 * sum {
                    break;
                }
            }
            std::f64::consts::FRAC_2_SQRT_PI * (-a * a).exp() * sum
        } else {
            let mut f = a;
            for k in (1..=80).rev() {
                f = a + (k as f64 / 2.0) / f;
            }
            1.0 - (-a * a).exp() / (std::f64::consts::PI.sqrt() * f)
        };
        v.copysign(x)
    }
}
