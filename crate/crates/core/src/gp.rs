//! Infinite-width predictions after training, and the Nadaraya–Watson style
//! classifier induced by the singular sign-limit NTK.
//!
//! A posterior is built from a tangent kernel `K` (the NTK `Θ`, the SG-NTK `I`,
//! or the NNGP `Σ` for plain kernel regression) and the prior covariance `Σ` of
//! the forward activation. With `A = K(T, X) K(X, X)⁻¹ (I − e^{−ηκ²K(X,X)t})`
//! the mean is `A·Y` and the covariance is
//!
//! ```text
//! κ² [ Σ(T,T) − Σ(T,X)Aᵀ − AΣ(X,T) + AΣ(X,X)Aᵀ ]
//! ```
//!
//! At `t = ∞` the exponential vanishes and `A = K(T, X) K(X, X)⁻¹`, which is also
//! defined for asymmetric `K`.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernels::{KernelKind, KernelSpec};
use crate::linalg::{eig_sym, solve_lu, solve_spd, Matrix};

/// Training time at which the posterior is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Horizon {
    Infinite,
    /// Gradient flow with rate `eta` run for time `t`.
    Finite { eta: f64, t: f64 },
}

impl std::str::FromStr for Horizon {
    type Err = Error;

    /// `inf` or a nonnegative time; finite times use `η = 0.1`.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "inf" | "infinity" | "∞" => Ok(Horizon::Infinite),
            v => {
                let t: f64 = v.parse().map_err(|_| Error::Parse { input: s.into(), reason: "expected `inf` or a time".into() })?;
                if !(t >= 0.0) || !t.is_finite() {
                    return Err(Error::InvalidConfig(format!("training time {t} must be finite and nonnegative")));
                }
                Ok(Horizon::Finite { eta: 0.1, t })
            }
        }
    }
}

/// Mean and covariance at a set of test points.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// `T × n_L`.
    pub mean: Matrix,
    /// `T × T`, shared by every output component.
    pub cov: Matrix,
}

impl Prediction {
    /// Marginal standard deviations, with tiny negative variances clamped to zero.
    pub fn std(&self) -> Vec<f64> {
        self.cov.diagonal().into_iter().map(|v| v.max(0.0).sqrt()).collect()
    }
}

/// A Gaussian-process posterior for a trained infinite-width network.
#[derive(Debug, Clone)]
pub struct GpPosterior {
    kernel: KernelSpec,
    prior: KernelSpec,
    inputs: Vec<Vec<f64>>,
    targets: Matrix,
    prior_gram: Matrix,
    horizon: Horizon,
    kappa: f64,
    symmetric: bool,
    gram: Matrix,
    /// `K(X,X)⁻¹ (I − e^{−ηκ²Kt})`, only for finite horizons.
    propagator: Option<Matrix>,
}

impl GpPosterior {
    pub fn new(kernel: KernelSpec, data: &Dataset, horizon: Horizon) -> Result<Self> {
        GpPosterior::with_kappa(kernel, data, horizon, 1.0)
    }

    /// Posterior for networks whose last layer was scaled by `kappa` at
    /// initialization: the tangent kernel scales by `κ²` and the prior by `κ²`.
    pub fn with_kappa(kernel: KernelSpec, data: &Dataset, horizon: Horizon, kappa: f64) -> Result<Self> {
        if !matches!(kernel.kind, KernelKind::Ntk | KernelKind::SgNtk | KernelKind::Nngp) {
            return Err(Error::InvalidConfig(format!("{:?} is not a tangent kernel", kernel.kind)));
        }
        if !(kappa > 0.0 && kappa <= 1.0) {
            return Err(Error::InvalidConfig(format!("kappa {kappa} outside (0, 1]")));
        }
        if data.is_empty() {
            return Err(Error::InvalidConfig("posterior needs training data".into()));
        }
        let prior = kernel.clone().with_kind(KernelKind::Nngp);
        let gram = kernel.gram_matrix(&data.inputs, &data.inputs)?;
        let prior_gram = prior.gram_matrix(&data.inputs, &data.inputs)?;
        let symmetric = gram.is_symmetric(1e-10);
        let propagator = match horizon {
            Horizon::Infinite => None,
            Horizon::Finite { eta, t } => {
                if !symmetric {
                    return Err(Error::PreconditionViolated("finite-time posteriors need a symmetric kernel".into()));
                }
                if !(eta > 0.0) || !(t >= 0.0) {
                    return Err(Error::InvalidConfig("need eta > 0 and t ≥ 0".into()));
                }
                let c = eta * kappa * kappa * t;
                let e = eig_sym(&gram.symmetric_part())?;
                Some(e.apply_fn(|l| if l == 0.0 { c } else { -(-c * l).exp_m1() / l }))
            }
        };
        Ok(GpPosterior {
            kernel,
            prior,
            inputs: data.inputs.clone(),
            targets: data.target_matrix()?,
            prior_gram,
            horizon,
            kappa,
            symmetric,
            gram,
            propagator,
        })
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn horizon(&self) -> Horizon {
        self.horizon
    }

    /// `K(X, X)`.
    pub fn gram(&self) -> &Matrix {
        &self.gram
    }

    /// `Aᵀ` for the given test points (`d × T`).
    fn gain_t(&self, cross: &Matrix) -> Result<Matrix> {
        let kxt = cross.transpose();
        match &self.propagator {
            Some(p) => p.matmul(&kxt),
            None if self.symmetric => solve_spd(&self.gram.symmetric_part(), &kxt).map_err(|e| match e {
                Error::NotPositiveDefinite { .. } => Error::SingularGram,
                e => e,
            }),
            None => solve_lu(&self.gram.transpose(), &kxt),
        }
    }

    /// Posterior means, one row per point.
    pub fn posterior_mean(&self, points: &[Vec<f64>]) -> Result<Matrix> {
        let cross = self.kernel.gram_matrix(points, &self.inputs)?;
        self.gain_t(&cross)?.transpose().matmul(&self.targets)
    }

    /// Posterior covariance between the points.
    pub fn posterior_cov(&self, points: &[Vec<f64>]) -> Result<Matrix> {
        Ok(self.predict(points)?.cov)
    }

    pub fn predict(&self, points: &[Vec<f64>]) -> Result<Prediction> {
        let cross = self.kernel.gram_matrix(points, &self.inputs)?;
        let at = self.gain_t(&cross)?;
        let a = at.transpose();
        let mean = a.matmul(&self.targets)?;
        let s_tt = self.prior.gram_matrix(points, points)?;
        let s_tx = self.prior.gram_matrix(points, &self.inputs)?;
        let s_xt = s_tx.transpose();
        let left = s_tx.matmul(&at)?;
        let right = a.matmul(&s_xt)?;
        let middle = a.matmul(&self.prior_gram)?.matmul(&at)?;
        let cov = s_tt.sub(&left)?.sub(&right)?.add(&middle)?.scale(self.kappa * self.kappa);
        Ok(Prediction { mean, cov })
    }
}

/// Smallest and largest eigenvalue of the symmetric part of `K(X, X)`.
pub fn gram_spectrum(spec: &KernelSpec, points: &[Vec<f64>]) -> Result<(f64, f64)> {
    let gram = spec.gram_matrix(points, points)?;
    spectrum(&gram)
}

/// Extreme eigenvalues of `(K + Kᵀ)/2`.
pub fn spectrum(gram: &Matrix) -> Result<(f64, f64)> {
    let e = eig_sym(&gram.symmetric_part())?;
    match (e.eigenvalues.first(), e.eigenvalues.last()) {
        (Some(&lo), Some(&hi)) => Ok((lo, hi)),
        _ => Err(Error::InvalidConfig("empty Gram matrix".into())),
    }
}

/// `sign(Θ_∞(x, X)·Y)`, or the training label when `x` is a training input.
///
/// `spec` is evaluated as the sign-limit NTK. Labels must be `±1`. Returns `0`
/// on an exact tie.
pub fn nw_classify(spec: &KernelSpec, data: &Dataset, x: &[f64]) -> Result<i8> {
    let spec = spec.clone().with_kind(KernelKind::Ntk).with_mode(crate::kernels::KernelMode::SignLimit);
    let labels = labels(data)?;
    if let Some(i) = data.inputs.iter().position(|xi| xi.as_slice() == x) {
        return Ok(labels[i]);
    }
    if spec.sigma_b == 0.0 {
        let parallel = |a: &[f64], b: &[f64]| {
            let ab: f64 = a.iter().zip(b).map(|(u, v)| u * v).sum();
            let aa: f64 = a.iter().map(|u| u * u).sum();
            let bb: f64 = b.iter().map(|u| u * u).sum();
            (ab * ab - aa * bb).abs() <= 1e-14 * aa * bb
        };
        let pts: Vec<&[f64]> = data.inputs.iter().map(Vec::as_slice).chain(std::iter::once(x)).collect();
        for i in 0..pts.len() {
            for j in 0..i {
                if parallel(pts[i], pts[j]) {
                    return Err(Error::PreconditionViolated(
                        "parallel inputs need sigma_b > 0 for the sign-limit kernel".into(),
                    ));
                }
            }
        }
    }
    let mut score = 0.0;
    for (i, (xi, &yi)) in data.inputs.iter().zip(&labels).enumerate() {
        let k = spec.ntk_value(x, xi).map_err(|e| match e {
            Error::NonParallelRequired => Error::PreconditionViolated("parallel inputs with sigma_b = 0".into()),
            e => e,
        })?;
        score += k.expect_finite(0, i)? * f64::from(yi);
    }
    Ok(if score > 0.0 {
        1
    } else if score < 0.0 {
        -1
    } else {
        0
    })
}

fn labels(data: &Dataset) -> Result<Vec<i8>> {
    if data.output_dim() != 1 {
        return Err(Error::DimensionMismatch { expected: 1, got: data.output_dim() });
    }
    data.targets
        .iter()
        .map(|y| match y[0] {
            1.0 => Ok(1),
            -1.0 => Ok(-1),
            v => Err(Error::InvalidConfig(format!("label {v} is not ±1"))),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activations::{Activation, Surrogate};
    use crate::data::{circle_points, make_sphere_dataset};
    use crate::kernels::circle_point;

    fn erf2() -> Activation {
        Activation::erf_m(2.0).unwrap()
    }

    #[test]
    fn interpolates_at_infinity() {
        let data = make_sphere_dataset(15, 3).unwrap();
        let gp = GpPosterior::new(KernelSpec::ntk(3, erf2()), &data, Horizon::Infinite).unwrap();
        let p = gp.predict(&data.inputs).unwrap();
        for i in 0..data.len() {
            assert!((p.mean[(i, 0)] - data.targets[i][0]).abs() < 1e-8);
            assert!(p.cov[(i, i)].abs() < 1e-8);
        }
    }

    #[test]
    fn zero_time_is_prior() {
        let data = make_sphere_dataset(6, 3).unwrap();
        let spec = KernelSpec::ntk(2, erf2());
        let gp = GpPosterior::new(spec.clone(), &data, Horizon::Finite { eta: 0.1, t: 0.0 }).unwrap();
        let pts = circle_points(&[0.1, 0.7, 2.0]);
        let p = gp.predict(&pts).unwrap();
        assert!(p.mean.max_abs() == 0.0);
        let prior = spec.with_kind(KernelKind::Nngp).gram_matrix(&pts, &pts).unwrap();
        assert!(p.cov.sub(&prior).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn long_time_approaches_infinity() {
        let data = make_sphere_dataset(8, 5).unwrap();
        let spec = KernelSpec::ntk(2, erf2());
        let (lo, _) = gram_spectrum(&spec, &data.inputs).unwrap();
        let t = 50.0 / (0.1 * lo);
        let pts = circle_points(&[0.3, 1.9, 4.0]);
        let fin = GpPosterior::new(spec.clone(), &data, Horizon::Finite { eta: 0.1, t }).unwrap();
        let inf = GpPosterior::new(spec, &data, Horizon::Infinite).unwrap();
        let a = fin.posterior_mean(&pts).unwrap();
        let b = inf.posterior_mean(&pts).unwrap();
        assert!(a.sub(&b).unwrap().frobenius_norm() < 1e-6);
    }

    #[test]
    fn asymmetric_kernel_interpolates_and_rejects_finite_time() {
        let sphere = make_sphere_dataset(10, 2).unwrap();
        let inputs: Vec<Vec<f64>> =
            sphere.inputs.iter().enumerate().map(|(i, x)| x.iter().map(|v| v * (0.5 + 0.1 * i as f64)).collect()).collect();
        let data = Dataset::new(inputs, sphere.targets).unwrap();
        let spec = KernelSpec::sg_ntk(3, erf2(), Surrogate::Sech2 { beta: 1.0 });
        let gp = GpPosterior::new(spec.clone(), &data, Horizon::Infinite).unwrap();
        assert!(!gp.gram().is_symmetric(1e-10));
        let m = gp.posterior_mean(&data.inputs).unwrap();
        for i in 0..data.len() {
            assert!((m[(i, 0)] - data.targets[i][0]).abs() < 1e-8);
        }
        let err = GpPosterior::new(spec, &data, Horizon::Finite { eta: 0.1, t: 1.0 }).unwrap_err();
        assert!(matches!(err, Error::PreconditionViolated(_)));
    }

    #[test]
    fn divergent_kernel_is_rejected() {
        let data = make_sphere_dataset(5, 2).unwrap();
        let err = GpPosterior::new(KernelSpec::ntk(2, Activation::Sign), &data, Horizon::Infinite).unwrap_err();
        assert!(matches!(err, Error::DivergentKernel { .. }));
    }

    #[test]
    fn kappa_scales_covariance_only() {
        let data = make_sphere_dataset(7, 9).unwrap();
        let spec = KernelSpec::ntk(2, erf2());
        let pts = circle_points(&[0.5, 2.5]);
        let a = GpPosterior::new(spec.clone(), &data, Horizon::Infinite).unwrap().predict(&pts).unwrap();
        let b = GpPosterior::with_kappa(spec, &data, Horizon::Infinite, 0.2).unwrap().predict(&pts).unwrap();
        assert!(a.mean.sub(&b.mean).unwrap().max_abs() < 1e-12);
        assert!(a.cov.scale(0.04).sub(&b.cov).unwrap().max_abs() < 1e-12);
    }

    fn labelled(angles: &[f64], labels: &[f64]) -> Dataset {
        Dataset::new(circle_points(angles), labels.iter().map(|&y| vec![y]).collect()).unwrap()
    }

    #[test]
    fn classifier_returns_training_labels_and_ties() {
        let spec = KernelSpec::ntk(2, Activation::Sign);
        let data = labelled(&[0.4, -0.4], &[1.0, -1.0]);
        assert_eq!(nw_classify(&spec, &data, &data.inputs[0]).unwrap(), 1);
        assert_eq!(nw_classify(&spec, &data, &data.inputs[1]).unwrap(), -1);
        assert_eq!(nw_classify(&spec, &data, &circle_point(0.0)).unwrap(), 0);
        assert_eq!(nw_classify(&spec, &data, &circle_point(0.3)).unwrap(), 1);
        let one = labelled(&[1.0], &[1.0]);
        let x = circle_point(2.0);
        let k = spec.ntk_value(&x, &one.inputs[0]).unwrap().finite().unwrap();
        assert_eq!(nw_classify(&spec, &one, &x).unwrap(), if k > 0.0 { 1 } else { -1 });
    }

    #[test]
    fn classifier_checks_preconditions() {
        let spec = KernelSpec::ntk(2, Activation::Sign).with_sigmas(1.0, 0.0);
        let data = labelled(&[0.0, std::f64::consts::PI], &[1.0, -1.0]);
        assert!(matches!(nw_classify(&spec, &data, &circle_point(1.0)), Err(Error::PreconditionViolated(_))));
        let bad = labelled(&[0.0], &[0.5]);
        assert!(nw_classify(&KernelSpec::ntk(2, Activation::Sign), &bad, &circle_point(1.0)).is_err());
    }

    #[test]
    fn spectrum_of_identity_and_rank_one() {
        assert_eq!(spectrum(&Matrix::identity(4)).unwrap(), (1.0, 1.0));
        let v = [1.0, 2.0, 3.0];
        let r1 = Matrix::from_fn(3, 3, |i, j| v[i] * v[j]);
        let (lo, hi) = spectrum(&r1).unwrap();
        assert!(lo.abs() < 1e-12 && (hi - 14.0).abs() < 1e-12);
    }
}
