//! Python bindings for `sgntk`.
//!
//! Activations and surrogates can be passed either as objects or as their
//! string forms (`"erf:m=2"`, `"sign"`, `"derf"`, `"rect:w=0.5"`). Matrices
//! cross the boundary as lists of rows.

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use sgntk::data::make_sphere_dataset;
use sgntk::empirical::{kernel_gram_between, quasi_jacobian};
use sgntk::gp::nw_classify as core_nw_classify;
use sgntk::kernels::singular_exponent as core_singular_exponent;
use sgntk::training::{train_tracked, TrainConfig, TrainRule};
use sgntk::{
    Activation, Dataset, GpPosterior, Horizon, KernelKind, KernelMode, KernelSpec, KernelValue, Matrix, Network,
    NetworkConfig, Surrogate,
};

create_exception!(sgntk, SgntkError, PyException);

fn err(e: sgntk::Error) -> PyErr {
    SgntkError::new_err(e.to_string())
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn value(v: KernelValue) -> f64 {
    v.finite().unwrap_or(f64::INFINITY)
}

/// An activation function `σ`.
#[pyclass(name = "Activation", module = "sgntk", frozen, from_py_object)]
#[derive(Clone)]
struct PyActivation(Activation);

#[pymethods]
impl PyActivation {
    #[new]
    fn new(spec: &str) -> PyResult<Self> {
        spec.parse().map(PyActivation).map_err(err)
    }

    #[staticmethod]
    fn erf(m: f64) -> PyResult<Self> {
        Activation::erf_m(m).map(PyActivation).map_err(err)
    }

    #[staticmethod]
    fn sign() -> Self {
        PyActivation(Activation::Sign)
    }

    #[staticmethod]
    fn tanh() -> Self {
        PyActivation(Activation::Tanh)
    }

    fn __call__(&self, z: f64) -> f64 {
        self.0.eval(z)
    }

    /// The true derivative as a surrogate; raises for `sign`.
    fn derivative(&self) -> PyResult<PySurrogate> {
        self.0.derivative().map(PySurrogate).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Activation('{}')", self.0)
    }

    fn __str__(&self) -> String {
        self.0.to_string()
    }
}

/// A surrogate derivative `σ̃` used in the backward pass.
#[pyclass(name = "Surrogate", module = "sgntk", frozen, from_py_object)]
#[derive(Clone)]
struct PySurrogate(Surrogate);

#[pymethods]
impl PySurrogate {
    #[new]
    fn new(spec: &str) -> PyResult<Self> {
        spec.parse().map(PySurrogate).map_err(err)
    }

    #[getter]
    fn bound(&self) -> f64 {
        self.0.bound()
    }

    #[getter]
    fn lipschitz(&self) -> f64 {
        self.0.lipschitz()
    }

    fn __call__(&self, z: f64) -> f64 {
        self.0.eval(z)
    }

    fn __repr__(&self) -> String {
        format!("Surrogate('{}')", self.0)
    }

    fn __str__(&self) -> String {
        self.0.to_string()
    }
}

#[derive(FromPyObject)]
enum ActivationArg {
    Object(PyActivation),
    Text(String),
}

impl ActivationArg {
    fn get(self) -> PyResult<Activation> {
        match self {
            ActivationArg::Object(a) => Ok(a.0),
            ActivationArg::Text(s) => s.parse().map_err(err),
        }
    }
}

#[derive(FromPyObject)]
enum SurrogateArg {
    Object(PySurrogate),
    Text(String),
}

impl SurrogateArg {
    fn get(self) -> PyResult<Surrogate> {
        match self {
            SurrogateArg::Object(s) => Ok(s.0),
            SurrogateArg::Text(s) => s.parse().map_err(err),
        }
    }
}

fn parse_mode(mode: &str) -> PyResult<KernelMode> {
    match mode {
        "closed" => Ok(KernelMode::ClosedForm),
        "sign" => Ok(KernelMode::SignLimit),
        other => match other.strip_prefix("quadrature:") {
            Some(order) => order
                .parse()
                .map(|order| KernelMode::Quadrature { order })
                .map_err(|_| SgntkError::new_err(format!("bad quadrature order in `{other}`"))),
            None => Err(SgntkError::new_err(format!("unknown mode `{other}`; use closed, sign or quadrature:<order>"))),
        },
    }
}

/// An infinite-width kernel: `nngp`, `ntk` or `sgntk`.
///
/// Divergent entries (the diagonal of the sign-limit NTK) are returned as `inf`.
#[pyclass(name = "Kernel", module = "sgntk", frozen, from_py_object)]
#[derive(Clone)]
struct PyKernel(KernelSpec);

#[pymethods]
impl PyKernel {
    #[new]
    #[pyo3(signature = (kind, depth, activation, surrogate=None, sigma_w=1.0, sigma_b=0.1, mode="closed"))]
    fn new(
        kind: &str,
        depth: usize,
        activation: ActivationArg,
        surrogate: Option<SurrogateArg>,
        sigma_w: f64,
        sigma_b: f64,
        mode: &str,
    ) -> PyResult<Self> {
        let kind: KernelKind = kind.parse().map_err(err)?;
        let act = activation.get()?;
        let spec = match (kind, surrogate) {
            (KernelKind::SgNtk, Some(s)) => KernelSpec::sg_ntk(depth, act, s.get()?),
            (KernelKind::SgNtk, None) => return Err(SgntkError::new_err("sgntk kernels need a surrogate")),
            (kind, _) => KernelSpec::new(kind, depth, act),
        };
        let spec = spec.with_sigmas(sigma_w, sigma_b).with_mode(parse_mode(mode)?);
        spec.validate().map_err(err)?;
        Ok(PyKernel(spec))
    }

    #[getter]
    fn depth(&self) -> usize {
        self.0.depth
    }

    fn __call__(&self, x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
        self.0.eval(&x, &y).map(value).map_err(err)
    }

    /// `K(xs, ys)` as a list of rows.
    fn gram(&self, py: Python<'_>, xs: Vec<Vec<f64>>, ys: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let k = py.detach(|| self.0.gram(&xs, &ys)).map_err(err)?;
        Ok((0..xs.len()).map(|i| (0..ys.len()).map(|j| value(k.get(i, j))).collect()).collect())
    }

    fn __repr__(&self) -> String {
        format!("Kernel({:?}, depth={}, mode={:?})", self.0.kind, self.0.depth, self.0.mode)
    }
}

/// A finite MLP in NTK parametrization.
#[pyclass(name = "Network", module = "sgntk")]
struct PyNetwork(Network);

#[pymethods]
impl PyNetwork {
    #[new]
    #[pyo3(signature = (widths, activation, seed=0, sigma_w=1.0, sigma_b=0.1, kappa=1.0))]
    fn new(widths: Vec<usize>, activation: ActivationArg, seed: u64, sigma_w: f64, sigma_b: f64, kappa: f64) -> PyResult<Self> {
        let cfg = NetworkConfig::new(widths, activation.get()?, seed).with_sigmas(sigma_w, sigma_b).with_kappa(kappa);
        Network::init(cfg).map(PyNetwork).map_err(err)
    }

    #[getter]
    fn widths(&self) -> Vec<usize> {
        self.0.config.widths.clone()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.0.parameter_count()
    }

    fn __call__(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.0.eval(&x).map_err(err)
    }

    /// Outputs at every input, one row per input.
    fn predict(&self, inputs: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let m = Matrix::from_rows(&inputs).map_err(err)?;
        self.0.predict(&m).map(|p| rows(&p)).map_err(err)
    }

    fn parameters(&self) -> Vec<f64> {
        self.0.flat_parameters()
    }

    fn set_parameters(&mut self, params: Vec<f64>) -> PyResult<()> {
        self.0.set_flat_parameters(&params).map_err(err)
    }

    /// Quasi-Jacobian at `x`; the true derivative when `surrogate` is omitted.
    #[pyo3(signature = (x, surrogate=None))]
    fn jacobian(&self, x: Vec<f64>, surrogate: Option<SurrogateArg>) -> PyResult<Vec<Vec<f64>>> {
        let s = self.backward(surrogate)?;
        quasi_jacobian(&self.0, &s, &x).map(|j| rows(&j.matrix)).map_err(err)
    }

    /// Empirical generalized NTK `J^{σ̃₁}(xs) J^{σ̃₂}(ys)ᵀ` for a single-output network.
    #[pyo3(signature = (xs, ys, s1=None, s2=None))]
    fn kernel(
        &self,
        xs: Vec<Vec<f64>>,
        ys: Vec<Vec<f64>>,
        s1: Option<SurrogateArg>,
        s2: Option<SurrogateArg>,
    ) -> PyResult<Vec<Vec<f64>>> {
        let (s1, s2) = (self.backward(s1)?, self.backward(s2)?);
        kernel_gram_between(&self.0, &s1, &s2, &xs, &ys).map(|k| rows(&k.matrix)).map_err(err)
    }

    /// Trains in place on `½‖f(X) − Y‖²` and returns `{"loss": [...], "drift": [(step, norm), ...]}`.
    ///
    /// Gradient descent when `surrogate` is omitted, surrogate gradient learning otherwise.
    #[pyo3(signature = (inputs, targets, eta=0.1, steps=1000, surrogate=None, record_kernel_every=None))]
    #[allow(clippy::too_many_arguments)]
    fn train<'py>(
        &mut self,
        py: Python<'py>,
        inputs: Vec<Vec<f64>>,
        targets: Vec<Vec<f64>>,
        eta: f64,
        steps: usize,
        surrogate: Option<SurrogateArg>,
        record_kernel_every: Option<usize>,
    ) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
        let data = Dataset::new(inputs, targets).map_err(err)?;
        let rule = match surrogate {
            Some(s) => TrainRule::Sgl(s.get()?),
            None => TrainRule::GradientDescent,
        };
        let cfg = TrainConfig { record_kernel_every, ..TrainConfig::new(eta, steps, rule) };
        let net = self.0.clone();
        let trace = py.detach(|| train_tracked(net, &data, &cfg, None)).map_err(|f| err(f.error))?;
        let out = pyo3::types::PyDict::new(py);
        out.set_item("loss", &trace.loss)?;
        out.set_item("drift", trace.drift.iter().map(|d| (d.step, d.to_init)).collect::<Vec<_>>())?;
        self.0 = trace.network;
        Ok(out)
    }

    fn to_json(&self) -> PyResult<String> {
        self.0.to_json().map_err(err)
    }

    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        Network::from_json(s).map(PyNetwork).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Network(widths={:?}, activation='{}')", self.0.config.widths, self.0.activation())
    }
}

impl PyNetwork {
    fn backward(&self, s: Option<SurrogateArg>) -> PyResult<Surrogate> {
        match s {
            Some(s) => s.get(),
            None => self.0.config.activation.derivative().map_err(err),
        }
    }
}

/// Gaussian-process posterior of an infinitely wide trained network.
///
/// `t=None` is the `t → ∞` limit; otherwise gradient flow with rate `eta` for time `t`.
#[pyclass(name = "GpPosterior", module = "sgntk")]
struct PyGpPosterior(GpPosterior);

#[pymethods]
impl PyGpPosterior {
    #[new]
    #[pyo3(signature = (kernel, inputs, targets, t=None, eta=0.1, kappa=1.0))]
    fn new(
        kernel: &PyKernel,
        inputs: Vec<Vec<f64>>,
        targets: Vec<Vec<f64>>,
        t: Option<f64>,
        eta: f64,
        kappa: f64,
    ) -> PyResult<Self> {
        let data = Dataset::new(inputs, targets).map_err(err)?;
        let horizon = match t {
            Some(t) => Horizon::Finite { eta, t },
            None => Horizon::Infinite,
        };
        GpPosterior::with_kappa(kernel.0.clone(), &data, horizon, kappa).map(PyGpPosterior).map_err(err)
    }

    fn mean(&self, points: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        self.0.posterior_mean(&points).map(|m| rows(&m)).map_err(err)
    }

    fn cov(&self, points: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        self.0.posterior_cov(&points).map(|m| rows(&m)).map_err(err)
    }

    /// `(mean rows, marginal standard deviations)`.
    fn predict(&self, points: Vec<Vec<f64>>) -> PyResult<(Vec<Vec<f64>>, Vec<f64>)> {
        let p = self.0.predict(&points).map_err(err)?;
        Ok((rows(&p.mean), p.std()))
    }
}

/// Nadaraya–Watson label `sign(Θ_∞(x, X)·y)` of the sign-limit NTK with `kernel`'s depth and variances.
#[pyfunction]
fn nw_classify(kernel: &PyKernel, inputs: Vec<Vec<f64>>, labels: Vec<f64>, x: Vec<f64>) -> PyResult<i8> {
    let data = Dataset::new(inputs, labels.into_iter().map(|y| vec![y]).collect()).map_err(err)?;
    core_nw_classify(&kernel.0, &data, &x).map_err(err)
}

/// `count` seeded points on the unit circle with their regression targets.
#[pyfunction]
#[pyo3(signature = (count=15, seed=0))]
fn sphere_dataset(count: usize, seed: u64) -> PyResult<(Vec<Vec<f64>>, Vec<f64>)> {
    let d = make_sphere_dataset(count, seed).map_err(err)?;
    Ok((d.inputs, d.targets.into_iter().map(|t| t[0]).collect()))
}

/// Fitted exponent `α` of `Θ_∞(z) ∼ (1 − z)^{−α}` for the sign-limit NTK of the given depth.
#[pyfunction]
#[pyo3(signature = (depth, lo=1e-6, hi=1e-3, points=12))]
fn singular_exponent(depth: usize, lo: f64, hi: f64, points: usize) -> PyResult<f64> {
    core_singular_exponent(&KernelSpec::ntk(depth, Activation::Sign), (lo, hi), points).map_err(err)
}

#[pymodule]
#[pyo3(name = "sgntk")]
pub fn sgntk_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SgntkError", m.py().get_type::<SgntkError>())?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyActivation>()?;
    m.add_class::<PySurrogate>()?;
    m.add_class::<PyKernel>()?;
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyGpPosterior>()?;
    m.add_function(wrap_pyfunction!(nw_classify, m)?)?;
    m.add_function(wrap_pyfunction!(sphere_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(singular_exponent, m)?)?;
    Ok(())
}
