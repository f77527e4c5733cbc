//! Figure pipelines and the oracle suite.
//!
//! Every pipeline is a pure function of its configuration: member `k` of an
//! experiment named `name` is seeded with `derive_seed(root_seed, name, k)`, and
//! reports carry no timestamps, so re-running writes byte-identical files.

use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activations::{Activation, Surrogate};
use crate::data::{angle_offsets, circle_angles, circle_points, make_sphere_dataset};
use crate::dual::{gh_expect, t_erf, tdot_erf, Cov2, MonteCarlo};
use crate::empirical::{kernel_gram_between, quasi_jacobian};
use crate::error::{Error, Result};
use crate::gp::{spectrum, GpPosterior, Horizon};
use crate::kernels::{circle_point, singular_exponent, KernelMode, KernelSpec, KernelValue};
use crate::linalg::Matrix;
use crate::network::{ensemble_statistics, Network, NetworkConfig};
use crate::rng::derive_seed;
use crate::training::{train, TrainConfig, TrainRule};

pub const VERSION: &str = concat!("sgntk ", env!("CARGO_PKG_VERSION"));

/// Number of training points in the sphere regression problem.
pub const SPHERE_POINTS: usize = 15;

/// One CSV cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Int(u64),
    Real(f64),
    Text(String),
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cell::Int(v) => write!(f, "{v}"),
            Cell::Real(v) => write!(f, "{v}"),
            Cell::Text(s) => f.write_str(s),
        }
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as u64)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Real(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<KernelValue> for Cell {
    fn from(v: KernelValue) -> Self {
        match v {
            KernelValue::Finite(x) => Cell::Real(x),
            KernelValue::Divergent { .. } => Cell::Text("DIV".into()),
        }
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Cell::Text(String::new()), Cell::Real)
    }
}

/// A named table whose first column is the producing seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        let mut cols = vec!["seed".to_string()];
        cols.extend(columns.iter().filter(|c| **c != "seed").map(|c| c.to_string()));
        Table { name: name.into(), columns: cols, rows: Vec::new() }
    }

    pub fn push(&mut self, seed: u64, cells: Vec<Cell>) {
        assert_eq!(cells.len() + 1, self.columns.len(), "row width for table {}", self.name);
        let mut row = Vec::with_capacity(self.columns.len());
        row.push(Cell::Int(seed));
        row.extend(cells);
        self.rows.push(row);
    }

    fn index(&self, column: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == column)
            .ok_or_else(|| Error::InvalidConfig(format!("table {} has no column {column}", self.name)))
    }

    /// A numeric column; integers are widened and text cells become NaN.
    pub fn column(&self, column: &str) -> Result<Vec<f64>> {
        let i = self.index(column)?;
        Ok(self
            .rows
            .iter()
            .map(|r| match &r[i] {
                Cell::Int(v) => *v as f64,
                Cell::Real(v) => *v,
                Cell::Text(_) => f64::NAN,
            })
            .collect())
    }

    pub fn cells(&self, column: &str) -> Result<Vec<&Cell>> {
        let i = self.index(column)?;
        Ok(self.rows.iter().map(|r| &r[i]).collect())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Io(e.to_string());
        w.write_record(&self.columns).map_err(io)?;
        for r in &self.rows {
            w.write_record(r.iter().map(|c| c.to_string())).map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub version: String,
    pub root_seed: u64,
    /// The pipeline configuration.
    pub config: serde_json::Value,
    /// A user configuration file, echoed verbatim after parsing.
    pub echo: Option<serde_json::Value>,
    pub notes: Vec<String>,
}

/// Output of one pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub meta: ReportMeta,
    pub tables: Vec<Table>,
}

impl ExperimentReport {
    pub fn new(name: &str, root_seed: u64, config: &impl Serialize) -> Result<Self> {
        Ok(ExperimentReport {
            name: name.into(),
            meta: ReportMeta {
                version: VERSION.into(),
                root_seed,
                config: serde_json::to_value(config)?,
                echo: None,
                notes: Vec::new(),
            },
            tables: Vec::new(),
        })
    }

    pub fn table(&self, name: &str) -> Result<&Table> {
        self.tables
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::InvalidConfig(format!("report {} has no table {name}", self.name)))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes `<name>.json` and one `<name>-<table>.csv` per table; returns the paths.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut paths = Vec::new();
        let json = dir.join(format!("{}.json", self.name));
        std::fs::write(&json, self.to_json()?)?;
        paths.push(json);
        for t in &self.tables {
            let p = dir.join(format!("{}-{}.csv", self.name, t.name));
            std::fs::write(&p, t.to_csv()?)?;
            paths.push(p);
        }
        Ok(paths)
    }
}

/// `2 / (λ_min + λ_max)` of the symmetrized Gram: the step at which linearized
/// gradient descent contracts its slowest and fastest eigendirections equally.
pub fn eta_critical(gram: &Matrix) -> Result<f64> {
    let (lo, hi) = spectrum(gram)?;
    Ok(2.0 / (lo + hi))
}

fn warn_if_unstable(gram: &Matrix, eta: f64, notes: &mut Vec<String>, what: &str) {
    if let Ok(crit) = eta_critical(gram) {
        if eta >= crit {
            let msg = format!("{what}: eta {eta} ≥ critical {crit:.4}");
            log::warn!("{msg}");
            notes.push(msg);
        }
    }
}

/// Settings shared by the kernel-curve figures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelFigureConfig {
    pub widths: Vec<usize>,
    pub m_values: Vec<f64>,
    /// Networks per `(width, m)`.
    pub networks: usize,
    pub steps: usize,
    pub eta: f64,
    pub depth: usize,
    /// Angle offsets on `[−π, π)`.
    pub grid: usize,
    pub sigma_w: f64,
    pub sigma_b: f64,
    pub root_seed: u64,
    /// `None` trains by gradient descent and plots the NTK; `Some` uses surrogate
    /// gradient learning and the SG-NTK.
    pub surrogate: Option<Surrogate>,
}

impl KernelFigureConfig {
    fn base(surrogate: Option<Surrogate>) -> Self {
        KernelFigureConfig {
            widths: vec![10, 100, 500],
            m_values: vec![2.0, 5.0, 20.0],
            networks: 3,
            steps: 1000,
            eta: 0.1 / SPHERE_POINTS as f64,
            depth: 3,
            grid: 128,
            sigma_w: 1.0,
            sigma_b: 0.1,
            root_seed: 0,
            surrogate,
        }
    }

    pub fn fig1() -> Self {
        KernelFigureConfig::base(None)
    }

    pub fn fig2() -> Self {
        KernelFigureConfig::base(Some(Surrogate::derf()))
    }

    /// The full-size settings: four widths up to 1000, ten networks, 10⁴ steps.
    pub fn paper_scale(mut self) -> Self {
        self.widths = vec![10, 100, 500, 1000];
        self.networks = 10;
        self.steps = 10_000;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.root_seed = seed;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.m_values.is_empty() || self.networks == 0 || self.grid < 2 {
            return Err(Error::InvalidConfig("figure needs widths, m values, networks and a grid".into()));
        }
        if self.depth < 2 {
            return Err(Error::InvalidConfig("figure depth must be at least 2".into()));
        }
        Ok(())
    }

    fn kernel(&self, activation: Activation) -> KernelSpec {
        let spec = match &self.surrogate {
            None => KernelSpec::ntk(self.depth, activation),
            Some(s) => KernelSpec::sg_ntk(self.depth, activation, s.clone()),
        };
        spec.with_sigmas(self.sigma_w, self.sigma_b)
    }
}

struct CurveRun {
    seed: u64,
    width: usize,
    m: f64,
    init: Vec<f64>,
    trained: Option<Vec<f64>>,
    final_loss: f64,
    status: String,
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// Empirical and analytic kernel curves `K(x₀, x(Δα))` with `x₀ = (1, 0)`, at
/// initialization and after training, for every width, `m` and network.
///
/// Tables: `kernels` (one row per seed, width, m and angle), `mse` (one row per
/// network) and `summary` (means over networks).
pub fn run_kernel_figure(name: &str, cfg: &KernelFigureConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let data = make_sphere_dataset(SPHERE_POINTS, cfg.root_seed)?;
    let offsets = angle_offsets(cfg.grid);
    let grid = circle_points(&offsets);
    let x0 = vec![circle_point(0.0)];
    let mut report = ExperimentReport::new(name, cfg.root_seed, cfg)?;
    report.meta.notes.push(format!("angle grid: {} offsets on [-pi, pi), x0 = (1, 0)", cfg.grid));

    let mut analytic = Vec::new();
    for &m in &cfg.m_values {
        let spec = cfg.kernel(Activation::erf_m(m)?);
        let curve: Vec<f64> = spec.gram_matrix(&x0, &grid)?.into_vec();
        warn_if_unstable(&spec.gram_matrix(&data.inputs, &data.inputs)?, cfg.eta, &mut report.meta.notes, &format!("m={m}"));
        analytic.push(curve);
    }
    let limit = cfg.kernel(Activation::Sign).gram(&x0, &grid)?.values;

    let jobs: Vec<(usize, usize, usize)> = (0..cfg.widths.len())
        .flat_map(|w| (0..cfg.m_values.len()).flat_map(move |m| (0..cfg.networks).map(move |k| (w, m, k))))
        .collect();
    let runs: Vec<CurveRun> = jobs
        .par_iter()
        .map(|&(wi, mi, k)| -> Result<CurveRun> {
            let (width, m) = (cfg.widths[wi], cfg.m_values[mi]);
            let seed = derive_seed(cfg.root_seed, name, k as u64);
            let act = Activation::erf_m(m)?;
            let config = NetworkConfig::uniform(2, width, cfg.depth, 1, act, seed).with_sigmas(cfg.sigma_w, cfg.sigma_b);
            let net = Network::init(config)?;
            let s1 = act.derivative()?;
            let s2 = cfg.surrogate.clone().unwrap_or_else(|| s1.clone());
            let init = kernel_gram_between(&net, &s1, &s2, &x0, &grid)?.matrix.into_vec();
            if cfg.steps == 0 {
                return Ok(CurveRun { seed, width, m, init, trained: None, final_loss: f64::NAN, status: "init".into() });
            }
            let rule = match &cfg.surrogate {
                None => TrainRule::GradientDescent,
                Some(s) => TrainRule::Sgl(s.clone()),
            };
            let tc = TrainConfig { seed, ..TrainConfig::new(cfg.eta, cfg.steps, rule) };
            Ok(match train(net, &data, &tc) {
                Ok(trace) => {
                    let trained = kernel_gram_between(&trace.network, &s1, &s2, &x0, &grid)?.matrix.into_vec();
                    CurveRun { seed, width, m, init, trained: Some(trained), final_loss: trace.final_loss(), status: "ok".into() }
                }
                Err(f) => CurveRun {
                    seed,
                    width,
                    m,
                    init,
                    trained: None,
                    final_loss: f.trace.loss.last().copied().unwrap_or(f64::NAN),
                    status: format!("failed: {}", f.error),
                },
            })
        })
        .collect::<Result<_>>()?;

    let mut curves = Table::new(
        "kernels",
        &["width", "m", "angle", "empirical_init", "empirical_trained", "analytic", "sign_limit"],
    );
    let mut errors = Table::new("mse", &["width", "m", "mse_init", "mse_trained", "final_loss", "status"]);
    let mut summary = Table::new("summary", &["width", "m", "networks", "mean_mse_init", "mean_mse_trained"]);
    for &width in &cfg.widths {
        for (mi, &m) in cfg.m_values.iter().enumerate() {
            let group: Vec<&CurveRun> = runs.iter().filter(|r| r.width == width && r.m == m).collect();
            let reference = &analytic[mi];
            let (mut sum_init, mut sum_trained, mut trained_count) = (0.0, 0.0, 0usize);
            for r in &group {
                for (j, &angle) in offsets.iter().enumerate() {
                    curves.push(
                        r.seed,
                        vec![
                            width.into(),
                            m.into(),
                            angle.into(),
                            r.init[j].into(),
                            r.trained.as_ref().map(|t| t[j]).into(),
                            reference[j].into(),
                            limit[j].into(),
                        ],
                    );
                }
                let mi_init = mse(&r.init, reference);
                let mi_trained = r.trained.as_ref().map(|t| mse(t, reference));
                sum_init += mi_init;
                if let Some(v) = mi_trained {
                    sum_trained += v;
                    trained_count += 1;
                }
                errors.push(
                    r.seed,
                    vec![width.into(), m.into(), mi_init.into(), mi_trained.into(), r.final_loss.into(), r.status.as_str().into()],
                );
            }
            let mean_trained = (trained_count > 0).then(|| sum_trained / trained_count as f64);
            summary.push(
                cfg.root_seed,
                vec![width.into(), m.into(), group.len().into(), (sum_init / group.len() as f64).into(), mean_trained.into()],
            );
        }
    }
    report.tables = vec![curves, errors, summary];
    Ok(report)
}

/// Gradient-descent NTK curves for `erf_m` networks.
pub fn run_fig1(cfg: &KernelFigureConfig) -> Result<ExperimentReport> {
    let cfg = KernelFigureConfig { surrogate: None, ..cfg.clone() };
    run_kernel_figure("fig1", &cfg)
}

/// Surrogate-gradient SG-NTK curves; the surrogate defaults to `erf′`.
pub fn run_fig2(cfg: &KernelFigureConfig) -> Result<ExperimentReport> {
    let cfg = KernelFigureConfig { surrogate: Some(cfg.surrogate.clone().unwrap_or_else(Surrogate::derf)), ..cfg.clone() };
    run_kernel_figure("fig2", &cfg)
}

/// Settings for the trained sign-network ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig3Config {
    pub width: usize,
    pub count: usize,
    pub steps: usize,
    pub eta: f64,
    pub kappa: f64,
    pub depth: usize,
    /// Test angles on `[0, 2π)`.
    pub grid: usize,
    pub sigma_w: f64,
    pub sigma_b: f64,
    pub surrogate: Surrogate,
    pub root_seed: u64,
}

impl Default for Fig3Config {
    fn default() -> Self {
        Fig3Config {
            width: 256,
            count: 100,
            steps: 10_000,
            eta: 0.1,
            kappa: 1.0,
            depth: 3,
            grid: 256,
            sigma_w: 1.0,
            sigma_b: 0.1,
            surrogate: Surrogate::derf(),
            root_seed: 0,
        }
    }
}

impl Fig3Config {
    /// 500 networks of width 500 trained for 3·10⁴ steps.
    pub fn paper_scale(mut self) -> Self {
        self.width = 500;
        self.count = 500;
        self.steps = 30_000;
        self
    }
}

/// Sign-activation networks trained by surrogate gradient learning, compared
/// with the SG-NTK posterior and with `Σ_sign` kernel regression.
///
/// Tables: `ensemble` (one row per test angle), `members` (one row per network
/// and angle) and `training` (one row per network).
pub fn run_fig3(cfg: &Fig3Config) -> Result<ExperimentReport> {
    if cfg.count == 0 || cfg.grid == 0 {
        return Err(Error::InvalidConfig("fig3 needs at least one network and one test angle".into()));
    }
    let data = make_sphere_dataset(SPHERE_POINTS, cfg.root_seed)?;
    let angles = circle_angles(cfg.grid);
    let points = circle_points(&angles);
    let test = Matrix::from_rows(&points)?;
    let mut report = ExperimentReport::new("fig3", cfg.root_seed, cfg)?;

    let spec = KernelSpec::sg_ntk(cfg.depth, Activation::Sign, cfg.surrogate.clone()).with_sigmas(cfg.sigma_w, cfg.sigma_b);
    let gp = GpPosterior::with_kappa(spec, &data, Horizon::Infinite, cfg.kappa)?;
    warn_if_unstable(&gp.gram().scale(cfg.kappa * cfg.kappa), cfg.eta, &mut report.meta.notes, "sg-ntk");
    let prediction = gp.predict(&points)?;
    let gp_std = prediction.std();
    let nngp = KernelSpec::nngp(cfg.depth, Activation::Sign).with_sigmas(cfg.sigma_w, cfg.sigma_b);
    let regression = GpPosterior::new(nngp, &data, Horizon::Infinite)?.posterior_mean(&points)?;

    let members: Vec<(u64, Vec<f64>, f64, String)> = (0..cfg.count)
        .into_par_iter()
        .map(|k| -> Result<_> {
            let seed = derive_seed(cfg.root_seed, "fig3", k as u64);
            let config = NetworkConfig::uniform(2, cfg.width, cfg.depth, 1, Activation::Sign, seed)
                .with_sigmas(cfg.sigma_w, cfg.sigma_b)
                .with_kappa(cfg.kappa);
            let net = Network::init(config)?;
            let tc = TrainConfig { seed, ..TrainConfig::new(cfg.eta, cfg.steps, TrainRule::Sgl(cfg.surrogate.clone())) };
            Ok(match train(net, &data, &tc) {
                Ok(trace) => (seed, trace.network.predict(&test)?.into_vec(), trace.final_loss(), "ok".to_string()),
                Err(f) => {
                    let out = f.trace.network.predict(&test)?.into_vec();
                    (seed, out, f.trace.loss.last().copied().unwrap_or(f64::NAN), format!("failed: {}", f.error))
                }
            })
        })
        .collect::<Result<_>>()?;

    let mut member_table = Table::new("members", &["member", "angle", "output"]);
    let mut training = Table::new("training", &["member", "final_loss", "status"]);
    for (k, (seed, out, loss, status)) in members.iter().enumerate() {
        for (j, &a) in angles.iter().enumerate() {
            member_table.push(*seed, vec![k.into(), a.into(), out[j].into()]);
        }
        training.push(*seed, vec![k.into(), (*loss).into(), status.as_str().into()]);
    }
    let n = cfg.count as f64;
    let mut ensemble = Table::new(
        "ensemble",
        &["angle", "ensemble_mean", "ensemble_se", "ensemble_std", "gp_mean", "gp_std", "nngp_regression"],
    );
    for (j, &a) in angles.iter().enumerate() {
        let mean = members.iter().map(|m| m.1[j]).sum::<f64>() / n;
        let (std, se) = if cfg.count > 1 {
            let var = members.iter().map(|m| (m.1[j] - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var.sqrt(), (var / n).sqrt())
        } else {
            (f64::NAN, f64::NAN)
        };
        ensemble.push(
            cfg.root_seed,
            vec![
                a.into(),
                mean.into(),
                se.into(),
                std.into(),
                prediction.mean[(j, 0)].into(),
                gp_std[j].into(),
                regression[(j, 0)].into(),
            ],
        );
    }
    report.tables = vec![ensemble, member_table, training];
    Ok(report)
}

/// Outcome of one oracle check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Check { name: name.into(), passed, detail }
    }

    fn from_result(name: &str, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((p, d)) => Check::new(name, p, d),
            Err(e) => Check::new(name, false, format!("error: {e}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail)?;
        }
        Ok(())
    }
}

/// Well-conditioned random covariances for the dual-expectation checks.
pub fn random_covariances(count: usize, seed: u64) -> Vec<Cov2> {
    let mut s = crate::rng::Stream::new(seed, crate::rng::streams::TEST_POINTS);
    (0..count)
        .map(|_| {
            let s11 = 0.2 + 1.8 * s.next_uniform();
            let s22 = 0.2 + 1.8 * s.next_uniform();
            let rho = 1.8 * s.next_uniform() - 0.9;
            Cov2 { s11, s22, s12: rho * (s11 * s22).sqrt() }
        })
        .collect()
}

/// Largest deviation of the given closed forms for `T` and `Ṫ` from 64-point
/// quadrature over `covs`.
pub fn closed_form_deviation(
    covs: &[Cov2],
    t: impl Fn(&Cov2) -> Result<f64>,
    tdot: impl Fn(&Cov2) -> Result<f64>,
) -> Result<(f64, f64)> {
    let (mut dt, mut dd) = (0.0_f64, 0.0_f64);
    for c in covs {
        let e = gh_expect(c, &crate::activations::erf, &crate::activations::erf, 64)?;
        let d = gh_expect(c, &crate::activations::erf_prime, &crate::activations::erf_prime, 64)?;
        dt = dt.max((t(c)? - e).abs());
        dd = dd.max((tdot(c)? - d).abs());
    }
    Ok((dt, dd))
}

/// Largest `|Θ̂⁽¹⁾(x, y) − (σ_w²/n₀ ⟨x, y⟩ + σ_b²)|` over `pairs` random input pairs.
pub fn base_case_deviation(pairs: usize, seed: u64) -> Result<f64> {
    let mut s = crate::rng::Stream::new(seed, crate::rng::streams::TEST_POINTS);
    let mut worst = 0.0_f64;
    for k in 0..pairs {
        let n0 = 1 + k % 5;
        let n1 = 1 + (k * 7) % 6;
        let x: Vec<f64> = (0..n0).map(|_| s.next_normal()).collect();
        let y: Vec<f64> = (0..n0).map(|_| s.next_normal()).collect();
        let (sw, sb) = (0.5 + s.next_uniform(), s.next_uniform());
        let act = Activation::erf_m(1.0 + k as f64)?;
        let net = Network::init(NetworkConfig::new(vec![n0, n1], act, seed ^ k as u64).with_sigmas(sw, sb))?;
        let s1 = act.derivative()?;
        let kern = crate::empirical::empirical_generalized_ntk(&net, &s1, &Surrogate::Zero, &x, &y)?;
        let expected = sw * sw / n0 as f64 * crate::linalg::dot(&x, &y) + sb * sb;
        for i in 0..n1 {
            for j in 0..n1 {
                let e = if i == j { expected } else { 0.0 };
                worst = worst.max((kern[(i, j)] - e).abs());
            }
        }
    }
    Ok(worst)
}

/// Largest relative deviation between the true Jacobian and central finite
/// differences on a seeded network, over the entries with non-negligible size.
pub fn jacobian_fd_deviation(net: &Network, x: &[f64]) -> Result<f64> {
    let s = net.config.activation.derivative()?;
    let jac = quasi_jacobian(net, &s, x)?.matrix;
    let mut params = net.flat_parameters();
    let mut probe = net.clone();
    let scale = jac.max_abs().max(f64::MIN_POSITIVE);
    let mut worst = 0.0_f64;
    for p in 0..params.len() {
        let orig = params[p];
        let h = 1e-5 * orig.abs().max(1.0);
        params[p] = orig + h;
        probe.set_flat_parameters(&params)?;
        let up = probe.eval(x)?;
        params[p] = orig - h;
        probe.set_flat_parameters(&params)?;
        let down = probe.eval(x)?;
        params[p] = orig;
        for o in 0..up.len() {
            let fd = (up[o] - down[o]) / (2.0 * h);
            let a = jac[(o, p)];
            let rel = (fd - a).abs() / a.abs().max(1e-3 * scale);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Runs the oracle suite at desk scale.
pub fn validate(seed: u64) -> ValidationReport {
    let mut checks = Vec::new();

    checks.push(Check::from_result(
        "base case",
        base_case_deviation(20, seed).map(|d| (d <= 1e-12, format!("max deviation {d:.3e} (tol 1e-12)"))),
    ));

    let covs = random_covariances(100, seed);
    checks.push(Check::from_result(
        "closed form vs quadrature",
        closed_form_deviation(&covs, t_erf, tdot_erf)
            .map(|(a, b)| (a <= 1e-8 && b <= 1e-8, format!("T {a:.3e}, Tdot {b:.3e} (tol 1e-8)"))),
    ));

    checks.push(Check::from_result("Monte Carlo", (|| {
        let mc = MonteCarlo::new(200_000, seed);
        let mut worst = 0.0_f64;
        for c in covs.iter().take(10) {
            let (e, se) = mc.expect(c, &crate::activations::erf, &crate::activations::erf)?;
            worst = worst.max((e - t_erf(c)?).abs() / se);
            let (e, se) = mc.expect(c, &crate::activations::erf_prime, &crate::activations::erf_prime)?;
            worst = worst.max((e - tdot_erf(c)?).abs() / se);
        }
        Ok((worst <= 4.0, format!("max |z| {worst:.2} (tol 4)")))
    })()));

    checks.push(Check::from_result("finite-difference Jacobian", (|| {
        let act = Activation::erf_m(2.0)?;
        let net = Network::init(NetworkConfig::uniform(2, 16, 3, 1, act, seed))?;
        let d = jacobian_fd_deviation(&net, &[0.6, -0.8])?;
        Ok((d <= 1e-6, format!("max relative deviation {d:.3e} (tol 1e-6)")))
    })()));

    checks.push(Check::from_result("quadrature-mode kernels", (|| {
        let (x, y) = (circle_point(0.3), circle_point(1.1));
        let mut worst = 0.0_f64;
        for depth in 1..=4 {
            let cf = KernelSpec::ntk(depth, Activation::erf_m(1.0)?);
            let q = cf.clone().with_mode(KernelMode::Quadrature { order: 64 });
            let a = cf.ntk_value(&x, &y)?.expect_finite(0, 0)?;
            let b = q.ntk_value(&x, &y)?.expect_finite(0, 0)?;
            worst = worst.max((a - b).abs());
        }
        Ok((worst <= 1e-8, format!("max deviation {worst:.3e} (tol 1e-8)")))
    })()));

    checks.push(Check::from_result("ensemble covariance", (|| {
        let (a1, a2) = (Activation::erf_m(2.0)?, Activation::erf_m(5.0)?);
        let config = NetworkConfig::uniform(2, 512, 2, 1, a1, seed);
        let pairs = [(0.0, 0.0), (0.0, 1.0), (0.5, 2.5)];
        let pts: Vec<Vec<f64>> = pairs.iter().flat_map(|&(s, t)| [circle_point(s), circle_point(t)]).collect();
        let stats = ensemble_statistics(&config, 400, &pts, Some(a2))?;
        let spec = KernelSpec::cross_nngp(2, a1, a2);
        let mut worst = 0.0_f64;
        for p in 0..pairs.len() {
            let (i, j) = (2 * p, 2 * p + 1);
            let (c, se) = stats.covariance((0, i), (1, j), 0);
            let want = spec.cross_nngp_value(&pts[i], &pts[j])?;
            worst = worst.max((c - want).abs() / se);
        }
        Ok((worst <= 4.0, format!("max |z| {worst:.2} (tol 4)")))
    })()));

    checks.push(Check::from_result("singular exponent", (|| {
        let mut worst = 0.0_f64;
        for depth in 2..=4 {
            let spec = KernelSpec::ntk(depth, Activation::Sign);
            let a = singular_exponent(&spec, (1e-6, 1e-3), 12)?;
            let want = 1.0 - 0.5_f64.powi(depth as i32 - 1);
            worst = worst.max((a - want).abs() / want);
        }
        Ok((worst <= 0.05, format!("max relative error {worst:.3e} (tol 0.05)")))
    })()));

    ValidationReport { checks }
}

/// Kernel values on a uniform angle grid against `x₀ = (1, 0)`; `DIV` marks divergent entries.
pub fn kernel_table(spec: &KernelSpec, grid: usize, seed: u64) -> Result<ExperimentReport> {
    let offsets = angle_offsets(grid);
    let values = spec.gram(&[circle_point(0.0)], &circle_points(&offsets))?.values;
    let mut table = Table::new("kernel", &["angle", "value"]);
    for (a, v) in offsets.iter().zip(values) {
        table.push(seed, vec![(*a).into(), v.into()]);
    }
    let mut report = ExperimentReport::new("kernel-table", seed, spec)?;
    report.tables.push(table);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_fig() -> KernelFigureConfig {
        KernelFigureConfig {
            widths: vec![8, 32],
            m_values: vec![2.0],
            networks: 2,
            steps: 20,
            grid: 16,
            ..KernelFigureConfig::fig1()
        }
    }

    #[test]
    fn every_row_carries_a_seed_and_runs_are_reproducible() {
        let a = run_fig1(&tiny_fig()).unwrap();
        let b = run_fig1(&tiny_fig()).unwrap();
        assert_eq!(a, b);
        for t in &a.tables {
            assert_eq!(t.columns[0], "seed");
            assert!(t.rows.iter().all(|r| matches!(r[0], Cell::Int(_))));
            assert_eq!(t.to_csv().unwrap(), b.table(&t.name).unwrap().to_csv().unwrap());
        }
        assert_eq!(a.table("kernels").unwrap().rows.len(), 2 * 2 * 16);
    }

    #[test]
    fn zero_steps_leaves_trained_columns_empty() {
        let cfg = KernelFigureConfig { steps: 0, ..tiny_fig() };
        let r = run_fig1(&cfg).unwrap();
        let t = r.table("kernels").unwrap();
        assert!(t.cells("empirical_trained").unwrap().iter().all(|c| **c == Cell::Text(String::new())));
    }

    #[test]
    fn surrogate_equal_to_derivative_reproduces_fig1() {
        let cfg = tiny_fig();
        let a = run_fig1(&cfg).unwrap();
        let with_true = KernelFigureConfig { surrogate: Some(Surrogate::ErfDeriv { m: 2.0 }), ..cfg };
        let b = run_kernel_figure("fig1", &with_true).unwrap();
        let ka = a.table("kernels").unwrap();
        let kb = b.table("kernels").unwrap();
        for col in ["empirical_init", "empirical_trained"] {
            assert_eq!(ka.column(col).unwrap(), kb.column(col).unwrap());
        }
        let (x, y) = (ka.column("analytic").unwrap(), kb.column("analytic").unwrap());
        for (u, v) in x.iter().zip(&y) {
            assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn curves_are_even_in_the_angle() {
        let spec = KernelSpec::ntk(3, Activation::erf_m(2.0).unwrap());
        let r = kernel_table(&spec, 32, 0).unwrap();
        let v = r.table("kernel").unwrap().column("value").unwrap();
        for k in 1..16 {
            assert!((v[16 + k] - v[16 - k]).abs() < 1e-12);
        }
        let sign = kernel_table(&KernelSpec::ntk(3, Activation::Sign), 8, 0).unwrap();
        assert_eq!(*sign.table("kernel").unwrap().cells("value").unwrap()[4], Cell::Text("DIV".into()));
    }

    #[test]
    fn oracle_suite_passes() {
        let r = validate(0);
        assert!(r.passed(), "{r}");
        assert_eq!(r.checks.len(), 7);
    }

    #[test]
    fn injected_fault_fails_the_cross_check() {
        let covs = random_covariances(10, 1);
        let (a, _) = closed_form_deviation(&covs, t_erf, tdot_erf).unwrap();
        assert!(a <= 1e-8);
        let (b, _) = closed_form_deviation(&covs, |c| Ok(t_erf(c)? + 1e-3), tdot_erf).unwrap();
        assert!(b > 1e-8);
    }

    #[test]
    fn single_member_ensemble_has_no_band() {
        let cfg = Fig3Config { width: 16, count: 1, steps: 5, grid: 8, ..Fig3Config::default() };
        let r = run_fig3(&cfg).unwrap();
        let t = r.table("ensemble").unwrap();
        assert!(t.column("ensemble_se").unwrap().iter().all(|v| v.is_nan()));
        let out = r.table("members").unwrap().column("output").unwrap();
        assert_eq!(t.column("ensemble_mean").unwrap(), out);
    }

    #[test]
    fn report_files_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let spec = KernelSpec::ntk(2, Activation::erf_m(2.0).unwrap());
        let paths = kernel_table(&spec, 4, 3).unwrap().write(dir.path()).unwrap();
        assert_eq!(paths.len(), 2);
        let csv = std::fs::read_to_string(&paths[1]).unwrap();
        assert!(csv.starts_with("seed,angle,value\n3,"));
    }
}
