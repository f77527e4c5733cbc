use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use sgntk::data::{circle_angles, circle_points, Dataset};
use sgntk::experiments::{self, Cell, ExperimentReport, Fig3Config, KernelFigureConfig, Table};
use sgntk::kernels::KernelMode;
use sgntk::network::member_seed;
use sgntk::training::{train, TrainConfig, TrainRule};
use sgntk::{Activation, Backward, Error, GpPosterior, Horizon, KernelKind, KernelSpec, Matrix, Network, NetworkConfig, Result, Surrogate};

#[derive(Parser)]
#[command(name = "sgntk", version, about = "Neural tangent kernels and surrogate-gradient NTKs")]
struct Cli {
    /// Root seed for every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory receiving reports.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Use the full-size experiment settings.
    #[arg(long, global = true)]
    paper_scale: bool,
    /// TOML or JSON file with per-command settings, echoed into every report.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Kernel values against x₀ = (1, 0) on a uniform angle grid.
    KernelTable(KernelTableArgs),
    /// Train an ensemble and write loss traces and outputs on a test grid.
    TrainEnsemble(TrainArgs),
    /// Posterior mean and standard deviation of a trained infinite-width network.
    GpPredict(GpArgs),
    /// Gradient-descent NTK curves for erf_m networks.
    Fig1(FigArgs),
    /// Surrogate-gradient SG-NTK curves.
    Fig2(FigArgs),
    /// Trained sign-network ensemble against the SG-NTK posterior.
    Fig3(Fig3Args),
    /// Run the oracle suite.
    Validate,
}

#[derive(Args)]
struct KernelArgs {
    /// nngp, nngp-dot, ntk, cross-nngp, surrogate-sigma or sgntk.
    #[arg(long, default_value = "ntk")]
    kernel: KernelKind,
    /// erf, erf:m=<m>, sign or tanh.
    #[arg(long, default_value = "erf:m=2")]
    activation: Activation,
    /// Second activation for cross kernels.
    #[arg(long)]
    activation2: Option<Activation>,
    /// Backward derivative of the second slot: derf, derf:m=<m>, rect:w=<w>, sech2:b=<b> or zero.
    #[arg(long)]
    surrogate: Option<Surrogate>,
    #[arg(long, default_value_t = 3)]
    depth: usize,
    #[arg(long, default_value_t = 1.0)]
    sigma_w: f64,
    #[arg(long, default_value_t = 0.1)]
    sigma_b: f64,
    /// closed, sign, or a quadrature order.
    #[arg(long)]
    mode: Option<String>,
}

impl KernelArgs {
    fn spec(&self) -> Result<KernelSpec> {
        let mut spec = KernelSpec::new(self.kernel, self.depth, self.activation).with_sigmas(self.sigma_w, self.sigma_b);
        if let Some(a2) = self.activation2 {
            spec.slot2.activation = a2;
        }
        if let Some(s) = &self.surrogate {
            spec = spec.with_backward2(Backward::Surrogate(s.clone()));
        } else if self.kernel == KernelKind::SgNtk {
            spec = spec.with_backward2(Backward::Surrogate(Surrogate::derf()));
        }
        if let Some(mode) = &self.mode {
            spec = spec.with_mode(parse_mode(mode)?);
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn parse_mode(s: &str) -> Result<KernelMode> {
    match s {
        "closed" | "closed-form" => Ok(KernelMode::ClosedForm),
        "sign" | "sign-limit" => Ok(KernelMode::SignLimit),
        q => q
            .parse()
            .map(|order| KernelMode::Quadrature { order })
            .map_err(|_| Error::Parse { input: q.into(), reason: "expected closed, sign or a quadrature order".into() }),
    }
}

#[derive(Args)]
struct KernelTableArgs {
    #[command(flatten)]
    kernel: KernelArgs,
    #[arg(long, default_value_t = 128)]
    grid: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 256)]
    width: usize,
    #[arg(long, default_value_t = 3)]
    depth: usize,
    #[arg(long, default_value = "sign")]
    activation: Activation,
    /// Surrogate for surrogate gradient learning; omitted means gradient descent.
    #[arg(long)]
    surrogate: Option<Surrogate>,
    #[arg(long, default_value_t = 0.1)]
    eta: f64,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, default_value_t = 1.0)]
    kappa: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma_w: f64,
    #[arg(long, default_value_t = 0.1)]
    sigma_b: f64,
    /// Training data; defaults to the 15-point sphere set.
    #[arg(long)]
    train_csv: Option<PathBuf>,
    /// Test angles on [0, 2π).
    #[arg(long, default_value_t = 256)]
    grid: usize,
    /// Output stem; defaults to `<out-dir>/train-ensemble`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GpArgs {
    /// ntk, sgntk or nngp.
    #[arg(long, default_value = "ntk")]
    kernel: KernelKind,
    /// Activation, e.g. erf:m=2 or sign.
    #[arg(long, default_value = "erf:m=2")]
    mode: Activation,
    #[arg(long)]
    surrogate: Option<Surrogate>,
    #[arg(long, default_value_t = 3)]
    depth: usize,
    #[arg(long, default_value_t = 1.0)]
    sigma_w: f64,
    #[arg(long, default_value_t = 0.1)]
    sigma_b: f64,
    /// CSV with a header; the last column is the target.
    #[arg(long)]
    train_csv: Option<PathBuf>,
    /// CSV with a header holding test inputs only; defaults to a 256-angle circle grid.
    #[arg(long)]
    test_csv: Option<PathBuf>,
    /// `inf` or a training time.
    #[arg(long, default_value = "inf")]
    t: Horizon,
    #[arg(long, default_value_t = 0.1)]
    eta: f64,
    #[arg(long, default_value_t = 1.0)]
    kappa: f64,
    /// Output CSV; defaults to `<out-dir>/gp-predict.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FigArgs {
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    m: Option<Vec<f64>>,
    #[arg(long)]
    networks: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
}

#[derive(Args)]
struct Fig3Args {
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
}

/// Configuration file contents: the whole document plus typed sections.
struct ConfigFile {
    echo: serde_json::Value,
}

impl ConfigFile {
    fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let echo = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            let v: toml::Value =
                toml::from_str(&text).map_err(|e| Error::Parse { input: path.display().to_string(), reason: e.to_string() })?;
            serde_json::to_value(v)?
        };
        Ok(ConfigFile { echo })
    }

    /// `base` with the keys of section `name` laid over it.
    fn section<T: Serialize + DeserializeOwned>(&self, name: &str, base: T) -> Result<T> {
        let Some(overlay) = self.echo.get(name).and_then(|v| v.as_object()) else {
            return Ok(base);
        };
        let mut v = serde_json::to_value(base)?;
        if let Some(obj) = v.as_object_mut() {
            for (k, x) in overlay {
                obj.insert(k.clone(), x.clone());
            }
        }
        Ok(serde_json::from_value(v)?)
    }
}

fn finish(report: &mut ExperimentReport, cfg: &Option<ConfigFile>, dir: &Path) -> Result<()> {
    report.meta.echo = cfg.as_ref().map(|c| c.echo.clone());
    for p in report.write(dir)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn sphere_or_csv(path: &Option<PathBuf>, seed: u64) -> Result<Dataset> {
    match path {
        Some(p) => Dataset::from_csv(p, 1),
        None => sgntk::data::make_sphere_dataset(experiments::SPHERE_POINTS, seed),
    }
}

fn run(cli: Cli) -> Result<bool> {
    let Cli { seed, out_dir, paper_scale, config, command } = cli;
    let file = config.as_deref().map(ConfigFile::load).transpose()?;
    let dir = out_dir.as_path();
    match command {
        Command::KernelTable(a) => {
            let spec = a.kernel.spec()?;
            let mut report = experiments::kernel_table(&spec, a.grid, seed)?;
            print!("{}", report.tables[0].to_csv()?);
            finish(&mut report, &file, dir)?;
        }
        Command::TrainEnsemble(a) => train_ensemble(&a, seed, &file, dir)?,
        Command::GpPredict(a) => gp_predict(&a, seed, dir)?,
        Command::Fig1(a) => {
            let cfg = figure_config(KernelFigureConfig::fig1(), "fig1", &a, seed, paper_scale, &file)?;
            finish(&mut experiments::run_fig1(&cfg)?, &file, dir)?;
        }
        Command::Fig2(a) => {
            let cfg = figure_config(KernelFigureConfig::fig2(), "fig2", &a, seed, paper_scale, &file)?;
            finish(&mut experiments::run_fig2(&cfg)?, &file, dir)?;
        }
        Command::Fig3(a) => {
            let mut cfg = Fig3Config { root_seed: seed, ..Fig3Config::default() };
            if paper_scale {
                cfg = cfg.paper_scale();
            }
            if let Some(f) = &file {
                cfg = f.section("fig3", cfg)?;
            }
            cfg.width = a.width.unwrap_or(cfg.width);
            cfg.count = a.count.unwrap_or(cfg.count);
            cfg.steps = a.steps.unwrap_or(cfg.steps);
            cfg.kappa = a.kappa.unwrap_or(cfg.kappa);
            cfg.eta = a.eta.unwrap_or(cfg.eta);
            finish(&mut experiments::run_fig3(&cfg)?, &file, dir)?;
        }
        Command::Validate => {
            let report = experiments::validate(seed);
            print!("{report}");
            return Ok(report.passed());
        }
    }
    Ok(true)
}

fn figure_config(
    base: KernelFigureConfig,
    name: &str,
    a: &FigArgs,
    seed: u64,
    paper_scale: bool,
    file: &Option<ConfigFile>,
) -> Result<KernelFigureConfig> {
    let mut cfg = base.with_seed(seed);
    if paper_scale {
        cfg = cfg.paper_scale();
    }
    if let Some(f) = file {
        cfg = f.section(name, cfg)?;
    }
    if let Some(w) = &a.widths {
        cfg.widths = w.clone();
    }
    if let Some(m) = &a.m {
        cfg.m_values = m.clone();
    }
    cfg.networks = a.networks.unwrap_or(cfg.networks);
    cfg.steps = a.steps.unwrap_or(cfg.steps);
    cfg.eta = a.eta.unwrap_or(cfg.eta);
    Ok(cfg)
}

fn train_ensemble(a: &TrainArgs, seed: u64, file: &Option<ConfigFile>, dir: &Path) -> Result<()> {
    let data = sphere_or_csv(&a.train_csv, seed)?;
    let angles = circle_angles(a.grid);
    let test = Matrix::from_rows(&circle_points(&angles))?;
    let rule = match &a.surrogate {
        Some(s) => TrainRule::Sgl(s.clone()),
        None => TrainRule::GradientDescent,
    };
    let mut report = ExperimentReport::new("train-ensemble", seed, &serde_json::json!({
        "width": a.width, "depth": a.depth, "activation": a.activation, "surrogate": a.surrogate,
        "eta": a.eta, "steps": a.steps, "count": a.count, "kappa": a.kappa,
        "sigma_w": a.sigma_w, "sigma_b": a.sigma_b, "grid": a.grid,
    }))?;
    let mut outputs = Table::new("outputs", &["member", "angle", "output"]);
    let mut losses = Table::new("loss", &["member", "step", "loss"]);
    let mut members = Table::new("members", &["member", "final_loss", "status"]);
    let stride = (a.steps / 1000).max(1);
    for k in 0..a.count {
        let s = member_seed(seed, k);
        let config = NetworkConfig::uniform(data.input_dim(), a.width, a.depth, data.output_dim(), a.activation, s)
            .with_sigmas(a.sigma_w, a.sigma_b)
            .with_kappa(a.kappa);
        let net = Network::init(config)?;
        let tc = TrainConfig { seed: s, ..TrainConfig::new(a.eta, a.steps, rule.clone()) };
        let (trace, status) = match train(net, &data, &tc) {
            Ok(t) => (t, "ok".to_string()),
            Err(f) => {
                let msg = format!("failed: {}", f.error);
                log::warn!("member {k} {msg}");
                (*f.trace, msg)
            }
        };
        for (step, l) in trace.loss.iter().enumerate().filter(|(i, _)| i % stride == 0 || *i + 1 == trace.loss.len()) {
            losses.push(s, vec![k.into(), step.into(), (*l).into()]);
        }
        if test.cols() == trace.network.config.input_dim() {
            let out = trace.network.predict(&test)?;
            for (j, &t) in angles.iter().enumerate() {
                outputs.push(s, vec![k.into(), t.into(), out[(j, 0)].into()]);
            }
        }
        members.push(s, vec![k.into(), trace.loss.last().copied().unwrap_or(f64::NAN).into(), status.as_str().into()]);
    }
    report.tables = vec![outputs, losses, members];
    match &a.out {
        Some(stem) => {
            let parent = stem.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            report.name = stem.file_name().map_or("train-ensemble".into(), |n| n.to_string_lossy().into_owned());
            finish(&mut report, file, parent)
        }
        None => finish(&mut report, file, dir),
    }
}

fn gp_predict(a: &GpArgs, seed: u64, dir: &Path) -> Result<()> {
    let data = sphere_or_csv(&a.train_csv, seed)?;
    let test: Vec<Vec<f64>> = match &a.test_csv {
        Some(p) => Dataset::from_csv(p, 0)?.inputs,
        None => circle_points(&circle_angles(256)),
    };
    let mut spec = KernelSpec::new(a.kernel, a.depth, a.mode).with_sigmas(a.sigma_w, a.sigma_b);
    if a.kernel == KernelKind::SgNtk {
        spec = spec.with_backward2(Backward::Surrogate(a.surrogate.clone().unwrap_or_else(Surrogate::derf)));
    }
    let horizon = match a.t {
        Horizon::Finite { t, .. } => Horizon::Finite { eta: a.eta, t },
        h => h,
    };
    let gp = GpPosterior::with_kappa(spec, &data, horizon, a.kappa)?;
    let p = gp.predict(&test)?;
    let std = p.std();
    let path = a.out.clone().unwrap_or_else(|| dir.join("gp-predict.csv"));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Io(e.to_string()))?;
    let dim = test.first().map_or(0, Vec::len);
    let mut header: Vec<String> = (0..dim).map(|i| format!("x{i}")).collect();
    header.extend(["mean".into(), "std".into()]);
    w.write_record(&header).map_err(|e| Error::Io(e.to_string()))?;
    for (i, x) in test.iter().enumerate() {
        let row: Vec<String> = x
            .iter()
            .copied()
            .chain([p.mean[(i, 0)], std[i]])
            .map(|v| Cell::Real(v).to_string())
            .collect();
        w.write_record(&row).map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush()?;
    println!("wrote {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
