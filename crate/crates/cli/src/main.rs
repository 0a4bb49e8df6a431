use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gmpvi::data::{read_table, Dataset};
use gmpvi::experiments::{glm_log_predictive, glm_predictive_moments, glm_setup, run_experiment, DataSource, ExperimentConfig};
use gmpvi::family::MixturePosterior;
use gmpvi::io::write_atomic;
use gmpvi::metrics::{llpd, predictive_probabilities, roc_and_tpr, MetricReport};
use gmpvi::optimizer::{fmt17, FitResult};
use gmpvi::quadrature::gauss_hermite_rule;
use gmpvi::selection::{BetaSearchConfig, SearchMode};
use gmpvi::simulate::{simulate_cubic, simulate_linear, simulate_logistic_quadrants, simulate_two_regime};
use gmpvi::{PviError, Result};
use sha2::{Digest, Sha256};

#[derive(Parser)]
#[command(name = "pvi", version, about = "Predictive variational inference with Gaussian mixture posteriors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit at a fixed β (or run the configured β search) and evaluate.
    Fit(RunArgs),
    /// Choose β by WAIC, then fit and evaluate.
    SelectBeta(RunArgs),
    /// Predictive mean, sd and log density for each row of a CSV file.
    Predict(PredictArgs),
    /// Metrics of a saved fit on a labelled CSV file.
    Eval(PredictArgs),
    /// Write a synthetic dataset as CSV.
    Simulate(SimulateArgs),
    /// Download a public dataset into the cache directory.
    FetchData(FetchArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Replaces the data file named in the config.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Held-out file for CSV or hierarchical data.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    beta: Option<f64>,
    /// Comma-separated β values for a grid search.
    #[arg(long, value_delimiter = ',')]
    beta_grid: Option<Vec<f64>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Fixed reduction order and no wall-clock dependent output.
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    quad_order: Option<usize>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    config: PathBuf,
    /// `fit.json` written by `pvi fit`.
    #[arg(long)]
    posterior: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    quad_order: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SimKind {
    Quadrants,
    Cubic,
    Linear,
    TwoRegime,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    kind: SimKind,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Coefficients for `linear`, intercept first.
    #[arg(long, value_delimiter = ',', default_value = "1,-0.5")]
    theta: Vec<f64>,
    #[arg(long, default_value_t = 1.0)]
    variance: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Remote {
    Telescope,
    Lidar,
    Aids,
}

impl Remote {
    fn source(self) -> (&'static str, &'static str) {
        match self {
            Remote::Telescope => ("magic04.data", "https://archive.ics.uci.edu/ml/machine-learning-databases/magic/magic04.data"),
            Remote::Lidar => ("lidar.csv", "https://vincentarelbundock.github.io/Rdatasets/csv/SemiPar/lidar.csv"),
            Remote::Aids => ("aids.csv", "https://vincentarelbundock.github.io/Rdatasets/csv/gamlss.data/aids.csv"),
        }
    }
}

#[derive(Args)]
struct FetchArgs {
    #[arg(value_enum)]
    dataset: Remote,
    #[arg(long, default_value = "data")]
    cache_dir: PathBuf,
    /// Download again even when a cached copy exists.
    #[arg(long)]
    force: bool,
}

fn exit_code(e: &PviError) -> u8 {
    match e.root() {
        PviError::Config(_) | PviError::InvalidOrder(_) => 2,
        PviError::Numerical(_) | PviError::Factorization(_) | PviError::Initialization(_) | PviError::Metric(_) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit(a) => run(a, false),
        Command::SelectBeta(a) => run(a, true),
        Command::Predict(a) => predict(a),
        Command::Eval(a) => eval(a),
        Command::Simulate(a) => simulate(a),
        Command::FetchData(a) => fetch(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn apply_overrides(cfg: &mut ExperimentConfig, a: &RunArgs, select: bool) -> Result<()> {
    if let Some(p) = &a.data {
        match &mut cfg.data {
            DataSource::Csv { path, .. }
            | DataSource::Telescope { path }
            | DataSource::Iq { path, .. }
            | DataSource::Aids { path }
            | DataSource::Lidar { path }
            | DataSource::Hierarchical { path, .. } => *path = p.clone(),
            _ => return Err(PviError::Config("--data does not apply to simulated data".into())),
        }
    }
    if let Some(t) = &a.test {
        match &mut cfg.data {
            DataSource::Csv { test_path, .. } | DataSource::Hierarchical { test_path, .. } => *test_path = Some(t.clone()),
            _ => return Err(PviError::Config("--test applies only to CSV and hierarchical data".into())),
        }
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(d) = &a.out_dir {
        cfg.out_dir = d.clone();
    }
    if let Some(q) = a.quad_order {
        cfg.quad_order = q;
    }
    if a.deterministic {
        cfg.deterministic = true;
    }
    if let Some(grid) = &a.beta_grid {
        cfg.beta_search = Some(BetaSearchConfig {
            mode: SearchMode::Grid,
            grid: grid.clone(),
            ..cfg.beta_search.clone().unwrap_or_default()
        });
        cfg.beta = None;
    }
    if let Some(b) = a.beta {
        if a.beta_grid.is_some() {
            return Err(PviError::Config("--beta and --beta-grid are mutually exclusive".into()));
        }
        cfg.beta = Some(b);
        cfg.beta_search = None;
    }
    if select {
        if a.beta.is_some() {
            return Err(PviError::Config("select-beta does not take --beta".into()));
        }
        if cfg.beta_search.is_none() {
            cfg.beta_search = Some(BetaSearchConfig {
                mode: SearchMode::BayesOpt,
                ..BetaSearchConfig::default()
            });
        }
        cfg.beta = None;
    }
    cfg.validate()
}

fn run(a: RunArgs, select: bool) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    apply_overrides(&mut cfg, &a, select)?;
    let out = run_experiment(&cfg)?;
    let mut doc = serde_json::to_value(&out.report)?;
    if let Some(b) = &out.baseline {
        let mut v = serde_json::to_value(b)?;
        v["beta"] = serde_json::Value::Null;
        doc["baseline"] = v;
    }
    if !out.beta_table.is_empty() {
        doc["beta_table"] = serde_json::to_value(&out.beta_table)?;
    }
    println!("{}", serde_json::to_string_pretty(&doc)?);
    for f in &out.files {
        log::info!("wrote {}", f.display());
    }
    Ok(())
}

/// Rows of a CSV in the training design layout (`x1..xp`, intercept as configured).
fn load_rows(cfg: &ExperimentConfig, path: &Path) -> Result<(Vec<Vec<f64>>, Option<Vec<f64>>)> {
    let (covs, intercept, response) = match &cfg.data {
        DataSource::Csv { schema, .. } => (schema.covariates.clone(), schema.intercept, schema.response.clone()),
        _ => (Vec::new(), true, "y".to_string()),
    };
    let table = read_table(path)?;
    let names: Vec<String> = if covs.is_empty() {
        let mut c: Vec<String> = table
            .headers
            .iter()
            .filter(|h| h.len() > 1 && h.starts_with('x') && h[1..].chars().all(|ch| ch.is_ascii_digit()))
            .cloned()
            .collect();
        c.sort_by_key(|h| h[1..].parse::<usize>().unwrap_or(usize::MAX));
        c
    } else {
        covs
    };
    let cols = names.iter().map(|n| table.column(n)).collect::<Result<Vec<_>>>()?;
    let rows = (0..table.rows)
        .map(|i| {
            let mut r = Vec::with_capacity(cols.len() + 1);
            if intercept {
                r.push(1.0);
            }
            r.extend(cols.iter().map(|c| c[i]));
            r
        })
        .collect();
    let y = table.columns.get(&response).cloned();
    Ok((rows, y))
}

fn load_glm_fit(cfg: &ExperimentConfig, path: &Path) -> Result<MixturePosterior> {
    if !matches!(
        cfg.data,
        DataSource::Quadrants { .. } | DataSource::Cubic { .. } | DataSource::Linear { .. } | DataSource::Csv { .. }
    ) {
        return Err(PviError::Config("predict and eval support simulated regression and CSV experiments".into()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| PviError::Data(format!("{}: {e}", path.display())))?;
    let fit: FitResult<MixturePosterior> = serde_json::from_str(&text)?;
    Ok(fit.posterior)
}

fn model_of(cfg: &ExperimentConfig) -> Result<gmpvi::likelihood::LikelihoodModel> {
    match &cfg.data {
        DataSource::Csv { .. } => cfg.model.ok_or_else(|| PviError::Config("CSV experiments need `model`".into())),
        _ => Ok(glm_setup(&ExperimentConfig {
            data: match &cfg.data {
                DataSource::Quadrants { .. } => DataSource::Quadrants { n: 2, n_test: 0 },
                DataSource::Cubic { .. } => DataSource::Cubic { n: 2, n_test: 0 },
                DataSource::Linear { theta, variance, .. } => DataSource::Linear {
                    n: 2,
                    n_test: 0,
                    theta: theta.clone(),
                    variance: *variance,
                },
                other => other.clone(),
            },
            ..cfg.clone()
        })?
        .model),
    }
}

fn predict(a: PredictArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let post = load_glm_fit(&cfg, &a.posterior)?;
    let model = model_of(&cfg)?;
    let quad = gauss_hermite_rule(a.quad_order.unwrap_or(cfg.quad_order))?;
    let (rows, y) = load_rows(&cfg, &a.data)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["row".to_string(), "mean".to_string(), "sd".to_string()];
    if y.is_some() {
        header.push("log_density".into());
    }
    w.write_record(&header)?;
    for (i, x) in rows.iter().enumerate() {
        let g = if post.gating_dim() == 1 { vec![1.0] } else { x.clone() };
        let (m, s) = glm_predictive_moments(&model, &post, x, &g, &quad)?;
        let mut rec = vec![i.to_string(), fmt17(m), fmt17(s)];
        if let Some(y) = &y {
            rec.push(fmt17(glm_log_predictive(&model, &post, x, y[i], &quad)?));
        }
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| PviError::Io(e.into_error()))?;
    match a.out_dir {
        Some(d) => {
            std::fs::create_dir_all(&d)?;
            write_atomic(&d.join("predictions.csv"), &bytes)
        }
        None => {
            print!("{}", String::from_utf8_lossy(&bytes));
            Ok(())
        }
    }
}

fn eval(a: PredictArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let post = load_glm_fit(&cfg, &a.posterior)?;
    let model = model_of(&cfg)?;
    let quad = gauss_hermite_rule(a.quad_order.unwrap_or(cfg.quad_order))?;
    let (rows, y) = load_rows(&cfg, &a.data)?;
    let y = y.ok_or_else(|| PviError::Data(format!("{}: no response column", a.data.display())))?;
    if rows.is_empty() {
        return Err(PviError::EmptyData("no rows to evaluate".into()));
    }
    let p = rows[0].len();
    let x = nalgebra::DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]);
    let data = Dataset::new(x, nalgebra::DVector::from_vec(y))?;
    let mut report = MetricReport {
        llpd: llpd(&model, &post, &data, &quad)?,
        waic: None,
        beta: f64::NAN,
        k: post.n_components(),
        tpr_at_fpr: Default::default(),
        roc: Vec::new(),
    };
    let text = std::fs::read_to_string(&a.posterior)?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    report.beta = v["beta"].as_f64().unwrap_or(f64::NAN);
    if model == gmpvi::likelihood::LikelihoodModel::Logistic {
        let probs = predictive_probabilities(&post, &data, &quad)?;
        let labels: Vec<bool> = data.y.iter().map(|v| *v == 1.0).collect();
        report.tpr_at_fpr = roc_and_tpr(&probs, &labels, &cfg.fpr_targets)?.tpr_at_fpr;
    }
    let json = serde_json::to_string_pretty(&report)?;
    if let Some(d) = a.out_dir {
        std::fs::create_dir_all(&d)?;
        write_atomic(&d.join("eval_metrics.json"), format!("{json}\n").as_bytes())?;
    }
    println!("{json}");
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let d = match a.kind {
        SimKind::Quadrants => simulate_logistic_quadrants(a.n, a.seed)?,
        SimKind::Cubic => simulate_cubic(a.n, a.seed)?,
        SimKind::Linear => simulate_linear(a.n, &a.theta, a.variance, a.seed)?,
        SimKind::TwoRegime => simulate_two_regime(a.n, a.seed)?,
    };
    let skip = usize::from(d.columns.first().is_some_and(|c| c == "intercept"));
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = (1..=d.n_covariates() - skip).map(|j| format!("x{j}")).collect();
    header.push("y".into());
    w.write_record(&header)?;
    for i in 0..d.n() {
        let mut rec: Vec<String> = (skip..d.n_covariates()).map(|j| fmt17(d.x[(i, j)])).collect();
        rec.push(fmt17(d.y[i]));
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| PviError::Io(e.into_error()))?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    write_atomic(&a.out, &bytes)
}

const CHECKSUM_FILE: &str = "checksums.json";

/// Download with trust on first use: the first digest seen for a file is
/// recorded and later downloads must match it.
fn fetch(a: FetchArgs) -> Result<()> {
    let (name, url) = a.dataset.source();
    std::fs::create_dir_all(&a.cache_dir)?;
    let target = a.cache_dir.join(name);
    let sums_path = a.cache_dir.join(CHECKSUM_FILE);
    let mut sums: std::collections::BTreeMap<String, String> = match std::fs::read_to_string(&sums_path) {
        Ok(s) => serde_json::from_str(&s)?,
        Err(_) => Default::default(),
    };
    if target.exists() && !a.force {
        let digest = hex::encode(Sha256::digest(std::fs::read(&target)?));
        match sums.get(name) {
            Some(d) if *d != digest => return Err(PviError::Data(format!("{}: checksum mismatch with the recorded digest", target.display()))),
            _ => {}
        }
        println!("{} (cached, sha256 {digest})", target.display());
        return Ok(());
    }
    let resp = ureq::get(url)
        .call()
        .map_err(|e| PviError::Data(format!("download of {url} failed: {e}")))?;
    let mut bytes = Vec::new();
    std::io::Read::read_to_end(&mut resp.into_reader(), &mut bytes)?;
    let digest = hex::encode(Sha256::digest(&bytes));
    if let Some(d) = sums.get(name) {
        if *d != digest {
            return Err(PviError::Data(format!("{name}: downloaded data does not match the recorded sha256 {d}")));
        }
    }
    write_atomic(&target, &bytes)?;
    sums.insert(name.to_string(), digest.clone());
    write_atomic(&sums_path, serde_json::to_string_pretty(&sums)?.as_bytes())?;
    println!("{} (sha256 {digest})", target.display());
    Ok(())
}
