//! Dataset loaders for the applications and the experiment runner that fits,
//! evaluates and writes plot-ready CSV files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{load_csv, read_table, CsvSchema, Dataset, Standardization};
use crate::error::{PviError, Result, StageContext};
use crate::family::MixturePosterior;
use crate::gp::{gp_component_predictive, gp_fit, gp_predictive, gp_waic, kmeans_inducing, mixture_quantile, InducingPosterior, KernelSpec, QUANTILE_LEVELS};
use crate::hierarchical::{
    cluster_map, design_row, hierarchical_fit, hierarchical_predictive, write_predictive_csv, HierarchicalData, HierarchicalPosterior,
    HierarchicalSpec, POLY_TERMS,
};
use crate::io::write_atomic;
use crate::likelihood::{log_predictive_density, resolve_gating, LikelihoodModel, PriorSpec};
use crate::metrics::{conjugate_gaussian_posterior, llpd, predictive_probabilities, roc_and_tpr, write_roc_csv, MetricReport};
use crate::objective::{fit, ObjectiveConfig};
use crate::optimizer::{fmt17, FitConfig, FitResult};
use crate::quadrature::{gauss_hermite_rule, QuadratureRule};
use crate::rng::{stream, Stream};
use crate::selection::{select_beta_with, waic, BetaSearchConfig};
use crate::simulate::{simulate_cubic, simulate_linear, simulate_logistic_quadrants, simulate_two_regime};

/// Number of quarters used from the AIDS series (1983Q1 to 1990Q3).
pub const AIDS_QUARTERS: usize = 31;

/// Telescope data: 10 numeric features then the class label (`g` = gamma = 1, `h` = 0),
/// with or without a header row. Returns the design `(1, x1..x10)`, unstandardized.
pub fn load_telescope(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut y = Vec::new();
    for (r, rec) in reader.records().enumerate() {
        let rec = rec?;
        if rec.len() != 11 {
            return Err(PviError::Data(format!("{}: row {}: expected 11 fields, found {}", path.display(), r + 1, rec.len())));
        }
        let label = match rec[10].trim() {
            "g" | "1" => 1.0,
            "h" | "0" => 0.0,
            other if r == 0 && other.parse::<f64>().is_err() => continue,
            other => return Err(PviError::Data(format!("{}: row {}: unknown class `{other}`", path.display(), r + 1))),
        };
        let feats = (0..10)
            .map(|c| {
                rec[c]
                    .parse::<f64>()
                    .map_err(|_| PviError::Data(format!("{}: row {} column {}: non-numeric value `{}`", path.display(), r + 1, c + 1, &rec[c])))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(feats);
        y.push(label);
    }
    if rows.is_empty() {
        return Err(PviError::Data(format!("{}: no data rows", path.display())));
    }
    let x = DMatrix::from_fn(rows.len(), 11, |i, j| if j == 0 { 1.0 } else { rows[i][j - 1] });
    let mut d = Dataset::new(x, DVector::from_vec(y))?;
    d.columns = std::iter::once("intercept".to_string()).chain((1..=10).map(|j| format!("x{j}"))).collect();
    Ok(d)
}

fn first_column<'a>(table: &'a crate::data::CsvTable, names: &[&str]) -> Result<&'a [f64]> {
    names
        .iter()
        .find_map(|n| table.columns.get(*n))
        .map(|c| c.as_slice())
        .ok_or_else(|| PviError::Data(format!("missing column: expected one of {names:?}")))
}

fn zscore(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    let sd = if sd > 0.0 { sd } else { 1.0 };
    v.iter().map(|a| (a - mean) / sd).collect()
}

/// IQ data with columns `kid_iq` (or `kid_score`), `mom_iq`, `mom_hs`. Both IQ
/// scores are converted to z-scores; the design is `(1, mom_hs, mom_iq)`.
pub fn load_iq(path: &Path) -> Result<Dataset> {
    let table = read_table(path)?;
    let kid = zscore(first_column(&table, &["kid_iq", "kid_score"])?);
    let mom = zscore(table.column("mom_iq")?);
    let hs = table.column("mom_hs")?;
    if let Some(i) = hs.iter().position(|v| *v != 0.0 && *v != 1.0) {
        return Err(PviError::Data(format!("row {}: mom_hs must be 0 or 1", i + 2)));
    }
    let x = DMatrix::from_fn(table.rows, 3, |i, j| match j {
        0 => 1.0,
        1 => hs[i],
        _ => mom[i],
    });
    let mut d = Dataset::new(x, DVector::from_vec(kid))?;
    d.columns = vec!["intercept".into(), "mom_hs".into(), "mom_iq".into()];
    Ok(d)
}

/// Residual variance `RSS / (n − p)` of the least-squares fit.
pub fn least_squares_variance(data: &Dataset) -> Result<f64> {
    let (n, p) = data.x.shape();
    if n <= p {
        return Err(PviError::Data(format!("least squares needs more than {p} rows")));
    }
    let xtx = data.x.transpose() * &data.x;
    let coef = xtx
        .cholesky()
        .ok_or_else(|| PviError::Factorization("design is rank deficient".into()))?
        .solve(&(data.x.transpose() * &data.y));
    let resid = &data.y - &data.x * coef;
    Ok(resid.norm_squared() / (n - p) as f64)
}

/// Quarterly AIDS counts. Columns: `y`, a time index (`time`, `x` or `t`) and
/// optionally the quarter (`qrt` or `quarter`; otherwise the series is taken to
/// start in the first quarter). Rows are sorted by time and the first 31 kept.
/// Design: intercept, `t`, `t²` with `t` rescaled to `[0, 1]`, and dummies for
/// quarters 2 to 4.
pub fn aids_dataset(path: &Path) -> Result<Dataset> {
    if !path.exists() {
        return Err(PviError::Data(format!(
            "{} not found; run `pvi fetch-data aids` or supply a CSV with columns y, time and qrt",
            path.display()
        )));
    }
    let table = read_table(path)?;
    let y = table.column("y")?;
    let time = first_column(&table, &["time", "x", "t"])?;
    let quarter = first_column(&table, &["qrt", "quarter"]).ok();
    let mut order: Vec<usize> = (0..table.rows).collect();
    order.sort_by(|a, b| time[*a].total_cmp(&time[*b]));
    order.truncate(AIDS_QUARTERS);
    let n = order.len();
    let t0 = time[order[0]];
    let span = (time[order[n - 1]] - t0).max(f64::MIN_POSITIVE);
    let mut x = DMatrix::zeros(n, 6);
    let mut resp = DVector::zeros(n);
    for (r, &i) in order.iter().enumerate() {
        let t = (time[i] - t0) / span;
        let q = match quarter {
            Some(q) => q[i],
            None => (r % 4 + 1) as f64,
        };
        if !(1.0..=4.0).contains(&q) || q.fract() != 0.0 {
            return Err(PviError::Data(format!("row {}: quarter {q} is not in 1..=4", i + 2)));
        }
        x[(r, 0)] = 1.0;
        x[(r, 1)] = t;
        x[(r, 2)] = t * t;
        if q > 1.0 {
            x[(r, q as usize + 1)] = 1.0;
        }
        resp[r] = y[i];
    }
    let mut d = Dataset::new(x, resp)?;
    d.columns = ["intercept", "t", "t2", "q2", "q3", "q4"].iter().map(|s| s.to_string()).collect();
    LikelihoodModel::Poisson.check_data(&d)?;
    Ok(d)
}

/// Lidar data: covariate `range` (or `x`) and response `logratio` (or `y`).
/// Returns raw inputs without an intercept column.
pub fn load_lidar(path: &Path) -> Result<Dataset> {
    let table = read_table(path)?;
    let x = first_column(&table, &["range", "x"])?;
    let y = first_column(&table, &["logratio", "y"])?;
    let mut d = Dataset::new(DMatrix::from_column_slice(x.len(), 1, x), DVector::from_column_slice(y))?;
    d.columns = vec!["x".into()];
    Ok(d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IqVariance {
    /// Least-squares residual variance.
    Sigma1,
    /// `0.05 · σ₁²`.
    #[default]
    Sigma2,
    /// `log σ²` as an extra parameter.
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    Quadrants {
        n: usize,
        n_test: usize,
    },
    Cubic {
        n: usize,
        n_test: usize,
    },
    Linear {
        n: usize,
        n_test: usize,
        theta: Vec<f64>,
        variance: f64,
    },
    TwoRegime {
        n: usize,
        #[serde(default)]
        n_test: usize,
    },
    Csv {
        path: PathBuf,
        #[serde(default)]
        schema: CsvSchema,
        #[serde(default)]
        test_path: Option<PathBuf>,
    },
    Telescope {
        path: PathBuf,
    },
    Iq {
        path: PathBuf,
        #[serde(default)]
        variance: IqVariance,
    },
    Aids {
        path: PathBuf,
    },
    Lidar {
        path: PathBuf,
    },
    Hierarchical {
        path: PathBuf,
        #[serde(default)]
        test_path: Option<PathBuf>,
    },
}

impl DataSource {
    fn pipeline(&self) -> Pipeline {
        match self {
            DataSource::TwoRegime { .. } | DataSource::Lidar { .. } => Pipeline::Gp,
            DataSource::Hierarchical { .. } => Pipeline::Hierarchical,
            _ => Pipeline::Glm,
        }
    }

    fn input_paths(&self) -> Vec<&Path> {
        match self {
            DataSource::Csv { path, test_path, .. } | DataSource::Hierarchical { path, test_path } => {
                std::iter::once(path.as_path()).chain(test_path.as_deref()).collect()
            }
            DataSource::Telescope { path } | DataSource::Iq { path, .. } | DataSource::Aids { path } | DataSource::Lidar { path } => vec![path],
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pipeline {
    Glm,
    Hierarchical,
    Gp,
}

fn default_name() -> String {
    "experiment".into()
}
fn default_quad() -> usize {
    20
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}
fn default_fpr() -> Vec<f64> {
    vec![0.01, 0.02, 0.05, 0.1, 0.2]
}
fn default_grid() -> usize {
    101
}
fn default_true() -> bool {
    true
}

/// Declarative experiment description, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub data: DataSource,
    /// Overrides the model implied by the data source.
    #[serde(default)]
    pub model: Option<LikelihoodModel>,
    /// Isotropic prior standard deviation; overrides the source default.
    #[serde(default)]
    pub prior_sd: Option<f64>,
    /// Diagonal prior variances, one per parameter.
    #[serde(default)]
    pub prior_variances: Option<Vec<f64>>,
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub beta_search: Option<BetaSearchConfig>,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default = "default_quad")]
    pub quad_order: usize,
    /// Master seed for simulation, splitting, initialization and sampling.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub split_fraction: Option<f64>,
    #[serde(default)]
    pub standardize: Option<bool>,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default = "default_fpr")]
    pub fpr_targets: Vec<f64>,
    #[serde(default)]
    pub kernel: KernelSpec,
    /// Number of inducing points (defaults to all training inputs).
    #[serde(default)]
    pub inducing: Option<usize>,
    #[serde(default)]
    pub sigma2_a: Option<f64>,
    #[serde(default)]
    pub sigma2_b: Option<f64>,
    #[serde(default)]
    pub sigma2_eps: Option<f64>,
    #[serde(default = "default_grid")]
    pub grid_points: usize,
    /// Also evaluate the conventional posterior.
    #[serde(default = "default_true")]
    pub baseline: bool,
    #[serde(default)]
    pub deterministic: bool,
}

impl ExperimentConfig {
    pub fn new(data: DataSource) -> Self {
        ExperimentConfig {
            name: default_name(),
            data,
            model: None,
            prior_sd: None,
            prior_variances: None,
            beta: None,
            beta_search: None,
            fit: FitConfig::default(),
            quad_order: default_quad(),
            seed: 0,
            split_fraction: None,
            standardize: None,
            out_dir: default_out(),
            fpr_targets: default_fpr(),
            kernel: KernelSpec::default(),
            inducing: None,
            sigma2_a: None,
            sigma2_b: None,
            sigma2_eps: None,
            grid_points: default_grid(),
            baseline: true,
            deterministic: false,
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| PviError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| PviError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&s)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(f) = self.split_fraction {
            if !(f > 0.0 && f < 1.0) {
                return Err(PviError::Config(format!("split_fraction {f} must lie in (0, 1)")));
            }
        }
        match (self.beta, &self.beta_search) {
            (None, None) => return Err(PviError::Config("set either `beta` or `beta_search`".into())),
            (Some(b), _) if !(b > 0.0 && b.is_finite()) => return Err(PviError::Config(format!("beta must be positive, got {b}"))),
            (_, Some(s)) => s.validate()?,
            _ => {}
        }
        if self.grid_points < 2 {
            return Err(PviError::Config("grid_points must be at least 2".into()));
        }
        if let Some(sd) = self.prior_sd {
            if !(sd > 0.0) {
                return Err(PviError::Config("prior_sd must be positive".into()));
            }
        }
        if self.fpr_targets.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(PviError::Config("FPR targets must lie in [0, 1]".into()));
        }
        self.fit.validate()?;
        self.kernel.validate()?;
        gauss_hermite_rule(self.quad_order)?;
        Ok(())
    }

    fn fit_config(&self) -> FitConfig {
        FitConfig {
            seed: self.seed,
            ..self.fit.clone()
        }
    }

    fn search(&self) -> Option<BetaSearchConfig> {
        self.beta_search.clone().map(|s| BetaSearchConfig { seed: self.seed, ..s })
    }
}

/// Everything a run produced; the same values are written under `out_dir`.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub report: MetricReport,
    pub baseline: Option<MetricReport>,
    /// `(β, WAIC)` pairs from a β search.
    pub beta_table: Vec<(f64, f64)>,
    /// Serialized fit result.
    pub fit_json: String,
    pub files: Vec<PathBuf>,
}

struct Writer {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Writer {
    fn put(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        write_atomic(&path, bytes)?;
        self.files.push(path);
        Ok(())
    }

    fn csv(&mut self, name: &str, header: &[String], rows: &[Vec<String>]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().map_err(|e| PviError::Io(e.into_error()))?;
        self.put(name, &bytes)
    }
}

fn trace_bytes<P>(fit: &FitResult<P>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fit.write_trace_csv(&mut buf)?;
    Ok(buf)
}

fn json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_vec_pretty(v)?;
    s.push(b'\n');
    Ok(s)
}

fn check_inputs_unchanged(before: &[(PathBuf, Option<std::time::SystemTime>)]) {
    for (p, t) in before {
        let now = std::fs::metadata(p).and_then(|m| m.modified()).ok();
        if now != *t {
            log::warn!("{} changed while the experiment ran", p.display());
        }
    }
}

/// Run one experiment end to end and write its artifacts.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate().stage("config")?;
    let stamps: Vec<_> = cfg
        .data
        .input_paths()
        .into_iter()
        .map(|p| (p.to_path_buf(), std::fs::metadata(p).and_then(|m| m.modified()).ok()))
        .collect();
    std::fs::create_dir_all(&cfg.out_dir).map_err(PviError::from).stage("output")?;
    let mut out = Writer {
        dir: cfg.out_dir.clone(),
        files: Vec::new(),
    };
    let result = match cfg.data.pipeline() {
        Pipeline::Glm => run_glm(cfg, &mut out),
        Pipeline::Hierarchical => run_hierarchical(cfg, &mut out),
        Pipeline::Gp => run_gp(cfg, &mut out),
    };
    check_inputs_unchanged(&stamps);
    let mut r = result?;
    r.files = out.files;
    Ok(r)
}

/// Training and test data, model and prior for a GLM experiment.
pub struct GlmSetup {
    pub train: Dataset,
    pub test: Option<Dataset>,
    pub model: LikelihoodModel,
    pub prior: PriorSpec,
}

pub fn glm_setup(cfg: &ExperimentConfig) -> Result<GlmSetup> {
    let test_seed = cfg.seed ^ 0x5DEE_CE66_D1CE_5EED;
    let split = |d: Dataset, default: f64| -> Result<(Dataset, Option<Dataset>)> {
        let (a, b) = d.split(cfg.split_fraction.unwrap_or(default), cfg.seed)?;
        Ok((a, Some(b)))
    };
    let (train, test, model, sd): (Dataset, Option<Dataset>, LikelihoodModel, f64) = match &cfg.data {
        DataSource::Quadrants { n, n_test } => (
            simulate_logistic_quadrants(*n, cfg.seed)?,
            (*n_test > 0).then(|| simulate_logistic_quadrants(*n_test, test_seed)).transpose()?,
            LikelihoodModel::Logistic,
            2.5,
        ),
        DataSource::Cubic { n, n_test } => (
            simulate_cubic(*n, cfg.seed)?,
            (*n_test > 0).then(|| simulate_cubic(*n_test, test_seed)).transpose()?,
            LikelihoodModel::GaussianFixed {
                variance: crate::simulate::CUBIC_NOISE_VARIANCE,
            },
            10.0,
        ),
        DataSource::Linear { n, n_test, theta, variance } => (
            simulate_linear(*n, theta, *variance, cfg.seed)?,
            (*n_test > 0).then(|| simulate_linear(*n_test, theta, *variance, test_seed)).transpose()?,
            LikelihoodModel::GaussianFixed { variance: *variance },
            10.0,
        ),
        DataSource::Csv { path, schema, test_path } => {
            let model = cfg.model.ok_or_else(|| PviError::Config("CSV experiments need `model`".into()))?;
            let d = load_csv(path, schema)?;
            let (train, test) = match test_path {
                Some(t) => (d, Some(load_csv(t, schema)?)),
                None => split(d, 2.0 / 3.0)?,
            };
            (train, test, model, 10.0)
        }
        DataSource::Telescope { path } => {
            let (train, test) = split(load_telescope(path)?, 2.0 / 3.0)?;
            (train, test, LikelihoodModel::Logistic, 2.5)
        }
        DataSource::Iq { path, variance } => {
            let (train, test) = split(load_iq(path)?, 0.8)?;
            let s1 = least_squares_variance(&train)?;
            let model = match variance {
                IqVariance::Sigma1 => LikelihoodModel::GaussianFixed { variance: s1 },
                IqVariance::Sigma2 => LikelihoodModel::GaussianFixed { variance: 0.05 * s1 },
                IqVariance::Unknown => LikelihoodModel::GaussianUnknownVariance,
            };
            (train, test, model, 1.0)
        }
        DataSource::Aids { path } => (aids_dataset(path)?, None, LikelihoodModel::Poisson, 10.0),
        DataSource::TwoRegime { .. } | DataSource::Lidar { .. } | DataSource::Hierarchical { .. } => {
            return Err(PviError::Config("not a regression data source".into()))
        }
    };
    let model = cfg.model.unwrap_or(model);
    model.validate()?;
    let (mut train, mut test) = (train, test);
    let standardize = cfg.standardize.unwrap_or(matches!(cfg.data, DataSource::Telescope { .. }));
    if standardize {
        let s: Standardization = train.standardize_covariates();
        if let Some(t) = test.as_mut() {
            t.apply_standardization(&s);
        }
    }
    let dim = model.param_dim(train.n_covariates());
    let prior = match &cfg.prior_variances {
        Some(v) if v.len() != dim => return Err(PviError::Config(format!("prior_variances has {} entries, expected {dim}", v.len()))),
        Some(v) => PriorSpec::diagonal(v)?,
        None => PriorSpec::isotropic(cfg.prior_sd.unwrap_or(sd))?,
    };
    Ok(GlmSetup { train, test, model, prior })
}

/// Conventional posterior: exact for the fixed-variance Gaussian model,
/// otherwise a single-component fit at β = 10⁴.
pub fn conventional_posterior(setup: &GlmSetup, obj: &ObjectiveConfig, fit_cfg: &FitConfig) -> Result<MixturePosterior> {
    match setup.model {
        LikelihoodModel::GaussianFixed { variance } => conjugate_gaussian_posterior(&setup.train.x, &setup.train.y, variance, &setup.prior),
        _ => {
            let cfg = FitConfig {
                k_init: 1,
                ..fit_cfg.clone()
            };
            Ok(fit(&setup.model, &setup.prior, &setup.train, &ObjectiveConfig { beta: 1e4, ..*obj }, &cfg)?.posterior)
        }
    }
}

fn glm_waic(setup: &GlmSetup, post: &MixturePosterior, draws: usize, seed: u64) -> Result<f64> {
    let avg = post.averaged(&resolve_gating(post, &setup.train))?;
    waic(&setup.model, &avg, &setup.train, draws, seed)
}

fn glm_report(setup: &GlmSetup, post: &MixturePosterior, beta: f64, waic_value: Option<f64>, cfg: &ExperimentConfig, quad: &QuadratureRule) -> Result<MetricReport> {
    let eval = setup.test.as_ref().unwrap_or(&setup.train);
    let mut report = MetricReport {
        llpd: llpd(&setup.model, post, eval, quad)?,
        waic: waic_value,
        beta,
        k: post.n_components(),
        tpr_at_fpr: BTreeMap::new(),
        roc: Vec::new(),
    };
    if setup.model == LikelihoodModel::Logistic && !cfg.fpr_targets.is_empty() {
        let probs = predictive_probabilities(post, eval, quad)?;
        let labels: Vec<bool> = eval.y.iter().map(|v| *v == 1.0).collect();
        let s = roc_and_tpr(&probs, &labels, &cfg.fpr_targets)?;
        report.tpr_at_fpr = s.tpr_at_fpr;
        report.roc = s.roc;
    }
    Ok(report)
}

/// Mean and standard deviation of the predictive distribution at one design row.
pub fn glm_predictive_moments(model: &LikelihoodModel, post: &MixturePosterior, x: &[f64], gating: &[f64], quad: &QuadratureRule) -> Result<(f64, f64)> {
    let w = post.mixture_weights(gating)?;
    let covs = post.covariances();
    let p = x.len();
    let xv = DVector::from_column_slice(x);
    let mut mean = 0.0;
    let mut second = 0.0;
    for k in 0..post.n_components() {
        let mu = &post.means()[k];
        let cov = &covs[k];
        let m = xv.dot(&mu.rows(0, p));
        let v = (xv.transpose() * cov.view((0, 0), (p, p)) * &xv)[(0, 0)].max(0.0);
        let (cm, cvar) = match model {
            LikelihoodModel::GaussianFixed { variance } => (m, v + variance),
            LikelihoodModel::GaussianUnknownVariance => (m, v + (mu[p] + 0.5 * cov[(p, p)]).exp()),
            LikelihoodModel::Poisson => {
                let e = (m + 0.5 * v).exp();
                (e, e + (v.exp() - 1.0) * e * e)
            }
            LikelihoodModel::Logistic => {
                let pr = quad.expect(m, v.sqrt(), crate::likelihood::sigmoid);
                (pr, pr * (1.0 - pr))
            }
        };
        mean += w[k] * cm;
        second += w[k] * (cvar + cm * cm);
    }
    Ok((mean, (second - mean * mean).max(0.0).sqrt()))
}

/// Rows at which predictive and weight CSVs are evaluated: a regular grid when
/// there are one or two non-intercept covariates, otherwise the training rows.
fn glm_grid(train: &Dataset, points: usize) -> Vec<Vec<f64>> {
    let p = train.n_covariates();
    let intercept = train.columns.first().is_some_and(|c| c == "intercept");
    let free: Vec<usize> = (usize::from(intercept)..p).collect();
    let range = |j: usize| {
        let c = train.x.column(j);
        (c.min(), c.max())
    };
    let lin = |lo: f64, hi: f64, m: usize| (0..m).map(move |i| lo + (hi - lo) * i as f64 / (m - 1) as f64);
    let base = |vals: &[(usize, f64)]| {
        let mut r = vec![1.0; p];
        for (j, v) in vals {
            r[*j] = *v;
        }
        r
    };
    match free.len() {
        1 => {
            let (lo, hi) = range(free[0]);
            lin(lo, hi, points).map(|v| base(&[(free[0], v)])).collect()
        }
        2 => {
            let m = ((points as f64).sqrt().ceil() as usize).max(2);
            let (a0, a1) = range(free[0]);
            let (b0, b1) = range(free[1]);
            lin(a0, a1, m).flat_map(|a| lin(b0, b1, m).map(move |b| (a, b))).map(|(a, b)| base(&[(free[0], a), (free[1], b)])).collect()
        }
        _ => (0..train.n()).map(|i| train.x.row(i).iter().copied().collect()).collect(),
    }
}

fn gating_row(post: &MixturePosterior, x: &[f64]) -> Vec<f64> {
    if post.gating_dim() == 1 {
        vec![1.0]
    } else {
        x.to_vec()
    }
}

fn dominant(w: &[f64]) -> usize {
    (1..w.len()).fold(0, |b, j| if w[j] > w[b] { j } else { b })
}

fn run_glm(cfg: &ExperimentConfig, out: &mut Writer) -> Result<ExperimentOutput> {
    let setup = glm_setup(cfg).stage("data")?;
    if setup.train.gating.is_some() {
        return Err(PviError::Config("separate gating inputs are not supported here".into())).stage("data");
    }
    let quad = gauss_hermite_rule(cfg.quad_order)?;
    let fit_cfg = cfg.fit_config();
    let obj = ObjectiveConfig {
        beta: cfg.beta.unwrap_or(1.0),
        quad_order: cfg.quad_order,
        deterministic_reduction: true,
    };
    let (fit_res, waic_value, table) = match cfg.search() {
        Some(search) => {
            let sel = select_beta_with(&search, |beta| {
                let f = fit(&setup.model, &setup.prior, &setup.train, &ObjectiveConfig { beta, ..obj }, &fit_cfg)?;
                let w = glm_waic(&setup, &f.posterior, search.waic_samples, cfg.seed)?;
                log::info!("β = {beta}: WAIC {w}, K = {}", f.posterior.n_components());
                Ok((f, w))
            })
            .stage("beta selection")?;
            let w = sel.table.iter().find(|(b, _)| *b == sel.beta).map(|t| t.1);
            (sel.fit, w, sel.table)
        }
        None => {
            let f = fit(&setup.model, &setup.prior, &setup.train, &obj, &fit_cfg).stage("fit")?;
            let w = glm_waic(&setup, &f.posterior, 2000, cfg.seed).stage("waic")?;
            (f, Some(w), Vec::new())
        }
    };
    let post = &fit_res.posterior;
    let report = glm_report(&setup, post, fit_res.beta, waic_value, cfg, &quad).stage("evaluate")?;
    let baseline = if cfg.baseline {
        let b = conventional_posterior(&setup, &obj, &fit_cfg).stage("baseline")?;
        let w = glm_waic(&setup, &b, 2000, cfg.seed).stage("baseline")?;
        Some((glm_report(&setup, &b, f64::INFINITY, Some(w), cfg, &quad).stage("baseline")?, b))
    } else {
        None
    };

    let fit_json = serde_json::to_string(&fit_res)?;
    out.put("fit.json", fit_json.as_bytes())?;
    out.put("trace.csv", &trace_bytes(&fit_res)?)?;
    out.put("metrics.json", &json_bytes(&report)?)?;
    if !report.roc.is_empty() {
        let mut buf = Vec::new();
        write_roc_csv(&report.roc, &mut buf)?;
        out.put("roc.csv", &buf)?;
    }
    if let Some((b, bpost)) = &baseline {
        let mut v = serde_json::to_value(b)?;
        v["beta"] = serde_json::Value::Null;
        out.put("baseline_metrics.json", &json_bytes(&v)?)?;
        out.put("baseline_posterior.json", &json_bytes(bpost)?)?;
        if !b.roc.is_empty() {
            let mut buf = Vec::new();
            write_roc_csv(&b.roc, &mut buf)?;
            out.put("baseline_roc.csv", &buf)?;
        }
    }
    if !table.is_empty() {
        let rows: Vec<Vec<String>> = table.iter().map(|(b, w)| vec![fmt17(*b), fmt17(*w)]).collect();
        out.csv("beta_waic.csv", &["beta".into(), "waic".into()], &rows)?;
    }

    // plot-ready grids
    let grid = glm_grid(&setup.train, cfg.grid_points);
    let k = post.n_components();
    let mut header: Vec<String> = setup.train.columns.clone();
    header.extend(["mean".to_string(), "sd".to_string()]);
    if baseline.is_some() {
        header.extend(["baseline_mean".to_string(), "baseline_sd".to_string()]);
    }
    let mut pred_rows = Vec::with_capacity(grid.len());
    let mut weight_rows = Vec::with_capacity(grid.len());
    for x in &grid {
        let g = gating_row(post, x);
        let (m, s) = glm_predictive_moments(&setup.model, post, x, &g, &quad)?;
        let mut row: Vec<String> = x.iter().map(|v| fmt17(*v)).collect();
        row.extend([fmt17(m), fmt17(s)]);
        if let Some((_, b)) = &baseline {
            let (bm, bs) = glm_predictive_moments(&setup.model, b, x, &gating_row(b, x), &quad)?;
            row.extend([fmt17(bm), fmt17(bs)]);
        }
        pred_rows.push(row);
        let w = post.mixture_weights(&g)?;
        let mut wr: Vec<String> = x.iter().map(|v| fmt17(*v)).collect();
        wr.extend(w.iter().map(|v| fmt17(*v)));
        weight_rows.push(wr);
    }
    out.csv("predictive_grid.csv", &header, &pred_rows)?;
    let mut wh: Vec<String> = setup.train.columns.clone();
    wh.extend((1..=k).map(|j| format!("w{j}")));
    out.csv("weights.csv", &wh, &weight_rows)?;
    let gating = resolve_gating(post, &setup.train);
    let wm = post.weights_matrix(&gating)?;
    let cluster_rows: Vec<Vec<String>> = (0..setup.train.n())
        .map(|i| {
            let mut r = vec![i.to_string()];
            r.extend(setup.train.x.row(i).iter().map(|v| fmt17(*v)));
            r.push(fmt17(setup.train.y[i]));
            r.push(dominant(&wm.row(i).iter().copied().collect::<Vec<_>>()).to_string());
            r
        })
        .collect();
    let mut ch = vec!["row".to_string()];
    ch.extend(setup.train.columns.iter().cloned());
    ch.extend(["y".to_string(), "component".to_string()]);
    out.csv("cluster_map.csv", &ch, &cluster_rows)?;

    Ok(ExperimentOutput {
        report,
        baseline: baseline.map(|b| b.0),
        beta_table: table,
        fit_json,
        files: Vec::new(),
    })
}

/// Observation-level regression view of hierarchical data: design rows
/// `(1, t, t², t³, e_group)` with the residual variance `σ²_ε + σ²_a`.
pub fn hierarchical_regression(spec: &HierarchicalSpec, data: &HierarchicalData) -> Result<(LikelihoodModel, Dataset)> {
    let n = data.obs.len();
    let mut x = DMatrix::zeros(n, spec.dim());
    let mut y = DVector::zeros(n);
    for (i, o) in data.obs.iter().enumerate() {
        x.row_mut(i).copy_from(&design_row(data.times[o.time], o.group, spec.n_groups).transpose());
        y[i] = o.y;
    }
    Ok((LikelihoodModel::GaussianFixed { variance: spec.predictive_noise() }, Dataset::new(x, y)?))
}

fn hierarchical_waic(spec: &HierarchicalSpec, post: &HierarchicalPosterior, data: &HierarchicalData, draws: usize, seed: u64) -> Result<f64> {
    let (model, reg) = hierarchical_regression(spec, data)?;
    let avg = post.mixture.averaged(&data.gating_matrix())?;
    waic(&model, &avg, &reg, draws, seed)
}

/// Mean marginal log predictive density over observations of `eval`, whose
/// times are mapped onto the training time scale.
fn hierarchical_llpd(spec: &HierarchicalSpec, post: &HierarchicalPosterior, train: &HierarchicalData, eval: &HierarchicalData) -> Result<f64> {
    let mut total = 0.0;
    for o in &eval.obs {
        let t = train.scale_time(eval.raw_times[o.time]);
        let label = &eval.group_labels[o.group];
        let j = train
            .group_labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| PviError::Data(format!("group `{label}` not seen in training")))?;
        let (w, m, v) = hierarchical_predictive(spec, post, t)?.marginal(j);
        let terms: Vec<f64> = (0..w.len()).map(|k| w[k].ln() + crate::gaussian::normal_logpdf(o.y, m[k], v[k])).collect();
        total += crate::gaussian::log_sum_exp(&terms);
    }
    Ok(total / eval.obs.len() as f64)
}

fn run_hierarchical(cfg: &ExperimentConfig, out: &mut Writer) -> Result<ExperimentOutput> {
    let DataSource::Hierarchical { path, test_path } = &cfg.data else {
        unreachable!()
    };
    let train = HierarchicalData::load_csv(path).stage("data")?;
    let test = test_path.as_deref().map(HierarchicalData::load_csv).transpose().stage("data")?;
    let mut spec = train.spec(cfg.sigma2_a, cfg.sigma2_b, cfg.sigma2_eps).stage("data")?;
    if let Some(sd) = cfg.prior_sd {
        spec.prior_sd = sd;
    }
    let fit_cfg = cfg.fit_config();
    let (fit_res, waic_value, table) = match cfg.search() {
        Some(search) => {
            let sel = select_beta_with(&search, |beta| {
                let f = hierarchical_fit(&spec, &train, beta, &fit_cfg)?;
                let w = hierarchical_waic(&spec, &f.posterior, &train, search.waic_samples, cfg.seed)?;
                Ok((f, w))
            })
            .stage("beta selection")?;
            let w = sel.table.iter().find(|(b, _)| *b == sel.beta).map(|t| t.1);
            (sel.fit, w, sel.table)
        }
        None => {
            let f = hierarchical_fit(&spec, &train, cfg.beta.unwrap_or(1.0), &fit_cfg).stage("fit")?;
            let w = hierarchical_waic(&spec, &f.posterior, &train, 2000, cfg.seed).stage("waic")?;
            (f, Some(w), Vec::new())
        }
    };
    let post = &fit_res.posterior;
    let report = MetricReport {
        llpd: hierarchical_llpd(&spec, post, &train, test.as_ref().unwrap_or(&train)).stage("evaluate")?,
        waic: waic_value,
        beta: fit_res.beta,
        k: post.mixture.n_components(),
        tpr_at_fpr: BTreeMap::new(),
        roc: Vec::new(),
    };
    let fit_json = serde_json::to_string(&fit_res)?;
    out.put("fit.json", fit_json.as_bytes())?;
    out.put("trace.csv", &trace_bytes(&fit_res)?)?;
    out.put("metrics.json", &json_bytes(&report)?)?;
    out.put("spec.json", &json_bytes(&spec)?)?;
    if !table.is_empty() {
        let rows: Vec<Vec<String>> = table.iter().map(|(b, w)| vec![fmt17(*b), fmt17(*w)]).collect();
        out.csv("beta_waic.csv", &["beta".into(), "waic".into()], &rows)?;
    }
    let grid: Vec<f64> = (0..cfg.grid_points).map(|i| i as f64 / (cfg.grid_points - 1) as f64).collect();
    let mut buf = Vec::new();
    write_predictive_csv(&spec, post, &train, &grid, &mut buf)?;
    out.put("predictive_grid.csv", &buf)?;
    let k = post.mixture.n_components();
    let weight_rows = grid
        .iter()
        .map(|t| {
            let g: Vec<f64> = if post.mixture.gating_dim() == 1 {
                vec![1.0]
            } else {
                crate::hierarchical::poly_features(*t)[..POLY_TERMS].to_vec()
            };
            let w = post.mixture.mixture_weights(&g)?;
            let mut r = vec![fmt17(train.unscale_time(*t))];
            r.extend(w.iter().map(|v| fmt17(*v)));
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut wh = vec!["time".to_string()];
    wh.extend((1..=k).map(|j| format!("w{j}")));
    out.csv("weights.csv", &wh, &weight_rows)?;
    let clusters = cluster_map(&post.mixture, &train.times)?;
    let rows: Vec<Vec<String>> = train.raw_times.iter().zip(&clusters).map(|(t, c)| vec![fmt17(*t), c.to_string()]).collect();
    out.csv("cluster_map.csv", &["time".into(), "component".into()], &rows)?;
    Ok(ExperimentOutput {
        report,
        baseline: None,
        beta_table: table,
        fit_json,
        files: Vec::new(),
    })
}

/// Affine map to standardized units for one-dimensional GP data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub x_mean: f64,
    pub x_sd: f64,
    pub y_mean: f64,
    pub y_sd: f64,
}

impl Scaling {
    pub fn identity() -> Self {
        Scaling {
            x_mean: 0.0,
            x_sd: 1.0,
            y_mean: 0.0,
            y_sd: 1.0,
        }
    }

    pub fn fit(d: &Dataset) -> Self {
        let stats = |v: &[f64]| {
            let n = v.len() as f64;
            let m = v.iter().sum::<f64>() / n;
            let s = (v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
            (m, if s > 0.0 { s } else { 1.0 })
        };
        let (x_mean, x_sd) = stats(d.x.column(0).as_slice());
        let (y_mean, y_sd) = stats(d.y.as_slice());
        Scaling { x_mean, x_sd, y_mean, y_sd }
    }

    pub fn apply(&self, d: &Dataset) -> Result<Dataset> {
        let x = d.x.map(|v| (v - self.x_mean) / self.x_sd);
        let y = d.y.map(|v| (v - self.y_mean) / self.y_sd);
        let mut out = Dataset::new(x, y)?;
        out.columns = d.columns.clone();
        Ok(out)
    }
}

fn run_gp(cfg: &ExperimentConfig, out: &mut Writer) -> Result<ExperimentOutput> {
    let (raw_train, raw_test) = match &cfg.data {
        DataSource::TwoRegime { n, n_test } => (
            simulate_two_regime(*n, cfg.seed).stage("data")?,
            (*n_test > 0).then(|| simulate_two_regime(*n_test, cfg.seed ^ 0x5DEE_CE66_D1CE_5EED)).transpose().stage("data")?,
        ),
        DataSource::Lidar { path } => {
            let d = load_lidar(path).stage("data")?;
            match cfg.split_fraction {
                Some(f) => {
                    let (a, b) = d.split(f, cfg.seed).stage("data")?;
                    (a, Some(b))
                }
                None => (d, None),
            }
        }
        _ => unreachable!(),
    };
    let scaling = if cfg.standardize.unwrap_or(matches!(cfg.data, DataSource::Lidar { .. })) {
        Scaling::fit(&raw_train)
    } else {
        Scaling::identity()
    };
    let train = scaling.apply(&raw_train)?;
    let test = raw_test.as_ref().map(|t| scaling.apply(t)).transpose()?;
    let inducing = match cfg.inducing {
        Some(m) if m < train.n() => Some(kmeans_inducing(&train.x, m, &mut stream(cfg.seed, Stream::Init)).stage("inducing points")?),
        _ => None,
    };
    let fit_cfg = cfg.fit_config();
    let kernel = cfg.kernel;
    let (fit_res, waic_value, table) = match cfg.search() {
        Some(search) => {
            let sel = select_beta_with(&search, |beta| {
                let f = gp_fit(&train, &kernel, beta, &fit_cfg, inducing.clone())?;
                let w = gp_waic(&f.posterior, &kernel, &train, search.waic_samples, cfg.seed)?;
                Ok((f, w))
            })
            .stage("beta selection")?;
            let w = sel.table.iter().find(|(b, _)| *b == sel.beta).map(|t| t.1);
            (sel.fit, w, sel.table)
        }
        None => {
            let f = gp_fit(&train, &kernel, cfg.beta.unwrap_or(1.0), &fit_cfg, inducing.clone()).stage("fit")?;
            let w = gp_waic(&f.posterior, &kernel, &train, 2000, cfg.seed).stage("waic")?;
            (f, Some(w), Vec::new())
        }
    };
    let post: &InducingPosterior = &fit_res.posterior;
    let eval = test.as_ref().unwrap_or(&train);
    // llpd in the original response units
    let log_jac = scaling.y_sd.ln();
    let mut total = 0.0;
    for i in 0..eval.n() {
        total += gp_predictive(post, &kernel, &[eval.x[(i, 0)]], eval.y[i]).stage("evaluate")?.ln() - log_jac;
    }
    let report = MetricReport {
        llpd: total / eval.n() as f64,
        waic: waic_value,
        beta: fit_res.beta,
        k: post.n_components(),
        tpr_at_fpr: BTreeMap::new(),
        roc: Vec::new(),
    };
    let fit_json = serde_json::to_string(&fit_res)?;
    out.put("fit.json", fit_json.as_bytes())?;
    out.put("trace.csv", &trace_bytes(&fit_res)?)?;
    out.put("metrics.json", &json_bytes(&report)?)?;
    out.put("scaling.json", &json_bytes(&scaling)?)?;
    if !table.is_empty() {
        let rows: Vec<Vec<String>> = table.iter().map(|(b, w)| vec![fmt17(*b), fmt17(*w)]).collect();
        out.csv("beta_waic.csv", &["beta".into(), "waic".into()], &rows)?;
    }
    let (lo, hi) = (train.x.column(0).min(), train.x.column(0).max());
    let grid: Vec<f64> = (0..cfg.grid_points).map(|i| lo + (hi - lo) * i as f64 / (cfg.grid_points - 1) as f64).collect();
    let mut qrows = Vec::with_capacity(grid.len());
    let mut wrows = Vec::with_capacity(grid.len());
    for x in &grid {
        let (w, m, v) = gp_component_predictive(post, &kernel, &[*x])?;
        let xo = scaling.x_mean + scaling.x_sd * x;
        let mut r = vec![fmt17(xo)];
        r.extend(QUANTILE_LEVELS.iter().map(|l| fmt17(scaling.y_mean + scaling.y_sd * mixture_quantile(&w, &m, &v, *l))));
        qrows.push(r);
        let mut wr = vec![fmt17(xo)];
        wr.extend(w.iter().map(|v| fmt17(*v)));
        wrows.push(wr);
    }
    let qh: Vec<String> = ["x", "q01", "q05", "q25", "q50", "q75", "q95", "q99"].iter().map(|s| s.to_string()).collect();
    out.csv("predictive_grid.csv", &qh, &qrows)?;
    let mut wh = vec!["x".to_string()];
    wh.extend((1..=post.n_components()).map(|j| format!("w{j}")));
    out.csv("weights.csv", &wh, &wrows)?;
    let noise = post.noise_vars();
    let crow: Vec<Vec<String>> = (0..train.n())
        .map(|i| {
            let w = post.weights(&[train.x[(i, 0)]]);
            let c = dominant(&w);
            vec![fmt17(raw_train.x[(i, 0)]), fmt17(raw_train.y[i]), c.to_string(), fmt17(noise[c] * scaling.y_sd * scaling.y_sd)]
        })
        .collect();
    out.csv("cluster_map.csv", &["x".into(), "y".into(), "component".into(), "noise_var".into()], &crow)?;
    Ok(ExperimentOutput {
        report,
        baseline: None,
        beta_table: table,
        fit_json,
        files: Vec::new(),
    })
}

/// Log predictive density of one observation under a GLM mixture, exposed for
/// the command-line `predict` subcommand.
pub fn glm_log_predictive(model: &LikelihoodModel, post: &MixturePosterior, x: &[f64], y: f64, quad: &QuadratureRule) -> Result<f64> {
    let g = gating_row(post, x);
    log_predictive_density(model, post, x, Some(&g), y, quad)
}
