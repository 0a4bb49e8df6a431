//! WAIC and the choice of the penalty β, by grid search or by Bayesian
//! optimization over `log β`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{PviError, Result};
use crate::family::{sample_theta, AveragedPosterior};
use crate::gaussian::log_sum_exp;
use crate::likelihood::{log_density_floor, LikelihoodModel};
use crate::optimizer::FitResult;
use crate::rng::{stream, Stream};

/// WAIC from explicit parameter draws:
/// `Σ_i log(M⁻¹ Σ_m p(y_i|θ_m)) − Σ_i Var_m log p(y_i|θ_m)`.
pub fn waic_from_draws(model: &LikelihoodModel, draws: &[DVector<f64>], data: &Dataset) -> Result<f64> {
    let mut row = vec![0.0; data.n_covariates()];
    waic_pointwise(data.n(), draws.len(), |i, ll| {
        for (j, r) in row.iter_mut().enumerate() {
            *r = data.x[(i, j)];
        }
        for (d, theta) in draws.iter().enumerate() {
            ll[d] = model.log_lik_theta(data.y[i], &row, theta);
        }
    })
}

/// WAIC over `n` observations and `m` draws; `fill(i, ll)` writes
/// `log p(y_i | θ_m)` for every draw into `ll`.
pub fn waic_pointwise(n: usize, m: usize, mut fill: impl FnMut(usize, &mut [f64])) -> Result<f64> {
    if m < 2 {
        return Err(PviError::Config("WAIC needs at least two draws".into()));
    }
    let floor = log_density_floor();
    let ln_m = (m as f64).ln();
    let mut ll = vec![0.0; m];
    let mut total = 0.0;
    let mut floored = 0usize;
    for i in 0..n {
        fill(i, &mut ll);
        let mut lppd = log_sum_exp(&ll) - ln_m;
        if !(lppd >= floor) {
            lppd = floor;
            floored += 1;
        }
        let mean = ll.iter().sum::<f64>() / m as f64;
        let var = ll.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m as f64 - 1.0);
        total += lppd - var;
    }
    if floored > 0 {
        log::warn!("WAIC: {floored} observations had all likelihood values below the floor");
    }
    Ok(total)
}

/// WAIC with `M` draws from the averaged posterior, seeded.
pub fn waic(model: &LikelihoodModel, post: &AveragedPosterior, data: &Dataset, draws: usize, seed: u64) -> Result<f64> {
    if draws < 2 {
        return Err(PviError::Config("WAIC needs at least two draws".into()));
    }
    let mut rng = stream(seed, Stream::Sampling);
    let thetas = sample_theta(post, draws, &mut rng)?;
    waic_from_draws(model, &thetas, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SearchMode {
    Grid,
    BayesOpt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BetaSearchConfig {
    pub mode: SearchMode,
    pub grid: Vec<f64>,
    pub bo_iters: usize,
    pub bo_bounds: (f64, f64),
    pub waic_samples: usize,
    pub seed: u64,
}

impl Default for BetaSearchConfig {
    fn default() -> Self {
        BetaSearchConfig {
            mode: SearchMode::Grid,
            grid: vec![0.01, 0.1, 1.0, 10.0, 100.0],
            bo_iters: 15,
            bo_bounds: (0.01, 100.0),
            waic_samples: 2000,
            seed: 0,
        }
    }
}

impl BetaSearchConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.bo_bounds;
        if !(lo > 0.0 && hi > lo && hi.is_finite()) {
            return Err(PviError::Config(format!("invalid β bounds ({lo}, {hi})")));
        }
        if self.waic_samples < 100 {
            return Err(PviError::Config("at least 100 WAIC draws are required".into()));
        }
        match self.mode {
            SearchMode::Grid if self.grid.is_empty() => Err(PviError::Config("empty β grid".into())),
            SearchMode::Grid if self.grid.iter().any(|b| !(*b > 0.0 && b.is_finite())) => {
                Err(PviError::Config("β grid values must be positive".into()))
            }
            SearchMode::BayesOpt if self.bo_iters == 0 => Err(PviError::Config("bo_iters must be positive".into())),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BetaSelection<P> {
    pub beta: f64,
    pub fit: FitResult<P>,
    /// `(β, WAIC)` for every successful fit, in evaluation order.
    pub table: Vec<(f64, f64)>,
}

/// Pick β by maximizing WAIC. `fit_and_score` fits at a given β and returns the
/// fit with its WAIC; initialization failures skip that β.
pub fn select_beta_with<P, F>(search: &BetaSearchConfig, mut fit_and_score: F) -> Result<BetaSelection<P>>
where
    F: FnMut(f64) -> Result<(FitResult<P>, f64)>,
{
    search.validate()?;
    let mut table = Vec::new();
    let mut best: Option<(f64, FitResult<P>, f64)> = None;
    let mut consider = |beta: f64, best: &mut Option<(f64, FitResult<P>, f64)>, table: &mut Vec<(f64, f64)>| -> Result<Option<f64>> {
        match fit_and_score(beta) {
            Ok((fit, w)) => {
                table.push((beta, w));
                if best.as_ref().is_none_or(|b| w > b.2) {
                    *best = Some((beta, fit, w));
                }
                Ok(Some(w))
            }
            Err(PviError::Initialization(msg)) | Err(PviError::Numerical(msg)) => {
                log::warn!("skipping β = {beta}: {msg}");
                Ok(None)
            }
            Err(e) => Err(e),
        }
    };

    match search.mode {
        SearchMode::Grid => {
            for &beta in &search.grid {
                consider(beta, &mut best, &mut table)?;
            }
        }
        SearchMode::BayesOpt => {
            let lo = search.bo_bounds.0.ln();
            let hi = search.bo_bounds.1.ln();
            let mut rng = stream(search.seed, Stream::BayesOpt);
            let n_init = INITIAL_POINTS.min(search.bo_iters);
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for s in latin_hypercube(n_init, lo, hi, &mut rng) {
                if let Some(w) = consider(s.exp(), &mut best, &mut table)? {
                    xs.push(s);
                    ys.push(w);
                }
            }
            let mut attempts = n_init;
            while attempts < search.bo_iters {
                attempts += 1;
                let next = if xs.len() >= 2 {
                    propose_expected_improvement(&xs, &ys, lo, hi)
                } else {
                    rng.random_range(lo..hi)
                };
                if let Some(w) = consider(next.exp(), &mut best, &mut table)? {
                    xs.push(next);
                    ys.push(w);
                }
            }
        }
    }
    let (beta, fit, _) = best.ok_or_else(|| PviError::Initialization("every β fit failed".into()))?;
    Ok(BetaSelection { beta, fit, table })
}

pub const INITIAL_POINTS: usize = 5;
const LENGTH_SCALES: [f64; 4] = [0.1, 0.3, 1.0, 3.0];
const NOISE_FLOOR: f64 = 1e-6;
const ACQUISITION_GRID: usize = 2001;

/// One point per equal-width stratum of `[lo, hi]`, in shuffled stratum order.
pub fn latin_hypercube<R: Rng + ?Sized>(n: usize, lo: f64, hi: f64, rng: &mut R) -> Vec<f64> {
    use rand::seq::SliceRandom;
    let width = (hi - lo) / n as f64;
    let mut pts: Vec<f64> = (0..n).map(|i| lo + width * (i as f64 + rng.random::<f64>())).collect();
    pts.shuffle(rng);
    pts
}

/// GP surrogate with a squared-exponential kernel on standardized targets.
#[derive(Debug, Clone)]
pub struct Surrogate {
    xs: Vec<f64>,
    alpha: DVector<f64>,
    chol_l: DMatrix<f64>,
    length_scale: f64,
    y_mean: f64,
    y_sd: f64,
}

fn se(a: f64, b: f64, ell: f64) -> f64 {
    (-0.5 * ((a - b) / ell).powi(2)).exp()
}

impl Surrogate {
    /// Fit, choosing the length-scale from a fixed grid by marginal likelihood.
    pub fn fit(xs: &[f64], ys: &[f64]) -> Surrogate {
        let n = ys.len() as f64;
        let y_mean = ys.iter().sum::<f64>() / n;
        let y_sd = (ys.iter().map(|y| (y - y_mean).powi(2)).sum::<f64>() / n).sqrt();
        let y_sd = if y_sd > 0.0 { y_sd } else { 1.0 };
        let z = DVector::from_iterator(ys.len(), ys.iter().map(|y| (y - y_mean) / y_sd));
        let mut best: Option<(f64, Surrogate)> = None;
        for &ell in &LENGTH_SCALES {
            let k = DMatrix::from_fn(xs.len(), xs.len(), |i, j| se(xs[i], xs[j], ell) + if i == j { NOISE_FLOOR } else { 0.0 });
            let Some(chol) = k.cholesky() else { continue };
            let alpha = chol.solve(&z);
            let log_det: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
            let lml = -0.5 * z.dot(&alpha) - 0.5 * log_det;
            if best.as_ref().is_none_or(|b| lml > b.0) {
                best = Some((
                    lml,
                    Surrogate {
                        xs: xs.to_vec(),
                        alpha,
                        chol_l: chol.l(),
                        length_scale: ell,
                        y_mean,
                        y_sd,
                    },
                ));
            }
        }
        best.expect("the largest noise-regularized kernel matrix is SPD").1
    }

    pub fn length_scale(&self) -> f64 {
        self.length_scale
    }

    /// Posterior mean and standard deviation on the original target scale.
    pub fn predict(&self, x: f64) -> (f64, f64) {
        let kx = DVector::from_iterator(self.xs.len(), self.xs.iter().map(|xi| se(x, *xi, self.length_scale)));
        let mean = kx.dot(&self.alpha);
        let v = self.chol_l.solve_lower_triangular(&kx).unwrap_or_else(|| kx.clone());
        let var = (1.0 + NOISE_FLOOR - v.norm_squared()).max(0.0);
        (self.y_mean + self.y_sd * mean, self.y_sd * var.sqrt())
    }
}

/// Expected improvement over `best` for a Gaussian prediction (maximization).
pub fn expected_improvement(mean: f64, sd: f64, best: f64) -> f64 {
    if sd <= 0.0 {
        return (mean - best).max(0.0);
    }
    let z = (mean - best) / sd;
    let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let cdf = 0.5 * libm::erfc(-z / std::f64::consts::SQRT_2);
    (mean - best) * cdf + sd * pdf
}

fn propose_expected_improvement(xs: &[f64], ys: &[f64], lo: f64, hi: f64) -> f64 {
    let gp = Surrogate::fit(xs, ys);
    let best = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut arg = lo;
    let mut top = f64::NEG_INFINITY;
    for g in 0..ACQUISITION_GRID {
        let x = lo + (hi - lo) * g as f64 / (ACQUISITION_GRID - 1) as f64;
        let (m, s) = gp.predict(x);
        let ei = expected_improvement(m, s, best);
        if ei > top {
            top = ei;
            arg = x;
        }
    }
    arg
}
