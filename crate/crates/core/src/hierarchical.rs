//! Random-effects model `y_ij = f(t_i) + a_i + b_j + ε_ij` with a cubic `f`,
//! observation effects `a_i ~ N(0, σ²_a)`, group intercepts `b_j ~ N(0, σ²_b)`
//! and noise `ε_ij ~ N(0, σ²_ε)`.
//!
//! The variational family is a time-gated mixture over `(β, b)` times
//! independent Gaussian factors `N(m_i, τ_i²)` for each `a_i`. The score uses the
//! per-time stacked predictive, under which a fresh `ã` and `ε̃` add
//! `(σ²_ε + σ²_a) I` to every component covariance.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_check, PviError, Result};
use crate::family::MixturePosterior;
use crate::gaussian::{cholesky, log_sum_exp, LN_2PI};
use crate::likelihood::{expected_log_prior_term, log_density_floor, PriorSpec};
use crate::objective::{batch_rows, mixture_owners, mixture_regularizer, random_mixture, ComponentTerms, MixtureGradient};
use crate::optimizer::{fit_problem, fmt17, Evaluation, FitConfig, FitResult, Owner, PviProblem, VariationalParams};

pub const POLY_TERMS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalSpec {
    pub n_groups: usize,
    pub n_times: usize,
    pub sigma2_a: f64,
    pub sigma2_b: f64,
    pub sigma2_eps: f64,
    pub prior_sd: f64,
}

impl HierarchicalSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("sigma2_a", self.sigma2_a), ("sigma2_b", self.sigma2_b), ("sigma2_eps", self.sigma2_eps), ("prior_sd", self.prior_sd)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(PviError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.n_groups == 0 || self.n_times == 0 {
            return Err(PviError::Config("need at least one group and one time".into()));
        }
        Ok(())
    }

    /// Dimension of `(β, b)`.
    pub fn dim(&self) -> usize {
        POLY_TERMS + self.n_groups
    }

    /// `N(0, diag(prior_sd² × 4, σ²_b × g))`.
    pub fn prior(&self) -> Result<PriorSpec> {
        let mut v = vec![self.prior_sd * self.prior_sd; POLY_TERMS];
        v.extend(std::iter::repeat_n(self.sigma2_b, self.n_groups));
        PriorSpec::diagonal(&v)
    }

    pub fn predictive_noise(&self) -> f64 {
        self.sigma2_eps + self.sigma2_a
    }
}

/// `(1, t, t², t³)`.
pub fn poly_features(t: f64) -> [f64; POLY_TERMS] {
    [1.0, t, t * t, t * t * t]
}

/// Row of the stacked design for group `j` at time `t`.
pub fn design_row(t: f64, group: usize, n_groups: usize) -> DVector<f64> {
    let mut row = DVector::zeros(POLY_TERMS + n_groups);
    row.rows_mut(0, POLY_TERMS).copy_from_slice(&poly_features(t));
    row[POLY_TERMS + group] = 1.0;
    row
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub time: usize,
    pub group: usize,
    pub y: f64,
}

/// Long-format data on a (possibly incomplete) time × group grid.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchicalData {
    /// Distinct times rescaled to `[0, 1]`, increasing.
    pub times: Vec<f64>,
    /// Original time values.
    pub raw_times: Vec<f64>,
    pub group_labels: Vec<String>,
    pub obs: Vec<Observation>,
}

impl HierarchicalData {
    /// Build from `(time, group, y)` triples; times are rescaled to `[0, 1]` and
    /// groups are numbered in sorted label order.
    pub fn from_long(rows: &[(f64, String, f64)]) -> Result<Self> {
        if rows.is_empty() {
            return Err(PviError::EmptyData("no observations".into()));
        }
        let mut raw: Vec<f64> = rows.iter().map(|r| r.0).collect();
        if raw.iter().chain(rows.iter().map(|r| &r.2)).any(|v| !v.is_finite()) {
            return Err(PviError::Data("non-finite time or response".into()));
        }
        raw.sort_by(f64::total_cmp);
        raw.dedup();
        let (lo, hi) = (raw[0], raw[raw.len() - 1]);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let times = raw.iter().map(|t| (t - lo) / span).collect();
        let mut labels: Vec<String> = rows.iter().map(|r| r.1.clone()).collect();
        sort_labels(&mut labels);
        labels.dedup();
        let group_of: BTreeMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
        let obs = rows
            .iter()
            .map(|(t, g, y)| Observation {
                time: raw.binary_search_by(|v| v.total_cmp(t)).unwrap(),
                group: group_of[g.as_str()],
                y: *y,
            })
            .collect();
        Ok(HierarchicalData {
            times,
            raw_times: raw,
            group_labels: labels,
            obs,
        })
    }

    /// Read a CSV with columns `time`, `group`, `y`.
    pub fn load_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
        let headers = reader.headers()?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| PviError::Data(format!("{}: missing column `{name}`", path.display())))
        };
        let (ct, cg, cy) = (col("time")?, col("group")?, col("y")?);
        let mut rows = Vec::new();
        for (r, rec) in reader.records().enumerate() {
            let rec = rec?;
            let num = |c: usize, name: &str| -> Result<f64> {
                rec.get(c)
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| PviError::Data(format!("{}: row {}, column `{name}` is not numeric", path.display(), r + 2)))
            };
            rows.push((num(ct, "time")?, rec.get(cg).unwrap_or("").to_string(), num(cy, "y")?));
        }
        if rows.is_empty() {
            return Err(PviError::EmptyData(format!("{}: no data rows", path.display())));
        }
        Self::from_long(&rows)
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn n_groups(&self) -> usize {
        self.group_labels.len()
    }

    /// Gating inputs `(1, t, t², t³)` per time.
    pub fn gating_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_times(), POLY_TERMS, |i, j| poly_features(self.times[i])[j])
    }

    /// Map a time on the original scale to `[0, 1]`.
    pub fn scale_time(&self, raw: f64) -> f64 {
        let (lo, hi) = (self.raw_times[0], self.raw_times[self.raw_times.len() - 1]);
        if hi > lo {
            (raw - lo) / (hi - lo)
        } else {
            0.0
        }
    }

    pub fn unscale_time(&self, t: f64) -> f64 {
        let (lo, hi) = (self.raw_times[0], self.raw_times[self.raw_times.len() - 1]);
        lo + t * (hi - lo)
    }

    fn by_time(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_times()];
        for (o, ob) in self.obs.iter().enumerate() {
            out[ob.time].push(o);
        }
        out
    }

    /// Known variances from method-of-moments estimates on residuals of the
    /// least-squares fit with polynomial and group fixed effects.
    pub fn moment_variances(&self) -> Result<(f64, f64, f64)> {
        let g = self.n_groups();
        let n_obs = self.obs.len();
        let cols = POLY_TERMS + g - 1;
        let x = DMatrix::from_fn(n_obs, cols, |r, c| {
            let ob = &self.obs[r];
            if c < POLY_TERMS {
                poly_features(self.times[ob.time])[c]
            } else {
                (ob.group == c - POLY_TERMS + 1) as u8 as f64
            }
        });
        let y = DVector::from_iterator(n_obs, self.obs.iter().map(|o| o.y));
        let coef = x
            .clone()
            .svd(true, true)
            .solve(&y, 1e-10)
            .map_err(|e| PviError::Numerical(format!("least squares failed: {e}")))?;
        let resid = &y - &x * &coef;
        let var_y = {
            let m = y.mean();
            y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n_obs.max(2) as f64
        };
        let floor = 1e-4 * var_y.max(1e-12);

        let groups_at = self.by_time();
        let mut within = 0.0;
        let mut dof = 0.0;
        let mut time_means = Vec::new();
        let mut inv_counts = Vec::new();
        for idx in &groups_at {
            if idx.is_empty() {
                continue;
            }
            let m = idx.iter().map(|&o| resid[o]).sum::<f64>() / idx.len() as f64;
            within += idx.iter().map(|&o| (resid[o] - m).powi(2)).sum::<f64>();
            dof += idx.len() as f64 - 1.0;
            time_means.push(m);
            inv_counts.push(1.0 / idx.len() as f64);
        }
        let sigma2_eps = if dof > 0.0 { (within / dof).max(floor) } else { var_y.max(floor) };
        let sigma2_a = {
            let m = time_means.iter().sum::<f64>() / time_means.len() as f64;
            let v = time_means.iter().map(|t| (t - m).powi(2)).sum::<f64>() / (time_means.len() as f64 - 1.0).max(1.0);
            let avg_inv = inv_counts.iter().sum::<f64>() / inv_counts.len() as f64;
            (v - sigma2_eps * avg_inv).max(floor)
        };
        let sigma2_b = if g > 1 {
            let mut effects: Vec<f64> = vec![0.0];
            effects.extend(coef.rows(POLY_TERMS, g - 1).iter());
            let m = effects.iter().sum::<f64>() / g as f64;
            let v = effects.iter().map(|e| (e - m).powi(2)).sum::<f64>() / (g as f64 - 1.0);
            let per_group = n_obs as f64 / g as f64;
            (v - (sigma2_eps + sigma2_a) / per_group).max(floor)
        } else {
            floor
        };
        Ok((sigma2_a, sigma2_b, sigma2_eps))
    }

    /// Spec with the given variances, or moment estimates where `None`.
    pub fn spec(&self, sigma2_a: Option<f64>, sigma2_b: Option<f64>, sigma2_eps: Option<f64>) -> Result<HierarchicalSpec> {
        let needs = sigma2_a.is_none() || sigma2_b.is_none() || sigma2_eps.is_none();
        let (ma, mb, me) = if needs { self.moment_variances()? } else { (0.0, 0.0, 0.0) };
        let spec = HierarchicalSpec {
            n_groups: self.n_groups(),
            n_times: self.n_times(),
            sigma2_a: sigma2_a.unwrap_or(ma),
            sigma2_b: sigma2_b.unwrap_or(mb),
            sigma2_eps: sigma2_eps.unwrap_or(me),
            prior_sd: 100.0,
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn sort_labels(labels: &mut [String]) {
    labels.sort_by(|a, b| match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => x.total_cmp(&y),
        _ => a.cmp(b),
    });
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalPosterior {
    pub mixture: MixturePosterior,
    pub local_means: DVector<f64>,
    /// `log τ_i²`
    pub local_log_vars: DVector<f64>,
}

impl HierarchicalPosterior {
    pub fn local_vars(&self) -> DVector<f64> {
        self.local_log_vars.map(f64::exp)
    }
}

impl VariationalParams for HierarchicalPosterior {
    fn to_flat(&self) -> Vec<f64> {
        let mut out = self.mixture.to_flat();
        out.extend(self.local_means.iter());
        out.extend(self.local_log_vars.iter());
        out
    }

    fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.local_means.len();
        let m = self.mixture.n_params();
        shape_check(flat.len() == m + 2 * n, || format!("flat vector of length {} != {}", flat.len(), m + 2 * n))?;
        self.mixture.set_flat(&flat[..m])?;
        self.local_means.copy_from_slice(&flat[m..m + n]);
        self.local_log_vars.copy_from_slice(&flat[m + n..]);
        Ok(())
    }

    fn n_components(&self) -> usize {
        self.mixture.n_components()
    }

    fn owners(&self) -> Vec<Owner> {
        let mut o = mixture_owners(&self.mixture);
        o.extend(std::iter::repeat_n(Owner::Shared, 2 * self.local_means.len()));
        o
    }

    fn remove(&mut self, removed: &[usize]) {
        self.mixture.remove_components(removed, true);
    }
}

pub struct HierarchicalProblem<'a> {
    pub spec: HierarchicalSpec,
    pub data: &'a HierarchicalData,
    prior: PriorSpec,
    gating: DMatrix<f64>,
    /// Design rows of all observations, `N × (4 + g)`.
    design: DMatrix<f64>,
    by_time: Vec<Vec<usize>>,
    center: DVector<f64>,
}

impl<'a> HierarchicalProblem<'a> {
    pub fn new(spec: HierarchicalSpec, data: &'a HierarchicalData) -> Result<Self> {
        spec.validate()?;
        if data.obs.is_empty() {
            return Err(PviError::EmptyData("no observations".into()));
        }
        shape_check(spec.n_groups == data.n_groups() && spec.n_times == data.n_times(), || {
            format!(
                "spec expects {} groups × {} times, data has {} × {}",
                spec.n_groups,
                spec.n_times,
                data.n_groups(),
                data.n_times()
            )
        })?;
        for o in &data.obs {
            if o.group >= spec.n_groups {
                return Err(PviError::Data(format!("unknown group index {}", o.group)));
            }
            if o.time >= spec.n_times {
                return Err(PviError::Data(format!("unknown time index {}", o.time)));
            }
        }
        let design = DMatrix::from_fn(data.obs.len(), spec.dim(), |r, c| {
            let o = &data.obs[r];
            if c < POLY_TERMS {
                poly_features(data.times[o.time])[c]
            } else {
                (c - POLY_TERMS == o.group) as u8 as f64
            }
        });
        // Least-squares centre for initialization: polynomial fit plus centred group effects.
        let y = DVector::from_iterator(data.obs.len(), data.obs.iter().map(|o| o.y));
        let ridge = &design.transpose() * &design + DMatrix::identity(spec.dim(), spec.dim()) * 1e-6;
        let center = ridge
            .cholesky()
            .map(|c| c.solve(&(design.transpose() * &y)))
            .unwrap_or_else(|| DVector::zeros(spec.dim()));
        Ok(HierarchicalProblem {
            prior: spec.prior()?,
            gating: data.gating_matrix(),
            by_time: data.by_time(),
            spec,
            data,
            design,
            center,
        })
    }

    /// Gating inputs per time, `n × 4`.
    pub fn gating(&self) -> &DMatrix<f64> {
        &self.gating
    }
}

impl PviProblem for HierarchicalProblem<'_> {
    type Params = HierarchicalPosterior;

    fn n_obs(&self) -> usize {
        self.spec.n_times
    }

    fn evaluate(&self, post: &HierarchicalPosterior, beta: f64, with_grad: bool, batch: Option<&[usize]>) -> Result<Evaluation> {
        hierarchical_evaluate(self, post, beta, with_grad, batch)
    }

    fn training_weights(&self, post: &HierarchicalPosterior) -> Result<DMatrix<f64>> {
        post.mixture.weights_matrix(&self.gating)
    }

    fn initialize(&self, k: usize, rng: &mut ChaCha20Rng) -> Result<HierarchicalPosterior> {
        let mut mixture = random_mixture(k, self.spec.dim(), POLY_TERMS, rng)?;
        let mut flat = mixture.to_flat();
        let offset = (k - 1) * POLY_TERMS;
        let d = self.spec.dim();
        for j in 0..k {
            for c in 0..d {
                flat[offset + j * d + c] += self.center[c];
            }
        }
        mixture.set_flat(&flat)?;
        Ok(HierarchicalPosterior {
            mixture,
            local_means: DVector::zeros(self.spec.n_times),
            local_log_vars: DVector::from_element(self.spec.n_times, self.spec.sigma2_a.ln()),
        })
    }
}

fn hierarchical_evaluate(
    prob: &HierarchicalProblem,
    post: &HierarchicalPosterior,
    beta: f64,
    with_grad: bool,
    batch: Option<&[usize]>,
) -> Result<Evaluation> {
    let spec = &prob.spec;
    let n = spec.n_times;
    let d = spec.dim();
    let mix = &post.mixture;
    shape_check(mix.dim() == d && post.local_means.len() == n && post.local_log_vars.len() == n, || {
        "posterior does not match the problem dimensions".into()
    })?;
    let k = mix.n_components();
    let weights = mix.weights_matrix(&prob.gating)?;
    let covs = mix.covariances();
    let noise = spec.predictive_noise();
    let (rows, scale) = batch_rows(n, batch);
    let floor = log_density_floor();

    let mut grad = with_grad.then(|| MixtureGradient::zeros(n, k, d));

    // Score: per-time stacked predictive.
    let mut score = 0.0;
    let mut floored = 0;
    let mut logs = vec![0.0; k];
    for &i in rows.iter() {
        let idx = &prob.by_time[i];
        if idx.is_empty() {
            continue;
        }
        let x = prob.design.select_rows(idx.iter());
        let y = DVector::from_iterator(idx.len(), idx.iter().map(|&o| prob.data.obs[o].y));
        let mut per_comp = Vec::with_capacity(k);
        for j in 0..k {
            let v = &x * &covs[j] * x.transpose() + DMatrix::identity(idx.len(), idx.len()) * noise;
            let chol = cholesky(&v)?;
            let r = &y - &x * &mix.means()[j];
            let u = chol.solve(&r);
            let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            logs[j] = weights[(i, j)].ln() - 0.5 * (idx.len() as f64 * LN_2PI + log_det + r.dot(&u));
            per_comp.push((chol, u));
        }
        let s = log_sum_exp(&logs);
        if s < floor || !s.is_finite() {
            score += floor;
            floored += 1;
            continue;
        }
        score += s;
        if let Some(g) = grad.as_mut() {
            for (j, (chol, u)) in per_comp.into_iter().enumerate() {
                let resp = (logs[j] - s).exp();
                g.d_logits[(i, j)] += scale * (resp - weights[(i, j)]);
                let xtu = x.transpose() * &u;
                g.d_means[j] += &xtu * (scale * resp);
                let inner = &u * u.transpose() - chol.inverse();
                g.d_covs[j] += x.transpose() * inner * &x * (0.5 * scale * resp);
            }
        }
    }
    score *= scale;

    // Expected log-joint per component.
    let tau2 = post.local_vars();
    let s2 = spec.sigma2_eps;
    let n_obs = prob.data.obs.len() as f64;
    let y_minus_m = DVector::from_iterator(
        prob.data.obs.len(),
        prob.data.obs.iter().map(|o| o.y - post.local_means[o.time]),
    );
    let tau_sum: f64 = prob.data.obs.iter().map(|o| tau2[o.time]).sum();
    let mut terms = ComponentTerms {
        value: vec![0.0; k],
        g_mean: vec![DVector::zeros(d); k],
        g_cov: vec![DMatrix::zeros(d, d); k],
    };
    let gram = prob.design.transpose() * &prob.design;
    // residual r_o,k used again for the local-mean gradient
    let mut resid_k = Vec::with_capacity(k);
    for j in 0..k {
        let r = &y_minus_m - &prob.design * &mix.means()[j];
        let quad = (gram.component_mul(&covs[j])).sum();
        let ell = -0.5 * n_obs * (LN_2PI + s2.ln()) - (r.norm_squared() + quad + tau_sum) / (2.0 * s2);
        let prior = expected_log_prior_term(&prob.prior, &mix.means()[j], &covs[j])?;
        terms.value[j] = ell + prior.value;
        if with_grad {
            terms.g_mean[j] = prob.design.transpose() * &r / s2 + prior.g_mean;
            terms.g_cov[j] = &gram * (-0.5 / s2) + prior.g_cov;
        }
        resid_k.push(r);
    }
    let mix_reg = mixture_regularizer(mix, &weights, &terms, beta, grad.as_mut())?;

    // Local factors: prior on a_i and their exact entropy.
    let sa = spec.sigma2_a;
    let local_reg: f64 = (0..n)
        .map(|i| {
            -0.5 * (LN_2PI + sa.ln()) - (post.local_means[i].powi(2) + tau2[i]) / (2.0 * sa)
                + 0.5 * (LN_2PI + 1.0 + post.local_log_vars[i])
        })
        .sum();
    let regularizer = mix_reg + local_reg;
    let objective = score + beta * regularizer;

    let gradient = match grad {
        None => Vec::new(),
        Some(g) => {
            let mut flat = g.flatten(mix, &prob.gating);
            let omega_bar: Vec<f64> = (0..k).map(|j| weights.column(j).sum() / n as f64).collect();
            let mut d_m: DVector<f64> = DVector::zeros(n);
            let mut counts = vec![0.0; n];
            for (o, ob) in prob.data.obs.iter().enumerate() {
                let avg_r: f64 = (0..k).map(|j| omega_bar[j] * resid_k[j][o]).sum();
                d_m[ob.time] += avg_r / s2;
                counts[ob.time] += 1.0;
            }
            for i in 0..n {
                d_m[i] -= post.local_means[i] / sa;
            }
            flat.extend(d_m.iter().map(|v| beta * v));
            flat.extend((0..n).map(|i| beta * (-counts[i] * tau2[i] / (2.0 * s2) - tau2[i] / (2.0 * sa) + 0.5)));
            flat
        }
    };
    Ok(Evaluation {
        objective,
        score,
        regularizer,
        gradient,
        floored,
    })
}

pub fn hierarchical_objective(spec: &HierarchicalSpec, post: &HierarchicalPosterior, data: &HierarchicalData, beta: f64) -> Result<f64> {
    let prob = HierarchicalProblem::new(spec.clone(), data)?;
    Ok(hierarchical_evaluate(&prob, post, beta, false, None)?.objective)
}

/// Objective and gradient over [`VariationalParams::to_flat`] order.
pub fn hierarchical_gradient(spec: &HierarchicalSpec, post: &HierarchicalPosterior, data: &HierarchicalData, beta: f64) -> Result<(f64, Vec<f64>)> {
    let prob = HierarchicalProblem::new(spec.clone(), data)?;
    let e = hierarchical_evaluate(&prob, post, beta, true, None)?;
    Ok((e.objective, e.gradient))
}

pub fn hierarchical_fit(
    spec: &HierarchicalSpec,
    data: &HierarchicalData,
    beta: f64,
    cfg: &FitConfig,
) -> Result<FitResult<HierarchicalPosterior>> {
    let prob = HierarchicalProblem::new(spec.clone(), data)?;
    fit_problem(&prob, beta, cfg)
}

/// Mixture of `g`-dimensional Gaussians for the response vector at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedPredictive {
    pub weights: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
}

impl StackedPredictive {
    pub fn log_density(&self, y: &DVector<f64>) -> Result<f64> {
        let terms = (0..self.weights.len())
            .map(|k| Ok(self.weights[k].ln() + crate::gaussian::mvn_logpdf_dense(y, &self.means[k], &self.covs[k])?))
            .collect::<Result<Vec<f64>>>()?;
        Ok(log_sum_exp(&terms))
    }

    /// Weights, means and variances of the univariate marginal for group `j`.
    pub fn marginal(&self, j: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        (
            self.weights.clone(),
            self.means.iter().map(|m| m[j]).collect(),
            self.covs.iter().map(|c| c[(j, j)]).collect(),
        )
    }

    /// Mixture mean and standard deviation for group `j`.
    pub fn moments(&self, j: usize) -> (f64, f64) {
        let (w, m, v) = self.marginal(j);
        let mean: f64 = w.iter().zip(&m).map(|(a, b)| a * b).sum();
        let second: f64 = w.iter().zip(m.iter().zip(&v)).map(|(a, (b, c))| a * (c + b * b)).sum();
        (mean, (second - mean * mean).max(0.0).sqrt())
    }
}

/// Stacked predictive at a time `t ∈ [0, 1]` (extrapolation is allowed with a warning).
pub fn hierarchical_predictive(spec: &HierarchicalSpec, post: &HierarchicalPosterior, t: f64) -> Result<StackedPredictive> {
    if !(0.0..=1.0).contains(&t) {
        log::warn!("predicting at t = {t}, outside the training range [0, 1]");
    }
    let g = spec.n_groups;
    let x = DMatrix::from_fn(g, spec.dim(), |j, c| if c < POLY_TERMS { poly_features(t)[c] } else { (c - POLY_TERMS == j) as u8 as f64 });
    let weights = post.mixture.mixture_weights(&time_gating(&post.mixture, t))?;
    let covs = post.mixture.covariances();
    let noise = spec.predictive_noise();
    Ok(StackedPredictive {
        weights: weights.iter().copied().collect(),
        means: post.mixture.means().iter().map(|m| &x * m).collect(),
        covs: covs.iter().map(|c| &x * c * x.transpose() + DMatrix::identity(g, g) * noise).collect(),
    })
}

/// Gating input at time `t`; a constant-weight mixture takes the intercept only.
fn time_gating(post: &MixturePosterior, t: f64) -> Vec<f64> {
    if post.gating_dim() == 1 {
        vec![1.0]
    } else {
        poly_features(t).to_vec()
    }
}

/// Index of the dominant component at each time; ties go to the lowest index.
pub fn cluster_map(post: &MixturePosterior, times: &[f64]) -> Result<Vec<usize>> {
    times
        .iter()
        .map(|t| {
            let w = post.mixture_weights(&time_gating(post, *t))?;
            let mut best = 0;
            for j in 1..w.len() {
                if w[j] > w[best] {
                    best = j;
                }
            }
            Ok(best)
        })
        .collect()
}

/// CSV of `t, group, mean, sd, dominant_component` over a grid of scaled times.
pub fn write_predictive_csv<W: Write>(
    spec: &HierarchicalSpec,
    post: &HierarchicalPosterior,
    data: &HierarchicalData,
    grid: &[f64],
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "group", "mean", "sd", "dominant_component"])?;
    let dominant = cluster_map(&post.mixture, grid)?;
    for (t, dom) in grid.iter().zip(dominant) {
        let pred = hierarchical_predictive(spec, post, *t)?;
        for (j, label) in data.group_labels.iter().enumerate() {
            let (m, s) = pred.moments(j);
            w.write_record([fmt17(data.unscale_time(*t)), label.clone(), fmt17(m), fmt17(s), dom.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}
