//! The PVI objective `Σ_i log q(y_i | x_i) + β·R(λ)` for GLM likelihoods with a
//! covariate-gated Gaussian mixture, where
//! `R = Σ_k ω̄_k (E_k[log p(y|θ)] + E_k[log p(θ)]) + H_lb(q̄)`.

use std::borrow::Cow;

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{shape_check, PviError, Result};
use crate::family::{huber_entropy, MixturePosterior};
use crate::gaussian::{vech, CholeskyFactor};
use crate::likelihood::{
    expected_log_prior_term, expected_loglik_term, glm_kernel, log_density_floor, resolve_gating,
    unknown_variance_predictive, unknown_variance_stats, weighted_gram, LikelihoodModel, PriorSpec,
};
use crate::optimizer::{fit_problem, Evaluation, FitConfig, FitResult, Owner, PviProblem, VariationalParams};
use crate::quadrature::{gauss_hermite_rule, QuadratureRule, DEFAULT_ORDER};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub beta: f64,
    pub quad_order: usize,
    /// Reductions run in a fixed order. Evaluation is sequential, so this always holds.
    pub deterministic_reduction: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            beta: 1.0,
            quad_order: DEFAULT_ORDER,
            deterministic_reduction: true,
        }
    }
}

impl ObjectiveConfig {
    pub fn with_beta(beta: f64) -> Self {
        ObjectiveConfig { beta, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(PviError::Config(format!("beta must be positive, got {}", self.beta)));
        }
        Ok(())
    }
}

impl VariationalParams for MixturePosterior {
    fn to_flat(&self) -> Vec<f64> {
        MixturePosterior::to_flat(self)
    }

    fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        MixturePosterior::set_flat(self, flat)
    }

    fn n_components(&self) -> usize {
        MixturePosterior::n_components(self)
    }

    fn owners(&self) -> Vec<Owner> {
        mixture_owners(self)
    }

    fn remove(&mut self, removed: &[usize]) {
        self.remove_components(removed, true);
    }
}

pub(crate) fn mixture_owners(post: &MixturePosterior) -> Vec<Owner> {
    let k = post.n_components();
    let p = post.dim();
    let mut out = Vec::with_capacity(post.n_params());
    for j in 1..k {
        out.extend(std::iter::repeat(Owner::Gating(j)).take(post.gating_dim()));
    }
    for j in 0..k {
        out.extend(std::iter::repeat(Owner::Component(j)).take(p));
    }
    for j in 0..k {
        out.extend(std::iter::repeat(Owner::Component(j)).take(p * (p + 1) / 2));
    }
    out
}

/// Random start: means from `N(0, 0.5²)`, `Σ_k = 0.25 I`, gating from `N(0, 0.1²)`.
pub fn random_mixture(k: usize, dim: usize, gating_dim: usize, rng: &mut ChaCha20Rng) -> Result<MixturePosterior> {
    let mean_dist = Normal::new(0.0, 0.5).unwrap();
    let gate_dist = Normal::new(0.0, 0.1).unwrap();
    let means = (0..k).map(|_| DVector::from_fn(dim, |_, _| mean_dist.sample(rng))).collect();
    let factors = (0..k).map(|_| CholeskyFactor::scaled_identity(dim, 0.5)).collect();
    let eta = (1..k).map(|_| DVector::from_fn(gating_dim, |_, _| gate_dist.sample(rng))).collect();
    MixturePosterior::new(means, factors, eta, gating_dim)
}

/// Gradient pieces for the mixture part of a posterior, before flattening.
pub(crate) struct MixtureGradient {
    /// `∂F/∂z_ij` for every training row, `n × K`.
    pub d_logits: DMatrix<f64>,
    pub d_means: Vec<DVector<f64>>,
    /// Symmetric gradients with respect to `Σ_k`.
    pub d_covs: Vec<DMatrix<f64>>,
}

impl MixtureGradient {
    pub fn zeros(n: usize, k: usize, p: usize) -> Self {
        MixtureGradient {
            d_logits: DMatrix::zeros(n, k),
            d_means: vec![DVector::zeros(p); k],
            d_covs: vec![DMatrix::zeros(p, p); k],
        }
    }

    /// Flatten in the order of [`MixturePosterior::to_flat`].
    pub fn flatten(&self, post: &MixturePosterior, gating: &DMatrix<f64>) -> Vec<f64> {
        let k = post.n_components();
        let mut out = Vec::with_capacity(post.n_params());
        for j in 1..k {
            let g = gating.transpose() * self.d_logits.column(j);
            out.extend(g.iter());
        }
        for m in &self.d_means {
            out.extend(m.iter());
        }
        for (f, g) in post.factors().iter().zip(&self.d_covs) {
            out.extend(vech(&f.pullback_cov_gradient(g)));
        }
        out
    }
}

/// Per-component regularizer pieces shared by every mixture model:
/// returns `R` and adds `β ∂R/∂·` into `grad` given the component expected
/// log-joint values `a_k` and their gradients.
pub(crate) struct ComponentTerms {
    pub value: Vec<f64>,
    pub g_mean: Vec<DVector<f64>>,
    pub g_cov: Vec<DMatrix<f64>>,
}

pub(crate) fn mixture_regularizer(
    post: &MixturePosterior,
    weights: &DMatrix<f64>,
    terms: &ComponentTerms,
    beta: f64,
    grad: Option<&mut MixtureGradient>,
) -> Result<f64> {
    let n = weights.nrows();
    let k = post.n_components();
    let omega_bar: Vec<f64> = (0..k).map(|j| weights.column(j).sum() / n as f64).collect();
    let covs = post.covariances();
    let ent = huber_entropy(&omega_bar, post.means(), &covs, grad.is_some())?;
    let value = omega_bar.iter().zip(&terms.value).map(|(w, v)| w * v).sum::<f64>() + ent.value;
    if let Some(g) = grad {
        let a: Vec<f64> = (0..k).map(|j| terms.value[j] + ent.grad_weights[j]).collect();
        for j in 0..k {
            g.d_means[j] += (&terms.g_mean[j] * omega_bar[j] + &ent.grad_means[j]) * beta;
            g.d_covs[j] += (&terms.g_cov[j] * omega_bar[j] + &ent.grad_covs[j]) * beta;
        }
        add_averaged_weight_chain(weights, &a, beta, &mut g.d_logits);
    }
    Ok(value)
}

/// Chain `β ∂R/∂ω̄_j = β a_j` through `ω̄ = n⁻¹ Σ_i softmax(z_i)` onto the logits.
pub(crate) fn add_averaged_weight_chain(weights: &DMatrix<f64>, a: &[f64], beta: f64, d_logits: &mut DMatrix<f64>) {
    let n = weights.nrows();
    let k = weights.ncols();
    for i in 0..n {
        let avg: f64 = (0..k).map(|j| a[j] * weights[(i, j)]).sum();
        for j in 0..k {
            d_logits[(i, j)] += beta * weights[(i, j)] * (a[j] - avg) / n as f64;
        }
    }
}

pub(crate) fn batch_rows(n: usize, batch: Option<&[usize]>) -> (Cow<'_, [usize]>, f64) {
    match batch {
        Some(b) if !b.is_empty() && b.len() < n => (Cow::Borrowed(b), n as f64 / b.len() as f64),
        _ => (Cow::Owned((0..n).collect()), 1.0),
    }
}

/// Full evaluation for a GLM likelihood. With `batch`, both data sums are
/// restricted to those rows and scaled by `n / |batch|`; `ω̄` always uses all rows.
#[allow(clippy::too_many_arguments)]
pub(crate) fn evaluate_glm(
    model: &LikelihoodModel,
    prior: &PriorSpec,
    post: &MixturePosterior,
    data: &Dataset,
    quad: &QuadratureRule,
    beta: f64,
    with_grad: bool,
    batch: Option<&[usize]>,
) -> Result<Evaluation> {
    let n = data.n();
    let k = post.n_components();
    let p = post.dim();
    let q = data.n_covariates();
    shape_check(model.param_dim(q) == p, || {
        format!("posterior dimension {p} does not match {q} covariates for this model")
    })?;
    let gating = resolve_gating(post, data);
    let weights = post.weights_matrix(&gating)?;
    let covs = post.covariances();
    let (rows, scale) = batch_rows(n, batch);
    let nb = rows.len();
    let xb: Cow<DMatrix<f64>> = if nb == n { Cow::Borrowed(&data.x) } else { Cow::Owned(data.x.select_rows(rows.iter())) };
    let yb: Vec<f64> = rows.iter().map(|&i| data.y[i]).collect();

    // log I_ik and partials for the score; expected log-likelihood per component.
    let mut log_i = DMatrix::zeros(nb, k);
    let mut score_dm = DMatrix::zeros(nb, k);
    let mut score_dv = DMatrix::zeros(nb, k);
    let mut ell_dm = DMatrix::zeros(nb, k);
    let mut ell_dv = DMatrix::zeros(nb, k);
    // unknown-variance extra partials: ∂c, ∂μ_τ, ∂S
    let unknown = matches!(model, LikelihoodModel::GaussianUnknownVariance);
    let mut uv_dc = if unknown { DMatrix::zeros(nb, k) } else { DMatrix::zeros(0, 0) };
    let mut uv_dtau = if unknown { DMatrix::zeros(nb, k) } else { DMatrix::zeros(0, 0) };
    let mut uv_ds = if unknown { DMatrix::zeros(nb, k) } else { DMatrix::zeros(0, 0) };
    let mut terms = ComponentTerms {
        value: vec![0.0; k],
        g_mean: vec![DVector::zeros(p); k],
        g_cov: vec![DMatrix::zeros(p, p); k],
    };
    let mut row = vec![0.0; q];

    for j in 0..k {
        let mean = &post.means()[j];
        let cov = &covs[j];
        if unknown {
            let yv = DVector::from_column_slice(&yb);
            let ell = expected_loglik_term(model, &xb, &yv, mean, cov, quad);
            terms.value[j] = scale * ell.value;
            terms.g_mean[j] = ell.g_mean * scale;
            terms.g_cov[j] = ell.g_cov * scale;
            for r in 0..nb {
                for (c, v) in row.iter_mut().enumerate() {
                    *v = xb[(r, c)];
                }
                let g = unknown_variance_predictive(yb[r], unknown_variance_stats(&row, mean, cov), quad);
                log_i[(r, j)] = g.log;
                score_dm[(r, j)] = g.d_a;
                score_dv[(r, j)] = g.d_d;
                uv_dc[(r, j)] = g.d_c;
                uv_dtau[(r, j)] = g.d_mu_tau;
                uv_ds[(r, j)] = g.d_s_tt;
            }
        } else {
            let m = &*xb * mean;
            let xc = &*xb * post.factors()[j].factor();
            let mut ell = 0.0;
            for r in 0..nb {
                let v = xc.row(r).norm_squared();
                let (li, ex) = glm_kernel(model, yb[r], m[r], v, quad, true);
                log_i[(r, j)] = li.log;
                score_dm[(r, j)] = li.d_m;
                score_dv[(r, j)] = li.d_v;
                ell += ex.value;
                ell_dm[(r, j)] = ex.d_m;
                ell_dv[(r, j)] = ex.d_v;
            }
            terms.value[j] = scale * ell;
        }
        let prior_term = expected_log_prior_term(prior, mean, cov)?;
        terms.value[j] += prior_term.value;
        if with_grad {
            if !unknown {
                terms.g_mean[j] = xb.transpose() * ell_dm.column(j) * scale;
                terms.g_cov[j] = weighted_gram(&xb, &ell_dv.column(j).into_owned()) * scale;
            }
            terms.g_mean[j] += prior_term.g_mean;
            terms.g_cov[j] += prior_term.g_cov;
        }
    }

    // Score with responsibilities.
    let floor = log_density_floor();
    let mut score = 0.0;
    let mut floored = 0;
    let mut resp = DMatrix::zeros(nb, k);
    let mut buf = vec![0.0; k];
    for r in 0..nb {
        let i = rows[r];
        for j in 0..k {
            buf[j] = weights[(i, j)].ln() + log_i[(r, j)];
        }
        let s = crate::gaussian::log_sum_exp(&buf);
        if s < floor || !s.is_finite() {
            score += floor;
            floored += 1;
        } else {
            score += s;
            for j in 0..k {
                resp[(r, j)] = (buf[j] - s).exp();
            }
        }
    }
    score *= scale;

    let mut grad = with_grad.then(|| MixtureGradient::zeros(n, k, p));
    let regularizer = mixture_regularizer(post, &weights, &terms, beta, grad.as_mut())?;
    let objective = score + beta * regularizer;

    let gradient = match grad {
        None => Vec::new(),
        Some(mut g) => {
            for r in 0..nb {
                let i = rows[r];
                let active = resp.row(r).iter().any(|v| *v > 0.0);
                if active {
                    for j in 0..k {
                        g.d_logits[(i, j)] += scale * (resp[(r, j)] - weights[(i, j)]);
                    }
                }
            }
            let pb = if unknown { q } else { p };
            for j in 0..k {
                let coef_m = resp.column(j).component_mul(&score_dm.column(j)) * scale;
                let coef_v = resp.column(j).component_mul(&score_dv.column(j)) * scale;
                let gm = xb.transpose() * &coef_m;
                let gv = weighted_gram(&xb, &coef_v);
                g.d_means[j].rows_mut(0, pb).add_assign(&gm);
                g.d_covs[j].view_mut((0, 0), (pb, pb)).add_assign(&gv);
                if unknown {
                    let coef_c = resp.column(j).component_mul(&uv_dc.column(j)) * scale;
                    let gc = xb.transpose() * &coef_c * 0.5;
                    for c in 0..q {
                        g.d_covs[j][(c, q)] += gc[c];
                        g.d_covs[j][(q, c)] += gc[c];
                    }
                    g.d_means[j][q] += scale * resp.column(j).dot(&uv_dtau.column(j));
                    g.d_covs[j][(q, q)] += scale * resp.column(j).dot(&uv_ds.column(j));
                }
            }
            g.flatten(post, &gating)
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

use std::ops::AddAssign;

fn check_inputs(model: &LikelihoodModel, data: &Dataset, post: &MixturePosterior, cfg: &ObjectiveConfig) -> Result<QuadratureRule> {
    cfg.validate()?;
    if data.n() == 0 {
        return Err(PviError::EmptyData("objective needs at least one observation".into()));
    }
    model.check_data(data)?;
    shape_check(model.param_dim(data.n_covariates()) == post.dim(), || {
        format!("posterior dimension {} does not match the data", post.dim())
    })?;
    gauss_hermite_rule(cfg.quad_order)
}

pub fn pvi_evaluate(
    model: &LikelihoodModel,
    prior: &PriorSpec,
    post: &MixturePosterior,
    data: &Dataset,
    cfg: &ObjectiveConfig,
    with_grad: bool,
) -> Result<Evaluation> {
    let quad = check_inputs(model, data, post, cfg)?;
    evaluate_glm(model, prior, post, data, &quad, cfg.beta, with_grad, None)
}

pub fn pvi_objective(
    model: &LikelihoodModel,
    prior: &PriorSpec,
    post: &MixturePosterior,
    data: &Dataset,
    cfg: &ObjectiveConfig,
) -> Result<f64> {
    Ok(pvi_evaluate(model, prior, post, data, cfg, false)?.objective)
}

/// Gradient over the flat parameters `(η, μ, vech(C*))` of [`MixturePosterior::to_flat`].
pub fn pvi_gradient(
    model: &LikelihoodModel,
    prior: &PriorSpec,
    post: &MixturePosterior,
    data: &Dataset,
    cfg: &ObjectiveConfig,
) -> Result<Vec<f64>> {
    let e = pvi_evaluate(model, prior, post, data, cfg, true)?;
    if e.gradient.iter().any(|g| !g.is_finite()) {
        return Err(PviError::Numerical("non-finite gradient".into()));
    }
    Ok(e.gradient)
}

/// Remove every component that is not the argmax gating weight for some training row.
pub fn prune_components(post: &MixturePosterior, data: &Dataset) -> Result<(MixturePosterior, Vec<usize>)> {
    if data.n() == 0 {
        return Err(PviError::EmptyData("pruning needs at least one observation".into()));
    }
    let w = post.weights_matrix(&resolve_gating(post, data))?;
    let removed = crate::optimizer::dominated_components(&w);
    let mut out = post.clone();
    out.remove_components(&removed, true);
    Ok((out, removed))
}

/// A GLM fitting problem over a fixed dataset.
pub struct GlmProblem<'a> {
    pub model: LikelihoodModel,
    pub prior: PriorSpec,
    pub data: &'a Dataset,
    pub quad: QuadratureRule,
}

impl<'a> GlmProblem<'a> {
    pub fn new(model: LikelihoodModel, prior: PriorSpec, data: &'a Dataset, quad_order: usize) -> Result<Self> {
        model.check_data(data)?;
        Ok(GlmProblem {
            model,
            prior,
            data,
            quad: gauss_hermite_rule(quad_order)?,
        })
    }
}

impl PviProblem for GlmProblem<'_> {
    type Params = MixturePosterior;

    fn n_obs(&self) -> usize {
        self.data.n()
    }

    fn evaluate(&self, params: &MixturePosterior, beta: f64, with_grad: bool, batch: Option<&[usize]>) -> Result<Evaluation> {
        evaluate_glm(&self.model, &self.prior, params, self.data, &self.quad, beta, with_grad, batch)
    }

    fn training_weights(&self, params: &MixturePosterior) -> Result<DMatrix<f64>> {
        params.weights_matrix(&resolve_gating(params, self.data))
    }

    fn initialize(&self, k: usize, rng: &mut ChaCha20Rng) -> Result<MixturePosterior> {
        let dim = self.model.param_dim(self.data.n_covariates());
        random_mixture(k, dim, self.data.gating_matrix().ncols(), rng)
    }
}

pub fn fit(
    model: &LikelihoodModel,
    prior: &PriorSpec,
    data: &Dataset,
    obj_cfg: &ObjectiveConfig,
    fit_cfg: &FitConfig,
) -> Result<FitResult<MixturePosterior>> {
    obj_cfg.validate()?;
    let problem = GlmProblem::new(*model, prior.clone(), data, obj_cfg.quad_order)?;
    fit_problem(&problem, obj_cfg.beta, fit_cfg)
}
