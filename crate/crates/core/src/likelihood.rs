//! Model-specific closed forms: Gaussian expectations of log priors and
//! log-likelihoods, and mixture predictive densities.
//!
//! Every likelihood here depends on the parameters through a scalar linear
//! predictor, so an expectation under `φ(θ; μ, Σ)` reduces to a one-dimensional
//! integral over `N(xᵀμ, xᵀΣx)`. The kernels below return the value together
//! with partial derivatives in `(m, v) = (xᵀμ, xᵀΣx)`, which the objective
//! pulls back onto `μ` and `Σ`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{shape_check, PviError, Result};
use crate::family::MixturePosterior;
use crate::gaussian::{cholesky, log_sum_exp, normal_logpdf, LN_2PI};
use crate::quadrature::QuadratureRule;

/// Densities below this are floored before taking logs.
pub const DENSITY_FLOOR: f64 = 1e-300;

pub fn log_density_floor() -> f64 {
    DENSITY_FLOOR.ln()
}

#[derive(Debug, Clone, PartialEq)]
pub enum PriorSpec {
    /// `N(0, τ² I)`.
    Isotropic { sd: f64 },
    /// `N(0, Ω)`; the inverse and log-determinant are cached.
    General {
        cov: DMatrix<f64>,
        precision: DMatrix<f64>,
        log_det: f64,
    },
}

impl PriorSpec {
    pub fn isotropic(sd: f64) -> Result<Self> {
        if !(sd > 0.0 && sd.is_finite()) {
            return Err(PviError::Config(format!("prior sd must be positive, got {sd}")));
        }
        Ok(PriorSpec::Isotropic { sd })
    }

    pub fn general(cov: DMatrix<f64>) -> Result<Self> {
        let chol = cholesky(&cov)?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let precision = chol.inverse();
        Ok(PriorSpec::General { cov, precision, log_det })
    }

    pub fn diagonal(variances: &[f64]) -> Result<Self> {
        Self::general(DMatrix::from_diagonal(&DVector::from_column_slice(variances)))
    }
}

/// Value plus gradients of a Gaussian expectation with respect to `(μ, Σ)`.
/// `g_cov` is the symmetric matrix with `dF = tr(g_cov dΣ)`.
#[derive(Debug, Clone)]
pub struct GaussianTerm {
    pub value: f64,
    pub g_mean: DVector<f64>,
    pub g_cov: DMatrix<f64>,
}

pub fn expected_log_prior(prior: &PriorSpec, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    Ok(expected_log_prior_term(prior, mean, cov)?.value)
}

pub(crate) fn expected_log_prior_term(prior: &PriorSpec, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<GaussianTerm> {
    let p = mean.len();
    shape_check(cov.nrows() == p && cov.ncols() == p, || format!("mean {p} vs covariance {}", cov.nrows()))?;
    match prior {
        PriorSpec::Isotropic { sd } => {
            let t2 = sd * sd;
            let value = -0.5 * p as f64 * (LN_2PI + t2.ln()) - (mean.norm_squared() + cov.trace()) / (2.0 * t2);
            Ok(GaussianTerm {
                value,
                g_mean: -mean / t2,
                g_cov: DMatrix::identity(p, p) * (-0.5 / t2),
            })
        }
        PriorSpec::General { precision, log_det, .. } => {
            shape_check(precision.nrows() == p, || format!("prior dimension {} vs {p}", precision.nrows()))?;
            let pm = precision * mean;
            let value = -0.5 * (p as f64 * LN_2PI + log_det + mean.dot(&pm) + (precision.component_mul(cov)).sum());
            Ok(GaussianTerm {
                value,
                g_mean: -pm,
                g_cov: precision * -0.5,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LikelihoodModel {
    GaussianFixed { variance: f64 },
    /// `θ = (βᵀ, log σ²)ᵀ`: one more parameter than covariates.
    GaussianUnknownVariance,
    Logistic,
    Poisson,
}

impl LikelihoodModel {
    pub fn param_dim(&self, n_covariates: usize) -> usize {
        match self {
            LikelihoodModel::GaussianUnknownVariance => n_covariates + 1,
            _ => n_covariates,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let LikelihoodModel::GaussianFixed { variance } = self {
            if !(*variance > 0.0 && variance.is_finite()) {
                return Err(PviError::Config(format!("noise variance must be positive, got {variance}")));
            }
        }
        Ok(())
    }

    pub fn check_response(&self, y: f64) -> Result<()> {
        match self {
            LikelihoodModel::Logistic if y != 0.0 && y != 1.0 => {
                Err(PviError::Data(format!("logistic response must be 0 or 1, got {y}")))
            }
            LikelihoodModel::Poisson if !(y >= 0.0 && y.fract() == 0.0) => {
                Err(PviError::Data(format!("Poisson response must be a non-negative integer, got {y}")))
            }
            _ => Ok(()),
        }
    }

    pub fn check_data(&self, data: &Dataset) -> Result<()> {
        self.validate()?;
        data.y.iter().try_for_each(|y| self.check_response(*y))
    }

    /// `log p(y | η)` for a linear predictor `η` (the noise variance for the
    /// unknown-variance model is passed separately via `log_var`).
    pub fn log_lik(&self, y: f64, eta: f64, log_var: f64) -> f64 {
        match self {
            LikelihoodModel::GaussianFixed { variance } => normal_logpdf(y, eta, *variance),
            LikelihoodModel::GaussianUnknownVariance => normal_logpdf(y, eta, log_var.exp()),
            LikelihoodModel::Logistic => bernoulli_logit_logpmf(y, eta),
            LikelihoodModel::Poisson => y * eta - eta.exp() - ln_factorial(y),
        }
    }

    /// `log p(y | θ)` at a full parameter vector.
    pub fn log_lik_theta(&self, y: f64, x: &[f64], theta: &DVector<f64>) -> f64 {
        let eta: f64 = x.iter().zip(theta.iter()).map(|(a, b)| a * b).sum();
        let log_var = match self {
            LikelihoodModel::GaussianUnknownVariance => theta[theta.len() - 1],
            _ => 0.0,
        };
        self.log_lik(y, eta, log_var)
    }
}

pub fn ln_factorial(y: f64) -> f64 {
    libm::lgamma(y + 1.0)
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn bernoulli_logit_logpmf(y: f64, eta: f64) -> f64 {
    if y == 1.0 {
        -softplus(-eta)
    } else {
        -softplus(eta)
    }
}

/// Log of a one-dimensional predictive integral and its partials in `(m, v)`.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct LogIntegral {
    pub log: f64,
    pub d_m: f64,
    pub d_v: f64,
}

/// Gaussian expectation `E[log p(y | m + √v W)]` and its partials in `(m, v)`.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Expectation {
    pub value: f64,
    pub d_m: f64,
    pub d_v: f64,
}

/// Predictive integral and expected log-likelihood for one observation under
/// `N(m, v)` on the linear predictor, sharing the quadrature nodes.
/// Not valid for the unknown-variance model, which has its own kernels.
pub(crate) fn glm_kernel(
    model: &LikelihoodModel,
    y: f64,
    m: f64,
    v: f64,
    quad: &QuadratureRule,
    want_expectation: bool,
) -> (LogIntegral, Expectation) {
    match model {
        LikelihoodModel::GaussianFixed { variance } => {
            let total = v + variance;
            let r = y - m;
            let li = LogIntegral {
                log: normal_logpdf(y, m, total),
                d_m: r / total,
                d_v: -0.5 / total + 0.5 * r * r / (total * total),
            };
            let ex = Expectation {
                value: -0.5 * (LN_2PI + variance.ln()) - (r * r + v) / (2.0 * variance),
                d_m: r / variance,
                d_v: -0.5 / variance,
            };
            (li, ex)
        }
        LikelihoodModel::Logistic => logistic_kernel(y, m, v, quad, want_expectation)
            .unwrap_or_else(|| quadrature_kernel_log_space(model, y, m, v, quad, want_expectation)),
        LikelihoodModel::Poisson => quadrature_kernel_log_space(model, y, m, v, quad, want_expectation),
        LikelihoodModel::GaussianUnknownVariance => {
            unreachable!("the unknown-variance model uses its own kernels")
        }
    }
}

/// Logistic kernel in linear space: one `exp` and one `ln_1p` per node. Returns
/// `None` when the integral underflows, so the caller can redo it in log space.
fn logistic_kernel(y: f64, m: f64, v: f64, quad: &QuadratureRule, want_expectation: bool) -> Option<(LogIntegral, Expectation)> {
    let s = v.max(0.0).sqrt();
    let use_price = s < 1e-10;
    // log p(y | η) = log σ(sign·η)
    let sign = if y == 1.0 { 1.0 } else { -1.0 };
    let (mut total, mut acc_m, mut acc_v, mut acc_dd) = (0.0, 0.0, 0.0, 0.0);
    let (mut value, mut e_m, mut e_v) = (0.0, 0.0, 0.0);
    for (&w, &node) in quad.weights().iter().zip(quad.nodes()) {
        let t = sign * (m + s * node);
        let e = (-t.abs()).exp();
        let p = if t >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
        let dl = sign * (1.0 - p);
        let d2 = -p * (1.0 - p);
        let wp = w * p;
        total += wp;
        acc_m += wp * dl;
        acc_v += wp * dl * node;
        acc_dd += wp * (d2 + dl * dl);
        if want_expectation {
            value -= w * ((-t).max(0.0) + e.ln_1p());
            e_m += w * dl;
            e_v += if use_price { 0.5 * w * d2 } else { w * dl * node };
        }
    }
    if !(total > 1e-280) {
        return None;
    }
    let li = LogIntegral {
        log: total.ln(),
        d_m: acc_m / total,
        d_v: if use_price {
            0.5 * acc_dd / total - 0.5 * (acc_m / total).powi(2)
        } else {
            acc_v / (2.0 * s * total)
        },
    };
    let ex = Expectation {
        value,
        d_m: e_m,
        d_v: if use_price { e_v } else { e_v / (2.0 * s) },
    };
    Some((li, ex))
}

/// Quadrature kernel for the logistic and Poisson models with log-sum-exp
/// stabilization of the predictive integral.
fn quadrature_kernel_log_space(
    model: &LikelihoodModel,
    y: f64,
    m: f64,
    v: f64,
    quad: &QuadratureRule,
    want_expectation: bool,
) -> (LogIntegral, Expectation) {
    let s = v.max(0.0).sqrt();
    let poisson = matches!(model, LikelihoodModel::Poisson);
    let log_fact = if poisson { ln_factorial(y) } else { 0.0 };
    let nodes = quad.nodes();
    let weights = quad.weights();
    let log_w = quad.log_weights();
    let b_count = nodes.len();

    // First pass: log terms and their max.
    let mut lp = [0.0f64; crate::quadrature::MAX_ORDER];
    let mut dl = [0.0f64; crate::quadrature::MAX_ORDER];
    let mut d2 = [0.0f64; crate::quadrature::MAX_ORDER];
    let mut max = f64::NEG_INFINITY;
    for b in 0..b_count {
        let eta = m + s * nodes[b];
        let (l, d, dd) = if poisson {
            let e = eta.exp();
            (y * eta - e - log_fact, y - e, -e)
        } else {
            let sg = sigmoid(eta);
            (bernoulli_logit_logpmf(y, eta), y - sg, -sg * (1.0 - sg))
        };
        lp[b] = l;
        dl[b] = d;
        d2[b] = dd;
        let t = log_w[b] + l;
        if t > max {
            max = t;
        }
    }
    let mut total = 0.0;
    let mut acc_m = 0.0;
    let mut acc_v = 0.0;
    let mut acc_dd = 0.0;
    for b in 0..b_count {
        let pi = (log_w[b] + lp[b] - max).exp();
        total += pi;
        acc_m += pi * dl[b];
        acc_v += pi * dl[b] * nodes[b];
        acc_dd += pi * (d2[b] + dl[b] * dl[b]);
    }
    let log_i = max + total.ln();
    let use_price = s < 1e-10;
    let li = LogIntegral {
        log: log_i,
        d_m: acc_m / total,
        // d/dv log I; Price's identity in the degenerate limit.
        d_v: if use_price {
            0.5 * acc_dd / total - 0.5 * (acc_m / total).powi(2)
        } else {
            acc_v / (2.0 * s * total)
        },
    };
    let ex = if want_expectation {
        if poisson {
            let e = (m + 0.5 * v).exp();
            Expectation {
                value: y * m - e - log_fact,
                d_m: y - e,
                d_v: -0.5 * e,
            }
        } else {
            let mut value = 0.0;
            let mut d_m = 0.0;
            let mut d_v = 0.0;
            for b in 0..b_count {
                value += weights[b] * lp[b];
                d_m += weights[b] * dl[b];
                d_v += if use_price { 0.5 * weights[b] * d2[b] } else { weights[b] * dl[b] * nodes[b] };
            }
            if !use_price {
                d_v /= 2.0 * s;
            }
            Expectation { value, d_m, d_v }
        }
    } else {
        Expectation::default()
    };
    (li, ex)
}

/// Sufficient quadratic forms for one observation under the unknown-variance model.
#[derive(Debug, Clone, Copy)]
pub(crate) struct UnknownVarianceStats {
    /// `xᵀμ_β`
    pub a: f64,
    /// `μ_τ`
    pub mu_tau: f64,
    /// `Σ_ττ`
    pub s_tt: f64,
    /// `xᵀΣ_βτ`
    pub c: f64,
    /// `xᵀΣ_ββx`
    pub d: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct UnknownVarianceGrad {
    pub log: f64,
    pub d_a: f64,
    pub d_mu_tau: f64,
    pub d_s_tt: f64,
    pub d_c: f64,
    pub d_d: f64,
}

/// Predictive integral over `τ = log σ²` by quadrature, conditioning `β` on `τ`.
pub(crate) fn unknown_variance_predictive(y: f64, st: UnknownVarianceStats, quad: &QuadratureRule) -> UnknownVarianceGrad {
    let s_sqrt = st.s_tt.sqrt();
    let q = (st.d - st.c * st.c / st.s_tt).max(0.0);
    let nodes = quad.nodes();
    let log_w = quad.log_weights();
    let b_count = nodes.len();
    let mut lp = [0.0f64; crate::quadrature::MAX_ORDER];
    let mut max = f64::NEG_INFINITY;
    for b in 0..b_count {
        let w = nodes[b];
        let e = (st.mu_tau + s_sqrt * w).exp();
        let mean = st.a + st.c * w / s_sqrt;
        lp[b] = log_w[b] + normal_logpdf(y, mean, q + e);
        max = max.max(lp[b]);
    }
    let mut total = 0.0;
    let mut g = UnknownVarianceGrad::default();
    for b in 0..b_count {
        let w = nodes[b];
        let pi = (lp[b] - max).exp();
        total += pi;
        let e = (st.mu_tau + s_sqrt * w).exp();
        let mean = st.a + st.c * w / s_sqrt;
        let var = q + e;
        let u = (y - mean) / var;
        let h = -0.5 / var + 0.5 * u * u;
        g.d_a += pi * u;
        g.d_c += pi * (u * w / s_sqrt - h * 2.0 * st.c / st.s_tt);
        g.d_d += pi * h;
        g.d_mu_tau += pi * h * e;
        g.d_s_tt += pi
            * (u * (-0.5 * st.c * w / (st.s_tt * s_sqrt))
                + h * (st.c * st.c / (st.s_tt * st.s_tt) + e * w / (2.0 * s_sqrt)));
    }
    g.log = max + total.ln();
    g.d_a /= total;
    g.d_c /= total;
    g.d_d /= total;
    g.d_mu_tau /= total;
    g.d_s_tt /= total;
    g
}

pub(crate) fn unknown_variance_stats(x: &[f64], mean: &DVector<f64>, cov: &DMatrix<f64>) -> UnknownVarianceStats {
    let p = x.len();
    let mut a = 0.0;
    let mut c = 0.0;
    let mut d = 0.0;
    for j in 0..p {
        a += x[j] * mean[j];
        c += x[j] * cov[(j, p)];
        for l in 0..p {
            d += x[j] * cov[(j, l)] * x[l];
        }
    }
    UnknownVarianceStats {
        a,
        mu_tau: mean[p],
        s_tt: cov[(p, p)],
        c,
        d,
    }
}

/// `E_{φ(θ; μ, Σ)} log p(y | θ)` summed over the data, with gradients.
pub(crate) fn expected_loglik_term(
    model: &LikelihoodModel,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    quad: &QuadratureRule,
) -> GaussianTerm {
    let n = x.nrows();
    let p = x.ncols();
    match model {
        LikelihoodModel::GaussianUnknownVariance => {
            let mu_beta = mean.rows(0, p).into_owned();
            let mu_tau = mean[p];
            let s_bt = cov.view((0, p), (p, 1)).column(0).into_owned();
            let s_tt = cov[(p, p)];
            let s_bb = cov.view((0, 0), (p, p)).into_owned();
            let tilted = &mu_beta - &s_bt;
            let resid = y - x * &tilted;
            let xs = x * &s_bb;
            let quad_sum: f64 = (0..n).map(|i| xs.row(i).dot(&x.row(i))).sum();
            let r_total = resid.norm_squared() + quad_sum;
            let e = (-mu_tau + 0.5 * s_tt).exp();
            let nf = n as f64;
            let value = -0.5 * nf * LN_2PI - 0.5 * nf * mu_tau - 0.5 * e * r_total;

            let xr = x.transpose() * &resid;
            let mut g_mean = DVector::zeros(p + 1);
            g_mean.rows_mut(0, p).copy_from(&(&xr * e));
            g_mean[p] = -0.5 * nf + 0.5 * e * r_total;
            let mut g_cov = DMatrix::zeros(p + 1, p + 1);
            g_cov.view_mut((0, 0), (p, p)).copy_from(&(x.transpose() * x * (-0.5 * e)));
            for j in 0..p {
                g_cov[(j, p)] = -0.5 * e * xr[j];
                g_cov[(p, j)] = -0.5 * e * xr[j];
            }
            g_cov[(p, p)] = -0.25 * e * r_total;
            GaussianTerm { value, g_mean, g_cov }
        }
        _ => {
            let m = x * mean;
            let xs = x * cov;
            let mut value = 0.0;
            let mut d_m = DVector::zeros(n);
            let mut d_v = DVector::zeros(n);
            for i in 0..n {
                let v = xs.row(i).dot(&x.row(i));
                let (_, ex) = glm_kernel(model, y[i], m[i], v, quad, true);
                value += ex.value;
                d_m[i] = ex.d_m;
                d_v[i] = ex.d_v;
            }
            let g_mean = x.transpose() * &d_m;
            let g_cov = weighted_gram(x, &d_v);
            GaussianTerm { value, g_mean, g_cov }
        }
    }
}

/// `Xᵀ diag(w) X`.
pub(crate) fn weighted_gram(x: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut scaled = x.clone();
    for (i, wi) in w.iter().enumerate() {
        scaled.row_mut(i).scale_mut(*wi);
    }
    x.transpose() * scaled
}

pub fn expected_loglik(
    model: &LikelihoodModel,
    data: &Dataset,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    quad: &QuadratureRule,
) -> Result<f64> {
    model.check_data(data)?;
    let dim = model.param_dim(data.n_covariates());
    shape_check(mean.len() == dim && cov.nrows() == dim && cov.ncols() == dim, || {
        format!("parameter dimension {dim} expected, got mean {} / covariance {}", mean.len(), cov.nrows())
    })?;
    cholesky(cov)?;
    Ok(expected_loglik_term(model, &data.x, &data.y, mean, cov, quad).value)
}

/// Log of the single-Gaussian predictive integral `∫ p(y | x, θ) φ(θ; μ, Σ) dθ`.
pub(crate) fn component_log_predictive(
    model: &LikelihoodModel,
    x: &[f64],
    y: f64,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    quad: &QuadratureRule,
) -> f64 {
    match model {
        LikelihoodModel::GaussianUnknownVariance => {
            unknown_variance_predictive(y, unknown_variance_stats(x, mean, cov), quad).log
        }
        _ => {
            let xv = DVector::from_column_slice(x);
            let m = xv.dot(mean);
            let v = (cov * &xv).dot(&xv);
            glm_kernel(model, y, m, v, quad, false).0.log
        }
    }
}

fn gating_input<'a>(post: &MixturePosterior, x: &'a [f64]) -> Result<std::borrow::Cow<'a, [f64]>> {
    if post.gating_dim() == x.len() {
        Ok(std::borrow::Cow::Borrowed(x))
    } else if post.gating_dim() == 1 {
        Ok(std::borrow::Cow::Owned(vec![1.0]))
    } else {
        Err(PviError::Shape(format!(
            "cannot derive a gating input of length {} from a design row of length {}",
            post.gating_dim(),
            x.len()
        )))
    }
}

/// The data's gating matrix, or an intercept column when the posterior has
/// covariate-independent weights.
pub fn resolve_gating<'a>(post: &MixturePosterior, data: &'a Dataset) -> std::borrow::Cow<'a, DMatrix<f64>> {
    let g = data.gating_matrix();
    if post.gating_dim() == 1 && g.ncols() != 1 {
        std::borrow::Cow::Owned(DMatrix::from_element(data.n(), 1, 1.0))
    } else {
        std::borrow::Cow::Borrowed(g)
    }
}

/// Log predictive density (or mass) of `y` at design row `x`, with gating input
/// `gating` (defaults to `x` itself, or to an intercept for constant weights).
pub fn log_predictive_density(
    model: &LikelihoodModel,
    post: &MixturePosterior,
    x: &[f64],
    gating: Option<&[f64]>,
    y: f64,
    quad: &QuadratureRule,
) -> Result<f64> {
    model.check_response(y)?;
    shape_check(model.param_dim(x.len()) == post.dim(), || {
        format!("design row of length {} does not fit parameter dimension {}", x.len(), post.dim())
    })?;
    let g = match gating {
        Some(g) => std::borrow::Cow::Borrowed(g),
        None => gating_input(post, x)?,
    };
    let weights = post.mixture_weights(&g)?;
    let covs = post.covariances();
    let terms: Vec<f64> = (0..post.n_components())
        .map(|k| weights[k].ln() + component_log_predictive(model, x, y, &post.means()[k], &covs[k], quad))
        .collect();
    Ok(log_sum_exp(&terms))
}

pub fn predictive_density(
    model: &LikelihoodModel,
    post: &MixturePosterior,
    x: &[f64],
    y: f64,
    quad: &QuadratureRule,
) -> Result<f64> {
    Ok(log_predictive_density(model, post, x, None, y, quad)?.exp())
}

/// `Σ_i log q(y_i | x_i)` with each term floored at `log(1e-300)`.
pub fn log_score_sum(model: &LikelihoodModel, post: &MixturePosterior, data: &Dataset, quad: &QuadratureRule) -> Result<f64> {
    Ok(pointwise_log_scores(model, post, data, quad)?.iter().sum())
}

pub fn pointwise_log_scores(
    model: &LikelihoodModel,
    post: &MixturePosterior,
    data: &Dataset,
    quad: &QuadratureRule,
) -> Result<Vec<f64>> {
    if data.n() == 0 {
        return Err(PviError::EmptyData("log score needs at least one observation".into()));
    }
    model.check_data(data)?;
    let floor = log_density_floor();
    let gating = resolve_gating(post, data);
    let covs = post.covariances();
    let weights = post.weights_matrix(&gating)?;
    shape_check(model.param_dim(data.n_covariates()) == post.dim(), || {
        format!("data has {} covariates but the posterior dimension is {}", data.n_covariates(), post.dim())
    })?;
    let mut out = Vec::with_capacity(data.n());
    let mut row = vec![0.0; data.n_covariates()];
    let mut terms = vec![0.0; post.n_components()];
    for i in 0..data.n() {
        for (j, r) in row.iter_mut().enumerate() {
            *r = data.x[(i, j)];
        }
        for k in 0..post.n_components() {
            terms[k] = weights[(i, k)].ln() + component_log_predictive(model, &row, data.y[i], &post.means()[k], &covs[k], quad);
        }
        out.push(log_sum_exp(&terms).max(floor));
    }
    Ok(out)
}
