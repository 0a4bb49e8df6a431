//! Latent Gaussian process regression with inducing points and a gated
//! mixture over the inducing values.
//!
//! `f̆ = f(Z)` has prior `N(0, K_ZZ)`; the family is
//! `q(f, f̆ | x) = p(f | f̆) Σ_k ω_k(x) N(f̆; μ_k, diag(s_k))`, with a point value
//! of the noise variance `σ²_k` per component. Marginally `f(X)` under component
//! `k` is `N(A μ_k, C + A diag(s_k) Aᵀ)` with `A = K_XZ K_ZZ⁻¹` and
//! `C = K_XX − A K_ZX`.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{shape_check, PviError, Result};
use crate::family::softmax;
use crate::gaussian::{log_sum_exp, normal_logpdf, LN_2PI};
use crate::likelihood::log_density_floor;
use crate::objective::{add_averaged_weight_chain, batch_rows};
use crate::optimizer::{fit_problem, fmt17, Evaluation, FitConfig, FitResult, Owner, PviProblem, VariationalParams};
use crate::rng::{stream, Stream};
use crate::selection::waic_pointwise;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KernelSpec {
    pub length_scale: f64,
    pub signal_var: f64,
    pub jitter: f64,
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec {
            length_scale: 0.3,
            signal_var: 1.0,
            jitter: 1e-8,
        }
    }
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.length_scale > 0.0 && self.signal_var > 0.0 && self.jitter >= 0.0) {
            return Err(PviError::Config("kernel hyperparameters must be positive".into()));
        }
        Ok(())
    }

    /// Squared-exponential covariance between two input rows.
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        self.signal_var * (-0.5 * d2 / (self.length_scale * self.length_scale)).exp()
    }

    pub fn matrix(&self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
        let xr = rows(x);
        let yr = rows(y);
        DMatrix::from_fn(x.nrows(), y.nrows(), |i, j| self.eval(&xr[i], &yr[j]))
    }

    /// `K(Z, Z) + jitter · I`.
    pub fn gram(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let mut k = self.matrix(z, z);
        for i in 0..k.nrows() {
            k[(i, i)] += self.jitter;
        }
        k
    }
}

fn rows(x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..x.nrows()).map(|i| x.row(i).iter().copied().collect()).collect()
}

/// `A = K_XZ K_ZZ⁻¹` and `C = K_XX − A K_ZX`.
#[derive(Debug, Clone)]
pub struct GpProjection {
    pub a: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

impl GpProjection {
    pub fn new(kernel: &KernelSpec, x: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<Self> {
        let kzz = kernel.gram(z);
        let chol = kzz
            .cholesky()
            .ok_or_else(|| PviError::Factorization("inducing kernel matrix is not positive definite".into()))?;
        let kxz = kernel.matrix(x, z);
        let a = chol.solve(&kxz.transpose()).transpose();
        let c = kernel.matrix(x, x) - &a * kxz.transpose();
        Ok(GpProjection { a, c })
    }
}

/// Inducing-value mixture with per-component noise variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InducingPosterior {
    /// Inducing inputs, `m × d`.
    pub z: DMatrix<f64>,
    pub means: Vec<DVector<f64>>,
    /// `log` of the diagonal of each `Σ_k`.
    pub log_vars: Vec<DVector<f64>>,
    /// Gating vectors for components `2..K` on the input `(1, x)`.
    pub eta: Vec<DVector<f64>>,
    /// `log σ²_k`.
    pub log_noise: Vec<f64>,
}

impl InducingPosterior {
    pub fn n_components(&self) -> usize {
        self.means.len()
    }

    pub fn n_inducing(&self) -> usize {
        self.z.nrows()
    }

    pub fn noise_vars(&self) -> Vec<f64> {
        self.log_noise.iter().map(|v| v.exp()).collect()
    }

    pub fn variances(&self) -> Vec<DVector<f64>> {
        self.log_vars.iter().map(|v| v.map(f64::exp)).collect()
    }

    /// Gating weights at input row `x` (without the intercept).
    pub fn weights(&self, x: &[f64]) -> Vec<f64> {
        let g: Vec<f64> = std::iter::once(1.0).chain(x.iter().copied()).collect();
        let logits: Vec<f64> = std::iter::once(0.0).chain(self.eta.iter().map(|e| e.iter().zip(&g).map(|(a, b)| a * b).sum())).collect();
        softmax(&logits)
    }

    pub fn weights_matrix(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut w = DMatrix::zeros(x.nrows(), self.n_components());
        for i in 0..x.nrows() {
            let row: Vec<f64> = x.row(i).iter().copied().collect();
            for (j, v) in self.weights(&row).into_iter().enumerate() {
                w[(i, j)] = v;
            }
        }
        w
    }

    fn remove(&mut self, removed: &[usize]) {
        let k = self.n_components();
        let keep: Vec<usize> = (0..k).filter(|j| !removed.contains(j)).collect();
        if keep.is_empty() {
            return;
        }
        let gd = self.z.ncols() + 1;
        let full: Vec<DVector<f64>> = std::iter::once(DVector::zeros(gd)).chain(self.eta.iter().cloned()).collect();
        let anchor = full[keep[0]].clone();
        self.eta = keep[1..].iter().map(|&j| &full[j] - &anchor).collect();
        self.means = keep.iter().map(|&j| self.means[j].clone()).collect();
        self.log_vars = keep.iter().map(|&j| self.log_vars[j].clone()).collect();
        self.log_noise = keep.iter().map(|&j| self.log_noise[j]).collect();
    }
}

/// Posterior together with the whitening factor `L = chol(K_ZZ)`; the flat
/// parameters hold `ν_k = L⁻¹ μ_k` in place of `μ_k`.
#[derive(Debug, Clone)]
pub struct WhitenedPosterior {
    pub post: InducingPosterior,
    chol: Arc<DMatrix<f64>>,
}

impl VariationalParams for WhitenedPosterior {
    fn to_flat(&self) -> Vec<f64> {
        let p = &self.post;
        let mut out = Vec::new();
        for e in &p.eta {
            out.extend(e.iter());
        }
        for m in &p.means {
            let nu = self.chol.solve_lower_triangular(m).expect("whitening factor is invertible");
            out.extend(nu.iter());
        }
        for v in &p.log_vars {
            out.extend(v.iter());
        }
        out.extend(p.log_noise.iter());
        out
    }

    fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let k = self.post.n_components();
        let m = self.post.n_inducing();
        let gd = self.post.z.ncols() + 1;
        let expected = (k - 1) * gd + 2 * k * m + k;
        shape_check(flat.len() == expected, || format!("flat vector of length {} != {expected}", flat.len()))?;
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(PviError::Numerical("non-finite GP parameter".into()));
        }
        let mut off = 0;
        for e in self.post.eta.iter_mut() {
            e.copy_from_slice(&flat[off..off + gd]);
            off += gd;
        }
        for mu in self.post.means.iter_mut() {
            let nu = DVector::from_column_slice(&flat[off..off + m]);
            *mu = &*self.chol * nu;
            off += m;
        }
        for v in self.post.log_vars.iter_mut() {
            v.copy_from_slice(&flat[off..off + m]);
            off += m;
        }
        self.post.log_noise.copy_from_slice(&flat[off..off + k]);
        Ok(())
    }

    fn n_components(&self) -> usize {
        self.post.n_components()
    }

    fn owners(&self) -> Vec<Owner> {
        let k = self.post.n_components();
        let m = self.post.n_inducing();
        let gd = self.post.z.ncols() + 1;
        let mut o = Vec::new();
        for j in 1..k {
            o.extend(std::iter::repeat_n(Owner::Gating(j), gd));
        }
        for _ in 0..2 {
            for j in 0..k {
                o.extend(std::iter::repeat_n(Owner::Component(j), m));
            }
        }
        o.extend((0..k).map(Owner::Component));
        o
    }

    fn remove(&mut self, removed: &[usize]) {
        self.post.remove(removed);
    }
}

/// Pairwise entropy lower bound for diagonal-covariance mixtures, with
/// gradients in the weights, means and variances.
pub(crate) struct DiagonalEntropy {
    pub value: f64,
    pub grad_weights: Vec<f64>,
    pub grad_means: Vec<DVector<f64>>,
    pub grad_vars: Vec<DVector<f64>>,
}

pub(crate) fn diagonal_huber_entropy(weights: &[f64], means: &[DVector<f64>], vars: &[DVector<f64>], with_grad: bool) -> DiagonalEntropy {
    let k = weights.len();
    let m = means[0].len();
    let mut log_n = DMatrix::zeros(k, k);
    for a in 0..k {
        for b in a..k {
            let mut v = -0.5 * m as f64 * LN_2PI;
            for j in 0..m {
                let s = vars[a][j] + vars[b][j];
                let d = means[a][j] - means[b][j];
                v -= 0.5 * (s.ln() + d * d / s);
            }
            log_n[(a, b)] = v;
            log_n[(b, a)] = v;
        }
    }
    let log_w: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
    let log_z: Vec<f64> = (0..k)
        .map(|a| log_sum_exp(&(0..k).map(|b| log_w[b] + log_n[(a, b)]).collect::<Vec<_>>()))
        .collect();
    let value = -(0..k).filter(|a| weights[*a] > 0.0).map(|a| weights[a] * log_z[a]).sum::<f64>();
    let mut out = DiagonalEntropy {
        value,
        grad_weights: Vec::new(),
        grad_means: Vec::new(),
        grad_vars: Vec::new(),
    };
    if !with_grad {
        return out;
    }
    out.grad_weights = (0..k)
        .map(|j| -log_z[j] - (0..k).map(|a| (log_w[a] + log_n[(a, j)] - log_z[a]).exp()).sum::<f64>())
        .collect();
    out.grad_means = vec![DVector::zeros(m); k];
    out.grad_vars = vec![DVector::zeros(m); k];
    for a in 0..k {
        for b in 0..k {
            let coef = -weights[a] * (log_w[b] + log_n[(a, b)] - log_z[a]).exp();
            if coef == 0.0 {
                continue;
            }
            for j in 0..m {
                let s = vars[a][j] + vars[b][j];
                let u = (means[a][j] - means[b][j]) / s;
                out.grad_means[a][j] -= coef * u;
                out.grad_means[b][j] += coef * u;
                let gs = coef * (-0.5 / s + 0.5 * u * u);
                out.grad_vars[a][j] += gs;
                out.grad_vars[b][j] += gs;
            }
        }
    }
    out
}

pub struct GpProblem<'a> {
    pub kernel: KernelSpec,
    pub data: &'a Dataset,
    z: DMatrix<f64>,
    proj: GpProjection,
    a_sq: DMatrix<f64>,
    c_diag: DVector<f64>,
    chol: Arc<DMatrix<f64>>,
    kinv_diag: DVector<f64>,
    log_det_k: f64,
    gating: DMatrix<f64>,
    init_noise: f64,
    init_mean: Option<DVector<f64>>,
}

impl<'a> GpProblem<'a> {
    /// `data.x` holds the raw inputs (no intercept column).
    pub fn new(kernel: KernelSpec, data: &'a Dataset, z: DMatrix<f64>) -> Result<Self> {
        kernel.validate()?;
        if data.n() == 0 {
            return Err(PviError::EmptyData("GP fit needs data".into()));
        }
        shape_check(z.ncols() == data.x.ncols() && z.nrows() > 0, || "inducing inputs do not match the data".into())?;
        let proj = GpProjection::new(&kernel, &data.x, &z)?;
        let kzz = kernel.gram(&z);
        let chol = kzz.clone().cholesky().ok_or_else(|| PviError::Factorization("inducing kernel matrix".into()))?;
        let kinv_diag = chol.inverse().diagonal();
        let l = chol.l();
        let log_det_k = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let gating = DMatrix::from_fn(data.n(), data.x.ncols() + 1, |i, j| if j == 0 { 1.0 } else { data.x[(i, j - 1)] });
        let y_mean = data.y.mean();
        let init_noise = data.y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / data.n() as f64;
        Ok(GpProblem {
            a_sq: proj.a.map(|v| v * v),
            c_diag: proj.c.diagonal(),
            proj,
            z,
            chol: Arc::new(l),
            kinv_diag,
            log_det_k,
            gating,
            kernel,
            data,
            init_noise: init_noise.max(1e-6),
            init_mean: None,
        })
    }

    pub fn set_initial_noise(&mut self, v: f64) {
        self.init_noise = v;
    }

    /// Centre for the initial component means in place of the prior.
    pub fn set_initial_mean(&mut self, mu: DVector<f64>) {
        self.init_mean = Some(mu);
    }

    pub fn wrap(&self, post: InducingPosterior) -> WhitenedPosterior {
        WhitenedPosterior { post, chol: self.chol.clone() }
    }
}

impl PviProblem for GpProblem<'_> {
    type Params = WhitenedPosterior;

    fn n_obs(&self) -> usize {
        self.data.n()
    }

    fn evaluate(&self, params: &WhitenedPosterior, beta: f64, with_grad: bool, batch: Option<&[usize]>) -> Result<Evaluation> {
        gp_evaluate(self, &params.post, beta, with_grad, batch)
    }

    fn training_weights(&self, params: &WhitenedPosterior) -> Result<DMatrix<f64>> {
        Ok(params.post.weights_matrix(&self.data.x))
    }

    fn initialize(&self, k: usize, rng: &mut ChaCha20Rng) -> Result<WhitenedPosterior> {
        let m = self.z.nrows();
        let gd = Normal::new(0.0, 0.1).unwrap();
        let (centre, nd) = match &self.init_mean {
            Some(mu) => (mu.clone(), Normal::new(0.0, 0.1).unwrap()),
            None => (DVector::zeros(m), Normal::new(0.0, 0.5).unwrap()),
        };
        let means = (0..k).map(|_| &centre + &*self.chol * DVector::from_fn(m, |_, _| nd.sample(rng))).collect();
        // noise levels spread over a factor of 16 around the starting value
        let log_noise = (0..k)
            .map(|j| {
                let t = if k == 1 { 0.0 } else { 2.0 * j as f64 / (k - 1) as f64 - 1.0 };
                self.init_noise.ln() + t * 4f64.ln()
            })
            .collect();
        let post = InducingPosterior {
            z: self.z.clone(),
            means,
            log_vars: vec![DVector::from_element(m, 0.25f64.ln()); k],
            eta: (1..k).map(|_| DVector::from_fn(self.gating.ncols(), |_, _| gd.sample(rng))).collect(),
            log_noise,
        };
        Ok(self.wrap(post))
    }
}

fn gp_evaluate(prob: &GpProblem, post: &InducingPosterior, beta: f64, with_grad: bool, batch: Option<&[usize]>) -> Result<Evaluation> {
    let n = prob.data.n();
    let k = post.n_components();
    let m = post.n_inducing();
    let y = &prob.data.y;
    let weights = post.weights_matrix(&prob.data.x);
    let vars = post.variances();
    let noise = post.noise_vars();
    let (rows, scale) = batch_rows(n, batch);

    // Per-component marginal means and variances of f at the training inputs.
    let alpha: Vec<DVector<f64>> = post.means.iter().map(|mu| &prob.proj.a * mu).collect();
    let omega: Vec<DVector<f64>> = vars.iter().map(|s| &prob.c_diag + &prob.a_sq * s).collect();

    let floor = log_density_floor();
    let mut score = 0.0;
    let mut floored = 0;
    let mut resp = DMatrix::zeros(n, k);
    let mut dl_da = DMatrix::zeros(n, k);
    let mut dl_dv = DMatrix::zeros(n, k);
    let mut buf = vec![0.0; k];
    for &i in rows.iter() {
        for j in 0..k {
            let v = omega[j][i] + noise[j];
            let r = y[i] - alpha[j][i];
            buf[j] = weights[(i, j)].ln() + normal_logpdf(y[i], alpha[j][i], v);
            dl_da[(i, j)] = r / v;
            dl_dv[(i, j)] = -0.5 / v + 0.5 * r * r / (v * v);
        }
        let s = log_sum_exp(&buf);
        if s < floor || !s.is_finite() {
            score += floor;
            floored += 1;
            continue;
        }
        score += s;
        for j in 0..k {
            resp[(i, j)] = (buf[j] - s).exp();
        }
    }
    score *= scale;

    // Regularizer: expected log-likelihood (over the batch rows), prior on f̆, entropy.
    let omega_bar: Vec<f64> = (0..k).map(|j| weights.column(j).sum() / n as f64).collect();
    let mut a_terms = vec![0.0; k];
    let mut ell_ss = vec![0.0; k];
    for j in 0..k {
        let mut ss = 0.0;
        for &i in rows.iter() {
            ss += (y[i] - alpha[j][i]).powi(2) + omega[j][i];
        }
        ell_ss[j] = ss;
        let nb = rows.len() as f64;
        let ell = scale * (-0.5 * nb * (LN_2PI + post.log_noise[j]) - ss / (2.0 * noise[j]));
        let nu = prob.chol.solve_lower_triangular(&post.means[j]).expect("invertible");
        let elp = -0.5 * (m as f64 * LN_2PI + prob.log_det_k + nu.norm_squared() + prob.kinv_diag.dot(&vars[j]));
        a_terms[j] = ell + elp;
    }
    let ent = diagonal_huber_entropy(&omega_bar, &post.means, &vars, with_grad);
    let regularizer = omega_bar.iter().zip(&a_terms).map(|(w, a)| w * a).sum::<f64>() + ent.value;
    let objective = score + beta * regularizer;

    let gradient = if !with_grad {
        Vec::new()
    } else {
        let mut d_logits = DMatrix::zeros(n, k);
        for &i in rows.iter() {
            if resp.row(i).iter().any(|v| *v > 0.0) {
                for j in 0..k {
                    d_logits[(i, j)] += scale * (resp[(i, j)] - weights[(i, j)]);
                }
            }
        }
        let a: Vec<f64> = (0..k).map(|j| a_terms[j] + ent.grad_weights[j]).collect();
        add_averaged_weight_chain(&weights, &a, beta, &mut d_logits);

        let mut out = Vec::new();
        for j in 1..k {
            out.extend((prob.gating.transpose() * d_logits.column(j)).iter());
        }
        let mut g_nu = Vec::with_capacity(k);
        let mut g_logvar = Vec::with_capacity(k);
        let mut g_lognoise = Vec::with_capacity(k);
        for j in 0..k {
            // d/dα_i and d/dω_i, score plus β ω̄ ELL
            let mut ca = DVector::zeros(n);
            let mut cv = DVector::zeros(n);
            let mut noise_score = 0.0;
            for &i in rows.iter() {
                let r = y[i] - alpha[j][i];
                ca[i] = scale * (resp[(i, j)] * dl_da[(i, j)] + beta * omega_bar[j] * r / noise[j]);
                cv[i] = scale * (resp[(i, j)] * dl_dv[(i, j)] - beta * omega_bar[j] * 0.5 / noise[j]);
                noise_score += resp[(i, j)] * dl_dv[(i, j)];
            }
            let g_mu = prob.proj.a.transpose() * &ca + &ent.grad_means[j] * beta;
            let nu = prob.chol.solve_lower_triangular(&post.means[j]).expect("invertible");
            g_nu.push(prob.chol.transpose() * g_mu - nu * (beta * omega_bar[j]));
            let g_s = prob.a_sq.transpose() * &cv + (&ent.grad_vars[j] - &prob.kinv_diag * (0.5 * omega_bar[j])) * beta;
            g_logvar.push(g_s.component_mul(&vars[j]));
            let nb = rows.len() as f64;
            let ell_noise = scale * (-0.5 * nb + ell_ss[j] / (2.0 * noise[j]));
            g_lognoise.push(scale * noise_score * noise[j] + beta * omega_bar[j] * ell_noise);
        }
        for g in &g_nu {
            out.extend(g.iter());
        }
        for g in &g_logvar {
            out.extend(g.iter());
        }
        out.extend(g_lognoise);
        out
    };

    Ok(Evaluation {
        objective,
        score,
        regularizer,
        gradient,
        floored,
    })
}

/// Objective and gradient over the whitened flat parameters.
pub fn gp_objective(prob: &GpProblem, post: &InducingPosterior, beta: f64, with_grad: bool) -> Result<Evaluation> {
    gp_evaluate(prob, post, beta, with_grad, None)
}

/// Per-component marginals of `f(X)`: means `A μ_k` and covariances
/// `C + A diag(s_k) Aᵀ`, with weights averaged over the rows of `X`.
#[derive(Debug, Clone)]
pub struct GpMarginal {
    pub weights: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
}

pub fn gp_marginal(post: &InducingPosterior, kernel: &KernelSpec, x: &DMatrix<f64>) -> Result<GpMarginal> {
    let proj = GpProjection::new(kernel, x, &post.z)?;
    let w = post.weights_matrix(x);
    let weights = (0..post.n_components()).map(|j| w.column(j).mean()).collect();
    Ok(GpMarginal {
        weights,
        means: post.means.iter().map(|mu| &proj.a * mu).collect(),
        covs: post
            .variances()
            .iter()
            .map(|s| &proj.c + &proj.a * DMatrix::from_diagonal(s) * proj.a.transpose())
            .collect(),
    })
}

/// Per-component predictive mean and variance (including noise) at one input.
pub fn gp_component_predictive(post: &InducingPosterior, kernel: &KernelSpec, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let xm = DMatrix::from_row_slice(1, x.len(), x);
    let proj = GpProjection::new(kernel, &xm, &post.z)?;
    let a = proj.a.row(0).transpose();
    let c = proj.c[(0, 0)].max(0.0);
    let noise = post.noise_vars();
    let means = post.means.iter().map(|mu| a.dot(mu)).collect();
    let vars = post
        .variances()
        .iter()
        .zip(noise)
        .map(|(s, s2)| c + a.component_mul(&a).dot(s) + s2)
        .collect();
    Ok((post.weights(x), means, vars))
}

/// Predictive density `Σ_k ω_k(x̃) N(ỹ; μ_k(x̃), σ²_k(x̃) + σ²_k)`.
pub fn gp_predictive(post: &InducingPosterior, kernel: &KernelSpec, x: &[f64], y: f64) -> Result<f64> {
    let (w, m, v) = gp_component_predictive(post, kernel, x)?;
    let terms: Vec<f64> = (0..w.len()).map(|k| w[k].ln() + normal_logpdf(y, m[k], v[k])).collect();
    Ok(log_sum_exp(&terms).exp())
}

/// WAIC of a fitted GP mixture on `data`: draws take a component from the
/// averaged weights, then `f̆ ~ N(μ_k, diag(s_k))` and the noise `σ²_k`;
/// `p(y_i | f̆, σ²_k) = N(y_i; A_i f̆, C_ii + σ²_k)`.
pub fn gp_waic(post: &InducingPosterior, kernel: &KernelSpec, data: &Dataset, draws: usize, seed: u64) -> Result<f64> {
    let proj = GpProjection::new(kernel, &data.x, &post.z)?;
    let w = post.weights_matrix(&data.x);
    let k = post.n_components();
    let omega_bar: Vec<f64> = (0..k).map(|j| w.column(j).mean()).collect();
    let sds: Vec<DVector<f64>> = post.log_vars.iter().map(|v| v.map(|l| (0.5 * l).exp())).collect();
    let noise = post.noise_vars();
    let mut rng = stream(seed, Stream::Sampling);
    let std = Normal::new(0.0, 1.0).unwrap();
    let mut fitted = Vec::with_capacity(draws);
    for _ in 0..draws {
        let c = crate::family::pick_component(&omega_bar, rng.random::<f64>());
        let f = DVector::from_fn(post.n_inducing(), |j, _| post.means[c][j] + sds[c][j] * std.sample(&mut rng));
        fitted.push((&proj.a * f, noise[c]));
    }
    waic_pointwise(data.n(), draws, |i, ll| {
        let ci = proj.c[(i, i)].max(0.0);
        for (d, (f, s2)) in fitted.iter().enumerate() {
            ll[d] = normal_logpdf(data.y[i], f[i], ci + s2);
        }
    })
}

/// Quantile of a univariate Gaussian mixture by bisection on its CDF.
pub fn mixture_quantile(weights: &[f64], means: &[f64], vars: &[f64], level: f64) -> f64 {
    let cdf = |y: f64| -> f64 {
        weights
            .iter()
            .zip(means.iter().zip(vars))
            .map(|(w, (m, v))| w * 0.5 * libm::erfc(-(y - m) / (2.0 * v).sqrt()))
            .sum()
    };
    let sd_max = vars.iter().cloned().fold(0.0, f64::max).sqrt();
    let mut lo = means.iter().cloned().fold(f64::INFINITY, f64::min) - 12.0 * sd_max;
    let mut hi = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 12.0 * sd_max;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < level {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 * (1.0 + mid.abs()) {
            break;
        }
    }
    0.5 * (lo + hi)
}

pub const QUANTILE_LEVELS: [f64; 7] = [0.01, 0.05, 0.25, 0.5, 0.75, 0.95, 0.99];

/// CSV `x, q01, q05, q25, q50, q75, q95, q99` over a grid of one-dimensional inputs.
pub fn write_quantile_csv<W: Write>(post: &InducingPosterior, kernel: &KernelSpec, grid: &[f64], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["x", "q01", "q05", "q25", "q50", "q75", "q95", "q99"])?;
    for x in grid {
        let (wt, m, v) = gp_component_predictive(post, kernel, &[*x])?;
        let mut rec = vec![fmt17(*x)];
        rec.extend(QUANTILE_LEVELS.iter().map(|l| fmt17(mixture_quantile(&wt, &m, &v, *l))));
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

/// `m` inducing inputs by k-means (k-means++ seeding, Lloyd iterations).
pub fn kmeans_inducing<R: Rng + ?Sized>(x: &DMatrix<f64>, m: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    let n = x.nrows();
    if m == 0 || m > n {
        return Err(PviError::Config(format!("need 1 ≤ m ≤ n inducing points, got m = {m}, n = {n}")));
    }
    if m == n {
        return Ok(x.clone());
    }
    let pts = rows(x);
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>();
    let mut centers = vec![pts[rng.random_range(0..n)].clone()];
    while centers.len() < m {
        let d: Vec<f64> = pts.iter().map(|p| centers.iter().map(|c| dist(p, c)).fold(f64::INFINITY, f64::min)).collect();
        let total: f64 = d.iter().sum();
        let next = if total > 0.0 {
            crate::family::pick_component(&d.iter().map(|v| v / total).collect::<Vec<_>>(), rng.random::<f64>())
        } else {
            rng.random_range(0..n)
        };
        centers.push(pts[next].clone());
    }
    for _ in 0..100 {
        let assign: Vec<usize> = pts
            .iter()
            .map(|p| (0..m).fold(0, |b, c| if dist(p, &centers[c]) < dist(p, &centers[b]) { c } else { b }))
            .collect();
        let mut sums = vec![vec![0.0; x.ncols()]; m];
        let mut counts = vec![0usize; m];
        for (p, a) in pts.iter().zip(&assign) {
            counts[*a] += 1;
            for (s, v) in sums[*a].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut moved = false;
        for c in 0..m {
            if counts[c] > 0 {
                let new: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
                if new != centers[c] {
                    moved = true;
                    centers[c] = new;
                }
            }
        }
        if !moved {
            break;
        }
    }
    Ok(DMatrix::from_fn(m, x.ncols(), |i, j| centers[i][j]))
}

/// Steps used by the single-component pre-fit that sets the initial noise.
pub const NOISE_PREFIT_STEPS: usize = 2000;

/// Fit the gated inducing-point mixture. `data.x` holds raw inputs; `inducing`
/// defaults to the training inputs. Components start near the mean of a
/// single-component pre-fit, with noise variances spread around its residual
/// variance.
pub fn gp_fit(
    data: &Dataset,
    kernel: &KernelSpec,
    beta: f64,
    cfg: &FitConfig,
    inducing: Option<DMatrix<f64>>,
) -> Result<FitResult<InducingPosterior>> {
    let z = inducing.unwrap_or_else(|| data.x.clone());
    let mut prob = GpProblem::new(*kernel, data, z)?;
    let pre_cfg = FitConfig {
        k_init: 1,
        max_steps: cfg.max_steps.min(NOISE_PREFIT_STEPS),
        ..cfg.clone()
    };
    let pre = fit_problem(&prob, beta, &pre_cfg)?;
    let post = &pre.posterior.post;
    let resid: f64 = (0..data.n())
        .map(|i| {
            let mean: f64 = prob.proj.a.row(i).transpose().dot(&post.means[0]);
            (data.y[i] - mean).powi(2)
        })
        .sum::<f64>()
        / data.n() as f64;
    prob.set_initial_noise(resid.max(1e-6));
    prob.set_initial_mean(post.means[0].clone());
    Ok(fit_problem(&prob, beta, cfg)?.map(|w| w.post))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_symmetry() {
        let k = KernelSpec::default();
        let x = DMatrix::from_column_slice(4, 1, &[0.0, 0.1, -0.5, 2.0]);
        let z = DMatrix::from_column_slice(2, 1, &[0.3, -1.0]);
        let kxx = k.matrix(&x, &x);
        assert!((&kxx - kxx.transpose()).amax() < 1e-12);
        assert!((k.matrix(&x, &z) - k.matrix(&z, &x).transpose()).amax() < 1e-12);
    }

    #[test]
    fn mixture_quantile_of_standard_normal() {
        let q = mixture_quantile(&[1.0], &[0.0], &[1.0], 0.975);
        assert!((q - 1.959963984540054).abs() < 1e-9);
        let med = mixture_quantile(&[0.5, 0.5], &[-1.0, 1.0], &[0.2, 0.2], 0.5);
        assert!(med.abs() < 1e-9);
    }

    #[test]
    fn kmeans_finds_separated_clusters() {
        use rand::SeedableRng;
        let x = DMatrix::from_column_slice(6, 1, &[0.0, 0.1, 0.2, 10.0, 10.1, 10.2]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut z: Vec<f64> = kmeans_inducing(&x, 2, &mut rng).unwrap().iter().copied().collect();
        z.sort_by(f64::total_cmp);
        assert!((z[0] - 0.1).abs() < 1e-12 && (z[1] - 10.1).abs() < 1e-12);
    }
}
