//! Gaussian-mixture variational family with linear-softmax gating.
//!
//! `q(θ | x) = Σ_k ω_k(x) φ(θ; μ_k, Σ_k)` with `ω(x) = softmax(0, xᵀη_2, …, xᵀη_K)`.
//! A covariate-independent mixture is the special case of an intercept-only gating
//! input, so both share this type.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{shape_check, PviError, Result};
use crate::gaussian::{cholesky, log_sum_exp, CholeskyFactor, LN_2PI};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "MixtureDocument", try_from = "MixtureDocument")]
pub struct MixturePosterior {
    means: Vec<DVector<f64>>,
    factors: Vec<CholeskyFactor>,
    /// Gating vectors for components 2..K; component 1 is anchored at zero.
    eta: Vec<DVector<f64>>,
    gating_dim: usize,
}

/// On-disk layout of a [`MixturePosterior`]. Field order is part of the format.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[allow(non_snake_case)]
struct MixtureDocument {
    K: usize,
    dim: usize,
    gating_dim: usize,
    means: Vec<Vec<f64>>,
    cholesky_raw: Vec<Vec<f64>>,
    eta: Vec<Vec<f64>>,
}

impl From<MixturePosterior> for MixtureDocument {
    fn from(p: MixturePosterior) -> Self {
        MixtureDocument {
            K: p.n_components(),
            dim: p.dim(),
            gating_dim: p.gating_dim,
            means: p.means.iter().map(|m| m.iter().copied().collect()).collect(),
            cholesky_raw: p.factors.iter().map(|f| f.vech()).collect(),
            eta: p.eta.iter().map(|e| e.iter().copied().collect()).collect(),
        }
    }
}

impl TryFrom<MixtureDocument> for MixturePosterior {
    type Error = PviError;

    fn try_from(doc: MixtureDocument) -> Result<Self> {
        shape_check(doc.means.len() == doc.K && doc.cholesky_raw.len() == doc.K, || {
            format!("document declares K={} but lists {} means", doc.K, doc.means.len())
        })?;
        let means = doc.means.into_iter().map(DVector::from_vec).collect();
        let factors = doc
            .cholesky_raw
            .iter()
            .map(|v| CholeskyFactor::from_vech(doc.dim, v))
            .collect::<Result<Vec<_>>>()?;
        let eta = doc.eta.into_iter().map(DVector::from_vec).collect();
        MixturePosterior::new(means, factors, eta, doc.gating_dim)
    }
}

impl MixturePosterior {
    pub fn new(
        means: Vec<DVector<f64>>,
        factors: Vec<CholeskyFactor>,
        eta: Vec<DVector<f64>>,
        gating_dim: usize,
    ) -> Result<Self> {
        let k = means.len();
        shape_check(k >= 1, || "a mixture needs at least one component".into())?;
        shape_check(factors.len() == k, || format!("{} means but {} factors", k, factors.len()))?;
        shape_check(eta.len() == k - 1, || format!("{} components need {} gating vectors, got {}", k, k - 1, eta.len()))?;
        shape_check(gating_dim >= 1, || "gating dimension must be positive".into())?;
        let dim = means[0].len();
        shape_check(dim >= 1, || "parameter dimension must be positive".into())?;
        for (m, f) in means.iter().zip(&factors) {
            shape_check(m.len() == dim && f.dim() == dim, || {
                format!("component dimensions disagree ({} / {} vs {dim})", m.len(), f.dim())
            })?;
        }
        for e in &eta {
            shape_check(e.len() == gating_dim, || format!("gating vector of length {} != {gating_dim}", e.len()))?;
        }
        Ok(Self {
            means,
            factors,
            eta,
            gating_dim,
        })
    }

    pub fn single(mean: DVector<f64>, factor: CholeskyFactor) -> Result<Self> {
        Self::new(vec![mean], vec![factor], Vec::new(), 1)
    }

    /// A covariate-independent mixture with fixed weights, expressed through an
    /// intercept-only gating input (always feed `x = [1.0]`).
    pub fn with_constant_weights(
        weights: &[f64],
        means: Vec<DVector<f64>>,
        factors: Vec<CholeskyFactor>,
    ) -> Result<Self> {
        shape_check(weights.len() == means.len(), || "one weight per component required".into())?;
        if weights.iter().any(|w| !(*w > 0.0)) {
            return Err(PviError::Config("constant weights must be positive".into()));
        }
        let base = weights[0].ln();
        let eta = weights[1..]
            .iter()
            .map(|w| DVector::from_element(1, w.ln() - base))
            .collect();
        Self::new(means, factors, eta, 1)
    }

    pub fn n_components(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn gating_dim(&self) -> usize {
        self.gating_dim
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn factors(&self) -> &[CholeskyFactor] {
        &self.factors
    }

    pub fn eta(&self) -> &[DVector<f64>] {
        &self.eta
    }

    pub fn covariances(&self) -> Vec<DMatrix<f64>> {
        self.factors.iter().map(|f| f.covariance()).collect()
    }

    /// Unnormalized gating logits `(0, xᵀη_2, …, xᵀη_K)`.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        shape_check(x.len() == self.gating_dim, || {
            format!("gating input of length {} != {}", x.len(), self.gating_dim)
        })?;
        let mut out = Vec::with_capacity(self.n_components());
        out.push(0.0);
        for e in &self.eta {
            out.push(e.iter().zip(x).map(|(a, b)| a * b).sum());
        }
        Ok(out)
    }

    pub fn mixture_weights(&self, x: &[f64]) -> Result<DVector<f64>> {
        Ok(DVector::from_vec(softmax(&self.logits(x)?)))
    }

    /// Row-wise gating weights for an `n × g` gating matrix.
    pub fn weights_matrix(&self, gating: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        shape_check(gating.ncols() == self.gating_dim, || {
            format!("gating matrix has {} columns, expected {}", gating.ncols(), self.gating_dim)
        })?;
        let n = gating.nrows();
        let k = self.n_components();
        let mut logits = DMatrix::zeros(n, k);
        for (j, e) in self.eta.iter().enumerate() {
            logits.set_column(j + 1, &(gating * e));
        }
        let mut buf = vec![0.0; k];
        for i in 0..n {
            for j in 0..k {
                buf[j] = logits[(i, j)];
            }
            softmax_in_place(&mut buf);
            for j in 0..k {
                logits[(i, j)] = buf[j];
            }
        }
        Ok(logits)
    }

    pub fn averaged(&self, gating: &DMatrix<f64>) -> Result<AveragedPosterior> {
        if gating.nrows() == 0 {
            return Err(PviError::EmptyData("averaging needs at least one gating row".into()));
        }
        let w = self.weights_matrix(gating)?;
        let n = w.nrows() as f64;
        let weights = (0..w.ncols()).map(|k| w.column(k).sum() / n).collect();
        Ok(AveragedPosterior {
            weights,
            means: self.means.clone(),
            factors: self.factors.clone(),
        })
    }

    /// Drop the listed components. With `reanchor`, gating vectors are shifted so
    /// that the first survivor sits at zero, which leaves every surviving weight
    /// function unchanged.
    pub fn remove_components(&mut self, removed: &[usize], reanchor: bool) {
        let k = self.n_components();
        let keep: Vec<usize> = (0..k).filter(|j| !removed.contains(j)).collect();
        if keep.is_empty() {
            return;
        }
        let full_eta: Vec<DVector<f64>> = std::iter::once(DVector::zeros(self.gating_dim))
            .chain(self.eta.iter().cloned())
            .collect();
        let anchor = if reanchor { full_eta[keep[0]].clone() } else { DVector::zeros(self.gating_dim) };
        self.eta = keep[1..].iter().map(|&j| &full_eta[j] - &anchor).collect();
        self.means = keep.iter().map(|&j| self.means[j].clone()).collect();
        self.factors = keep.iter().map(|&j| self.factors[j].clone()).collect();
    }

    /// Flat parameter vector `(η, μ, vech(C*))`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for e in &self.eta {
            out.extend(e.iter());
        }
        for m in &self.means {
            out.extend(m.iter());
        }
        for f in &self.factors {
            out.extend(f.vech());
        }
        out
    }

    pub fn n_params(&self) -> usize {
        let k = self.n_components();
        let p = self.dim();
        (k - 1) * self.gating_dim + k * p + k * p * (p + 1) / 2
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        shape_check(flat.len() == self.n_params(), || {
            format!("flat vector of length {} != {}", flat.len(), self.n_params())
        })?;
        let p = self.dim();
        let mut offset = 0;
        for e in self.eta.iter_mut() {
            e.copy_from_slice(&flat[offset..offset + self.gating_dim]);
            offset += self.gating_dim;
        }
        for m in self.means.iter_mut() {
            m.copy_from_slice(&flat[offset..offset + p]);
            offset += p;
        }
        let tri = p * (p + 1) / 2;
        for f in self.factors.iter_mut() {
            *f = CholeskyFactor::from_vech(p, &flat[offset..offset + tri])?;
            offset += tri;
        }
        Ok(())
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut v = logits.to_vec();
    softmax_in_place(&mut v);
    v
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}

/// Covariate-free mixture with weights averaged over the training gating inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct AveragedPosterior {
    pub weights: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub factors: Vec<CholeskyFactor>,
}

impl AveragedPosterior {
    pub fn new(weights: Vec<f64>, means: Vec<DVector<f64>>, factors: Vec<CholeskyFactor>) -> Result<Self> {
        shape_check(!weights.is_empty() && weights.len() == means.len() && means.len() == factors.len(), || {
            "weights, means and factors must have equal positive length".into()
        })?;
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| *w < 0.0) || (total - 1.0).abs() > 1e-9 {
            return Err(PviError::Config(format!("mixture weights must be a probability vector (sum {total})")));
        }
        Ok(Self { weights, means, factors })
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// Log density of the averaged mixture.
    pub fn log_density(&self, theta: &DVector<f64>) -> f64 {
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(self.means.iter().zip(&self.factors))
            .map(|(w, (m, f))| w.ln() + crate::gaussian::mvn_logpdf_lower(theta, m, &f.factor()))
            .collect();
        log_sum_exp(&terms)
    }
}

/// Ancestral draws: pick a component by weight, then `θ = μ_k + C_k z`.
pub fn sample_theta<R: Rng + ?Sized>(post: &AveragedPosterior, draws: usize, rng: &mut R) -> Result<Vec<DVector<f64>>> {
    if draws == 0 {
        return Err(PviError::Config("number of draws must be positive".into()));
    }
    let factors: Vec<DMatrix<f64>> = post.factors.iter().map(|f| f.factor()).collect();
    let p = post.dim();
    let mut out = Vec::with_capacity(draws);
    for _ in 0..draws {
        let k = pick_component(&post.weights, rng.random::<f64>());
        let z = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        out.push(&post.means[k] + &factors[k] * z);
    }
    Ok(out)
}

pub(crate) fn pick_component(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return k;
        }
    }
    // Rounding can leave the cumulative sum a hair below one.
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

pub fn entropy_lower_bound(post: &AveragedPosterior) -> f64 {
    let covs: Vec<DMatrix<f64>> = post.factors.iter().map(|f| f.covariance()).collect();
    huber_entropy(&post.weights, &post.means, &covs, false)
        .map(|e| e.value)
        .unwrap_or(f64::NAN)
}

/// Value and gradients of the pairwise lower bound
/// `−Σ_k ω_k log Σ_l ω_l φ(μ_k; μ_l, Σ_k + Σ_l)`.
#[derive(Debug, Clone)]
pub struct EntropyBound {
    pub value: f64,
    pub grad_weights: Vec<f64>,
    pub grad_means: Vec<DVector<f64>>,
    /// Symmetric gradients with respect to each `Σ_k`.
    pub grad_covs: Vec<DMatrix<f64>>,
}

pub fn huber_entropy(
    weights: &[f64],
    means: &[DVector<f64>],
    covs: &[DMatrix<f64>],
    with_grad: bool,
) -> Result<EntropyBound> {
    let k = weights.len();
    let p = means[0].len();
    let log_w: Vec<f64> = weights.iter().map(|w| w.ln()).collect();

    // log N_kl with the inverse pair covariance and solved difference kept for gradients.
    let mut log_n = DMatrix::zeros(k, k);
    let mut pair_inv: Vec<Option<(DMatrix<f64>, DVector<f64>)>> = vec![None; k * k];
    for a in 0..k {
        for b in a..k {
            let s = &covs[a] + &covs[b];
            let chol = cholesky(&s)?;
            let d = &means[a] - &means[b];
            let u = chol.solve(&d);
            let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let val = -0.5 * (p as f64 * LN_2PI + log_det + d.dot(&u));
            log_n[(a, b)] = val;
            log_n[(b, a)] = val;
            if with_grad {
                pair_inv[a * k + b] = Some((chol.inverse(), u));
            }
        }
    }

    let mut log_z = vec![0.0; k];
    let mut buf = vec![0.0; k];
    for a in 0..k {
        for b in 0..k {
            buf[b] = log_w[b] + log_n[(a, b)];
        }
        log_z[a] = log_sum_exp(&buf);
    }
    let value = -weights
        .iter()
        .zip(&log_z)
        .filter(|(w, _)| **w > 0.0)
        .map(|(w, z)| w * z)
        .sum::<f64>();

    if !with_grad {
        return Ok(EntropyBound {
            value,
            grad_weights: Vec::new(),
            grad_means: Vec::new(),
            grad_covs: Vec::new(),
        });
    }

    // rho[a][b] = ω_b N_ab / Z_a
    let rho = DMatrix::from_fn(k, k, |a, b| (log_w[b] + log_n[(a, b)] - log_z[a]).exp());
    let mut grad_weights = vec![0.0; k];
    for j in 0..k {
        let mut g = -log_z[j];
        for a in 0..k {
            // ω_a N_aj / Z_a
            g -= (log_w[a] + log_n[(a, j)] - log_z[a]).exp();
        }
        grad_weights[j] = g;
    }

    let mut grad_means = vec![DVector::zeros(p); k];
    let mut grad_covs = vec![DMatrix::zeros(p, p); k];
    for a in 0..k {
        for b in 0..k {
            // coefficient on d log N_ab
            let coef = -weights[a] * rho[(a, b)];
            if coef == 0.0 {
                continue;
            }
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (inv, u_lo_hi) = pair_inv[lo * k + hi].as_ref().unwrap();
            // u was solved for μ_lo − μ_hi; flip to μ_a − μ_b.
            let u = if a == lo { u_lo_hi.clone() } else { -u_lo_hi };
            grad_means[a] -= &u * coef;
            grad_means[b] += &u * coef;
            let g_s = (inv * -0.5 + &u * u.transpose() * 0.5) * coef;
            grad_covs[a] += &g_s;
            grad_covs[b] += &g_s;
        }
    }

    Ok(EntropyBound {
        value,
        grad_weights,
        grad_means,
        grad_covs,
    })
}
