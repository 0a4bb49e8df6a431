#![allow(dead_code)]

use gmpvi::data::Dataset;
use gmpvi::family::MixturePosterior;
use gmpvi::gaussian::CholeskyFactor;
use gmpvi::likelihood::LikelihoodModel;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn random_design(rng: &mut ChaCha8Rng, n: usize, q: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, q, |_, j| if j == 0 { 1.0 } else { rng.random_range(-1.5..1.5) })
}

pub fn random_response(rng: &mut ChaCha8Rng, model: &LikelihoodModel, x: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(x.nrows(), |i, _| {
        let eta = 0.3 * x[(i, 0)] + 0.5 * x.row(i).iter().skip(1).sum::<f64>();
        match model {
            LikelihoodModel::Logistic => (rng.random::<f64>() < 1.0 / (1.0 + (-eta).exp())) as u8 as f64,
            LikelihoodModel::Poisson => Poisson::new(eta.exp()).unwrap().sample(rng),
            _ => eta + 0.7 * normal(rng),
        }
    })
}

pub fn random_factor(rng: &mut ChaCha8Rng, p: usize, scale: f64) -> CholeskyFactor {
    let raw = DMatrix::from_fn(p, p, |i, j| {
        if i == j {
            scale.ln() + 0.3 * normal(rng)
        } else if i > j {
            0.2 * normal(rng)
        } else {
            0.0
        }
    });
    CholeskyFactor::from_raw(raw).unwrap()
}

pub fn random_mixture(rng: &mut ChaCha8Rng, k: usize, p: usize, gating_dim: usize, scale: f64) -> MixturePosterior {
    let nd = Normal::new(0.0, 0.6).unwrap();
    let means = (0..k).map(|_| DVector::from_fn(p, |_, _| nd.sample(rng))).collect();
    let factors = (0..k).map(|_| random_factor(rng, p, scale)).collect();
    let eta = (1..k).map(|_| DVector::from_fn(gating_dim, |_, _| nd.sample(rng))).collect();
    MixturePosterior::new(means, factors, eta, gating_dim).unwrap()
}

pub fn random_dataset(rng: &mut ChaCha8Rng, model: &LikelihoodModel, n: usize, q: usize) -> Dataset {
    let x = random_design(rng, n, q);
    let y = random_response(rng, model, &x);
    Dataset::new(x, y).unwrap()
}

/// Central differences of `f` at `x`.
pub fn central_differences(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut buf = x.to_vec();
    (0..x.len())
        .map(|j| {
            buf[j] = x[j] + h;
            let up = f(&buf);
            buf[j] = x[j] - h;
            let down = f(&buf);
            buf[j] = x[j];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `max_j |a_j − d_j| / (1 + |d_j|)`.
pub fn gradient_discrepancy(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, d)| (a - d).abs() / (1.0 + d.abs()))
        .fold(0.0, f64::max)
}

/// Exact posterior `N(m, S)` for `y ~ N(Xθ, σ²)`, `θ ~ N(0, τ²I)`.
pub fn conjugate_posterior(x: &DMatrix<f64>, y: &DVector<f64>, sigma2: f64, tau2: f64) -> (DVector<f64>, DMatrix<f64>) {
    let p = x.ncols();
    let precision = x.transpose() * x / sigma2 + DMatrix::identity(p, p) / tau2;
    let cov = precision.try_inverse().unwrap();
    let mean = &cov * x.transpose() * y / sigma2;
    (mean, cov)
}
