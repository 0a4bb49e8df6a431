//! Gauss-Hermite quadrature against the standard normal density.
//!
//! A rule of order B approximates `∫ f(w) φ(w; 0, 1) dw` by `Σ γ_b f(w_b)` and
//! is exact whenever `f` is a polynomial of degree at most `2B - 1`.
//!
//! Nodes come from the Golub-Welsch eigenproblem on the Jacobi matrix of the
//! physicists' Hermite polynomials, rescaled by √2. The eigenvectors lose relative
//! accuracy on the tiny outer weights, so each node is polished with Newton steps
//! on the orthonormal Hermite recurrence and the weight is recomputed from the
//! Christoffel function `1 / Σ_j p_j(w)²`.

use nalgebra::DMatrix;
use crate::error::{PviError, Result};

pub const MAX_ORDER: usize = 64;
pub const DEFAULT_ORDER: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    log_weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Natural logs of the weights (`-inf` for weights that underflow).
    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.nodes.iter().copied().zip(self.weights.iter().copied())
    }

    /// `Σ_b γ_b f(w_b)`.
    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.iter().map(|(w, g)| g * f(w)).sum()
    }

    /// Expectation of `f(mean + sd·W)` for `W ~ N(0, 1)`.
    pub fn expect<F: Fn(f64) -> f64>(&self, mean: f64, sd: f64, f: F) -> f64 {
        self.integrate(|w| f(mean + sd * w))
    }
}

/// Orthonormal Hermite values `(p_{B-1}(x), p_B(x), Σ_{j<B} p_j(x)²)`.
fn orthonormal_hermite(order: usize, x: f64) -> (f64, f64, f64) {
    let mut prev = 0.0;
    let mut cur = 1.0;
    let mut sum_sq = 0.0;
    for j in 0..order {
        sum_sq += cur * cur;
        let next = (x * cur - (j as f64).sqrt() * prev) / ((j + 1) as f64).sqrt();
        prev = cur;
        cur = next;
    }
    (prev, cur, sum_sq)
}

pub fn gauss_hermite_rule(order: usize) -> Result<QuadratureRule> {
    if order == 0 || order > MAX_ORDER {
        return Err(PviError::InvalidOrder(order));
    }

    let mut jacobi = DMatrix::<f64>::zeros(order, order);
    for k in 1..order {
        let off = (k as f64 / 2.0).sqrt();
        jacobi[(k - 1, k)] = off;
        jacobi[(k, k - 1)] = off;
    }
    let eigen = jacobi.symmetric_eigen();
    let mut nodes: Vec<f64> = eigen
        .eigenvalues
        .iter()
        .map(|x| x * std::f64::consts::SQRT_2)
        .collect();
    nodes.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut weights = vec![0.0; order];
    for (node, weight) in nodes.iter_mut().zip(weights.iter_mut()) {
        for _ in 0..8 {
            let (p_prev, p_order, _) = orthonormal_hermite(order, *node);
            let deriv = (order as f64).sqrt() * p_prev;
            if deriv == 0.0 {
                break;
            }
            let step = p_order / deriv;
            *node -= step;
            if step.abs() <= 1e-16 * node.abs().max(1.0) {
                break;
            }
        }
        let (_, _, sum_sq) = orthonormal_hermite(order, *node);
        *weight = 1.0 / sum_sq;
    }

    // Symmetrize about zero.
    for b in 0..order / 2 {
        let mirror = order - 1 - b;
        let w = 0.5 * (nodes[mirror] - nodes[b]);
        nodes[b] = -w;
        nodes[mirror] = w;
        let g = 0.5 * (weights[b] + weights[mirror]);
        weights[b] = g;
        weights[mirror] = g;
    }
    if order % 2 == 1 {
        nodes[order / 2] = 0.0;
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|g| *g /= total);
    let log_weights = weights.iter().map(|g| g.ln()).collect();

    Ok(QuadratureRule {
        nodes,
        weights,
        log_weights,
    })
}
