//! Synthetic data generators.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::Dataset;
use crate::error::{PviError, Result};
use crate::rng::{stream, Stream};

fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        Err(PviError::Config("n must be at least 1".into()))
    } else {
        Ok(())
    }
}

/// Probability that `y = 1` at `x` in the quadrant design: 0 in the top-left
/// quadrant, 1 in the bottom-right, one half elsewhere.
pub fn quadrant_probability(x1: f64, x2: f64) -> f64 {
    if x1 < 0.0 && x2 > 0.0 {
        0.0
    } else if x1 > 0.0 && x2 < 0.0 {
        1.0
    } else {
        0.5
    }
}

/// `x ~ U[-2,2]²`, `y ~ Bern(quadrant_probability(x))`; design `(1, x1, x2)`.
pub fn simulate_logistic_quadrants(n: usize, seed: u64) -> Result<Dataset> {
    check_n(n)?;
    let mut rng = stream(seed, Stream::Simulation);
    let mut x = DMatrix::zeros(n, 3);
    let mut y = DVector::zeros(n);
    for i in 0..n {
        let x1 = rng.random_range(-2.0..2.0);
        let x2 = rng.random_range(-2.0..2.0);
        x[(i, 0)] = 1.0;
        x[(i, 1)] = x1;
        x[(i, 2)] = x2;
        y[i] = (rng.random::<f64>() < quadrant_probability(x1, x2)) as u8 as f64;
    }
    let mut d = Dataset::new(x, y)?;
    d.columns = vec!["intercept".into(), "x1".into(), "x2".into()];
    Ok(d)
}

pub const CUBIC_NOISE_VARIANCE: f64 = 0.1;

/// `x ~ U[-2,2]`, `y ~ N(x³, 0.1)`; design `(1, x)`.
pub fn simulate_cubic(n: usize, seed: u64) -> Result<Dataset> {
    check_n(n)?;
    let mut rng = stream(seed, Stream::Simulation);
    let noise = Normal::new(0.0, CUBIC_NOISE_VARIANCE.sqrt()).unwrap();
    let mut x = DMatrix::zeros(n, 2);
    let mut y = DVector::zeros(n);
    for i in 0..n {
        let xi: f64 = rng.random_range(-2.0..2.0);
        x[(i, 0)] = 1.0;
        x[(i, 1)] = xi;
        y[i] = xi.powi(3) + noise.sample(&mut rng);
    }
    let mut d = Dataset::new(x, y)?;
    d.columns = vec!["intercept".into(), "x".into()];
    Ok(d)
}

/// Well-specified linear-Gaussian data `y = Xθ + ε` with design `(1, x₁, …)`,
/// `x ~ U[-1,1]`.
pub fn simulate_linear(n: usize, theta: &[f64], variance: f64, seed: u64) -> Result<Dataset> {
    check_n(n)?;
    if theta.is_empty() || !(variance > 0.0) {
        return Err(PviError::Config("need at least one coefficient and a positive variance".into()));
    }
    let mut rng = stream(seed, Stream::Simulation);
    let noise = Normal::new(0.0, variance.sqrt()).unwrap();
    let p = theta.len();
    let x = DMatrix::from_fn(n, p, |_, j| if j == 0 { 1.0 } else { rng.random_range(-1.0..1.0) });
    let y = DVector::from_fn(n, |i, _| x.row(i).iter().zip(theta).map(|(a, b)| a * b).sum::<f64>() + noise.sample(&mut rng));
    Dataset::new(x, y)
}

/// Two noise regimes: `y = sin(2x) + ε` with sd 0.1 for `x < 0` and 0.5 for `x ≥ 0`,
/// `x ~ U[-2, 2]`. Returned as a single covariate column `x` (no intercept).
pub fn simulate_two_regime(n: usize, seed: u64) -> Result<Dataset> {
    check_n(n)?;
    let mut rng = stream(seed, Stream::Simulation);
    let mut x = DMatrix::zeros(n, 1);
    let mut y = DVector::zeros(n);
    for i in 0..n {
        let xi: f64 = rng.random_range(-2.0..2.0);
        let sd = if xi < 0.0 { 0.1 } else { 0.5 };
        x[(i, 0)] = xi;
        y[i] = (2.0 * xi).sin() + sd * rng.sample::<f64, _>(rand_distr::StandardNormal);
    }
    let mut d = Dataset::new(x, y)?;
    d.columns = vec!["x".into()];
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadrant_rule() {
        assert_eq!(quadrant_probability(-1.0, 1.0), 0.0);
        assert_eq!(quadrant_probability(1.0, -1.0), 1.0);
        assert_eq!(quadrant_probability(1.0, 1.0), 0.5);
        assert_eq!(quadrant_probability(-1.0, -1.0), 0.5);
    }

    #[test]
    fn quadrant_labels_follow_the_rule() {
        let d = simulate_logistic_quadrants(100_000, 7).unwrap();
        let mut ones = 0.0;
        let mut count = 0.0;
        for i in 0..d.n() {
            let (x1, x2) = (d.x[(i, 1)], d.x[(i, 2)]);
            assert!((-2.0..2.0).contains(&x1) && (-2.0..2.0).contains(&x2));
            match quadrant_probability(x1, x2) {
                p if p == 0.0 => assert_eq!(d.y[i], 0.0),
                p if p == 1.0 => assert_eq!(d.y[i], 1.0),
                _ => {
                    if x1 > 0.0 && x2 > 0.0 {
                        ones += d.y[i];
                        count += 1.0;
                    }
                }
            }
        }
        assert!((ones / count - 0.5).abs() < 0.01);
        assert_eq!(simulate_logistic_quadrants(50, 3).unwrap(), simulate_logistic_quadrants(50, 3).unwrap());
    }

    #[test]
    fn cubic_moments() {
        let d = simulate_cubic(100_000, 2).unwrap();
        let resid: Vec<f64> = (0..d.n()).map(|i| d.y[i] - d.x[(i, 1)].powi(3)).collect();
        let mean = resid.iter().sum::<f64>() / resid.len() as f64;
        let var = resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (resid.len() - 1) as f64;
        assert!(mean.abs() < 0.01);
        assert!((var - 0.1).abs() < 0.01);
        assert!(d.x.column(1).iter().all(|x| (-2.0..=2.0).contains(x)));
    }

    #[test]
    fn zero_rows_rejected() {
        assert!(simulate_cubic(0, 1).is_err());
    }
}
