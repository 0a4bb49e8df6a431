//! Multivariate normal densities and the log-diagonal Cholesky parameterization
//! of covariance matrices.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{shape_check, PviError, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Lower-triangular factor `C` of `Σ = C Cᵀ`, stored with its diagonal on the log scale.
///
/// Every entry of `raw` on or below the diagonal is unconstrained; entries above
/// the diagonal are ignored and kept at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CholeskyFactor {
    raw: DMatrix<f64>,
}

impl CholeskyFactor {
    pub fn from_raw(raw: DMatrix<f64>) -> Result<Self> {
        shape_check(raw.is_square() && raw.nrows() > 0, || {
            format!("raw factor must be square and non-empty, got {}x{}", raw.nrows(), raw.ncols())
        })?;
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(PviError::Numerical("non-finite Cholesky parameter".into()));
        }
        Ok(Self { raw: raw.lower_triangle() })
    }

    /// Factor with `Σ = s² I`.
    pub fn scaled_identity(dim: usize, sd: f64) -> Self {
        let mut raw = DMatrix::zeros(dim, dim);
        for j in 0..dim {
            raw[(j, j)] = sd.ln();
        }
        Self { raw }
    }

    pub fn identity(dim: usize) -> Self {
        Self::scaled_identity(dim, 1.0)
    }

    /// Column-wise stacked lower triangle of the raw factor.
    pub fn from_vech(dim: usize, vech: &[f64]) -> Result<Self> {
        shape_check(vech.len() == dim * (dim + 1) / 2, || {
            format!("vech of length {} does not fit dimension {dim}", vech.len())
        })?;
        let mut raw = DMatrix::zeros(dim, dim);
        let mut it = vech.iter();
        for j in 0..dim {
            for i in j..dim {
                raw[(i, j)] = *it.next().unwrap();
            }
        }
        Self::from_raw(raw)
    }

    pub fn vech(&self) -> Vec<f64> {
        vech(&self.raw)
    }

    pub fn dim(&self) -> usize {
        self.raw.nrows()
    }

    pub fn raw(&self) -> &DMatrix<f64> {
        &self.raw
    }

    /// The lower-triangular factor `C` with exponentiated diagonal.
    pub fn factor(&self) -> DMatrix<f64> {
        let mut c = self.raw.clone();
        for j in 0..self.dim() {
            c[(j, j)] = c[(j, j)].exp();
        }
        c
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        chol_to_cov(self)
    }

    pub fn log_det_cov(&self) -> f64 {
        2.0 * self.raw.diagonal().sum()
    }

    /// Pull back a gradient with respect to `Σ` onto the raw parameters.
    ///
    /// `grad_cov` is the symmetric matrix `G` with `dF = tr(G dΣ)`; then
    /// `∂F/∂C = 2 G C` restricted to the lower triangle, and the diagonal picks up
    /// the `exp` chain factor.
    pub fn pullback_cov_gradient(&self, grad_cov: &DMatrix<f64>) -> DMatrix<f64> {
        let c = self.factor();
        let mut g = (grad_cov + grad_cov.transpose()) * &c;
        g = g.lower_triangle();
        for j in 0..self.dim() {
            g[(j, j)] *= c[(j, j)];
        }
        g
    }
}

/// Column-wise stacked lower triangle of a square matrix.
pub fn vech(m: &DMatrix<f64>) -> Vec<f64> {
    let p = m.nrows();
    let mut out = Vec::with_capacity(p * (p + 1) / 2);
    for j in 0..p {
        for i in j..p {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub fn chol_to_cov(f: &CholeskyFactor) -> DMatrix<f64> {
    let c = f.factor();
    &c * c.transpose()
}

pub fn cov_to_chol(cov: &DMatrix<f64>) -> Result<CholeskyFactor> {
    let chol = cholesky(cov)?;
    let mut raw = chol.l();
    for j in 0..raw.nrows() {
        raw[(j, j)] = raw[(j, j)].ln();
    }
    CholeskyFactor::from_raw(raw)
}

pub(crate) fn cholesky(cov: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    shape_check(cov.is_square(), || format!("covariance must be square, got {}x{}", cov.nrows(), cov.ncols()))?;
    if !is_symmetric(cov, 1e-8) {
        return Err(PviError::Factorization("matrix is not symmetric".into()));
    }
    Cholesky::new(cov.clone()).ok_or_else(|| PviError::Factorization(format!("{}x{} matrix", cov.nrows(), cov.ncols())))
}

fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    let scale = m.amax().max(1.0);
    (0..m.nrows()).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= tol * scale))
}

/// `log φ(x; mean, C Cᵀ)` from a lower-triangular factor `C`.
pub(crate) fn mvn_logpdf_lower(x: &DVector<f64>, mean: &DVector<f64>, l: &DMatrix<f64>) -> f64 {
    let diff = x - mean;
    let z = l
        .solve_lower_triangular(&diff)
        .expect("triangular factor with positive diagonal");
    let log_det: f64 = l.diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
    -0.5 * (x.len() as f64 * LN_2PI + log_det + z.norm_squared())
}

pub fn mvn_logpdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &CholeskyFactor) -> Result<f64> {
    shape_check(x.len() == mean.len() && x.len() == cov.dim(), || {
        format!("x {} / mean {} / covariance {} disagree", x.len(), mean.len(), cov.dim())
    })?;
    Ok(mvn_logpdf_lower(x, mean, &cov.factor()))
}

pub fn mvn_logpdf_dense(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    shape_check(x.len() == mean.len() && x.len() == cov.nrows(), || {
        format!("x {} / mean {} / covariance {} disagree", x.len(), mean.len(), cov.nrows())
    })?;
    let chol = cholesky(cov)?;
    Ok(mvn_logpdf_lower(x, mean, &chol.l()))
}

#[inline]
pub fn normal_logpdf(y: f64, mean: f64, var: f64) -> f64 {
    let r = y - mean;
    -0.5 * (LN_2PI + var.ln() + r * r / var)
}

/// Numerically stable `log Σ exp(v)`; returns `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    if max == f64::INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(dim: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
        a.transpose() * a + DMatrix::identity(dim, dim)
    }

    #[test]
    fn zero_raw_is_identity() {
        let f = CholeskyFactor::from_raw(DMatrix::zeros(3, 3)).unwrap();
        assert_eq!(f.covariance(), DMatrix::identity(3, 3));
    }

    #[test]
    fn diagonal_case() {
        let f = cov_to_chol(&dmatrix![4.0, 0.0; 0.0, 9.0]).unwrap();
        let c = f.factor();
        assert!((c[(0, 0)] - 2.0).abs() < 1e-14 && (c[(1, 1)] - 3.0).abs() < 1e-14);
        assert!((f.raw()[(0, 0)] - 2f64.ln()).abs() < 1e-14);
        assert!((f.raw()[(1, 1)] - 3f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn round_trip_random_spd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let cov = random_spd(4, &mut rng);
            let back = chol_to_cov(&cov_to_chol(&cov).unwrap());
            assert!((back - &cov).amax() < 1e-10);
            let f = cov_to_chol(&cov).unwrap();
            let again = cov_to_chol(&f.covariance()).unwrap();
            assert!((again.raw() - f.raw()).amax() < 1e-10);
        }
    }

    #[test]
    fn rejects_non_spd() {
        let bad = dmatrix![1.0, 2.0; 2.0, 1.0];
        assert!(matches!(cov_to_chol(&bad), Err(PviError::Factorization(_))));
        let x = DVector::zeros(2);
        assert!(mvn_logpdf_dense(&x, &x, &bad).is_err());
    }

    #[test]
    fn standard_normal_at_origin() {
        let x = DVector::zeros(1);
        let v = mvn_logpdf(&x, &x, &CholeskyFactor::identity(1)).unwrap();
        assert!((v + 0.5 * LN_2PI).abs() < 1e-15);
    }

    #[test]
    fn at_mean_only_normalizer_remains() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cov = random_spd(3, &mut rng);
        let mean = DVector::from_vec(vec![0.3, -1.0, 2.0]);
        let v = mvn_logpdf_dense(&mean, &mean, &cov).unwrap();
        let expected = -1.5 * LN_2PI - 0.5 * cov.determinant().ln();
        assert!((v - expected).abs() < 1e-12);
    }

    #[test]
    fn matches_dense_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let cov = random_spd(3, &mut rng);
            let x = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
            let m = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
            let inv = cov.clone().try_inverse().unwrap();
            let d = &x - &m;
            let direct = -1.5 * LN_2PI - 0.5 * cov.determinant().ln() - 0.5 * (d.transpose() * inv * &d)[(0, 0)];
            let f = cov_to_chol(&cov).unwrap();
            assert!((mvn_logpdf(&x, &m, &f).unwrap() - direct).abs() < 1e-10);
            assert!((mvn_logpdf_dense(&x, &m, &cov).unwrap() - direct).abs() < 1e-10);
        }
    }

    #[test]
    fn density_integrates_to_one_on_grid() {
        let cov = dmatrix![1.0, 0.4; 0.4, 0.5];
        let f = cov_to_chol(&cov).unwrap();
        let mean = DVector::from_vec(vec![0.5, -0.2]);
        let h = 0.02;
        let mut total = 0.0;
        let mut x = -8.0;
        while x < 8.0 {
            let mut y = -8.0;
            while y < 8.0 {
                let p = DVector::from_vec(vec![x + h / 2.0, y + h / 2.0]);
                total += mvn_logpdf(&p, &mean, &f).unwrap().exp() * h * h;
                y += h;
            }
            x += h;
        }
        assert!((total - 1.0).abs() < 1e-3, "{total}");
    }

    #[test]
    fn vech_round_trip() {
        let f = CholeskyFactor::from_vech(3, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        assert_eq!(f.raw()[(2, 0)], 0.3);
        assert_eq!(f.raw()[(1, 1)], 0.4);
        assert_eq!(f.vech(), vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
    }

    #[test]
    fn pullback_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = 3;
        let vech: Vec<f64> = (0..6).map(|_| rng.random_range(-0.5..0.5)).collect();
        let target = random_spd(p, &mut rng);
        // F(Σ) = tr(T Σ) has symmetric gradient T.
        let f = |v: &[f64]| {
            let s = CholeskyFactor::from_vech(p, v).unwrap().covariance();
            (&target * s).trace()
        };
        let analytic = CholeskyFactor::from_vech(p, &vech).unwrap().pullback_cov_gradient(&target);
        let flat_analytic = super::vech(&analytic);
        for i in 0..vech.len() {
            let mut up = vech.clone();
            let mut dn = vech.clone();
            up[i] += 1e-6;
            dn[i] -= 1e-6;
            let fd = (f(&up) - f(&dn)) / 2e-6;
            assert!((fd - flat_analytic[i]).abs() < 1e-5 * (1.0 + fd.abs()), "{i}: {fd} vs {}", flat_analytic[i]);
        }
    }

    #[test]
    fn log_sum_exp_edge_cases() {
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), f64::NEG_INFINITY);
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }
}
