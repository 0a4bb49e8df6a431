//! Hold-out evaluation: average log predictive density, ROC curves and TPR at
//! fixed false-positive rates.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{PviError, Result};
use crate::family::MixturePosterior;
use crate::gaussian::cov_to_chol;
use crate::likelihood::{log_predictive_density, pointwise_log_scores, resolve_gating, LikelihoodModel, PriorSpec};
use crate::optimizer::fmt17;
use crate::quadrature::QuadratureRule;

/// Mean log predictive density over a test set.
pub fn llpd(model: &LikelihoodModel, post: &MixturePosterior, test: &Dataset, quad: &QuadratureRule) -> Result<f64> {
    let scores = pointwise_log_scores(model, post, test, quad)?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Predictive `P(y = 1 | x)` for every row under a logistic model.
pub fn predictive_probabilities(post: &MixturePosterior, data: &Dataset, quad: &QuadratureRule) -> Result<Vec<f64>> {
    let gating = resolve_gating(post, data);
    let mut row = vec![0.0; data.n_covariates()];
    (0..data.n())
        .map(|i| {
            for (j, r) in row.iter_mut().enumerate() {
                *r = data.x[(i, j)];
            }
            let g: Vec<f64> = gating.row(i).iter().copied().collect();
            Ok(log_predictive_density(&LikelihoodModel::Logistic, post, &row, Some(&g), 1.0, quad)?.exp())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC curve from a sweep over the distinct scores, from (0,0) to (1,1).
/// An observation is called positive when its score is at least the threshold.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<RocPoint>> {
    if scores.len() != labels.len() {
        return Err(PviError::Metric(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(PviError::Metric("ROC needs both classes among the labels".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(PviError::Metric("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]));
    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut idx = 0;
    while idx < order.len() {
        let threshold = scores[order[idx]];
        while idx < order.len() && scores[order[idx]] == threshold {
            if labels[order[idx]] {
                tp += 1;
            } else {
                fp += 1;
            }
            idx += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    Ok(points)
}

/// Largest TPR attainable with FPR at most `target`.
pub fn tpr_at_fpr(roc: &[RocPoint], target: f64) -> f64 {
    roc.iter().filter(|p| p.fpr <= target).map(|p| p.tpr).fold(0.0, f64::max)
}

/// Trapezoidal area under the curve.
pub fn auc(roc: &[RocPoint]) -> f64 {
    roc.windows(2).map(|w| (w[1].fpr - w[0].fpr) * 0.5 * (w[0].tpr + w[1].tpr)).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocSummary {
    pub roc: Vec<RocPoint>,
    pub tpr_at_fpr: BTreeMap<String, f64>,
    pub auc: f64,
}

pub fn roc_and_tpr(scores: &[f64], labels: &[bool], fpr_targets: &[f64]) -> Result<RocSummary> {
    let roc = roc_curve(scores, labels)?;
    let tpr = fpr_targets.iter().map(|t| (fpr_key(*t), tpr_at_fpr(&roc, *t))).collect();
    Ok(RocSummary { auc: auc(&roc), roc, tpr_at_fpr: tpr })
}

/// Map key used for a target FPR, e.g. `"0.05"`.
pub fn fpr_key(target: f64) -> String {
    format!("{target}")
}

/// Metrics written by the CLI as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub llpd: f64,
    pub waic: Option<f64>,
    pub beta: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub tpr_at_fpr: BTreeMap<String, f64>,
    #[serde(skip)]
    pub roc: Vec<RocPoint>,
}

pub fn write_roc_csv<W: Write>(roc: &[RocPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["fpr", "tpr"])?;
    for p in roc {
        w.write_record([fmt17(p.fpr), fmt17(p.tpr)])?;
    }
    w.flush()?;
    Ok(())
}

/// Exact posterior of the linear model `y ~ N(Xθ, σ²)` under a Gaussian prior,
/// as a one-component mixture.
pub fn conjugate_gaussian_posterior(x: &DMatrix<f64>, y: &DVector<f64>, variance: f64, prior: &PriorSpec) -> Result<MixturePosterior> {
    let p = x.ncols();
    let prior_precision = match prior {
        PriorSpec::Isotropic { sd } => DMatrix::identity(p, p) / (sd * sd),
        PriorSpec::General { precision, .. } => precision.clone(),
    };
    let precision = x.transpose() * x / variance + prior_precision;
    let cov = precision
        .try_inverse()
        .ok_or_else(|| PviError::Factorization("posterior precision is singular".into()))?;
    let cov = (&cov + cov.transpose()) * 0.5;
    let mean = &cov * (x.transpose() * y) / variance;
    MixturePosterior::single(mean, cov_to_chol(&cov)?)
}
