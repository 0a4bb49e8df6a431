//! Adam ascent on a PVI objective with periodic component pruning.
//!
//! The loop is generic over the variational family so the GLM, hierarchical and
//! latent-GP problems share one implementation.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PviError, Result};
use crate::rng::{stream, Stream};

/// What a flat parameter coordinate belongs to, used to drop optimizer state
/// when components are pruned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Owner {
    /// Gating vector of component `k` (never the anchor component).
    Gating(usize),
    /// Mean, covariance or other per-component parameter.
    Component(usize),
    /// Parameters not tied to a mixture component.
    Shared,
}

pub trait VariationalParams: Clone {
    fn to_flat(&self) -> Vec<f64>;
    fn set_flat(&mut self, flat: &[f64]) -> Result<()>;
    fn n_components(&self) -> usize;
    /// Owner of each coordinate of [`VariationalParams::to_flat`], in order.
    fn owners(&self) -> Vec<Owner>;
    /// Remove components, re-anchoring the gating at the first survivor.
    fn remove(&mut self, removed: &[usize]);
}

/// One evaluation of the objective `score + β·regularizer`.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub objective: f64,
    pub score: f64,
    pub regularizer: f64,
    /// Gradient over the flat parameters; empty when not requested.
    pub gradient: Vec<f64>,
    /// Observations whose predictive density hit the floor.
    pub floored: usize,
}

pub trait PviProblem {
    type Params: VariationalParams;

    fn n_obs(&self) -> usize;

    /// Evaluate at `params`. With `batch`, the data sums are restricted to those
    /// rows and rescaled by `n / |batch|`.
    fn evaluate(&self, params: &Self::Params, beta: f64, with_grad: bool, batch: Option<&[usize]>) -> Result<Evaluation>;

    /// Gating weights at the training inputs, `n × K`.
    fn training_weights(&self, params: &Self::Params) -> Result<DMatrix<f64>>;

    fn initialize(&self, k: usize, rng: &mut ChaCha20Rng) -> Result<Self::Params>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub step_size: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub max_steps: usize,
    pub prune_interval: usize,
    pub convergence_tol: f64,
    pub convergence_window: usize,
    pub k_init: usize,
    pub seed: u64,
    /// Rows per step for the data sums; `None` uses all rows.
    pub minibatch: Option<usize>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            step_size: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            max_steps: 50_000,
            prune_interval: 2000,
            convergence_tol: 1e-6,
            convergence_window: 200,
            k_init: 10,
            seed: 0,
            minibatch: None,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PviError::Config(m.to_string()));
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad("step_size must be positive");
        }
        if !(self.adam_beta1 > 0.0 && self.adam_beta1 < 1.0 && self.adam_beta2 > 0.0 && self.adam_beta2 < 1.0) {
            return bad("Adam decay rates must lie in (0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        if self.prune_interval == 0 {
            return bad("prune_interval must be at least 1");
        }
        if self.k_init == 0 {
            return bad("k_init must be at least 1");
        }
        if self.convergence_window == 0 {
            return bad("convergence_window must be at least 1");
        }
        if self.minibatch == Some(0) {
            return bad("minibatch size must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneEvent {
    pub step: usize,
    pub removed: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult<P> {
    pub posterior: P,
    pub objective_trace: Vec<f64>,
    pub score_trace: Vec<f64>,
    pub regularizer_trace: Vec<f64>,
    pub k_trace: Vec<usize>,
    pub pruned_history: Vec<PruneEvent>,
    pub beta: f64,
    pub converged: bool,
    pub steps: usize,
    /// Steps at which at least one predictive density was floored.
    pub floored_steps: usize,
}

impl<P> FitResult<P> {
    pub fn final_objective(&self) -> f64 {
        self.objective_trace.last().copied().unwrap_or(f64::NAN)
    }

    pub fn map<Q>(self, f: impl FnOnce(P) -> Q) -> FitResult<Q> {
        FitResult {
            posterior: f(self.posterior),
            objective_trace: self.objective_trace,
            score_trace: self.score_trace,
            regularizer_trace: self.regularizer_trace,
            k_trace: self.k_trace,
            pruned_history: self.pruned_history,
            beta: self.beta,
            converged: self.converged,
            steps: self.steps,
            floored_steps: self.floored_steps,
        }
    }

    /// Trace as CSV: `step,objective,K,score_term,regularizer_term`.
    pub fn write_trace_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "objective", "K", "score_term", "regularizer_term"])?;
        for t in 0..self.objective_trace.len() {
            w.write_record([
                t.to_string(),
                fmt17(self.objective_trace[t]),
                self.k_trace[t].to_string(),
                fmt17(self.score_trace[t]),
                fmt17(self.regularizer_trace[t]),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_trace(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_trace_csv(&mut buf)?;
        crate::io::write_atomic(path, &buf)
    }
}

/// `%.17g`: seventeen significant digits, enough to round-trip any `f64`.
pub fn fmt17(v: f64) -> String {
    if !v.is_finite() {
        return format!("{v}");
    }
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{v:.16e}");
    let (mantissa, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if (-5..17).contains(&exp) {
        let decimals = (16 - exp).max(0) as usize;
        trim(&format!("{v:.decimals$}"))
    } else {
        format!("{}e{}{:02}", trim(mantissa), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

/// Components that are not the argmax gating weight for any row; ties go to
/// the lowest index. Never removes every component.
pub fn dominated_components(weights: &DMatrix<f64>) -> Vec<usize> {
    let k = weights.ncols();
    let mut dominant = vec![false; k];
    for i in 0..weights.nrows() {
        let mut best = 0;
        for j in 1..k {
            if weights[(i, j)] > weights[(i, best)] {
                best = j;
            }
        }
        dominant[best] = true;
    }
    let removed: Vec<usize> = (0..k).filter(|j| !dominant[*j]).collect();
    if removed.len() == k {
        Vec::new()
    } else {
        removed
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, x: &mut [f64], grad: &[f64], cfg: &FitConfig) {
        self.t += 1;
        let b1 = cfg.adam_beta1;
        let b2 = cfg.adam_beta2;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for j in 0..x.len() {
            self.m[j] = b1 * self.m[j] + (1.0 - b1) * grad[j];
            self.v[j] = b2 * self.v[j] + (1.0 - b2) * grad[j] * grad[j];
            let mh = self.m[j] / c1;
            let vh = self.v[j] / c2;
            // ascent
            x[j] += cfg.step_size * mh / (vh.sqrt() + cfg.adam_eps);
        }
    }

    fn retain(&mut self, keep: &[bool]) {
        let filter = |v: &mut Vec<f64>| {
            let mut it = keep.iter();
            v.retain(|_| *it.next().unwrap());
        };
        filter(&mut self.m);
        filter(&mut self.v);
    }
}

fn retained_coordinates(owners: &[Owner], removed: &[usize], n_components: usize) -> Vec<bool> {
    let anchor = (0..n_components).find(|k| !removed.contains(k)).unwrap_or(0);
    owners
        .iter()
        .map(|o| match o {
            Owner::Shared => true,
            Owner::Component(k) => !removed.contains(k),
            Owner::Gating(k) => !removed.contains(k) && *k != anchor,
        })
        .collect()
}

const INIT_ATTEMPTS: usize = 10;

/// Run Adam ascent with pruning every `prune_interval` steps until an interval
/// passes without removal, then continue until the objective changes by less
/// than `convergence_tol` (relative) over `convergence_window` steps.
pub fn fit_problem<P: PviProblem>(problem: &P, beta: f64, cfg: &FitConfig) -> Result<FitResult<P::Params>>
where
    P::Params: Clone,
{
    cfg.validate()?;
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(PviError::Config(format!("beta must be positive, got {beta}")));
    }
    if problem.n_obs() == 0 {
        return Err(PviError::EmptyData("cannot fit to an empty dataset".into()));
    }
    let mut init_rng = stream(cfg.seed, Stream::Init);
    let mut batch_rng = stream(cfg.seed, Stream::Minibatch);
    let n = problem.n_obs();

    let mut params = None;
    for attempt in 0..INIT_ATTEMPTS {
        let candidate = problem.initialize(cfg.k_init, &mut init_rng)?;
        match problem.evaluate(&candidate, beta, false, None) {
            Ok(e) if e.objective.is_finite() => {
                params = Some(candidate);
                break;
            }
            Ok(_) | Err(PviError::Numerical(_)) | Err(PviError::Factorization(_)) => {
                log::warn!("initialization attempt {} gave a non-finite objective", attempt + 1);
            }
            Err(e) => return Err(e),
        }
    }
    let mut params = params.ok_or_else(|| {
        PviError::Initialization(format!("objective not finite after {INIT_ATTEMPTS} initial draws"))
    })?;

    let mut flat = params.to_flat();
    let mut adam = Adam::new(flat.len());
    let mut result = FitResult {
        posterior: params.clone(),
        objective_trace: Vec::new(),
        score_trace: Vec::new(),
        regularizer_trace: Vec::new(),
        k_trace: Vec::new(),
        pruned_history: Vec::new(),
        beta,
        converged: false,
        steps: 0,
        floored_steps: 0,
    };
    let mut pruning = true;
    let mut settled_from = 0usize;
    let mut rows: Vec<usize> = (0..n).collect();
    let batch_size = cfg.minibatch.filter(|b| *b < n);
    let mut step_size_scale = 1.0;

    for step in 0..cfg.max_steps {
        let batch = batch_size.map(|b| {
            use rand::seq::SliceRandom;
            let (head, _) = rows.partial_shuffle(&mut batch_rng, b);
            let mut sel = head.to_vec();
            sel.sort_unstable();
            sel
        });
        let eval = problem.evaluate(&params, beta, true, batch.as_deref())?;
        if !eval.objective.is_finite() {
            return Err(PviError::Numerical(format!("objective became non-finite at step {step}")));
        }
        result.objective_trace.push(eval.objective);
        result.score_trace.push(eval.score);
        result.regularizer_trace.push(eval.regularizer);
        result.k_trace.push(params.n_components());
        if eval.floored > 0 {
            result.floored_steps += 1;
        }
        result.steps = step + 1;

        if eval.gradient.iter().any(|g| !g.is_finite()) {
            step_size_scale *= 0.5;
            log::warn!("non-finite gradient at step {step}; shrinking the step size");
            if step_size_scale < 1e-6 {
                return Err(PviError::Numerical("gradient stayed non-finite".into()));
            }
            continue;
        }

        let local = FitConfig { step_size: cfg.step_size * step_size_scale, ..cfg.clone() };
        adam.step(&mut flat, &eval.gradient, &local);
        params.set_flat(&flat)?;

        let done = step + 1;
        if pruning && done % cfg.prune_interval == 0 {
            let w = problem.training_weights(&params)?;
            let removed = dominated_components(&w);
            if removed.is_empty() {
                pruning = false;
                settled_from = done;
            } else {
                let keep = retained_coordinates(&params.owners(), &removed, params.n_components());
                params.remove(&removed);
                adam.retain(&keep);
                flat = params.to_flat();
                debug_assert_eq!(flat.len(), adam.m.len());
                log::info!("step {done}: pruned components {removed:?}, K = {}", params.n_components());
                result.pruned_history.push(PruneEvent { step: done, removed });
            }
        }

        let window = cfg.convergence_window;
        if !pruning && step + 1 >= settled_from + window && step >= window {
            let now = result.objective_trace[step];
            let then = result.objective_trace[step - window];
            if ((now - then) / then.abs().max(1e-300)).abs() < cfg.convergence_tol {
                result.converged = true;
                break;
            }
        }
    }
    result.posterior = params;
    Ok(result)
}
