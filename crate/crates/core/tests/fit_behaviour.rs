mod common;

use common::*;
use gmpvi::likelihood::{LikelihoodModel, PriorSpec};
use gmpvi::objective::{fit, ObjectiveConfig};
use gmpvi::optimizer::FitConfig;
use gmpvi::simulate::simulate_linear;

#[test]
fn conjugate_mean_recovered_at_large_beta() {
    let data = simulate_linear(100, &[0.5, -1.0], 0.5, 3).unwrap();
    let model = LikelihoodModel::GaussianFixed { variance: 0.5 };
    let prior = PriorSpec::isotropic(3.0).unwrap();
    let cfg = FitConfig { k_init: 1, max_steps: 20_000, seed: 1, ..Default::default() };
    let res = fit(&model, &prior, &data, &ObjectiveConfig::with_beta(100.0), &cfg).unwrap();
    let (mean, _) = conjugate_posterior(&data.x, &data.y, 0.5, 9.0);
    let fitted = &res.posterior.means()[0];
    eprintln!("steps {} converged {} fitted {fitted:?} exact {mean:?}", res.steps, res.converged);
    assert!((fitted - &mean).amax() < 0.02);
}
