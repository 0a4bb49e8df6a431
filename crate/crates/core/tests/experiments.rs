use std::io::Write;
use std::path::Path;

use gmpvi::data::{read_table, split_indices};
use gmpvi::experiments::*;
use gmpvi::optimizer::FitConfig;

fn write_file(dir: &Path, name: &str, content: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::File::create(&p).unwrap().write_all(content.as_bytes()).unwrap();
    p
}

fn quick_fit() -> FitConfig {
    FitConfig {
        max_steps: 300,
        prune_interval: 100,
        k_init: 3,
        ..FitConfig::default()
    }
}

#[test]
fn aids_design_uses_reference_quarter_coding() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = String::from("y,x,qrt\n");
    for t in 1..=45 {
        s += &format!("{},{t},{}\n", 2 * t + 1, (t - 1) % 4 + 1);
    }
    let p = write_file(dir.path(), "aids.csv", &s);
    let d = aids_dataset(&p).unwrap();
    assert_eq!((d.n(), d.n_covariates()), (31, 6));
    let t = d.x.column(1);
    assert_eq!((t.min(), t.max()), (0.0, 1.0));
    for i in 0..d.n() {
        assert_eq!(d.x[(i, 2)], d.x[(i, 1)] * d.x[(i, 1)]);
        let dummies: f64 = (3..6).map(|j| d.x[(i, j)]).sum();
        if i % 4 == 0 {
            assert_eq!(dummies, 0.0);
        } else {
            assert_eq!(dummies, 1.0);
            assert_eq!(d.x[(i, 2 + i % 4)], 1.0);
        }
    }
    let missing = aids_dataset(&dir.path().join("nope.csv")).unwrap_err().to_string();
    assert!(missing.contains("fetch-data"), "{missing}");
}

#[test]
fn telescope_loader_reads_raw_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_file(dir.path(), "magic.data", "1,2,3,4,5,6,7,8,9,10,g\n0.5,2,3,4,5,6,7,8,9,-1,h\n");
    let d = load_telescope(&p).unwrap();
    assert_eq!((d.n(), d.n_covariates()), (2, 11));
    assert_eq!(d.y.as_slice(), &[1.0, 0.0]);
    assert_eq!(d.x[(1, 10)], -1.0);
    let bad = write_file(dir.path(), "bad.data", "1,2,3,4,5,6,7,8,9,10,g\n0.5,2,x,4,5,6,7,8,9,-1,h\n");
    let err = load_telescope(&bad).unwrap_err().to_string();
    assert!(err.contains("row 2") && err.contains("column 3"), "{err}");
}

#[test]
fn telescope_split_sizes() {
    let (train, test) = split_indices(19020, 2.0 / 3.0, 7).unwrap();
    assert_eq!((train.len(), test.len()), (12680, 6340));
    assert_eq!(split_indices(19020, 2.0 / 3.0, 7).unwrap().0, train);
}

#[test]
fn iq_loader_standardizes_scores() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_file(dir.path(), "iq.csv", "kid_score,mom_hs,mom_iq\n100,1,110\n80,0,90\n120,1,100\n90,0,95\n");
    let d = load_iq(&p).unwrap();
    assert!(d.y.sum().abs() < 1e-12);
    assert!((d.y.iter().map(|v| v * v).sum::<f64>() / 3.0 - 1.0).abs() < 1e-12);
    assert_eq!(d.x.column(1).as_slice(), &[1.0, 0.0, 1.0, 0.0]);
}

#[test]
fn config_parses_from_toml() {
    let cfg = ExperimentConfig::from_toml_str(
        r#"
        name = "quad"
        beta = 0.01
        seed = 3
        [data]
        source = "quadrants"
        n = 100
        n_test = 50
        [fit]
        max_steps = 10
        "#,
    )
    .unwrap();
    assert_eq!(cfg.data, DataSource::Quadrants { n: 100, n_test: 50 });
    assert_eq!(cfg.fit.max_steps, 10);
    assert_eq!(cfg.fit.step_size, FitConfig::default().step_size);
    assert!(ExperimentConfig::from_toml_str("beta = 1\n[data]\nsource = \"cubic\"\nn = 5\nn_test = 5\nbogus = 1\n").is_err());
    assert!(ExperimentConfig::from_toml_str("[data]\nsource = \"cubic\"\nn = 5\nn_test = 5\n").is_err());
    assert!(ExperimentConfig::from_toml_str("beta = 1\nsplit_fraction = 1.5\n[data]\nsource = \"cubic\"\nn = 5\nn_test = 5\n").is_err());
}

fn reload_matches(path: &Path) {
    let text = std::fs::read_to_string(path).unwrap();
    let table = read_table(path).unwrap();
    let first: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    for (h, cell) in table.headers.iter().zip(first) {
        let v: f64 = cell.parse().unwrap();
        assert_eq!(table.column(h).unwrap()[0].to_bits(), v.to_bits());
    }
}

#[test]
fn cubic_experiment_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::new(DataSource::Cubic { n: 60, n_test: 40 });
    cfg.beta = Some(0.1);
    cfg.fit = quick_fit();
    cfg.out_dir = dir.path().to_path_buf();
    cfg.grid_points = 11;
    let out = run_experiment(&cfg).unwrap();
    for f in ["fit.json", "trace.csv", "metrics.json", "predictive_grid.csv", "weights.csv", "cluster_map.csv", "baseline_metrics.json"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
    let keys: Vec<&String> = metrics.as_object().unwrap().keys().collect();
    assert_eq!(keys, ["K", "beta", "llpd", "tpr_at_fpr", "waic"]);
    assert!(out.report.llpd.is_finite() && out.report.waic.is_some());
    assert!(out.baseline.unwrap().llpd.is_finite());
    let grid = read_table(&dir.path().join("predictive_grid.csv")).unwrap();
    assert_eq!(grid.rows, 11);
    reload_matches(&dir.path().join("predictive_grid.csv"));
    reload_matches(&dir.path().join("weights.csv"));
    reload_matches(&dir.path().join("trace.csv"));
}

#[test]
fn quadrant_experiment_reports_roc() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::new(DataSource::Quadrants { n: 80, n_test: 200 });
    cfg.beta = Some(1.0);
    cfg.fit = quick_fit();
    cfg.baseline = false;
    cfg.out_dir = dir.path().to_path_buf();
    let out = run_experiment(&cfg).unwrap();
    assert_eq!(out.report.tpr_at_fpr.len(), cfg.fpr_targets.len());
    assert!(dir.path().join("roc.csv").exists());
    assert!(out.fit_json.contains("\"cholesky_raw\""));
}

#[test]
fn grid_search_experiment_tabulates_waic() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::new(DataSource::Linear {
        n: 40,
        n_test: 40,
        theta: vec![0.5, -1.0],
        variance: 0.5,
    });
    cfg.beta_search = Some(gmpvi::selection::BetaSearchConfig {
        grid: vec![0.1, 10.0],
        waic_samples: 200,
        ..Default::default()
    });
    cfg.fit = quick_fit();
    cfg.baseline = false;
    cfg.out_dir = dir.path().to_path_buf();
    let out = run_experiment(&cfg).unwrap();
    assert_eq!(out.beta_table.len(), 2);
    assert!(dir.path().join("beta_waic.csv").exists());
}

#[test]
fn hierarchical_experiment_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = String::from("time,group,y\n");
    for (i, t) in [1.0, 2.0, 4.0, 7.0].iter().enumerate() {
        for (j, g) in ["5", "10", "20"].iter().enumerate() {
            s += &format!("{t},{g},{}\n", 10.0 + t - j as f64 + 0.1 * ((i * 3 + j) % 5) as f64);
        }
    }
    let p = write_file(dir.path(), "temps.csv", &s);
    let before = std::fs::read(&p).unwrap();
    let mut cfg = ExperimentConfig::new(DataSource::Hierarchical { path: p.clone(), test_path: None });
    cfg.beta = Some(1.0);
    cfg.fit = quick_fit();
    cfg.grid_points = 5;
    cfg.out_dir = dir.path().join("out");
    let out = run_experiment(&cfg).unwrap();
    assert!(out.report.llpd.is_finite());
    assert_eq!(std::fs::read(&p).unwrap(), before);
    let grid = read_table(&cfg.out_dir.join("predictive_grid.csv")).unwrap();
    assert_eq!(grid.rows, 15);
}

#[test]
fn gp_experiment_writes_quantiles() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::new(DataSource::TwoRegime { n: 40, n_test: 20 });
    cfg.beta = Some(1.0);
    cfg.fit = quick_fit();
    cfg.inducing = Some(10);
    cfg.grid_points = 7;
    cfg.out_dir = dir.path().to_path_buf();
    let out = run_experiment(&cfg).unwrap();
    assert!(out.report.llpd.is_finite());
    let q = read_table(&dir.path().join("predictive_grid.csv")).unwrap();
    assert_eq!(q.headers, ["x", "q01", "q05", "q25", "q50", "q75", "q95", "q99"]);
    for i in 0..q.rows {
        let vals: Vec<f64> = q.headers[1..].iter().map(|h| q.column(h).unwrap()[i]).collect();
        assert!(vals.windows(2).all(|w| w[0] <= w[1]));
    }
}

#[test]
fn stage_names_surface_in_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::new(DataSource::Telescope { path: dir.path().join("absent.data") });
    cfg.beta = Some(1.0);
    cfg.out_dir = dir.path().to_path_buf();
    let err = run_experiment(&cfg).unwrap_err();
    assert!(err.to_string().starts_with("data:"), "{err}");
    assert!(matches!(err.root(), gmpvi::PviError::Csv(_) | gmpvi::PviError::Io(_)));
}

#[test]
fn fitted_baseline_grid_uses_its_own_gating() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::new(DataSource::Quadrants { n: 60, n_test: 100 });
    cfg.beta = Some(0.5);
    cfg.fit = quick_fit();
    cfg.out_dir = dir.path().to_path_buf();
    let out = run_experiment(&cfg).unwrap();
    assert!(out.baseline.is_some());
    let grid = read_table(&dir.path().join("predictive_grid.csv")).unwrap();
    assert!(grid.column("baseline_mean").unwrap().iter().all(|v| (0.0..=1.0).contains(v)));
}
