//! Regression datasets: design matrix, responses, optional group labels and a
//! separate gating matrix, plus CSV loading and seeded train/test splits.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{PviError, Result};
use crate::rng::{stream, Stream};

/// Column-wise affine transform applied to covariates (and optionally the response).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub columns: Vec<String>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub group: Option<Vec<usize>>,
    /// Gating inputs; the design matrix is used when absent.
    pub gating: Option<DMatrix<f64>>,
    pub columns: Vec<String>,
    pub standardization: Option<Standardization>,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        let columns = (0..x.ncols()).map(|j| if j == 0 { "intercept".to_string() } else { format!("x{j}") }).collect();
        let ds = Dataset {
            x,
            y,
            group: None,
            gating: None,
            columns,
            standardization: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn with_gating(mut self, gating: DMatrix<f64>) -> Result<Self> {
        self.gating = Some(gating);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.ncols() == 0 {
            return Err(PviError::Data("design matrix has no columns".into()));
        }
        if self.x.nrows() != self.y.len() {
            return Err(PviError::Data(format!("{} design rows but {} responses", self.x.nrows(), self.y.len())));
        }
        if self.x.iter().chain(self.y.iter()).any(|v| v.is_nan()) {
            return Err(PviError::Data("NaN in data".into()));
        }
        if let Some(g) = &self.gating {
            if g.nrows() != self.y.len() || g.ncols() == 0 {
                return Err(PviError::Data("gating matrix does not match the data".into()));
            }
        }
        if let Some(g) = &self.group {
            if g.len() != self.y.len() {
                return Err(PviError::Data("group labels do not match the data".into()));
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.x.ncols()
    }

    pub fn gating_matrix(&self) -> &DMatrix<f64> {
        self.gating.as_ref().unwrap_or(&self.x)
    }

    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(rows),
            y: DVector::from_iterator(rows.len(), rows.iter().map(|&i| self.y[i])),
            group: self.group.as_ref().map(|g| rows.iter().map(|&i| g[i]).collect()),
            gating: self.gating.as_ref().map(|g| g.select_rows(rows)),
            columns: self.columns.clone(),
            standardization: self.standardization.clone(),
        }
    }

    /// Seeded shuffle split: the first `round(fraction·n)` shuffled rows train.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        let (train, test) = split_indices(self.n(), fraction, seed)?;
        Ok((self.select_rows(&train), self.select_rows(&test)))
    }

    /// Standardize design columns (all but a constant intercept) in place and
    /// return the statistics. Apply the same statistics to held-out data with
    /// [`Dataset::apply_standardization`].
    pub fn standardize_covariates(&mut self) -> Standardization {
        let mut means = vec![0.0; self.x.ncols()];
        let mut sds = vec![1.0; self.x.ncols()];
        for j in 0..self.x.ncols() {
            let col = self.x.column(j);
            let n = col.len() as f64;
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
            if var > 0.0 {
                means[j] = mean;
                sds[j] = var.sqrt();
            }
        }
        let s = Standardization {
            columns: self.columns.clone(),
            means,
            sds,
        };
        self.apply_standardization(&s);
        s
    }

    pub fn apply_standardization(&mut self, s: &Standardization) {
        for j in 0..self.x.ncols() {
            for i in 0..self.x.nrows() {
                self.x[(i, j)] = (self.x[(i, j)] - s.means[j]) / s.sds[j];
            }
        }
        if let Some(g) = self.gating.as_mut() {
            if g.ncols() == s.means.len() {
                for j in 0..g.ncols() {
                    for i in 0..g.nrows() {
                        g[(i, j)] = (g[(i, j)] - s.means[j]) / s.sds[j];
                    }
                }
            }
        }
        self.standardization = Some(s.clone());
    }
}

pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(PviError::Config(format!("split fraction {fraction} must lie in (0, 1)")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, Stream::Split));
    let n_train = (fraction * n as f64).round() as usize;
    let test = idx.split_off(n_train);
    Ok((idx, test))
}

/// Column roles for [`load_csv`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub response: String,
    /// Covariate columns in design order. Empty means every column matching `x<digits>`.
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default)]
    pub group: Option<String>,
    #[serde(default = "default_true")]
    pub intercept: bool,
}

fn default_true() -> bool {
    true
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            response: "y".into(),
            covariates: Vec::new(),
            group: None,
            intercept: true,
        }
    }
}

/// Raw named columns from a headed CSV file.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub headers: Vec<String>,
    pub columns: HashMap<String, Vec<f64>>,
    pub rows: usize,
}

impl CsvTable {
    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.columns
            .get(name)
            .map(|c| c.as_slice())
            .ok_or_else(|| PviError::Data(format!("missing column `{name}`")))
    }
}

pub fn read_table(path: &Path) -> Result<CsvTable> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.to_string()).collect();
    if headers.is_empty() {
        return Err(PviError::Data(format!("{}: empty header", path.display())));
    }
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); headers.len()];
    let mut rows = 0;
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        for (c, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                PviError::Data(format!(
                    "{}: row {} column `{}`: non-numeric value `{cell}`",
                    path.display(),
                    r + 2,
                    headers.get(c).map(String::as_str).unwrap_or("?")
                ))
            })?;
            if c < cols.len() {
                cols[c].push(v);
            }
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(PviError::Data(format!("{}: no data rows", path.display())));
    }
    Ok(CsvTable {
        columns: headers.iter().cloned().zip(cols).collect(),
        headers,
        rows,
    })
}

pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let table = read_table(path)?;
    let covariates: Vec<String> = if schema.covariates.is_empty() {
        let mut c: Vec<String> = table
            .headers
            .iter()
            .filter(|h| h.len() > 1 && h.starts_with('x') && h[1..].chars().all(|ch| ch.is_ascii_digit()))
            .cloned()
            .collect();
        c.sort_by_key(|h| h[1..].parse::<usize>().unwrap_or(usize::MAX));
        c
    } else {
        schema.covariates.clone()
    };
    let n = table.rows;
    let offset = usize::from(schema.intercept);
    let p = covariates.len() + offset;
    if p == 0 {
        return Err(PviError::Data("no covariates and no intercept".into()));
    }
    let mut x = DMatrix::from_element(n, p, 1.0);
    for (j, name) in covariates.iter().enumerate() {
        let col = table.column(name)?;
        for i in 0..n {
            x[(i, j + offset)] = col[i];
        }
    }
    let y = DVector::from_column_slice(table.column(&schema.response)?);
    let group = match &schema.group {
        Some(g) => Some(
            table
                .column(g)?
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    if *v >= 0.0 && v.fract() == 0.0 {
                        Ok(*v as usize)
                    } else {
                        Err(PviError::Data(format!("row {}: group label {v} is not a non-negative integer", i + 2)))
                    }
                })
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    let mut columns = Vec::with_capacity(p);
    if schema.intercept {
        columns.push("intercept".to_string());
    }
    columns.extend(covariates);
    let ds = Dataset {
        x,
        y,
        group,
        gating: None,
        columns,
        standardization: None,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn three_row_file_round_trips() {
        let f = write("y,x1,x2\n1.5,0.25,-3\n0,1e-3,2\n-2.125,7,0.5\n");
        let ds = load_csv(f.path(), &CsvSchema::default()).unwrap();
        assert_eq!(ds.n(), 3);
        assert_eq!(ds.x.ncols(), 3);
        assert_eq!(ds.y.as_slice(), &[1.5, 0.0, -2.125]);
        assert_eq!(ds.x[(0, 1)], 0.25);
        assert_eq!(ds.x[(1, 1)], 1e-3);
        assert_eq!(ds.x[(2, 2)], 0.5);
        assert_eq!(ds.x.column(0).sum(), 3.0);
        assert_eq!(ds.columns, vec!["intercept", "x1", "x2"]);
    }

    #[test]
    fn loader_errors_name_the_problem() {
        let f = write("y,x1\n1,2\n3,abc\n");
        let err = load_csv(f.path(), &CsvSchema::default()).unwrap_err().to_string();
        assert!(err.contains("row 3") && err.contains("x1"), "{err}");

        let f = write("x1,x2\n1,2\n");
        let err = load_csv(f.path(), &CsvSchema::default()).unwrap_err().to_string();
        assert!(err.contains("`y`"), "{err}");

        let f = write("y,x1\n");
        assert!(load_csv(f.path(), &CsvSchema::default()).is_err());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let (train, test) = split_indices(19_020, 2.0 / 3.0, 1).unwrap();
        assert_eq!(train.len(), 12_680);
        assert_eq!(test.len(), 19_020 - 12_680);
        let (again, _) = split_indices(19_020, 2.0 / 3.0, 1).unwrap();
        assert_eq!(train, again);
        let (other, _) = split_indices(19_020, 2.0 / 3.0, 2).unwrap();
        assert_ne!(train, other);
        assert!(split_indices(10, 1.0, 0).is_err());
    }

    #[test]
    fn standardization_skips_intercept() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let mut ds = Dataset::new(x, DVector::zeros(3)).unwrap();
        let s = ds.standardize_covariates();
        assert_eq!(s.means[0], 0.0);
        assert_eq!(s.sds[0], 1.0);
        assert!((ds.x[(0, 1)] + 1.0).abs() < 1e-12);
        assert!(ds.x.column(0).iter().all(|v| *v == 1.0));
    }
}
