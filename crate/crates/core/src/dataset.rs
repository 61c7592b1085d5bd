//! Observational data: ingestion, standardization and cross-fitting folds.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::rng::{self, streams};

/// What to do with rows that contain NaN or infinite cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NonFinitePolicy {
    /// Fail with an error naming the offending row.
    #[default]
    Reject,
    /// Silently drop such rows.
    Drop,
}

/// Column roles for CSV ingestion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvSchema {
    pub covariates: Vec<String>,
    pub exposures: Vec<String>,
    pub outcome: String,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    #[serde(default)]
    pub non_finite: NonFinitePolicy,
}

fn default_delimiter() -> char {
    ','
}

impl CsvSchema {
    pub fn new(covariates: &[&str], exposures: &[&str], outcome: &str) -> Self {
        Self {
            covariates: covariates.iter().map(|s| s.to_string()).collect(),
            exposures: exposures.iter().map(|s| s.to_string()).collect(),
            outcome: outcome.to_string(),
            delimiter: ',',
            non_finite: NonFinitePolicy::Reject,
        }
    }
}

/// Per-column affine map from the working scale back to the raw scale:
/// `raw = mean + scale * working`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub x_mean: Vec<f64>,
    pub x_scale: Vec<f64>,
    pub w_mean: Vec<f64>,
    pub w_scale: Vec<f64>,
}

/// n observations of covariates `x` (n×p), exposures `w` (n×q) and outcome `y`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub w: Array2<f64>,
    pub y: Array1<f64>,
    pub covariate_names: Vec<String>,
    pub exposure_names: Vec<String>,
    pub outcome_name: String,
    pub standardization: Option<Standardization>,
}

impl Dataset {
    pub fn new(x: Array2<f64>, w: Array2<f64>, y: Array1<f64>) -> Result<Self> {
        let p = x.ncols();
        let q = w.ncols();
        let d = Self {
            covariate_names: (1..=p).map(|j| format!("x{j}")).collect(),
            exposure_names: (1..=q).map(|j| format!("w{j}")).collect(),
            outcome_name: "y".into(),
            x,
            w,
            y,
            standardization: None,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn with_names(mut self, covariates: Vec<String>, exposures: Vec<String>, outcome: String) -> Result<Self> {
        if covariates.len() != self.p() || exposures.len() != self.q() {
            return param("name count does not match column count");
        }
        self.covariate_names = covariates;
        self.exposure_names = exposures;
        self.outcome_name = outcome;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let n = self.y.len();
        if n == 0 {
            return Err(Error::EmptyData);
        }
        if n < 2 {
            return param("at least two observations are required");
        }
        if self.x.nrows() != n || self.w.nrows() != n {
            return param("x, w and y must have the same number of rows");
        }
        if self.p() == 0 || self.q() == 0 {
            return param("at least one covariate and one exposure are required");
        }
        for i in 0..n {
            let bad_x = self.x.row(i).iter().position(|v| !v.is_finite());
            let bad_w = self.w.row(i).iter().position(|v| !v.is_finite());
            if let Some(j) = bad_x {
                return Err(Error::NonFinite { row: i + 1, column: self.covariate_names[j].clone() });
            }
            if let Some(j) = bad_w {
                return Err(Error::NonFinite { row: i + 1, column: self.exposure_names[j].clone() });
            }
            if !self.y[i].is_finite() {
                return Err(Error::NonFinite { row: i + 1, column: self.outcome_name.clone() });
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn q(&self) -> usize {
        self.w.ncols()
    }

    /// Rows `idx` as a new dataset (same names and transform).
    pub fn select_rows(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select(Axis(0), idx),
            w: self.w.select(Axis(0), idx),
            y: self.y.select(Axis(0), idx),
            covariate_names: self.covariate_names.clone(),
            exposure_names: self.exposure_names.clone(),
            outcome_name: self.outcome_name.clone(),
            standardization: self.standardization.clone(),
        }
    }

    /// Concatenated `[x, w]` features of row `i`.
    pub fn xw_row(&self, i: usize) -> Vec<f64> {
        self.x.row(i).iter().chain(self.w.row(i).iter()).copied().collect()
    }

    /// Largest Euclidean norm of an exposure row.
    pub fn max_exposure_norm(&self) -> f64 {
        self.w
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt())
            .fold(0.0, f64::max)
    }

    /// Rescales X and W columns to sample mean 0 and sample sd 1. Y is untouched.
    /// The recorded transform composes with any earlier one, so it always maps
    /// back to the original raw scale.
    pub fn standardize(&self) -> Result<Dataset> {
        let (x, xm, xs) = standardize_columns(&self.x, &self.covariate_names)?;
        let (w, wm, ws) = standardize_columns(&self.w, &self.exposure_names)?;
        let standardization = match &self.standardization {
            None => Standardization { x_mean: xm, x_scale: xs, w_mean: wm, w_scale: ws },
            Some(prev) => Standardization {
                x_mean: compose_mean(&prev.x_mean, &prev.x_scale, &xm),
                x_scale: prev.x_scale.iter().zip(&xs).map(|(a, b)| a * b).collect(),
                w_mean: compose_mean(&prev.w_mean, &prev.w_scale, &wm),
                w_scale: prev.w_scale.iter().zip(&ws).map(|(a, b)| a * b).collect(),
            },
        };
        Ok(Dataset {
            x,
            w,
            y: self.y.clone(),
            covariate_names: self.covariate_names.clone(),
            exposure_names: self.exposure_names.clone(),
            outcome_name: self.outcome_name.clone(),
            standardization: Some(standardization),
        })
    }

    /// Inverts [`Dataset::standardize`]; a no-op on raw data.
    pub fn destandardize(&self) -> Dataset {
        let mut out = self.clone();
        if let Some(s) = &self.standardization {
            for (j, mut col) in out.x.columns_mut().into_iter().enumerate() {
                col.mapv_inplace(|v| s.x_mean[j] + s.x_scale[j] * v);
            }
            for (j, mut col) in out.w.columns_mut().into_iter().enumerate() {
                col.mapv_inplace(|v| s.w_mean[j] + s.w_scale[j] * v);
            }
        }
        out.standardization = None;
        out
    }

    /// Maps a tilt on the working scale to the raw exposure scale. Since
    /// `δᵀw = Σ δ_j (w_raw_j − m_j)/s_j`, the raw tilt is `δ_j / s_j`
    /// (the constant is absorbed by the normalizer).
    pub fn delta_to_raw(&self, delta: &[f64]) -> Vec<f64> {
        match &self.standardization {
            None => delta.to_vec(),
            Some(s) => delta.iter().zip(&s.w_scale).map(|(d, sc)| d / sc).collect(),
        }
    }

    pub fn delta_from_raw(&self, delta_raw: &[f64]) -> Vec<f64> {
        match &self.standardization {
            None => delta_raw.to_vec(),
            Some(s) => delta_raw.iter().zip(&s.w_scale).map(|(d, sc)| d * sc).collect(),
        }
    }
}

fn compose_mean(prev_mean: &[f64], prev_scale: &[f64], new_mean: &[f64]) -> Vec<f64> {
    prev_mean
        .iter()
        .zip(prev_scale)
        .zip(new_mean)
        .map(|((m, s), nm)| m + s * nm)
        .collect()
}

fn column_sd(col: ArrayView1<f64>, mean: f64) -> f64 {
    let n = col.len();
    let ss: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum();
    (ss / (n.max(2) - 1) as f64).sqrt()
}

fn standardize_columns(a: &Array2<f64>, names: &[String]) -> Result<(Array2<f64>, Vec<f64>, Vec<f64>)> {
    let mut out = a.clone();
    let mut means = Vec::with_capacity(a.ncols());
    let mut scales = Vec::with_capacity(a.ncols());
    for (j, mut col) in out.columns_mut().into_iter().enumerate() {
        let mean = col.sum() / col.len() as f64;
        let sd = column_sd(col.view(), mean);
        if !(sd > 1e-12 * mean.abs().max(1.0)) {
            return Err(Error::ConstantColumn(names[j].clone()));
        }
        col.mapv_inplace(|v| (v - mean) / sd);
        means.push(mean);
        scales.push(sd);
    }
    Ok((out, means, scales))
}

/// Reads a CSV file with a header row into a [`Dataset`]. Row order is preserved.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let file = std::fs::File::open(path.as_ref())?;
    read_csv(file, schema)
}

pub fn read_csv<R: std::io::Read>(reader: R, schema: &CsvSchema) -> Result<Dataset> {
    let mut all: Vec<&String> = schema.covariates.iter().chain(&schema.exposures).collect();
    all.push(&schema.outcome);
    for (i, a) in all.iter().enumerate() {
        if all[..i].contains(a) {
            return Err(Error::Schema(format!("column '{a}' assigned to more than one role")));
        }
    }
    if schema.covariates.is_empty() || schema.exposures.is_empty() {
        return Err(Error::Schema("at least one covariate and one exposure column required".into()));
    }
    if !schema.delimiter.is_ascii() {
        return Err(Error::Schema("delimiter must be an ASCII character".into()));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter as u8)
        .has_headers(true)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    let find = |name: &String| -> Result<usize> {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("missing column '{name}'")))
    };
    let xi: Vec<usize> = schema.covariates.iter().map(find).collect::<Result<_>>()?;
    let wi: Vec<usize> = schema.exposures.iter().map(find).collect::<Result<_>>()?;
    let yi = find(&schema.outcome)?;

    let (p, q) = (xi.len(), wi.len());
    let mut xs = Vec::new();
    let mut ws = Vec::new();
    let mut ys = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let row = r + 1;
        let cell = |idx: usize, name: &String| -> Result<f64> {
            let raw = record.get(idx).ok_or_else(|| Error::Parse {
                row,
                column: name.clone(),
                message: "missing cell".into(),
            })?;
            raw.trim().parse::<f64>().map_err(|e| Error::Parse {
                row,
                column: name.clone(),
                message: format!("'{raw}' is not numeric ({e})"),
            })
        };
        let xrow: Vec<f64> = xi.iter().zip(&schema.covariates).map(|(&i, n)| cell(i, n)).collect::<Result<_>>()?;
        let wrow: Vec<f64> = wi.iter().zip(&schema.exposures).map(|(&i, n)| cell(i, n)).collect::<Result<_>>()?;
        let yv = cell(yi, &schema.outcome)?;
        let bad = xrow
            .iter()
            .zip(&schema.covariates)
            .chain(wrow.iter().zip(&schema.exposures))
            .chain(std::iter::once((&yv, &schema.outcome)))
            .find(|(v, _)| !v.is_finite());
        if let Some((_, name)) = bad {
            match schema.non_finite {
                NonFinitePolicy::Reject => return Err(Error::NonFinite { row, column: name.clone() }),
                NonFinitePolicy::Drop => continue,
            }
        }
        xs.extend(xrow);
        ws.extend(wrow);
        ys.push(yv);
    }
    if ys.is_empty() {
        return Err(Error::EmptyData);
    }
    let n = ys.len();
    let x = Array2::from_shape_vec((n, p), xs).expect("shape");
    let w = Array2::from_shape_vec((n, q), ws).expect("shape");
    Dataset::new(x, w, Array1::from(ys))?.with_names(
        schema.covariates.clone(),
        schema.exposures.clone(),
        schema.outcome.clone(),
    )
}

/// Partition of `0..n` into `k` folds for cross-fitting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub fold_of: Vec<usize>,
    pub k: usize,
}

impl FoldAssignment {
    pub fn fold_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] == fold).collect()
    }

    pub fn train_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] != fold).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &f in &self.fold_of {
            s[f] += 1;
        }
        s
    }
}

/// Seeded shuffle of `0..n` followed by round-robin assignment.
pub fn assign_folds(n: usize, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 || k > n {
        return param(format!("fold count must satisfy 2 <= K <= n (K={k}, n={n})"));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::rng(rng::sub_seed(seed, streams::FOLDS)));
    let mut fold_of = vec![0; n];
    for (pos, &i) in perm.iter().enumerate() {
        fold_of[i] = pos % k;
    }
    Ok(FoldAssignment { fold_of, k })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn toy() -> Dataset {
        Dataset::new(
            array![[1.0, 10.0], [2.0, 20.0], [3.0, 35.0]],
            array![[0.5], [1.5], [4.0]],
            array![1.0, 2.0, 3.0],
        )
        .unwrap()
    }

    #[test]
    fn standardize_hand_values() {
        let d = toy().standardize().unwrap();
        // column [1,2,3]: mean 2, sd 1
        assert!((d.x[(0, 0)] + 1.0).abs() < 1e-12);
        assert!(d.x[(1, 0)].abs() < 1e-12);
        assert!((d.x[(2, 0)] - 1.0).abs() < 1e-12);
        assert_eq!(d.y, toy().y);
    }

    #[test]
    fn standardize_is_idempotent_and_round_trips() {
        let raw = toy();
        let s1 = raw.standardize().unwrap();
        let s2 = s1.standardize().unwrap();
        for (a, b) in s1.x.iter().zip(s2.x.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        let back = s2.destandardize();
        for (a, b) in back.x.iter().zip(raw.x.iter()).chain(back.w.iter().zip(raw.w.iter())) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn constant_column_is_named() {
        let d = Dataset::new(array![[1.0], [1.0], [1.0]], array![[1.0], [2.0], [3.0]], array![0.0, 0.0, 1.0])
            .unwrap();
        match d.standardize() {
            Err(Error::ConstantColumn(name)) => assert_eq!(name, "x1"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn folds_even_and_remainder() {
        let f = assign_folds(10, 5, 3).unwrap();
        assert!(f.sizes().iter().all(|&s| s == 2));
        let mut s = assign_folds(11, 5, 3).unwrap().sizes();
        s.sort();
        assert_eq!(s, vec![2, 2, 2, 2, 3]);
        assert_eq!(assign_folds(11, 5, 3).unwrap(), assign_folds(11, 5, 3).unwrap());
        assert!(assign_folds(4, 5, 0).is_err());
        assert!(assign_folds(4, 1, 0).is_err());
    }

    #[test]
    fn raw_delta_mapping_inverts() {
        let d = toy().standardize().unwrap();
        let delta = vec![0.3];
        let raw = d.delta_to_raw(&delta);
        assert!((d.delta_from_raw(&raw)[0] - 0.3).abs() < 1e-14);
    }
}
