//! Supervised regression learners used for every nuisance function.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use super::gbt::{self, GbtModel, GbtParams};
use crate::error::{param, Error, Result};

/// Learner configuration. Fitting is deterministic given the seed passed to [`RegressorSpec::fit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegressorSpec {
    Ridge {
        #[serde(default = "default_lambda")]
        lambda: f64,
        #[serde(default = "default_degree")]
        degree: u8,
    },
    Gbt(GbtParams),
}

fn default_lambda() -> f64 {
    1.0
}

fn default_degree() -> u8 {
    1
}

impl RegressorSpec {
    pub fn ridge(lambda: f64, degree: u8) -> Self {
        RegressorSpec::Ridge { lambda, degree }
    }

    pub fn fit(&self, x: ArrayView2<f64>, y: ArrayView1<f64>, seed: u64) -> Result<FittedRegressor> {
        if x.nrows() != y.len() {
            return param("input rows and target length differ");
        }
        if y.iter().any(|v| !v.is_finite()) || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite regression input".into()));
        }
        match self {
            RegressorSpec::Ridge { lambda, degree } => fit_ridge(x, y, *lambda, *degree).map(FittedRegressor::Ridge),
            RegressorSpec::Gbt(p) => gbt::fit_gbt(x, y, p, seed).map(FittedRegressor::Gbt),
        }
    }

    pub fn label(&self) -> String {
        match self {
            RegressorSpec::Ridge { lambda, degree } => format!("ridge(lambda={lambda},degree={degree})"),
            RegressorSpec::Gbt(p) => format!(
                "gbt(trees={},depth={},rate={},subsample={},min_leaf={})",
                p.trees, p.depth, p.rate, p.subsample, p.min_leaf
            ),
        }
    }
}

/// A trained learner.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FittedRegressor {
    Ridge(RidgeModel),
    Gbt(GbtModel),
    Constant { value: f64 },
}

impl FittedRegressor {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        match self {
            FittedRegressor::Ridge(m) => m.predict_row(x),
            FittedRegressor::Gbt(m) => m.predict_row(x),
            FittedRegressor::Constant { value } => *value,
        }
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Array1<f64> {
        let mut buf = vec![0.0; x.ncols()];
        x.rows()
            .into_iter()
            .map(|r| {
                buf.iter_mut().zip(r.iter()).for_each(|(b, v)| *b = *v);
                self.predict_row(&buf)
            })
            .collect()
    }
}

/// Ridge regression on raw or degree-2 expanded features. The intercept is
/// not penalized.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RidgeModel {
    pub degree: u8,
    pub lambda: f64,
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub inputs: usize,
}

/// Feature map: the inputs, followed (for degree 2) by all products `x_j x_k`, `j <= k`.
pub fn expand_features(x: &[f64], degree: u8, out: &mut Vec<f64>) {
    out.clear();
    out.extend_from_slice(x);
    if degree >= 2 {
        for j in 0..x.len() {
            for k in j..x.len() {
                out.push(x[j] * x[k]);
            }
        }
    }
}

fn expanded_len(p: usize, degree: u8) -> usize {
    if degree >= 2 {
        p + p * (p + 1) / 2
    } else {
        p
    }
}

impl RidgeModel {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        let mut acc = self.intercept;
        let p = self.inputs;
        for j in 0..p {
            acc += self.coefficients[j] * x[j];
        }
        if self.degree >= 2 {
            let mut idx = p;
            for j in 0..p {
                let xj = x[j];
                let mut inner = 0.0;
                for k in j..p {
                    inner += self.coefficients[idx] * x[k];
                    idx += 1;
                }
                acc += xj * inner;
            }
        }
        acc
    }
}

pub fn fit_ridge(x: ArrayView2<f64>, y: ArrayView1<f64>, lambda: f64, degree: u8) -> Result<RidgeModel> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return param("ridge lambda must be finite and >= 0");
    }
    if degree != 1 && degree != 2 {
        return param("ridge degree must be 1 or 2");
    }
    let (n, p) = x.dim();
    if n == 0 {
        return Err(Error::EmptyData);
    }
    let m = expanded_len(p, degree);
    let mut rows = Vec::with_capacity(n);
    let mut buf = Vec::with_capacity(m);
    for r in x.rows() {
        let v: Vec<f64> = r.to_vec();
        expand_features(&v, degree, &mut buf);
        rows.push(buf.clone());
    }
    let mut means = vec![0.0; m];
    for r in &rows {
        for (a, v) in means.iter_mut().zip(r) {
            *a += v;
        }
    }
    means.iter_mut().for_each(|a| *a /= n as f64);
    let y_mean = y.sum() / n as f64;

    let mut gram = DMatrix::<f64>::zeros(m, m);
    let mut rhs = DVector::<f64>::zeros(m);
    let mut centered = vec![0.0; m];
    for (r, &yi) in rows.iter().zip(y.iter()) {
        for j in 0..m {
            centered[j] = r[j] - means[j];
        }
        let yc = yi - y_mean;
        for j in 0..m {
            let cj = centered[j];
            rhs[j] += cj * yc;
            for k in j..m {
                gram[(j, k)] += cj * centered[k];
            }
        }
    }
    for j in 0..m {
        for k in 0..j {
            gram[(j, k)] = gram[(k, j)];
        }
        gram[(j, j)] += lambda;
    }
    let scale = (0..m).map(|j| gram[(j, j)]).fold(0.0_f64, f64::max).max(1e-300);
    let chol = gram.clone().cholesky();
    let coef = match chol {
        Some(c) if (0..m).all(|j| c.l()[(j, j)].powi(2) > 1e-12 * scale) => c.solve(&rhs),
        _ => {
            return Err(Error::Numeric(
                "ridge normal equations are singular; use lambda > 0".into(),
            ))
        }
    };
    let intercept = y_mean - coef.iter().zip(&means).map(|(c, m)| c * m).sum::<f64>();
    Ok(RidgeModel {
        degree,
        lambda,
        intercept,
        coefficients: coef.iter().copied().collect(),
        inputs: p,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn exact_linear_fit() {
        let x = array![[0.0], [1.0], [2.0], [3.0]];
        let y = array![0.0, 2.0, 4.0, 6.0];
        let m = fit_ridge(x.view(), y.view(), 0.0, 1).unwrap();
        assert!((m.coefficients[0] - 2.0).abs() < 1e-8);
        assert!(m.intercept.abs() < 1e-8);
    }

    #[test]
    fn heavy_shrinkage_predicts_mean() {
        let x = array![[0.0], [1.0], [2.0], [3.0]];
        let y = array![1.0, 2.0, 4.0, 9.0];
        let m = fit_ridge(x.view(), y.view(), 1e12, 1).unwrap();
        for v in [-5.0, 0.0, 10.0] {
            assert!((m.predict_row(&[v]) - 4.0).abs() < 1e-6);
        }
    }

    #[test]
    fn quadratic_is_representable() {
        let x = Array2::from_shape_fn((30, 1), |(i, _)| i as f64 / 10.0 - 1.5);
        let y = x.column(0).mapv(|v| v * v);
        let m = fit_ridge(x.view(), y.view(), 0.0, 2).unwrap();
        let pred = FittedRegressor::Ridge(m).predict(x.view());
        let rmse = ((&pred - &y).mapv(|e| e * e).sum() / 30.0).sqrt();
        assert!(rmse < 1e-6);
    }

    #[test]
    fn singular_without_penalty() {
        let x = array![[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]];
        let y = array![1.0, 2.0, 3.0];
        assert!(matches!(fit_ridge(x.view(), y.view(), 0.0, 1), Err(Error::Numeric(_))));
        assert!(fit_ridge(x.view(), y.view(), 0.1, 1).is_ok());
    }

    #[test]
    fn degree_two_prediction_matches_expansion() {
        let x = Array2::from_shape_fn((40, 3), |(i, j)| ((i * 7 + j * 3) % 11) as f64 / 5.0 - 1.0);
        let y = Array1::from_shape_fn(40, |i| (i % 5) as f64);
        let m = fit_ridge(x.view(), y.view(), 0.5, 2).unwrap();
        let row = [0.3, -0.2, 0.9];
        let mut feats = Vec::new();
        expand_features(&row, 2, &mut feats);
        let direct = m.intercept + feats.iter().zip(&m.coefficients).map(|(a, b)| a * b).sum::<f64>();
        assert!((direct - m.predict_row(&row)).abs() < 1e-12);
    }
}
