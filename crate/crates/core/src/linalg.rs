//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Eigenvalues below this (relative to the largest) are treated as zero.
pub const EIGEN_CLIP: f64 = 1e-10;

/// Symmetric eigendecomposition with eigenvalues sorted in decreasing order.
pub fn sym_eigen_desc(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let sym = symmetrize(a);
    let eig = sym.symmetric_eigen();
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .partial_cmp(&eig.eigenvalues[i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (col, &i) in order.iter().enumerate() {
        vectors.set_column(col, &eig.eigenvectors.column(i));
    }
    (values, vectors)
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Principal square root of a PSD matrix, clipping roundoff-negative eigenvalues.
pub fn psd_sqrt(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (values, vectors) = sym_eigen_desc(a);
    let scale = values.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1.0);
    let mut roots = DVector::zeros(values.len());
    for (i, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::Numeric("non-finite eigenvalue in matrix square root".into()));
        }
        if v < -EIGEN_CLIP * scale {
            return Err(Error::Numeric(format!(
                "matrix is indefinite (eigenvalue {v:.3e}); square root undefined"
            )));
        }
        roots[i] = v.max(0.0).sqrt();
    }
    Ok(&vectors * DMatrix::from_diagonal(&roots) * vectors.transpose())
}

pub fn to_nalgebra(a: ArrayView2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)])
}

pub fn to_ndarray(a: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.nrows(), a.ncols()), |(i, j)| a[(i, j)])
}

/// Sample covariance (denominator n-1) of the rows of `a`.
pub fn sample_covariance(a: ArrayView2<f64>) -> DMatrix<f64> {
    let (n, q) = a.dim();
    let mean = column_means(a);
    let mut cov = DMatrix::zeros(q, q);
    for row in a.rows() {
        for j in 0..q {
            let dj = row[j] - mean[j];
            for k in j..q {
                cov[(j, k)] += dj * (row[k] - mean[k]);
            }
        }
    }
    let denom = (n.max(2) - 1) as f64;
    for j in 0..q {
        for k in j..q {
            let v = cov[(j, k)] / denom;
            cov[(j, k)] = v;
            cov[(k, j)] = v;
        }
    }
    cov
}

pub fn column_means(a: ArrayView2<f64>) -> Vec<f64> {
    let n = a.nrows().max(1) as f64;
    (0..a.ncols()).map(|j| a.column(j).sum() / n).collect()
}

/// Least squares `min ||y - X b||²` via a pseudo-inverse of the Gram matrix.
/// Rank-deficient designs are handled by dropping null directions.
pub fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let gram = x.transpose() * x;
    let rhs = x.transpose() * y;
    let (values, vectors) = sym_eigen_desc(&gram);
    let top = values.iter().fold(0.0_f64, |m, v| m.max(*v));
    let tol = top * 1e-12 * (x.ncols().max(1) as f64);
    let mut coef = DVector::zeros(x.ncols());
    for (i, &v) in values.iter().enumerate() {
        if v > tol && v > 0.0 {
            let u = vectors.column(i);
            coef += u * (u.dot(&rhs) / v);
        }
    }
    coef
}

/// Residual mean square of a least-squares fit.
pub fn residual_mean_square(x: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    let coef = least_squares(x, y);
    let resid = y - x * coef;
    resid.norm_squared() / y.len().max(1) as f64
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
