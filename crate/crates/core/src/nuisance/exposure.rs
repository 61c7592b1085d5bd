//! Location-shift model for the conditional exposure law
//! `W_j = m_j(X) + σ_j ε_j`, with per-coordinate residual marginals joined by a
//! Gaussian copula.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal, StudentsT};

use super::regressor::{FittedRegressor, RegressorSpec};
use crate::dataset::Dataset;
use crate::error::{param, Error, Result};
use crate::linalg::{sample_covariance, sym_eigen_desc};
use crate::rng::{self, sub_seed};

/// Floor applied to log densities so they are never `-inf`.
pub const LOG_DENSITY_FLOOR: f64 = -745.0;

const MODEL_VERSION: u32 = 1;
const DF_RANGE: (f64, f64) = (2.1, 100.0);
const KDE_GRID: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualFamily {
    Gaussian,
    StudentT,
    Empirical,
}

impl ResidualFamily {
    pub fn label(&self) -> &'static str {
        match self {
            ResidualFamily::Gaussian => "gaussian",
            ResidualFamily::StudentT => "student_t",
            ResidualFamily::Empirical => "empirical",
        }
    }
}

/// Law of one standardized residual (mean 0, unit variance up to smoothing).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Marginal {
    Gaussian,
    /// Student t rescaled to unit variance.
    StudentT { df: f64 },
    Empirical(Kde),
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("standard normal")
}

fn unit_t(df: f64) -> StudentsT {
    StudentsT::new(0.0, ((df - 2.0) / df).sqrt(), df).expect("valid t parameters")
}

impl Marginal {
    pub fn ln_pdf(&self, e: f64) -> f64 {
        let v = match self {
            Marginal::Gaussian => std_normal().ln_pdf(e),
            Marginal::StudentT { df } => unit_t(*df).ln_pdf(e),
            Marginal::Empirical(k) => k.ln_pdf(e),
        };
        if v.is_finite() {
            v.max(LOG_DENSITY_FLOOR)
        } else {
            LOG_DENSITY_FLOOR
        }
    }

    pub fn cdf(&self, e: f64) -> f64 {
        match self {
            Marginal::Gaussian => std_normal().cdf(e),
            Marginal::StudentT { df } => unit_t(*df).cdf(e),
            Marginal::Empirical(k) => k.cdf(e),
        }
    }

    /// Residual value whose Gaussian copula score is `u`.
    pub fn from_score(&self, u: f64) -> f64 {
        match self {
            Marginal::Gaussian => u,
            Marginal::StudentT { df } => {
                let p = std_normal().cdf(u).clamp(1e-15, 1.0 - 1e-15);
                unit_t(*df).inverse_cdf(p)
            }
            Marginal::Empirical(k) => k.inverse_cdf(std_normal().cdf(u)),
        }
    }

    pub fn to_score(&self, e: f64) -> f64 {
        match self {
            Marginal::Gaussian => e,
            _ => {
                let p = self.cdf(e).clamp(1e-300, 1.0 - 1e-16);
                std_normal().inverse_cdf(p)
            }
        }
    }
}

/// Gaussian kernel density estimate with Silverman's bandwidth and a tabulated
/// CDF for inversion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Kde {
    pub points: Vec<f64>,
    pub bandwidth: f64,
    grid: Vec<f64>,
    grid_cdf: Vec<f64>,
}

impl Kde {
    pub fn fit(values: &[f64]) -> Result<Kde> {
        let n = values.len();
        if n < 2 {
            return param("kernel density needs at least two points");
        }
        let mut points = values.to_vec();
        points.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mean = points.iter().sum::<f64>() / n as f64;
        let sd = (points.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let q = |p: f64| points[((n - 1) as f64 * p).round() as usize];
        let iqr = q(0.75) - q(0.25);
        let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
        let bandwidth = 0.9 * spread * (n as f64).powf(-0.2);
        if !(bandwidth > 0.0) {
            return Err(Error::Numeric("residuals are constant; kernel bandwidth is zero".into()));
        }
        let lo = points[0] - 8.0 * bandwidth;
        let hi = points[n - 1] + 8.0 * bandwidth;
        let mut kde = Kde { points, bandwidth, grid: Vec::new(), grid_cdf: Vec::new() };
        kde.grid = (0..KDE_GRID).map(|i| lo + (hi - lo) * i as f64 / (KDE_GRID - 1) as f64).collect();
        kde.grid_cdf = kde.grid.iter().map(|&g| kde.cdf(g)).collect();
        Ok(kde)
    }

    pub fn ln_pdf(&self, e: f64) -> f64 {
        let h = self.bandwidth;
        let n = self.points.len() as f64;
        let mut acc = 0.0;
        for &p in &self.points {
            let z = (e - p) / h;
            if z.abs() < 40.0 {
                acc += (-0.5 * z * z).exp();
            }
        }
        let v = (acc / (n * h * (2.0 * std::f64::consts::PI).sqrt())).ln();
        if v.is_finite() {
            v.max(LOG_DENSITY_FLOOR)
        } else {
            LOG_DENSITY_FLOOR
        }
    }

    pub fn cdf(&self, e: f64) -> f64 {
        let nd = std_normal();
        let h = self.bandwidth;
        self.points.iter().map(|&p| nd.cdf((e - p) / h)).sum::<f64>() / self.points.len() as f64
    }

    pub fn inverse_cdf(&self, p: f64) -> f64 {
        let g = &self.grid;
        let c = &self.grid_cdf;
        if p <= c[0] {
            return g[0];
        }
        if p >= c[c.len() - 1] {
            return g[g.len() - 1];
        }
        let i = c.partition_point(|&v| v < p).clamp(1, c.len() - 1);
        let (c0, c1) = (c[i - 1], c[i]);
        let t = if c1 > c0 { (p - c0) / (c1 - c0) } else { 0.5 };
        g[i - 1] + t * (g[i] - g[i - 1])
    }
}

/// Fitted conditional exposure density `f̂(w | x)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionalExposureModel {
    pub version: u32,
    pub family: ResidualFamily,
    pub means: Vec<FittedRegressor>,
    pub scales: Vec<f64>,
    pub marginals: Vec<Marginal>,
    pub copula: DMatrix<f64>,
    copula_chol: DMatrix<f64>,
    copula_inv: DMatrix<f64>,
    copula_logdet: f64,
    /// Sample covariance of the training residuals `W - m(X)`.
    pub residual_cov: DMatrix<f64>,
}

/// Fits q mean regressions of `W_j` on `X`, then the residual model.
pub fn fit_exposure_model(
    d: &Dataset,
    family: ResidualFamily,
    learner: &RegressorSpec,
    seed: u64,
) -> Result<ConditionalExposureModel> {
    let means = fit_exposure_means(d.x.view(), d.w.view(), learner, seed)?;
    ConditionalExposureModel::from_means(d.x.view(), d.w.view(), means, family)
}

pub fn fit_exposure_means(
    x: ArrayView2<f64>,
    w: ArrayView2<f64>,
    learner: &RegressorSpec,
    seed: u64,
) -> Result<Vec<FittedRegressor>> {
    (0..w.ncols())
        .map(|j| learner.fit(x, w.column(j), sub_seed(seed, j as u64)))
        .collect()
}

impl ConditionalExposureModel {
    /// Completes a model from already fitted mean regressions.
    pub fn from_means(
        x: ArrayView2<f64>,
        w: ArrayView2<f64>,
        means: Vec<FittedRegressor>,
        family: ResidualFamily,
    ) -> Result<Self> {
        let (n, q) = w.dim();
        if means.len() != q {
            return param("one mean regression per exposure is required");
        }
        if n <= q + 2 {
            return param(format!("exposure model needs n > q + 2 (n={n}, q={q})"));
        }
        let mut resid = Array2::<f64>::zeros((n, q));
        for (j, m) in means.iter().enumerate() {
            let pred = m.predict(x);
            for i in 0..n {
                resid[(i, j)] = w[(i, j)] - pred[i];
            }
        }
        let residual_cov = sample_covariance(resid.view());
        let mut scales = Vec::with_capacity(q);
        let mut marginals = Vec::with_capacity(q);
        for j in 0..q {
            let col = resid.column(j);
            let sd = residual_cov[(j, j)].sqrt();
            if !(sd > 1e-12) {
                return Err(Error::Numeric(format!("residual scale of exposure {} is zero", j + 1)));
            }
            scales.push(sd);
            let mean = col.sum() / n as f64;
            let std_resid: Vec<f64> = col.iter().map(|v| (v - mean) / sd).collect();
            marginals.push(match family {
                ResidualFamily::Gaussian => Marginal::Gaussian,
                ResidualFamily::StudentT => Marginal::StudentT { df: fit_t_df(&std_resid) },
                ResidualFamily::Empirical => Marginal::Empirical(Kde::fit(&std_resid)?),
            });
        }
        let copula = spearman_copula(resid.view())?;
        Self::assemble(family, means, scales, marginals, copula, residual_cov)
    }

    pub fn assemble(
        family: ResidualFamily,
        means: Vec<FittedRegressor>,
        scales: Vec<f64>,
        marginals: Vec<Marginal>,
        copula: DMatrix<f64>,
        residual_cov: DMatrix<f64>,
    ) -> Result<Self> {
        let chol = copula
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numeric("copula correlation is not positive definite".into()))?;
        let copula_logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let copula_inv = chol.inverse();
        Ok(Self {
            version: MODEL_VERSION,
            family,
            means,
            scales,
            marginals,
            copula_chol: chol.l(),
            copula,
            copula_inv,
            copula_logdet,
            residual_cov,
        })
    }

    pub fn q(&self) -> usize {
        self.scales.len()
    }

    pub fn mean_at(&self, x: &[f64]) -> Vec<f64> {
        self.means.iter().map(|m| m.predict_row(x)).collect()
    }

    /// `m̂(x_i)` for every row of `x`, as an n×q matrix.
    pub fn means_for(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((x.nrows(), self.q()));
        for (j, m) in self.means.iter().enumerate() {
            out.column_mut(j).assign(&m.predict(x));
        }
        out
    }

    /// Covariance implied by the copula and scales, `D R D`. For the Gaussian
    /// family this is the conditional covariance of `W | X`.
    pub fn implied_covariance(&self) -> DMatrix<f64> {
        let d = DMatrix::from_diagonal(&DVector::from_vec(self.scales.clone()));
        &d * &self.copula * &d
    }

    pub fn log_density(&self, w: ArrayView1<f64>, x: &[f64]) -> f64 {
        let q = self.q();
        let m = self.mean_at(x);
        let mut score = DVector::zeros(q);
        let mut total = 0.0;
        for j in 0..q {
            let e = (w[j] - m[j]) / self.scales[j];
            total += self.marginals[j].ln_pdf(e) - self.scales[j].ln();
            score[j] = self.marginals[j].to_score(e);
        }
        let quad = score.dot(&(&self.copula_inv * &score)) - score.norm_squared();
        total += -0.5 * self.copula_logdet - 0.5 * quad;
        if total.is_finite() {
            total.max(LOG_DENSITY_FLOOR)
        } else {
            LOG_DENSITY_FLOOR
        }
    }

    /// `m` scaled residual draws `σ ∘ ε`, shared by every covariate row.
    /// Copula scores are antithetic and moment matched.
    pub fn residual_draws(&self, m: usize, seed: u64) -> Array2<f64> {
        let q = self.q();
        let z = standard_scores(q, m, seed);
        let mut out = Array2::zeros((m, q));
        let l = &self.copula_chol;
        for i in 0..m {
            for j in 0..q {
                let mut u = 0.0;
                for k in 0..=j {
                    u += l[(j, k)] * z[(i, k)];
                }
                out[(i, j)] = self.scales[j] * self.marginals[j].from_score(u);
            }
        }
        out
    }

    pub fn sample_conditional(&self, x: &[f64], m: usize, seed: u64) -> Array2<f64> {
        let mut draws = self.residual_draws(m, seed);
        let mean = self.mean_at(x);
        for mut row in draws.rows_mut() {
            row.iter_mut().zip(&mean).for_each(|(v, mu)| *v += mu);
        }
        draws
    }
}

/// `m` standard normal q-vectors: antithetic pairs, centered, and whitened so
/// the sample covariance (denominator m) is the identity whenever m > q.
pub fn standard_scores(q: usize, m: usize, seed: u64) -> Array2<f64> {
    let mut rng = rng::rng(seed);
    let half = m.div_ceil(2);
    let mut z = Array2::<f64>::zeros((m, q));
    for i in 0..half {
        for j in 0..q {
            let v: f64 = StandardNormal.sample(&mut rng);
            z[(i, j)] = v;
            if half + i < m {
                z[(half + i, j)] = -v;
            }
        }
    }
    if m > q + 1 {
        let mean: Vec<f64> = (0..q).map(|j| z.column(j).sum() / m as f64).collect();
        for mut row in z.rows_mut() {
            row.iter_mut().zip(&mean).for_each(|(v, mu)| *v -= mu);
        }
        let mut cov = DMatrix::<f64>::zeros(q, q);
        for row in z.rows() {
            for a in 0..q {
                for b in 0..=a {
                    cov[(a, b)] += row[a] * row[b];
                }
            }
        }
        for a in 0..q {
            for b in 0..=a {
                cov[(a, b)] /= m as f64;
                cov[(b, a)] = cov[(a, b)];
            }
        }
        if let Some(ch) = cov.cholesky() {
            // z <- z L^{-T}
            let linv = ch.l().try_inverse().expect("triangular inverse");
            let t = linv.transpose();
            let mut out = Array2::zeros((m, q));
            for i in 0..m {
                for b in 0..q {
                    let mut acc = 0.0;
                    for a in 0..q {
                        acc += z[(i, a)] * t[(a, b)];
                    }
                    out[(i, b)] = acc;
                }
            }
            z = out;
        }
    }
    z
}

fn ranks(col: ArrayView1<f64>) -> Vec<f64> {
    let n = col.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| col[a].partial_cmp(&col[b]).unwrap());
    let mut r = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && col[idx[j + 1]] == col[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Gaussian-copula correlation from Spearman's rho, `2 sin(π ρ_S / 6)`, shrunk
/// toward the identity until positive definite.
pub fn spearman_copula(resid: ArrayView2<f64>) -> Result<DMatrix<f64>> {
    let q = resid.ncols();
    let r: Vec<Array1<f64>> = (0..q).map(|j| Array1::from(ranks(resid.column(j)))).collect();
    let mut rho = DMatrix::<f64>::identity(q, q);
    for a in 0..q {
        for b in 0..a {
            let ma = r[a].mean().unwrap();
            let mb = r[b].mean().unwrap();
            let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
            for i in 0..r[a].len() {
                let (da, db) = (r[a][i] - ma, r[b][i] - mb);
                sab += da * db;
                saa += da * da;
                sbb += db * db;
            }
            let rs = if saa > 0.0 && sbb > 0.0 { sab / (saa * sbb).sqrt() } else { 0.0 };
            let v = 2.0 * (std::f64::consts::PI * rs / 6.0).sin();
            rho[(a, b)] = v;
            rho[(b, a)] = v;
        }
    }
    let identity = DMatrix::<f64>::identity(q, q);
    for step in 0..=20 {
        let alpha = step as f64 / 20.0;
        let cand = &rho * (1.0 - alpha) + &identity * alpha;
        let (vals, _) = sym_eigen_desc(&cand);
        if vals[q - 1] > 1e-6 {
            if step > 0 {
                log::warn!("copula correlation shrunk toward identity by {alpha}");
            }
            return Ok(cand);
        }
    }
    Err(Error::Numeric("copula correlation not positive definite after shrinkage".into()))
}

fn t_loglik(e: &[f64], df: f64) -> f64 {
    let t = unit_t(df);
    e.iter().map(|&v| t.ln_pdf(v)).sum()
}

/// Maximum-likelihood degrees of freedom for unit-variance standardized residuals,
/// by golden-section search on `[2.1, 100]`.
pub fn fit_t_df(e: &[f64]) -> f64 {
    let (mut a, mut b) = DF_RANGE;
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let mut fc = t_loglik(e, c);
    let mut fd = t_loglik(e, d);
    for _ in 0..80 {
        if (b - a).abs() < 1e-4 {
            break;
        }
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = t_loglik(e, c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = t_loglik(e, d);
        }
    }
    let mid = 0.5 * (a + b);
    // the search interval endpoints are admissible too
    [(DF_RANGE.0, t_loglik(e, DF_RANGE.0)), (mid, t_loglik(e, mid)), (DF_RANGE.1, t_loglik(e, DF_RANGE.1))]
        .into_iter()
        .fold((mid, f64::NEG_INFINITY), |best, cand| if cand.1 > best.1 { cand } else { best })
        .0
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn toy_model(q: usize, family: ResidualFamily) -> ConditionalExposureModel {
        let means = (0..q).map(|j| FittedRegressor::Constant { value: j as f64 }).collect();
        let marginals = (0..q)
            .map(|_| match family {
                ResidualFamily::StudentT => Marginal::StudentT { df: 5.0 },
                _ => Marginal::Gaussian,
            })
            .collect();
        let mut r = DMatrix::identity(q, q);
        if q > 1 {
            r[(0, 1)] = 0.5;
            r[(1, 0)] = 0.5;
        }
        ConditionalExposureModel::assemble(family, means, vec![1.5; q], marginals, r, DMatrix::identity(q, q))
            .unwrap()
    }

    #[test]
    fn univariate_gaussian_log_density() {
        let m = toy_model(1, ResidualFamily::Gaussian);
        let w = array![1.2];
        let expected = Normal::new(0.0, 1.5).unwrap().ln_pdf(1.2);
        assert!((m.log_density(w.view(), &[0.0]) - expected).abs() < 1e-12);
    }

    #[test]
    fn bivariate_gaussian_matches_closed_form() {
        let m = toy_model(2, ResidualFamily::Gaussian);
        let cov = m.implied_covariance();
        let w = array![0.7, 2.1];
        let diff = DVector::from_vec(vec![0.7 - 0.0, 2.1 - 1.0]);
        let inv = cov.clone().try_inverse().unwrap();
        let expected = -(2.0 * std::f64::consts::PI).ln() - 0.5 * cov.determinant().ln() - 0.5 * diff.dot(&(inv * &diff));
        assert!((m.log_density(w.view(), &[0.0]) - expected).abs() < 1e-8);
    }

    #[test]
    fn scores_are_moment_matched() {
        let z = standard_scores(3, 500, 9);
        let cov = sample_covariance(z.view()) * (499.0 / 500.0);
        for a in 0..3 {
            assert!(z.column(a).sum().abs() < 1e-9);
            for b in 0..3 {
                let target = if a == b { 1.0 } else { 0.0 };
                assert!((cov[(a, b)] - target).abs() < 1e-9);
            }
        }
        assert_eq!(standard_scores(2, 1, 0).dim(), (1, 2));
    }

    #[test]
    fn t_df_on_gaussian_data_is_large() {
        let e: Vec<f64> = standard_scores(1, 4000, 3).column(0).to_vec();
        assert!(fit_t_df(&e) >= 30.0);
    }

    #[test]
    fn kde_inverse_cdf_round_trips() {
        let pts: Vec<f64> = (0..200).map(|i| ((i * 37) % 101) as f64 / 30.0 - 1.5).collect();
        let k = Kde::fit(&pts).unwrap();
        for p in [0.05, 0.3, 0.5, 0.9] {
            assert!((k.cdf(k.inverse_cdf(p)) - p).abs() < 2e-3);
        }
        assert_eq!(k.ln_pdf(1e6), LOG_DENSITY_FLOOR);
    }

    #[test]
    fn student_scores_round_trip() {
        let m = Marginal::StudentT { df: 6.0 };
        for u in [-2.0, -0.3, 0.0, 1.1] {
            assert!((m.to_score(m.from_score(u)) - u).abs() < 1e-6);
        }
    }
}
