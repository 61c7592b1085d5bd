//! Simulation designs with known truth and a Monte Carlo driver comparing
//! estimation pipelines on bias and RMSE.
//!
//! Exposures follow `W = BᵀX + β₀ + ε` with `X ~ N(0, Σ_X)`. Because ε is
//! independent of X, tilting `W | X` tilts ε alone, so every truth reduces to
//! tilted moments of ε: closed form for Gaussian errors, self-normalized
//! importance sampling over a fixed draw pool otherwise.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{param, Error, Result};
use crate::estimator::{fit_bundle, onestep_from_values, NuisanceBundle, NuisanceConfig, NuisanceValues, Path};
use crate::geometry::efficient_direction;
use crate::linalg::dot;
use crate::nuisance::{GbtParams, RegressorSpec, ResidualFamily};
use crate::rng::{self, streams, sub_seed, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExposureScenario {
    Gaussian,
    SkewNormal,
    TruncatedContaminated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeScenario {
    Linear,
    Complex,
}

impl ExposureScenario {
    pub const ALL: [ExposureScenario; 3] = [Self::Gaussian, Self::SkewNormal, Self::TruncatedContaminated];

    pub fn label(&self) -> &'static str {
        match self {
            Self::Gaussian => "gaussian",
            Self::SkewNormal => "skew_normal",
            Self::TruncatedContaminated => "truncated_contaminated",
        }
    }
}

impl OutcomeScenario {
    pub const ALL: [OutcomeScenario; 2] = [Self::Linear, Self::Complex];

    pub fn label(&self) -> &'static str {
        match self {
            Self::Linear => "linear",
            Self::Complex => "complex",
        }
    }
}

mod defaults {
    pub fn p() -> usize {
        10
    }
    pub fn q() -> usize {
        6
    }
    pub fn x_rho() -> f64 {
        0.5
    }
    pub fn rho() -> f64 {
        0.6
    }
    pub fn slant() -> f64 {
        4.0
    }
    pub fn contamination() -> f64 {
        0.2
    }
    pub fn inflation() -> f64 {
        1.5
    }
    pub fn truncation() -> f64 {
        6.0
    }
    pub fn sparsity() -> f64 {
        0.4
    }
    pub fn b_sd() -> f64 {
        0.6
    }
    pub fn alpha_mean() -> f64 {
        0.5
    }
    pub fn beta_mean() -> f64 {
        2.0
    }
    pub fn c1() -> f64 {
        0.5
    }
    pub fn c2() -> f64 {
        1.0
    }
    pub fn c3() -> f64 {
        0.8
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub n: usize,
    #[serde(default = "defaults::p")]
    pub p: usize,
    #[serde(default = "defaults::q")]
    pub q: usize,
    pub exposure: ExposureScenario,
    pub outcome: OutcomeScenario,
    /// Seed of the coefficient draws; fixed across replications of a design.
    #[serde(default)]
    pub coefficient_seed: u64,
    #[serde(default = "defaults::x_rho")]
    pub x_rho: f64,
    #[serde(default = "defaults::rho")]
    pub rho: f64,
    #[serde(default = "defaults::slant")]
    pub slant: f64,
    #[serde(default = "defaults::contamination")]
    pub contamination: f64,
    #[serde(default = "defaults::inflation")]
    pub inflation: f64,
    #[serde(default = "defaults::truncation")]
    pub truncation: f64,
    #[serde(default = "defaults::sparsity")]
    pub sparsity: f64,
    #[serde(default = "defaults::b_sd")]
    pub b_sd: f64,
    #[serde(default = "defaults::alpha_mean")]
    pub alpha_mean: f64,
    #[serde(default = "defaults::beta_mean")]
    pub beta_mean: f64,
    #[serde(default = "defaults::c1")]
    pub c1: f64,
    #[serde(default = "defaults::c2")]
    pub c2: f64,
    #[serde(default = "defaults::c3")]
    pub c3: f64,
}

impl DgpSpec {
    pub fn new(exposure: ExposureScenario, outcome: OutcomeScenario, n: usize, coefficient_seed: u64) -> Self {
        Self {
            n,
            p: defaults::p(),
            q: defaults::q(),
            exposure,
            outcome,
            coefficient_seed,
            x_rho: defaults::x_rho(),
            rho: defaults::rho(),
            slant: defaults::slant(),
            contamination: defaults::contamination(),
            inflation: defaults::inflation(),
            truncation: defaults::truncation(),
            sparsity: defaults::sparsity(),
            b_sd: defaults::b_sd(),
            alpha_mean: defaults::alpha_mean(),
            beta_mean: defaults::beta_mean(),
            c1: defaults::c1(),
            c2: defaults::c2(),
            c3: defaults::c3(),
        }
    }

    pub fn label(&self) -> String {
        format!("{}/{}", self.exposure.label(), self.outcome.label())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return param("n must be at least 2");
        }
        if self.p < 2 || self.q < 2 {
            return param("p and q must be at least 2");
        }
        if !(self.x_rho.abs() < 1.0 && self.rho.abs() < 1.0) {
            return param("AR(1) correlations must lie in (-1, 1)");
        }
        if !(0.0..=1.0).contains(&self.sparsity) || !(0.0..1.0).contains(&self.contamination) {
            return param("sparsity must lie in [0, 1] and contamination in [0, 1)");
        }
        if !(self.inflation > 0.0 && self.truncation > 0.0 && self.b_sd >= 0.0 && self.slant.is_finite()) {
            return param("inflation, truncation must be positive and b_sd nonnegative");
        }
        Ok(())
    }

    /// Interaction weights `(c₁, c₂, c₃)`, zero for the linear outcome.
    fn interactions(&self) -> (f64, f64, f64) {
        match self.outcome {
            OutcomeScenario::Linear => (0.0, 0.0, 0.0),
            OutcomeScenario::Complex => (self.c1, self.c2, self.c3),
        }
    }
}

fn ar1(k: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(k, k, |i, j| rho.powi((i as i32 - j as i32).abs()))
}

fn chol(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    m.clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| Error::Numeric(format!("{what} is not positive definite")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    /// p×q
    pub b: DMatrix<f64>,
    pub beta0: Vec<f64>,
    pub alpha0: f64,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

/// A fully specified design with its exact samplers and oracles.
#[derive(Debug, Clone)]
pub struct Dgp {
    pub spec: DgpSpec,
    pub coef: Coefficients,
    pub sigma_x: DMatrix<f64>,
    pub sigma_w: DMatrix<f64>,
    chol_x: DMatrix<f64>,
    chol_w: DMatrix<f64>,
    /// Skew-normal `δ = Ωα / sqrt(1 + αᵀΩα)` and the Cholesky factor of `Ω − δδᵀ`.
    skew: Option<(DVector<f64>, DMatrix<f64>)>,
}

/// Fixed pool of exact error draws for importance-sampled truths.
#[derive(Debug, Clone)]
pub struct ErrorPool {
    pub draws: Array2<f64>,
}

/// Moments of ε under the tilt `exp(δᵀε)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TiltedErrors {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub log_kappa: f64,
    /// Self-normalized weights when computed from a pool.
    weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub value: f64,
    /// Zero for closed forms.
    pub mc_se: f64,
}

impl Dgp {
    pub fn new(spec: DgpSpec) -> Result<Self> {
        spec.validate()?;
        let (p, q) = (spec.p, spec.q);
        let mut r = rng::rng(sub_seed(spec.coefficient_seed, streams::COEFFICIENTS));
        let bn = Normal::new(0.0, spec.b_sd).map_err(|e| Error::Parameter(e.to_string()))?;
        let mut b = DMatrix::zeros(p, q);
        for j in 0..p {
            for k in 0..q {
                if r.random::<f64>() < spec.sparsity {
                    b[(j, k)] = bn.sample(&mut r);
                }
            }
        }
        let beta0: Vec<f64> = (0..q).map(|_| r.sample(StandardNormal)).collect();
        let alpha0: f64 = r.sample(StandardNormal);
        let alpha: Vec<f64> = (0..p).map(|_| spec.alpha_mean + r.sample::<f64, _>(StandardNormal)).collect();
        let beta: Vec<f64> = (0..q).map(|_| spec.beta_mean + r.sample::<f64, _>(StandardNormal)).collect();
        let sigma_x = ar1(p, spec.x_rho);
        let sigma_w = ar1(q, spec.rho);
        let chol_x = chol(&sigma_x, "covariate covariance")?;
        let chol_w = chol(&sigma_w, "error covariance")?;
        let skew = if spec.exposure == ExposureScenario::SkewNormal {
            let a = DVector::from_element(q, spec.slant);
            let oa = &sigma_w * &a;
            let d = &oa / (1.0 + a.dot(&oa)).sqrt();
            let rest = &sigma_w - &d * d.transpose();
            Some((d, chol(&rest, "skew-normal conditional covariance")?))
        } else {
            None
        };
        Ok(Self { coef: Coefficients { b, beta0, alpha0, alpha, beta }, sigma_x, sigma_w, chol_x, chol_w, skew, spec })
    }

    fn normal_vec(r: &mut Rng, l: &DMatrix<f64>) -> DVector<f64> {
        let z = DVector::from_fn(l.ncols(), |_, _| r.sample::<f64, _>(StandardNormal));
        l * z
    }

    fn draw_error(&self, r: &mut Rng) -> (DVector<f64>, usize) {
        match self.spec.exposure {
            ExposureScenario::Gaussian => (Self::normal_vec(r, &self.chol_w), 0),
            ExposureScenario::SkewNormal => {
                // hidden truncation: ε = δ|Z₀| + (Ω − δδᵀ)^{1/2} Z
                let (d, l) = self.skew.as_ref().expect("skew parameters");
                let z0: f64 = r.sample(StandardNormal);
                (d * z0.abs() + Self::normal_vec(r, l), 0)
            }
            ExposureScenario::TruncatedContaminated => {
                let bound: Vec<f64> =
                    (0..self.spec.q).map(|j| self.spec.truncation * self.sigma_w[(j, j)].sqrt()).collect();
                let mut rejected = 0;
                loop {
                    let scale = if r.random::<f64>() < self.spec.contamination { self.spec.inflation } else { 1.0 };
                    let e = Self::normal_vec(r, &self.chol_w) * scale;
                    if e.iter().zip(&bound).all(|(v, b)| v.abs() <= *b) {
                        return (e, rejected);
                    }
                    rejected += 1;
                }
            }
        }
    }

    /// `m` exact error draws (m×q) and the number of rejected proposals.
    pub fn sample_errors(&self, m: usize, seed: u64) -> (Array2<f64>, usize) {
        let mut r = rng::rng(seed);
        let mut out = Array2::zeros((m, self.spec.q));
        let mut rejected = 0;
        for i in 0..m {
            let (e, rej) = self.draw_error(&mut r);
            rejected += rej;
            out.row_mut(i).iter_mut().zip(e.iter()).for_each(|(o, v)| *o = *v);
        }
        (out, rejected)
    }

    pub fn error_pool(&self, m: usize, seed: u64) -> ErrorPool {
        ErrorPool { draws: self.sample_errors(m, sub_seed(seed, streams::TRUTH)).0 }
    }

    pub fn exposure_mean(&self, x: &[f64]) -> Vec<f64> {
        (0..self.spec.q)
            .map(|k| self.coef.beta0[k] + (0..self.spec.p).map(|j| self.coef.b[(j, k)] * x[j]).sum::<f64>())
            .collect()
    }

    /// True `μ(x, w)`.
    pub fn mu(&self, x: &[f64], w: &[f64]) -> f64 {
        let (c1, c2, c3) = self.spec.interactions();
        self.coef.alpha0 + dot(&self.coef.alpha, x) + dot(&self.coef.beta, w)
            + c1 * x[1] * x[1]
            + c2 * w[0] * w[1]
            + c3 * x[0] * w[0]
    }

    /// Raw-scale data set of `spec.n` rows.
    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        let (n, p, q) = (self.spec.n, self.spec.p, self.spec.q);
        let mut r = rng::rng(sub_seed(seed, streams::DATA));
        let mut x = Array2::zeros((n, p));
        let mut w = Array2::zeros((n, q));
        let mut y = Array1::zeros(n);
        for i in 0..n {
            let xi: Vec<f64> = Self::normal_vec(&mut r, &self.chol_x).iter().copied().collect();
            let (e, _) = self.draw_error(&mut r);
            let wi: Vec<f64> = self.exposure_mean(&xi).iter().zip(e.iter()).map(|(a, b)| a + b).collect();
            let noise: f64 = r.sample(StandardNormal);
            y[i] = self.mu(&xi, &wi) + noise;
            x.row_mut(i).iter_mut().zip(&xi).for_each(|(o, v)| *o = *v);
            w.row_mut(i).iter_mut().zip(&wi).for_each(|(o, v)| *o = *v);
        }
        Dataset::new(x, w, y)
    }

    /// Tilted error moments at a raw-scale δ. Gaussian errors use the closed
    /// form; other laws need `pool`.
    pub fn tilted_errors(&self, delta_raw: &[f64], pool: Option<&ErrorPool>) -> Result<TiltedErrors> {
        if delta_raw.len() != self.spec.q {
            return param("tilt dimension does not match q");
        }
        if self.spec.exposure == ExposureScenario::Gaussian {
            let d = DVector::from_column_slice(delta_raw);
            let mean = &self.sigma_w * &d;
            return Ok(TiltedErrors {
                log_kappa: 0.5 * d.dot(&mean),
                mean,
                cov: self.sigma_w.clone(),
                weights: None,
            });
        }
        let pool = pool.ok_or_else(|| Error::State("non-Gaussian truth needs an error pool".into()))?;
        self.tilted_errors_is(delta_raw, pool)
    }

    /// Self-normalized importance-sampled tilted moments from `pool`.
    pub fn tilted_errors_is(&self, delta_raw: &[f64], pool: &ErrorPool) -> Result<TiltedErrors> {
        let e = pool.draws.view();
        let m = e.nrows();
        if m == 0 || e.ncols() != delta_raw.len() {
            return param("error pool is empty or has the wrong width");
        }
        let lin: Vec<f64> = e.rows().into_iter().map(|r| dot(r.as_slice().unwrap_or(&r.to_vec()), delta_raw)).collect();
        let mx = lin.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let raw: Vec<f64> = lin.iter().map(|v| (v - mx).exp()).collect();
        let s: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let q = e.ncols();
        let mut mean = DVector::zeros(q);
        for (i, wi) in w.iter().enumerate() {
            for k in 0..q {
                mean[k] += wi * e[(i, k)];
            }
        }
        let mut cov = DMatrix::zeros(q, q);
        for (i, wi) in w.iter().enumerate() {
            for a in 0..q {
                let da = e[(i, a)] - mean[a];
                for b in 0..=a {
                    cov[(a, b)] += wi * da * (e[(i, b)] - mean[b]);
                }
            }
        }
        for a in 0..q {
            for b in 0..a {
                cov[(b, a)] = cov[(a, b)];
            }
        }
        Ok(TiltedErrors { mean, cov, log_kappa: mx + (s / m as f64).ln(), weights: Some(w) })
    }

    /// `m_δ(x) = E_δ[μ(x, Bᵀx + β₀ + ε)]` given tilted error moments.
    pub fn tilted_mean_at(&self, x: &[f64], t: &TiltedErrors) -> f64 {
        let (c1, c2, c3) = self.spec.interactions();
        let a: Vec<f64> = self.exposure_mean(x).iter().zip(t.mean.iter()).map(|(u, v)| u + v).collect();
        self.coef.alpha0 + dot(&self.coef.alpha, x) + dot(&self.coef.beta, &a)
            + c1 * x[1] * x[1]
            + c2 * (a[0] * a[1] + t.cov[(0, 1)])
            + c3 * x[0] * a[0]
    }

    /// `E_X[μ(X, BᵀX + β₀ + e)]` as a function of a fixed error value `e`.
    fn averaged_outcome(&self, e: &[f64]) -> f64 {
        let (c1, c2, c3) = self.spec.interactions();
        let b = &self.coef.b;
        let sbx = &self.sigma_x * b;
        let cross = (b.column(0).transpose() * &sbx.column(1))[(0, 0)];
        let a0 = self.coef.beta0[0] + e[0];
        let a1 = self.coef.beta0[1] + e[1];
        let shift: Vec<f64> = self.coef.beta0.iter().zip(e).map(|(u, v)| u + v).collect();
        self.coef.alpha0 + dot(&self.coef.beta, &shift)
            + c1 * self.sigma_x[(1, 1)]
            + c2 * (cross + a0 * a1)
            + c3 * sbx[(0, 0)]
    }

    /// True ψ at a raw-scale δ: closed form for Gaussian errors, importance
    /// sampling over `pool` otherwise.
    pub fn true_psi(&self, delta_raw: &[f64], pool: Option<&ErrorPool>) -> Result<Truth> {
        if self.spec.exposure == ExposureScenario::Gaussian {
            let t = self.tilted_errors(delta_raw, None)?;
            let base: Vec<f64> = t.mean.iter().copied().collect();
            let (_, c2, _) = self.spec.interactions();
            return Ok(Truth { value: self.averaged_outcome(&base) + c2 * t.cov[(0, 1)], mc_se: 0.0 });
        }
        let pool = pool.ok_or_else(|| Error::State("non-Gaussian truth needs an error pool".into()))?;
        self.true_psi_is(delta_raw, pool)
    }

    /// Importance-sampled ψ with its Monte Carlo standard error.
    pub fn true_psi_is(&self, delta_raw: &[f64], pool: &ErrorPool) -> Result<Truth> {
        let t = self.tilted_errors_is(delta_raw, pool)?;
        let w = t.weights.as_ref().expect("pool weights");
        let h: Vec<f64> = pool
            .draws
            .rows()
            .into_iter()
            .map(|r| self.averaged_outcome(&r.to_vec()))
            .collect();
        let value: f64 = w.iter().zip(&h).map(|(a, b)| a * b).sum();
        let var: f64 = w.iter().zip(&h).map(|(a, b)| a * a * (b - value) * (b - value)).sum();
        Ok(Truth { value, mc_se: var.sqrt() })
    }

    /// Oracle `r_δ(W_i, X_i)` and `m_δ(X_i)` on raw-scale data.
    pub fn oracle_values(&self, raw: &Dataset, delta_raw: &[f64], pool: Option<&ErrorPool>) -> Result<NuisanceValues> {
        let t = self.tilted_errors(delta_raw, pool)?;
        let n = raw.n();
        let mut r = Array1::zeros(n);
        let mut m = Array1::zeros(n);
        for i in 0..n {
            let x = raw.x.row(i).to_vec();
            let mean = self.exposure_mean(&x);
            let lin: f64 = (0..self.spec.q).map(|k| delta_raw[k] * (raw.w[(i, k)] - mean[k])).sum();
            r[i] = (lin - t.log_kappa).exp();
            m[i] = self.tilted_mean_at(&x, &t);
        }
        Ok(NuisanceValues { r, m, ess_min: f64::INFINITY })
    }
}

/// One estimation pipeline: a residual family and a nuisance path. The
/// fully direct path ignores the family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pipeline {
    pub family: ResidualFamily,
    pub path: Path,
}

impl Pipeline {
    pub fn label(&self) -> String {
        match self.path {
            Path::FullyDirect => "fully_direct".into(),
            Path::McDensity => format!("{}_residual", self.family.label()),
            Path::RatioRegression => format!("{}_residual_direct_ratio", self.family.label()),
            Path::Hybrid => format!("{}_residual_hybrid", self.family.label()),
        }
    }

    /// Row label in the formatted summary table.
    pub fn description(&self) -> String {
        let fam = match self.family {
            ResidualFamily::Gaussian => "Gaussian",
            ResidualFamily::StudentT => "t",
            ResidualFamily::Empirical => "Empirical",
        };
        match self.path {
            Path::FullyDirect => "Fully direct regression".into(),
            Path::McDensity => format!("{fam} residual model"),
            Path::RatioRegression => format!("{fam} residual model with direct estimation of r"),
            Path::Hybrid => format!("{fam} residual model with direct r and hybrid m"),
        }
    }
}

/// The seven pipelines: three residual families, each with the plug-in and the
/// direct density ratio, plus fully direct regression.
pub fn default_pipelines() -> Vec<Pipeline> {
    let mut v = vec![Pipeline { family: ResidualFamily::Gaussian, path: Path::FullyDirect }];
    for family in [ResidualFamily::Gaussian, ResidualFamily::StudentT, ResidualFamily::Empirical] {
        v.push(Pipeline { family, path: Path::McDensity });
        v.push(Pipeline { family, path: Path::RatioRegression });
    }
    v
}

pub fn all_designs() -> Vec<(ExposureScenario, OutcomeScenario)> {
    ExposureScenario::ALL
        .iter()
        .flat_map(|e| OutcomeScenario::ALL.iter().map(move |o| (*e, *o)))
        .collect()
}

mod bench_defaults {
    use super::*;
    pub fn n() -> usize {
        1000
    }
    pub fn reps() -> usize {
        100
    }
    pub fn c() -> f64 {
        0.25
    }
    pub fn truth_draws() -> usize {
        1_000_000
    }
    pub fn yes() -> bool {
        true
    }
    /// Boosted trees for the outcome and exposure means, smooth ridge fits for
    /// the normalizer and numerator regressions.
    pub fn nuisance() -> NuisanceConfig {
        let g = RegressorSpec::Gbt(GbtParams::default());
        NuisanceConfig {
            outcome_learner: g.clone(),
            exposure_learner: g,
            ratio_learner: RegressorSpec::ridge(1e-3, 1),
            numerator_learner: RegressorSpec::ridge(1e-3, 1),
            mc_draws: 500,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    #[serde(default = "all_designs")]
    pub designs: Vec<(ExposureScenario, OutcomeScenario)>,
    #[serde(default = "default_pipelines")]
    pub pipelines: Vec<Pipeline>,
    #[serde(default = "bench_defaults::reps")]
    pub reps: usize,
    #[serde(default = "bench_defaults::n")]
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    /// Gelbrich radius of the benchmark tilt.
    #[serde(default = "bench_defaults::c")]
    pub c: f64,
    #[serde(default = "bench_defaults::truth_draws")]
    pub truth_draws: usize,
    #[serde(default = "bench_defaults::yes")]
    pub standardize: bool,
    /// Adds a row with the true nuisances plugged into the one-step formula.
    #[serde(default)]
    pub include_oracle: bool,
    #[serde(default = "bench_defaults::nuisance")]
    pub nuisance: NuisanceConfig,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            designs: all_designs(),
            pipelines: default_pipelines(),
            reps: bench_defaults::reps(),
            n: bench_defaults::n(),
            seed: 0,
            c: bench_defaults::c(),
            truth_draws: bench_defaults::truth_draws(),
            standardize: true,
            include_oracle: false,
            nuisance: bench_defaults::nuisance(),
        }
    }
}

pub const ORACLE_LABEL: &str = "oracle";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub design: String,
    pub rep: usize,
    pub pipeline: String,
    pub estimate: Option<f64>,
    pub se: Option<f64>,
    pub truth: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    /// `None` for rows averaged over designs.
    pub design: Option<String>,
    pub pipeline: String,
    pub mean_bias: f64,
    pub mean_abs_bias: f64,
    pub rmse: f64,
    pub reps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    /// Per-pipeline metrics averaged over designs.
    pub rows: Vec<MetricRow>,
    pub per_design: Vec<MetricRow>,
    pub failures: usize,
    pub records: Vec<RepRecord>,
}

impl MetricTable {
    pub fn row(&self, pipeline: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.pipeline == pipeline)
    }

    pub fn design_row(&self, design: &str, pipeline: &str) -> Option<&MetricRow> {
        self.per_design.iter().find(|r| r.design.as_deref() == Some(design) && r.pipeline == pipeline)
    }

    /// CSV with one line per (design, pipeline) and `all` rows for the averages.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("design,pipeline,mean_bias,mean_abs_bias,rmse,reps\n");
        for r in self.per_design.iter().chain(&self.rows) {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.design.as_deref().unwrap_or("all"),
                r.pipeline,
                r.mean_bias,
                r.mean_abs_bias,
                r.rmse,
                r.reps
            ));
        }
        s
    }

    /// Fixed-width text table of the design-averaged rows.
    pub fn to_text(&self, descriptions: &[(String, String)]) -> String {
        let name = |p: &str| {
            descriptions.iter().find(|(l, _)| l == p).map(|(_, d)| d.clone()).unwrap_or_else(|| p.to_string())
        };
        let mut s = format!("{:<60} {:>10} {:>18} {:>10}\n", "", "Mean bias", "Mean absolute bias", "Mean RMSE");
        for r in &self.rows {
            s.push_str(&format!(
                "{:<60} {:>10.3} {:>18.3} {:>10.3}\n",
                name(&r.pipeline),
                r.mean_bias,
                r.mean_abs_bias,
                r.rmse
            ));
        }
        s
    }
}

fn metrics(errors: &[f64]) -> (f64, f64, f64) {
    let n = errors.len() as f64;
    let bias = errors.iter().sum::<f64>() / n;
    let abs = errors.iter().map(|e| e.abs()).sum::<f64>() / n;
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    (bias, abs, rmse)
}

/// Benchmark tilt: efficient direction of the fitted residual covariance
/// (averaged over folds) at Gelbrich radius `c`.
pub fn benchmark_delta(bundle: &NuisanceBundle, c: f64) -> Result<Vec<f64>> {
    let k = bundle.fits.len() as f64;
    let q = bundle.fits[0].exposure.q();
    let mut sigma = DMatrix::zeros(q, q);
    for f in &bundle.fits {
        sigma += &f.exposure.residual_cov / k;
    }
    Ok(efficient_direction(&sigma, c)?.delta)
}

struct RepOutput {
    records: Vec<RepRecord>,
}

fn run_rep(
    cfg: &BenchmarkConfig,
    dgp: &Dgp,
    pool: Option<&ErrorPool>,
    design: &str,
    rep: usize,
    seed: u64,
) -> RepOutput {
    let mut labels: Vec<String> = cfg.pipelines.iter().map(|p| p.label()).collect();
    if cfg.include_oracle {
        labels.push(ORACLE_LABEL.into());
    }
    let fail_all = |msg: String| RepOutput {
        records: labels
            .iter()
            .map(|l| RepRecord {
                design: design.into(),
                rep,
                pipeline: l.clone(),
                estimate: None,
                se: None,
                truth: None,
                error: Some(msg.clone()),
            })
            .collect(),
    };
    let setup = (|| -> Result<_> {
        let raw = dgp.generate(seed)?;
        let d = if cfg.standardize { raw.standardize()? } else { raw.clone() };
        let ncfg = NuisanceConfig { seed: sub_seed(seed, 1), family: ResidualFamily::Gaussian, ..cfg.nuisance.clone() };
        let base = fit_bundle(&d, &ncfg)?;
        let delta = benchmark_delta(&base, cfg.c)?;
        let delta_raw = d.delta_to_raw(&delta);
        let truth = dgp.true_psi(&delta_raw, pool)?.value;
        Ok((raw, d, base, delta, delta_raw, truth))
    })();
    let (raw, d, base, delta, delta_raw, truth) = match setup {
        Ok(v) => v,
        Err(e) => return fail_all(e.to_string()),
    };
    let needs_direct = cfg.pipelines.iter().any(|p| p.path.needs_direct());
    let needs_eta = cfg.pipelines.iter().any(|p| p.path == Path::FullyDirect);
    let direct = if needs_direct { Some(base.fit_direct(&d, &delta, needs_eta)) } else { None };
    let mut bundles: Vec<(ResidualFamily, Result<NuisanceBundle>)> = vec![(ResidualFamily::Gaussian, Ok(base))];
    let mut records = Vec::with_capacity(labels.len());
    for p in &cfg.pipelines {
        let family = if p.path == Path::FullyDirect { ResidualFamily::Gaussian } else { p.family };
        if !bundles.iter().any(|(f, _)| *f == family) {
            let b = match &bundles[0].1 {
                Ok(b0) => b0.with_family(&d, family),
                Err(e) => Err(Error::State(e.to_string())),
            };
            bundles.push((family, b));
        }
        let b = &bundles.iter().find(|(f, _)| *f == family).expect("bundle present").1;
        let est = (|| -> Result<(f64, Option<f64>)> {
            let b = b.as_ref().map_err(|e| Error::State(e.to_string()))?;
            let df = match (&direct, p.path.needs_direct()) {
                (Some(Ok(df)), true) => Some(df),
                (Some(Err(e)), true) => return Err(Error::State(e.to_string())),
                _ => None,
            };
            let v = b.values(&d, &delta, p.path, df)?;
            let e = onestep_from_values(d.y.view(), &v);
            Ok((e.value, e.se))
        })();
        records.push(match est {
            Ok((value, se)) if value.is_finite() => RepRecord {
                design: design.into(),
                rep,
                pipeline: p.label(),
                estimate: Some(value),
                se,
                truth: Some(truth),
                error: None,
            },
            Ok(_) => RepRecord {
                design: design.into(),
                rep,
                pipeline: p.label(),
                estimate: None,
                se: None,
                truth: Some(truth),
                error: Some("non-finite estimate".into()),
            },
            Err(e) => RepRecord {
                design: design.into(),
                rep,
                pipeline: p.label(),
                estimate: None,
                se: None,
                truth: Some(truth),
                error: Some(e.to_string()),
            },
        });
    }
    if cfg.include_oracle {
        let rec = match dgp.oracle_values(&raw, &delta_raw, pool) {
            Ok(v) => {
                let e = onestep_from_values(raw.y.view(), &v);
                RepRecord {
                    design: design.into(),
                    rep,
                    pipeline: ORACLE_LABEL.into(),
                    estimate: Some(e.value),
                    se: e.se,
                    truth: Some(truth),
                    error: None,
                }
            }
            Err(e) => RepRecord {
                design: design.into(),
                rep,
                pipeline: ORACLE_LABEL.into(),
                estimate: None,
                se: None,
                truth: Some(truth),
                error: Some(e.to_string()),
            },
        };
        records.push(rec);
    }
    RepOutput { records }
}

/// Seed of replication `rep` of design `index`.
pub fn rep_seed(seed: u64, index: usize, rep: usize) -> u64 {
    sub_seed(sub_seed(seed, 1_000 + index as u64), rep as u64)
}

/// Monte Carlo comparison of `cfg.pipelines` over `cfg.designs`. Failed
/// replications are recorded and excluded from the metrics.
pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<MetricTable> {
    if cfg.reps < 1 {
        return param("reps must be at least 1");
    }
    if cfg.designs.is_empty() || (cfg.pipelines.is_empty() && !cfg.include_oracle) {
        return param("benchmark needs at least one design and one pipeline");
    }
    if !(cfg.c > 0.0) {
        return param("Gelbrich radius must be positive");
    }
    let mut records = Vec::new();
    for (index, (exposure, outcome)) in cfg.designs.iter().enumerate() {
        let spec = DgpSpec::new(*exposure, *outcome, cfg.n, sub_seed(cfg.seed, streams::COEFFICIENTS + index as u64));
        let dgp = Dgp::new(spec)?;
        let label = dgp.spec.label();
        let pool = if *exposure == ExposureScenario::Gaussian {
            None
        } else {
            Some(dgp.error_pool(cfg.truth_draws, sub_seed(cfg.seed, index as u64)))
        };
        let outs: Vec<RepOutput> = (0..cfg.reps)
            .into_par_iter()
            .map(|rep| run_rep(cfg, &dgp, pool.as_ref(), &label, rep, rep_seed(cfg.seed, index, rep)))
            .collect();
        records.extend(outs.into_iter().flat_map(|o| o.records));
    }
    Ok(aggregate(records))
}

/// Per-design metrics from replication records, then their averages over
/// designs.
pub fn aggregate(records: Vec<RepRecord>) -> MetricTable {
    let failures = records.iter().filter(|r| r.error.is_some()).count();
    let mut designs: Vec<String> = Vec::new();
    let mut pipelines: Vec<String> = Vec::new();
    for r in &records {
        if !designs.contains(&r.design) {
            designs.push(r.design.clone());
        }
        if !pipelines.contains(&r.pipeline) {
            pipelines.push(r.pipeline.clone());
        }
    }
    let mut per_design = Vec::new();
    for d in &designs {
        for p in &pipelines {
            let errs: Vec<f64> = records
                .iter()
                .filter(|r| &r.design == d && &r.pipeline == p)
                .filter_map(|r| Some(r.estimate? - r.truth?))
                .collect();
            if errs.is_empty() {
                continue;
            }
            let (mean_bias, mean_abs_bias, rmse) = metrics(&errs);
            per_design.push(MetricRow {
                design: Some(d.clone()),
                pipeline: p.clone(),
                mean_bias,
                mean_abs_bias,
                rmse,
                reps: errs.len(),
            });
        }
    }
    let rows = pipelines
        .iter()
        .filter_map(|p| {
            let rs: Vec<&MetricRow> = per_design.iter().filter(|r| &r.pipeline == p).collect();
            if rs.is_empty() {
                return None;
            }
            let k = rs.len() as f64;
            Some(MetricRow {
                design: None,
                pipeline: p.clone(),
                mean_bias: rs.iter().map(|r| r.mean_bias).sum::<f64>() / k,
                mean_abs_bias: rs.iter().map(|r| r.mean_abs_bias).sum::<f64>() / k,
                rmse: rs.iter().map(|r| r.rmse).sum::<f64>() / k,
                reps: rs.iter().map(|r| r.reps).sum(),
            })
        })
        .collect();
    MetricTable { rows, per_design, failures, records }
}

/// Linear-Gaussian design with one unmeasured confounder `U ~ N(0, 1)`:
/// `W = BᵀX + aU + ε`, `Y = αᵀX + βᵀW + γU + e`, with `X ~ N(0, I_p)` and
/// standard normal ε, e. The short law of `W | X` is `N(BᵀX, I + aaᵀ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfoundedDgp {
    /// p×q
    pub b: DMatrix<f64>,
    pub a: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: f64,
}

impl ConfoundedDgp {
    pub fn p(&self) -> usize {
        self.b.nrows()
    }

    pub fn q(&self) -> usize {
        self.b.ncols()
    }

    fn short_cov(&self) -> DMatrix<f64> {
        let a = DVector::from_column_slice(&self.a);
        DMatrix::identity(self.q(), self.q()) + &a * a.transpose()
    }

    pub fn generate(&self, n: usize, seed: u64) -> Result<Dataset> {
        let (p, q) = (self.p(), self.q());
        let mut r = rng::rng(sub_seed(seed, streams::DATA));
        let x = Array2::from_shape_fn((n, p), |_| r.sample::<f64, _>(StandardNormal));
        let mut w = Array2::zeros((n, q));
        let mut y = Array1::zeros(n);
        for i in 0..n {
            let u: f64 = r.sample(StandardNormal);
            for k in 0..q {
                let e: f64 = r.sample(StandardNormal);
                w[(i, k)] = (0..p).map(|j| self.b[(j, k)] * x[(i, j)]).sum::<f64>() + self.a[k] * u + e;
            }
            let e: f64 = r.sample(StandardNormal);
            y[i] = (0..p).map(|j| self.alpha[j] * x[(i, j)]).sum::<f64>()
                + (0..q).map(|k| self.beta[k] * w[(i, k)]).sum::<f64>()
                + self.gamma * u
                + e;
        }
        Dataset::new(x, w, y)
    }

    /// Causal `θ(δ) = βᵀ(I + aaᵀ)δ` under the tilt of the observed law of W | X.
    pub fn true_theta(&self, delta: &[f64]) -> f64 {
        let d = DVector::from_column_slice(delta);
        let shift = self.short_cov() * d;
        dot(&self.beta, shift.as_slice())
    }

    /// Identified (short) contrast; differs from the causal one by `γ aᵀδ`.
    pub fn short_theta(&self, delta: &[f64]) -> f64 {
        self.true_theta(delta) + self.gamma * dot(&self.a, delta)
    }

    /// True sensitivity parameters `(η_Y², η_α²(δ))`: η_Y² in closed form, the
    /// RR share by Monte Carlo from the exact long and short representers.
    pub fn oracle_strength(&self, delta: &[f64], draws: usize, seed: u64) -> Result<(f64, f64)> {
        let q = self.q();
        if delta.len() != q {
            return param("tilt dimension does not match q");
        }
        let aa = dot(&self.a, &self.a);
        let v = 1.0 / (1.0 + aa);
        let g2 = self.gamma * self.gamma * v;
        let eta_y_sq = g2 / (1.0 + g2);

        let sc = self.short_cov();
        let sc_inv = sc.clone().try_inverse().ok_or_else(|| Error::Numeric("singular short covariance".into()))?;
        let logdet = (1.0 + aa).ln();
        let d = DVector::from_column_slice(delta);
        let half_quad = 0.5 * (d.transpose() * &sc * &d)[(0, 0)];
        let mut r = rng::rng(sub_seed(seed, streams::TRUTH));
        let (mut long2, mut short2) = (0.0, 0.0);
        for _ in 0..draws {
            let u: f64 = r.sample(StandardNormal);
            let eps = DVector::from_fn(q, |_, _| r.sample::<f64, _>(StandardNormal));
            let e = DVector::from_column_slice(&self.a) * u + &eps;
            // ρ = f(w | x) / f(w | x, u); the X terms cancel
            let log_rho = -0.5 * (e.transpose() * &sc_inv * &e)[(0, 0)] - 0.5 * logdet + 0.5 * eps.norm_squared();
            let alpha_s = (d.dot(&e) - half_quad).exp();
            let diff = (log_rho.exp() - 1.0) * (alpha_s - 1.0);
            long2 += diff * diff;
            short2 += (alpha_s - 1.0).powi(2);
        }
        let cd2 = long2 / short2;
        Ok((eta_y_sq, cd2 / (1.0 + cd2)))
    }
}

/// Raw exposure residuals `W − BᵀX − β₀` (n×q).
pub fn residuals(dgp: &Dgp, raw: &Dataset) -> Array2<f64> {
    let mut e = raw.w.clone();
    for i in 0..raw.n() {
        let m = dgp.exposure_mean(&raw.x.row(i).to_vec());
        for k in 0..dgp.spec.q {
            e[(i, k)] -= m[k];
        }
    }
    e
}

/// Builds an outcome perturbation that adds a constant.
pub fn constant_shift(v: f64) -> crate::estimator::OutcomePerturbation {
    Arc::new(move |_: &[f64]| v)
}
