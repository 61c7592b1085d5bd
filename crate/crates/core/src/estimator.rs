//! Cross-fitted one-step estimation of ψ(δ) and θ(δ) = ψ(δ) − ψ(0).
//!
//! Each observation is evaluated only with nuisances trained outside its fold.
//! For every fold model one set of scaled residual draws `s_k` is shared by
//! all rows and all tilts, and the outcome regression is cached on the grid
//! `μ̂(x_i, m̂(x_i) + s_k)`. A new δ then only reweights that grid by
//! `exp(δᵀ s_k)`, which keeps ψ̂(δ) smooth in δ.

use std::sync::Arc;

use nalgebra::DMatrix;
use ndarray::{concatenate, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{assign_folds, Dataset, FoldAssignment};
use crate::error::{param, Error, Result};
use crate::geometry::tilt_weights;
use crate::linalg::{dot, norm};
use crate::nuisance::exposure::fit_exposure_means;
use crate::nuisance::{ConditionalExposureModel, FittedRegressor, RegressorSpec, ResidualFamily};
use crate::rng::{streams, sub_seed};

/// Normal quantile used for two-sided 95% intervals.
pub const Z_95: f64 = 1.96;
/// Tilted-mean draws whose effective sample size falls below this are flagged.
pub const LOW_ESS: f64 = 10.0;

/// How the density ratio and the tilted conditional mean are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Path {
    /// Ratio and tilted mean both from the fitted exposure density.
    McDensity,
    /// Ratio `exp(δᵀw)/ν̂†(x)` from regression; tilted mean from the density.
    RatioRegression,
    /// Tilted mean as an MC numerator over the regression normalizer.
    Hybrid,
    /// Tilted mean `η̂/ν̂†` and ratio from regression; no density.
    FullyDirect,
}

impl Path {
    pub fn needs_direct(&self) -> bool {
        !matches!(self, Path::McDensity)
    }

    pub fn label(&self) -> &'static str {
        match self {
            Path::McDensity => "mc_density",
            Path::RatioRegression => "ratio_regression",
            Path::Hybrid => "hybrid",
            Path::FullyDirect => "fully_direct",
        }
    }
}

/// Regression target used for `ν_δ(x) = E[exp(δᵀW) | X = x]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NuMethod {
    /// Regress `δᵀW` on X, then `exp(prediction) · mean(exp(residual))`.
    #[default]
    LogSmearing,
    /// Regress `exp(δᵀW)` on X directly.
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisanceConfig {
    #[serde(default = "defaults::folds")]
    pub folds: usize,
    #[serde(default = "defaults::outcome")]
    pub outcome_learner: RegressorSpec,
    #[serde(default = "defaults::linear")]
    pub exposure_learner: RegressorSpec,
    #[serde(default = "defaults::family")]
    pub family: ResidualFamily,
    #[serde(default = "defaults::linear")]
    pub ratio_learner: RegressorSpec,
    #[serde(default)]
    pub nu_method: NuMethod,
    #[serde(default = "defaults::outcome")]
    pub numerator_learner: RegressorSpec,
    #[serde(default = "defaults::mc_draws")]
    pub mc_draws: usize,
    /// Finite-tilt bound on ‖δ‖; defaults to `10 / max_i ‖W_i‖`.
    #[serde(default)]
    pub delta_max: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    use super::*;
    pub fn folds() -> usize {
        5
    }
    pub fn outcome() -> RegressorSpec {
        RegressorSpec::ridge(1.0, 2)
    }
    pub fn linear() -> RegressorSpec {
        RegressorSpec::ridge(1.0, 1)
    }
    pub fn family() -> ResidualFamily {
        ResidualFamily::Gaussian
    }
    pub fn mc_draws() -> usize {
        2000
    }
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        Self {
            folds: defaults::folds(),
            outcome_learner: defaults::outcome(),
            exposure_learner: defaults::linear(),
            family: defaults::family(),
            ratio_learner: defaults::linear(),
            nu_method: NuMethod::default(),
            numerator_learner: defaults::outcome(),
            mc_draws: defaults::mc_draws(),
            delta_max: None,
            seed: 0,
        }
    }
}

/// A tilt δ on the working (standardized) scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiltVector {
    pub delta: Vec<f64>,
    #[serde(default)]
    pub label: Option<String>,
}

impl TiltVector {
    pub fn new(delta: Vec<f64>) -> Result<Self> {
        if delta.is_empty() || delta.iter().any(|v| !v.is_finite()) {
            return param("tilt must be a nonempty finite vector");
        }
        Ok(Self { delta, label: None })
    }

    pub fn labeled(delta: Vec<f64>, label: impl Into<String>) -> Result<Self> {
        let mut t = Self::new(delta)?;
        t.label = Some(label.into());
        Ok(t)
    }

    pub fn zero(q: usize) -> Self {
        Self { delta: vec![0.0; q], label: Some("zero".into()) }
    }

    pub fn is_zero(&self) -> bool {
        self.delta.iter().all(|v| *v == 0.0)
    }
}

/// Nuisances trained without fold `k`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldNuisance {
    pub outcome: FittedRegressor,
    pub exposure: ConditionalExposureModel,
    /// Scaled residual draws `s_k` (M×q) shared by all rows of the fold.
    pub draws: Array2<f64>,
    /// Held-out rows evaluated with this fold's nuisances.
    pub rows: Vec<usize>,
}

/// Additive perturbation `h([x, w])` of the outcome regression.
pub type OutcomePerturbation = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Cross-fitted nuisances with per-observation caches.
#[derive(Clone)]
pub struct NuisanceBundle {
    pub config: NuisanceConfig,
    pub folds: FoldAssignment,
    pub fits: Vec<FoldNuisance>,
    pub delta_max: f64,
    /// `τ = Δ_max · max_i ‖W_i‖`; ν† is truncated to `[e^{−τ}/2, 2e^{τ}]`.
    pub tau: f64,
    perturbation: Option<OutcomePerturbation>,
    mu_obs: Array1<f64>,
    mean_x: Array2<f64>,
    grid: Array2<f64>,
}

impl std::fmt::Debug for NuisanceBundle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NuisanceBundle")
            .field("config", &self.config)
            .field("folds", &self.folds.k)
            .field("delta_max", &self.delta_max)
            .field("perturbed", &self.perturbation.is_some())
            .finish()
    }
}

fn xw_features(x: ArrayView2<f64>, w: ArrayView2<f64>) -> Array2<f64> {
    concatenate(Axis(1), &[x, w]).expect("row counts agree")
}

fn fold_seed(seed: u64, k: usize) -> u64 {
    sub_seed(seed, 1000 + k as u64)
}

/// Fits all per-fold nuisances.
pub fn fit_bundle(d: &Dataset, cfg: &NuisanceConfig) -> Result<NuisanceBundle> {
    if cfg.mc_draws < 2 {
        return param("mc_draws must be at least 2");
    }
    let folds = assign_folds(d.n(), cfg.folds, cfg.seed)?;
    let fits: Vec<FoldNuisance> = (0..folds.k)
        .into_par_iter()
        .map(|k| {
            let train = folds.train_rows(k);
            let t = d.select_rows(&train);
            let seed = fold_seed(cfg.seed, k);
            let feats = xw_features(t.x.view(), t.w.view());
            let outcome = cfg.outcome_learner.fit(feats.view(), t.y.view(), sub_seed(seed, streams::OUTCOME))?;
            let means =
                fit_exposure_means(t.x.view(), t.w.view(), &cfg.exposure_learner, sub_seed(seed, streams::EXPOSURE))?;
            let exposure = ConditionalExposureModel::from_means(t.x.view(), t.w.view(), means, cfg.family)?;
            let draws = exposure.residual_draws(cfg.mc_draws, sub_seed(seed, streams::TILT_DRAWS));
            Ok(FoldNuisance { outcome, exposure, draws, rows: folds.fold_rows(k) })
        })
        .collect::<Result<_>>()?;
    NuisanceBundle::assemble(d, cfg.clone(), folds, fits)
}

impl NuisanceBundle {
    fn assemble(d: &Dataset, config: NuisanceConfig, folds: FoldAssignment, fits: Vec<FoldNuisance>) -> Result<Self> {
        let wmax = d.max_exposure_norm();
        if !(wmax > 0.0) {
            return Err(Error::Numeric("all exposure rows are zero".into()));
        }
        let delta_max = config.delta_max.unwrap_or(10.0 / wmax);
        if !(delta_max > 0.0) {
            return param("delta_max must be positive");
        }
        let mut b = Self {
            config,
            folds,
            fits,
            delta_max,
            tau: delta_max * wmax,
            perturbation: None,
            mu_obs: Array1::zeros(0),
            mean_x: Array2::zeros((0, 0)),
            grid: Array2::zeros((0, 0)),
        };
        b.rebuild_cache(d)?;
        Ok(b)
    }

    /// Same outcome and mean regressions, new residual family (and draws).
    pub fn with_family(&self, d: &Dataset, family: ResidualFamily) -> Result<Self> {
        let fits = self
            .fits
            .par_iter()
            .enumerate()
            .map(|(k, f)| {
                let train = self.folds.train_rows(k);
                let t = d.select_rows(&train);
                let exposure =
                    ConditionalExposureModel::from_means(t.x.view(), t.w.view(), f.exposure.means.clone(), family)?;
                let seed = fold_seed(self.config.seed, k);
                let draws = exposure.residual_draws(self.config.mc_draws, sub_seed(seed, streams::TILT_DRAWS));
                Ok(FoldNuisance { outcome: f.outcome.clone(), exposure, draws, rows: f.rows.clone() })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut cfg = self.config.clone();
        cfg.family = family;
        let mut b = Self::assemble(d, cfg, self.folds.clone(), fits)?;
        if let Some(p) = &self.perturbation {
            b = b.with_outcome_perturbation(d, p.clone())?;
        }
        Ok(b)
    }

    /// Adds `h([x, w])` to every outcome-regression prediction (data points and
    /// MC grid alike). Used to probe robustness to a misspecified μ̂.
    pub fn with_outcome_perturbation(&self, d: &Dataset, h: OutcomePerturbation) -> Result<Self> {
        let mut b = self.clone();
        b.perturbation = Some(h);
        b.rebuild_cache(d)?;
        Ok(b)
    }

    fn outcome_at(&self, k: usize, xw: &[f64]) -> f64 {
        let base = self.fits[k].outcome.predict_row(xw);
        match &self.perturbation {
            Some(h) => base + h(xw),
            None => base,
        }
    }

    fn rebuild_cache(&mut self, d: &Dataset) -> Result<()> {
        let (n, p, q) = (d.n(), d.p(), d.q());
        if self.folds.fold_of.len() != n {
            return param("dataset size differs from the fold assignment");
        }
        let m = self.config.mc_draws;
        let rows: Vec<(Vec<f64>, f64, Vec<f64>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let k = self.folds.fold_of[i];
                let fit = &self.fits[k];
                let x: Vec<f64> = d.x.row(i).to_vec();
                let mx = fit.exposure.mean_at(&x);
                let mut xw = d.xw_row(i);
                let mu = self.outcome_at(k, &xw);
                let mut g = Vec::with_capacity(m);
                for s in fit.draws.rows() {
                    for j in 0..q {
                        xw[p + j] = mx[j] + s[j];
                    }
                    g.push(self.outcome_at(k, &xw));
                }
                (mx, mu, g)
            })
            .collect();
        self.mu_obs = Array1::zeros(n);
        self.mean_x = Array2::zeros((n, q));
        self.grid = Array2::zeros((n, m));
        for (i, (mx, mu, g)) in rows.into_iter().enumerate() {
            self.mu_obs[i] = mu;
            self.mean_x.row_mut(i).assign(&ArrayView1::from(&mx));
            self.grid.row_mut(i).assign(&ArrayView1::from(&g));
        }
        if self.mu_obs.iter().any(|v| !v.is_finite()) || self.grid.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("outcome regression produced non-finite predictions".into()));
        }
        Ok(())
    }

    /// Out-of-fold `μ̂(X_i, W_i)`.
    pub fn outcome_predictions(&self) -> ArrayView1<'_, f64> {
        self.mu_obs.view()
    }

    /// Out-of-fold `m̂(X_i)` (n×q).
    pub fn exposure_means(&self) -> ArrayView2<'_, f64> {
        self.mean_x.view()
    }

    pub fn mc_draws(&self) -> usize {
        self.config.mc_draws
    }

    /// ν† truncation bounds `[e^{−τ}/2, 2e^{τ}]`.
    pub fn nu_bounds(&self) -> (f64, f64) {
        ((-self.tau).exp() / 2.0, 2.0 * self.tau.exp())
    }

    pub fn check_tilt(&self, delta: &[f64]) -> Result<()> {
        let q = self.mean_x.ncols();
        if delta.len() != q {
            return param(format!("tilt has length {}, expected {q}", delta.len()));
        }
        if delta.iter().any(|v| !v.is_finite()) {
            return param("tilt must be finite");
        }
        let nd = norm(delta);
        if nd > self.delta_max * (1.0 + 1e-12) {
            return param(format!(
                "‖δ‖ = {nd:.4} exceeds the finite-tilt bound {:.4}; rescale δ",
                self.delta_max
            ));
        }
        Ok(())
    }

    /// Fits ν̂ (and optionally η̂) out of fold for the given tilt.
    pub fn fit_direct(&self, d: &Dataset, delta: &[f64], numerator: bool) -> Result<DirectFit> {
        self.check_tilt(delta)?;
        let n = d.n();
        let zero = delta.iter().all(|v| *v == 0.0);
        let lin: Array1<f64> = d.w.rows().into_iter().map(|r| dot(&r.to_vec(), delta)).collect();
        if lin.iter().any(|v| *v > 700.0) {
            return Err(Error::Overflow("exp(δᵀW) overflows; rescale δ".into()));
        }
        let (lo, hi) = self.nu_bounds();
        let per_fold: Vec<(DirectFold, Vec<(usize, f64, Option<f64>)>)> = (0..self.folds.k)
            .into_par_iter()
            .map(|k| {
                let train = self.folds.train_rows(k);
                let seed = sub_seed(fold_seed(self.config.seed, k), streams::RATIO);
                let xt = d.x.select(Axis(0), &train);
                let lt: Array1<f64> = train.iter().map(|&i| lin[i]).collect();
                let nu_model = if zero {
                    NuModel::One
                } else {
                    match self.config.nu_method {
                        NuMethod::Direct => {
                            let target = lt.mapv(f64::exp);
                            NuModel::Direct(self.config.ratio_learner.fit(xt.view(), target.view(), seed)?)
                        }
                        NuMethod::LogSmearing => {
                            let reg = self.config.ratio_learner.fit(xt.view(), lt.view(), seed)?;
                            let pred = reg.predict(xt.view());
                            let smear = (&lt - &pred).mapv(f64::exp).mean().unwrap_or(1.0);
                            NuModel::LogSmearing { reg, smear }
                        }
                    }
                };
                let eta_model = if numerator {
                    let target: Array1<f64> = train
                        .iter()
                        .map(|&i| lin[i].exp() * self.outcome_at(k, &d.xw_row(i)))
                        .collect();
                    let s = sub_seed(fold_seed(self.config.seed, k), streams::NUMERATOR);
                    Some(self.config.numerator_learner.fit(xt.view(), target.view(), s)?)
                } else {
                    None
                };
                let df = DirectFold { nu: nu_model, eta: eta_model };
                let vals = self.fits[k]
                    .rows
                    .iter()
                    .map(|&i| {
                        let x = d.x.row(i).to_vec();
                        (i, df.nu_raw(&x), df.eta.as_ref().map(|e| e.predict_row(&x)))
                    })
                    .collect();
                Ok((df, vals))
            })
            .collect::<Result<_>>()?;
        let mut nu = Array1::zeros(n);
        let mut eta = if numerator { Some(Array1::zeros(n)) } else { None };
        let mut truncated = 0;
        let mut folds = Vec::with_capacity(per_fold.len());
        for (df, vals) in per_fold {
            for (i, raw, e) in vals {
                let t = truncate(raw, lo, hi);
                if t != raw {
                    truncated += 1;
                }
                nu[i] = t;
                if let (Some(eta), Some(e)) = (eta.as_mut(), e) {
                    eta[i] = e;
                }
            }
            folds.push(df);
        }
        Ok(DirectFit { delta: delta.to_vec(), nu, eta, truncated, bounds: (lo, hi), folds })
    }

    /// Per-observation `r̂_δ(W_i, X_i)` and `m̂_δ(X_i)` along `path`.
    pub fn values(&self, d: &Dataset, delta: &[f64], path: Path, direct: Option<&DirectFit>) -> Result<NuisanceValues> {
        self.check_tilt(delta)?;
        let direct = if path.needs_direct() {
            let df = direct.ok_or_else(|| {
                Error::State(format!("path {} needs a fitted ratio regression", path.label()))
            })?;
            if df.delta != delta {
                return Err(Error::State("ratio regression was fitted for a different tilt".into()));
            }
            if path == Path::FullyDirect && df.eta.is_none() {
                return Err(Error::State("fully_direct path needs a fitted numerator regression".into()));
            }
            Some(df)
        } else {
            None
        };
        let n = d.n();
        let mut r = Array1::zeros(n);
        let mut m = Array1::zeros(n);
        let mut ess_min = f64::INFINITY;
        for fit in &self.fits {
            let (w, ess, log_kappa) = weights_and_normalizer(fit.draws.view(), delta)?;
            ess_min = ess_min.min(ess);
            for &i in &fit.rows {
                let mc = dot(self.grid.row(i).as_slice().expect("contiguous"), &w);
                let lin_w = dot(&d.w.row(i).to_vec(), delta);
                let lin_m = dot(self.mean_x.row(i).as_slice().expect("contiguous"), delta);
                let (ri, mi) = match (path, direct) {
                    (Path::McDensity, _) => ((lin_w - lin_m - log_kappa).exp(), mc),
                    (Path::RatioRegression, Some(df)) => (lin_w.exp() / df.nu[i], mc),
                    (Path::Hybrid, Some(df)) => (lin_w.exp() / df.nu[i], (lin_m + log_kappa).exp() * mc / df.nu[i]),
                    (Path::FullyDirect, Some(df)) => {
                        let eta = df.eta.as_ref().expect("checked above");
                        (lin_w.exp() / df.nu[i], eta[i] / df.nu[i])
                    }
                    _ => unreachable!(),
                };
                if !(ri > 0.0 && ri.is_finite() && mi.is_finite()) {
                    return Err(Error::Overflow(format!(
                        "density ratio or tilted mean not finite at row {}; use a smaller tilt",
                        i + 1
                    )));
                }
                r[i] = ri;
                m[i] = mi;
            }
        }
        Ok(NuisanceValues { r, m, ess_min })
    }

    /// `r̂_δ(w, x)` under fold `k`'s nuisances.
    pub fn density_ratio(
        &self,
        k: usize,
        w: &[f64],
        x: &[f64],
        delta: &[f64],
        path: Path,
        direct: Option<&DirectFit>,
    ) -> Result<f64> {
        self.check_tilt(delta)?;
        let fit = self.fits.get(k).ok_or_else(|| Error::Parameter(format!("no fold {k}")))?;
        let lin_w = dot(w, delta);
        if path == Path::McDensity {
            let (_, _, log_kappa) = weights_and_normalizer(fit.draws.view(), delta)?;
            let lin_m = dot(&fit.exposure.mean_at(x), delta);
            return Ok((lin_w - lin_m - log_kappa).exp());
        }
        let df = direct.ok_or_else(|| Error::State(format!("path {} needs a fitted ratio regression", path.label())))?;
        let (lo, hi) = df.bounds;
        Ok(lin_w.exp() / truncate(df.folds[k].nu_raw(x), lo, hi))
    }

    /// `m̂_δ(x)` under fold `k`'s nuisances, with the tilted-weight ESS.
    pub fn tilted_mean(
        &self,
        k: usize,
        x: &[f64],
        delta: &[f64],
        path: Path,
        direct: Option<&DirectFit>,
    ) -> Result<(f64, f64)> {
        self.check_tilt(delta)?;
        let fit = self.fits.get(k).ok_or_else(|| Error::Parameter(format!("no fold {k}")))?;
        let (w, ess, log_kappa) = weights_and_normalizer(fit.draws.view(), delta)?;
        let mx = fit.exposure.mean_at(x);
        let p = x.len();
        let mut xw: Vec<f64> = x.iter().chain(mx.iter()).copied().collect();
        let mut mc = 0.0;
        for (s, wk) in fit.draws.rows().into_iter().zip(&w) {
            for j in 0..mx.len() {
                xw[p + j] = mx[j] + s[j];
            }
            mc += wk * self.outcome_at(k, &xw);
        }
        let value = match path {
            Path::McDensity | Path::RatioRegression => mc,
            Path::Hybrid | Path::FullyDirect => {
                let df = direct
                    .ok_or_else(|| Error::State(format!("path {} needs a fitted ratio regression", path.label())))?;
                let nu = truncate(df.folds[k].nu_raw(x), df.bounds.0, df.bounds.1);
                if path == Path::Hybrid {
                    (dot(&mx, delta) + log_kappa).exp() * mc / nu
                } else {
                    let eta = df.folds[k]
                        .eta
                        .as_ref()
                        .ok_or_else(|| Error::State("numerator regression not fitted".into()))?;
                    eta.predict_row(x) / nu
                }
            }
        };
        Ok((value, ess))
    }

    /// One-step ψ̂(δ) along the MC-density path, without building a report.
    /// This is the surface searched by the optimizer.
    pub fn psi_hat(&self, d: &Dataset, delta: &[f64]) -> Result<f64> {
        let v = self.values(d, delta, Path::McDensity, None)?;
        Ok(onestep_from_values(d.y.view(), &v).value)
    }
}

fn truncate(v: f64, lo: f64, hi: f64) -> f64 {
    if v.is_nan() {
        lo
    } else {
        v.clamp(lo, hi)
    }
}

/// Normalized tilt weights, their ESS, and `log κ̂(δ) = log mean_k exp(δᵀ s_k)`.
fn weights_and_normalizer(draws: ArrayView2<f64>, delta: &[f64]) -> Result<(Vec<f64>, f64, f64)> {
    let (w, ess) = tilt_weights(draws, delta)?;
    let logits: Vec<f64> = draws.rows().into_iter().map(|r| dot(r.as_slice().expect("contiguous"), delta)).collect();
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
    let log_kappa = mx + sum.ln() - (logits.len() as f64).ln();
    Ok((w, ess, log_kappa))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
enum NuModel {
    One,
    Direct(FittedRegressor),
    LogSmearing { reg: FittedRegressor, smear: f64 },
}

/// Regression nuisances of one fold for a fixed tilt.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DirectFold {
    nu: NuModel,
    eta: Option<FittedRegressor>,
}

impl DirectFold {
    /// Untruncated `ν̂_δ(x)`.
    pub fn nu_raw(&self, x: &[f64]) -> f64 {
        match &self.nu {
            NuModel::One => 1.0,
            NuModel::Direct(r) => r.predict_row(x),
            NuModel::LogSmearing { reg, smear } => reg.predict_row(x).exp() * smear,
        }
    }
}

/// Out-of-fold ν̂† and η̂ for one tilt.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DirectFit {
    pub delta: Vec<f64>,
    /// Truncated normalizer ν†(X_i).
    pub nu: Array1<f64>,
    pub eta: Option<Array1<f64>>,
    /// Rows whose raw ν̂ hit a truncation bound.
    pub truncated: usize,
    pub bounds: (f64, f64),
    folds: Vec<DirectFold>,
}

/// Per-observation nuisance values at one tilt.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NuisanceValues {
    pub r: Array1<f64>,
    pub m: Array1<f64>,
    /// Smallest effective sample size of the tilted MC weights across folds.
    pub ess_min: f64,
}

/// A point estimate with its influence-function inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    /// `None` for the plug-in estimator, which has no influence-based SE.
    pub se: Option<f64>,
    pub ci_95: Option<[f64; 2]>,
    pub influence: Vec<f64>,
}

impl Estimate {
    fn from_influence(value: f64, influence: Vec<f64>) -> Self {
        let n = influence.len() as f64;
        let se = (influence.iter().map(|v| v * v).sum::<f64>() / n / n).sqrt();
        Self { value, se: Some(se), ci_95: Some([value - Z_95 * se, value + Z_95 * se]), influence }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    OneStep,
    Plugin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub ess_min: f64,
    pub low_ess: bool,
    pub mc_draws: usize,
    pub folds: usize,
    pub seed: u64,
    pub truncated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub delta: TiltVector,
    pub path: Path,
    pub estimator: Estimator,
    pub psi: Estimate,
    pub theta: Option<Estimate>,
    pub diagnostics: Diagnostics,
}

impl EstimateReport {
    /// θ̂ if present, else ψ̂.
    pub fn headline(&self) -> &Estimate {
        self.theta.as_ref().unwrap_or(&self.psi)
    }
}

/// `ψ̂ = mean(r̂(Y − m̂) + m̂)` with influence values `r̂(Y − m̂) + m̂ − ψ̂`.
pub fn onestep_from_values(y: ArrayView1<f64>, v: &NuisanceValues) -> Estimate {
    let n = y.len();
    let contrib: Vec<f64> = (0..n).map(|i| v.r[i] * (y[i] - v.m[i]) + v.m[i]).collect();
    let psi = contrib.iter().sum::<f64>() / n as f64;
    let phi: Vec<f64> = contrib.iter().map(|c| c - psi).collect();
    Estimate::from_influence(psi, phi)
}

fn diagnostics(bundle: &NuisanceBundle, ess_min: f64, truncated: usize) -> Diagnostics {
    Diagnostics {
        ess_min,
        low_ess: ess_min < LOW_ESS,
        mc_draws: bundle.config.mc_draws,
        folds: bundle.folds.k,
        seed: bundle.config.seed,
        truncated,
    }
}

fn direct_for(d: &Dataset, bundle: &NuisanceBundle, delta: &[f64], path: Path) -> Result<Option<DirectFit>> {
    if path.needs_direct() {
        Ok(Some(bundle.fit_direct(d, delta, path == Path::FullyDirect)?))
    } else {
        Ok(None)
    }
}

/// Cross-fitted one-step estimator of ψ(δ).
pub fn onestep_psi(d: &Dataset, bundle: &NuisanceBundle, delta: &TiltVector, path: Path) -> Result<EstimateReport> {
    let direct = direct_for(d, bundle, &delta.delta, path)?;
    let v = bundle.values(d, &delta.delta, path, direct.as_ref())?;
    if v.ess_min < LOW_ESS {
        log::warn!("effective sample size {:.1} of tilted draws is low", v.ess_min);
    }
    Ok(EstimateReport {
        delta: delta.clone(),
        path,
        estimator: Estimator::OneStep,
        psi: onestep_from_values(d.y.view(), &v),
        theta: None,
        diagnostics: diagnostics(bundle, v.ess_min, direct.map_or(0, |f| f.truncated)),
    })
}

/// Plug-in `mean_i m̂_δ(X_i)` with the MC-density tilted mean. No SE.
pub fn plugin_psi(d: &Dataset, bundle: &NuisanceBundle, delta: &TiltVector) -> Result<EstimateReport> {
    let v = bundle.values(d, &delta.delta, Path::McDensity, None)?;
    let value = v.m.mean().unwrap_or(f64::NAN);
    Ok(EstimateReport {
        delta: delta.clone(),
        path: Path::McDensity,
        estimator: Estimator::Plugin,
        psi: Estimate { value, se: None, ci_95: None, influence: Vec::new() },
        theta: None,
        diagnostics: diagnostics(bundle, v.ess_min, 0),
    })
}

/// `θ̂(δ) = ψ̂(δ) − ψ̂(0)` on the same folds and draws, with per-observation
/// differences of influence values.
pub fn theta(d: &Dataset, bundle: &NuisanceBundle, delta: &TiltVector, path: Path) -> Result<EstimateReport> {
    let q = delta.delta.len();
    let at = onestep_psi(d, bundle, delta, path)?;
    let base = onestep_psi(d, bundle, &TiltVector::zero(q), path)?;
    Ok(theta_from_reports(at, &base))
}

/// Combines ψ̂(δ) and ψ̂(0) reports computed on the same folds.
pub fn theta_from_reports(mut at: EstimateReport, base: &EstimateReport) -> EstimateReport {
    let value = at.psi.value - base.psi.value;
    let phi: Vec<f64> = at.psi.influence.iter().zip(&base.psi.influence).map(|(a, b)| a - b).collect();
    at.theta = Some(Estimate::from_influence(value, phi));
    at
}

/// Estimator covariance `(1/n²) Σ_i φ_i φ_iᵀ` across tilts, using θ influence
/// values where available.
pub fn joint_covariance(reports: &[EstimateReport]) -> Result<DMatrix<f64>> {
    let infl: Vec<&[f64]> = reports.iter().map(|r| r.headline().influence.as_slice()).collect();
    joint_covariance_of(&infl)
}

pub fn joint_covariance_of(influence: &[&[f64]]) -> Result<DMatrix<f64>> {
    let j = influence.len();
    if j == 0 {
        return param("no influence vectors");
    }
    let n = influence[0].len();
    if n == 0 || influence.iter().any(|v| v.len() != n) {
        return param("influence vectors must share a nonzero length");
    }
    let mut cov = DMatrix::zeros(j, j);
    for a in 0..j {
        for b in 0..=a {
            let s = dot(influence[a], influence[b]) / (n as f64 * n as f64);
            cov[(a, b)] = s;
            cov[(b, a)] = s;
        }
    }
    Ok(cov)
}

/// Empirical second-order remainder `|E_n[(r̂ − r)(m̂ − m)]|` and its
/// Cauchy–Schwarz bound `‖r̂ − r‖₂ ‖m̂ − m‖₂`.
pub fn remainder_bound_check(oracle: &NuisanceValues, hat: &NuisanceValues) -> Result<(f64, f64)> {
    let n = oracle.r.len();
    if hat.r.len() != n || hat.m.len() != n || oracle.m.len() != n || n == 0 {
        return param("nuisance value vectors must share a nonzero length");
    }
    let dr = &hat.r - &oracle.r;
    let dm = &hat.m - &oracle.m;
    let nf = n as f64;
    let lhs = ((&dr * &dm).sum() / nf).abs();
    let rhs = (dr.mapv(|v| v * v).sum() / nf).sqrt() * (dm.mapv(|v| v * v).sum() / nf).sqrt();
    Ok((lhs, rhs))
}
