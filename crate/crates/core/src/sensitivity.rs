//! Omitted-variable-bias bounds for θ(δ) on the partial-R² scale, with
//! delta-method confidence bounds for the endpoints, nested-projection
//! covariate benchmarks and robustness contours.

use nalgebra::{DMatrix, DVector};
use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{param, Error, Result};
use crate::estimator::{Estimate, NuisanceBundle, Path};
use crate::linalg::residual_mean_square;

/// One-sided 95% normal quantile.
pub const Z_ONE_SIDED: f64 = 1.6448536269514722;
/// η_Y² grid size for contours.
pub const CONTOUR_POINTS: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityParams {
    pub eta_y_sq: f64,
    pub eta_alpha_sq: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_y: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_d: Option<f64>,
}

impl SensitivityParams {
    pub fn new(eta_y_sq: f64, eta_alpha_sq: f64) -> Result<Self> {
        let p = Self { eta_y_sq, eta_alpha_sq, k_y: None, k_d: None };
        p.validate()?;
        Ok(p)
    }

    /// Parameters implied by benchmark statistics scaled by `k_y`, `k_d`.
    pub fn calibrated(f_y_sq: f64, k_y: f64, f_alpha_sq: f64, k_d: f64) -> Result<Self> {
        let p = Self {
            eta_y_sq: calibrate(f_y_sq, k_y)?,
            eta_alpha_sq: calibrate(f_alpha_sq, k_d)?,
            k_y: Some(k_y),
            k_d: Some(k_d),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eta_y_sq) {
            return param("eta_Y^2 must lie in [0, 1]");
        }
        if !(self.eta_alpha_sq >= 0.0 && self.eta_alpha_sq < 1.0) {
            return param("eta_alpha^2 must lie in [0, 1)");
        }
        for k in [self.k_y, self.k_d].into_iter().flatten() {
            if !(k >= 0.0) {
                return param("calibration multipliers must be nonnegative");
            }
        }
        Ok(())
    }

    /// `λ = sqrt(η_Y²) · sqrt(η_α² / (1 − η_α²))`.
    pub fn lambda(&self) -> f64 {
        self.eta_y_sq.sqrt() * (self.eta_alpha_sq / (1.0 - self.eta_alpha_sq)).sqrt()
    }
}

/// Identifiable scale components and their centered plug-in signals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scales {
    pub sigma_sq: f64,
    pub nu_sq: f64,
    pub s_hat: f64,
    #[serde(skip)]
    pub phi_sigma: Vec<f64>,
    #[serde(skip)]
    pub phi_nu: Vec<f64>,
}

impl Scales {
    /// From outcomes, fitted long regression and the fitted RR `r̂_δ` (whose
    /// value at δ = 0 is identically one).
    pub fn from_parts(y: ArrayView1<f64>, mu: ArrayView1<f64>, r: ArrayView1<f64>) -> Result<Self> {
        let n = y.len();
        if n == 0 || mu.len() != n || r.len() != n {
            return param("scale inputs must be nonempty and of equal length");
        }
        let e2: Vec<f64> = y.iter().zip(mu.iter()).map(|(a, b)| (a - b) * (a - b)).collect();
        let a2: Vec<f64> = r.iter().map(|v| (v - 1.0) * (v - 1.0)).collect();
        let sigma_sq = e2.iter().sum::<f64>() / n as f64;
        let nu_sq = a2.iter().sum::<f64>() / n as f64;
        if !sigma_sq.is_finite() || !nu_sq.is_finite() {
            return Err(Error::Numeric("non-finite sensitivity scales".into()));
        }
        Ok(Self {
            sigma_sq,
            nu_sq,
            s_hat: (sigma_sq * nu_sq).sqrt(),
            phi_sigma: e2.iter().map(|v| v - sigma_sq).collect(),
            phi_nu: a2.iter().map(|v| v - nu_sq).collect(),
        })
    }

    /// Delta-method influence values of Ŝ; zero when Ŝ = 0.
    pub fn phi_s(&self) -> Vec<f64> {
        if self.s_hat <= 0.0 {
            return vec![0.0; self.phi_sigma.len()];
        }
        self.phi_sigma
            .iter()
            .zip(&self.phi_nu)
            .map(|(ps, pn)| (self.nu_sq * ps + self.sigma_sq * pn) / (2.0 * self.s_hat))
            .collect()
    }
}

/// Scales at δ along `path` from the bundle's cross-fitted nuisances.
pub fn scales(d: &Dataset, bundle: &NuisanceBundle, delta: &[f64], path: Path) -> Result<Scales> {
    let direct = if path.needs_direct() { Some(bundle.fit_direct(d, delta, path == Path::FullyDirect)?) } else { None };
    let v = bundle.values(d, delta, path, direct.as_ref())?;
    Scales::from_parts(d.y.view(), bundle.outcome_predictions(), v.r.view())
}

/// `B̂ = Ŝ · λ`.
pub fn bias_bound(s_hat: f64, params: &SensitivityParams) -> f64 {
    if params.eta_y_sq == 0.0 || params.eta_alpha_sq == 0.0 {
        return 0.0;
    }
    s_hat * params.lambda()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub theta_hat: f64,
    pub s_hat: f64,
    pub b_hat: f64,
    pub theta_lo: f64,
    pub theta_hi: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub se_minus: f64,
    pub se_plus: f64,
    pub params: SensitivityParams,
    /// Ŝ = 0 with λ > 0: the interval falls back to the EIF-only bounds.
    pub degenerate: bool,
}

fn endpoint_se(phi_theta: &[f64], phi_s: &[f64], lambda: f64) -> f64 {
    let n = phi_theta.len() as f64;
    (phi_theta.iter().zip(phi_s).map(|(a, b)| (a + lambda * b).powi(2)).sum::<f64>()).sqrt() / n
}

/// Sensitivity-adjusted interval
/// `[θ̂ − B̂ − z·se₋, θ̂ + B̂ + z·se₊]` with `z` the one-sided 95% quantile.
pub fn endpoint_bounds(theta: &Estimate, scales: &Scales, params: &SensitivityParams) -> Result<SensitivityReport> {
    params.validate()?;
    if theta.influence.len() != scales.phi_sigma.len() {
        return param("influence values and scale signals differ in length");
    }
    let lambda = params.lambda();
    let degenerate = scales.s_hat <= 0.0 && lambda > 0.0;
    let phi_s = scales.phi_s();
    let se_minus = endpoint_se(&theta.influence, &phi_s, -lambda);
    let se_plus = endpoint_se(&theta.influence, &phi_s, lambda);
    let b_hat = bias_bound(scales.s_hat, params);
    let t = theta.value;
    Ok(SensitivityReport {
        theta_hat: t,
        s_hat: scales.s_hat,
        b_hat,
        theta_lo: t - b_hat,
        theta_hi: t + b_hat,
        ci_lo: t - b_hat - Z_ONE_SIDED * se_minus,
        ci_hi: t + b_hat + Z_ONE_SIDED * se_plus,
        se_minus,
        se_plus,
        params: *params,
        degenerate,
    })
}

/// Adjusted upper bound as a function of λ alone.
pub fn adjusted_upper(theta: &Estimate, scales: &Scales, lambda: f64) -> f64 {
    let phi_s = scales.phi_s();
    theta.value + lambda * scales.s_hat + Z_ONE_SIDED * endpoint_se(&theta.influence, &phi_s, lambda)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    pub eta_sq: f64,
    pub f_sq: f64,
    /// Constant target; both statistics are reported as zero.
    pub degenerate: bool,
}

impl Benchmark {
    fn from_residuals(full: f64, reduced: f64) -> Self {
        if !(reduced > 0.0) {
            return Self { eta_sq: 0.0, f_sq: 0.0, degenerate: true };
        }
        let gap = (reduced - full).max(0.0);
        let f_sq = if full > 0.0 { gap / full } else { f64::INFINITY };
        Self { eta_sq: gap / reduced, f_sq, degenerate: false }
    }
}

fn design(n: usize, blocks: &[(&ndarray::Array2<f64>, Option<usize>)]) -> DMatrix<f64> {
    let cols: usize = 1 + blocks.iter().map(|(b, skip)| b.ncols() - usize::from(skip.is_some())).sum::<usize>();
    let mut m = DMatrix::from_element(n, cols, 1.0);
    let mut c = 1;
    for (b, skip) in blocks {
        for j in 0..b.ncols() {
            if Some(j) == *skip {
                continue;
            }
            for i in 0..n {
                m[(i, c)] = b[(i, j)];
            }
            c += 1;
        }
    }
    m
}

fn check_covariate(d: &Dataset, j: usize) -> Result<()> {
    if j >= d.p() {
        return param(format!("covariate index {j} out of range (p = {})", d.p()));
    }
    Ok(())
}

/// Outcome-side benchmark from least-squares projections of Y on
/// `[1, W, X]` against `[1, W, X_{−j}]`.
pub fn benchmark_outcome(d: &Dataset, j: usize) -> Result<Benchmark> {
    check_covariate(d, j)?;
    let y = DVector::from_iterator(d.n(), d.y.iter().copied());
    let full = residual_mean_square(&design(d.n(), &[(&d.w, None), (&d.x, None)]), &y);
    let red = residual_mean_square(&design(d.n(), &[(&d.w, None), (&d.x, Some(j))]), &y);
    Ok(Benchmark::from_residuals(full, red))
}

/// RR-side benchmark: projections of a fitted RR on `[1, X]` against
/// `[1, X_{−j}]`.
pub fn benchmark_rr_values(d: &Dataset, r: ArrayView1<f64>, j: usize) -> Result<Benchmark> {
    check_covariate(d, j)?;
    if r.len() != d.n() {
        return param("RR values must have one entry per row");
    }
    let mean = r.mean().unwrap_or(0.0);
    let spread = r.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
    if spread <= 1e-12 * mean.abs().max(1.0) {
        return Ok(Benchmark { eta_sq: 0.0, f_sq: 0.0, degenerate: true });
    }
    let y = DVector::from_iterator(d.n(), r.iter().copied());
    let full = residual_mean_square(&design(d.n(), &[(&d.x, None)]), &y);
    let red = residual_mean_square(&design(d.n(), &[(&d.x, Some(j))]), &y);
    Ok(Benchmark::from_residuals(full, red))
}

/// RR-side benchmark at δ along the MC-density path.
pub fn benchmark_rr(d: &Dataset, bundle: &NuisanceBundle, delta: &[f64], j: usize) -> Result<Benchmark> {
    if delta.iter().all(|v| *v == 0.0) {
        check_covariate(d, j)?;
        return Ok(Benchmark { eta_sq: 0.0, f_sq: 0.0, degenerate: true });
    }
    let v = bundle.values(d, delta, Path::McDensity, None)?;
    benchmark_rr_values(d, v.r.view(), j)
}

/// `η² = k f² / (1 + k f²)`.
pub fn calibrate(f_sq: f64, k: f64) -> Result<f64> {
    if !(f_sq >= 0.0) || !(k >= 0.0) {
        return param("f^2 and k must be nonnegative");
    }
    let kf = k * f_sq;
    if kf.is_infinite() {
        return Ok(1.0);
    }
    Ok(kf / (1.0 + kf))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contour {
    /// `(η_Y², η_α²)` pairs on which the adjusted upper bound is zero.
    pub points: Vec<(f64, f64)>,
    /// λ at which the adjusted upper bound crosses zero.
    pub lambda_root: Option<f64>,
    /// Why the contour is empty.
    pub flag: Option<String>,
}

/// Combinations of `(η_Y², η_α²)` that move the adjusted upper bound to zero,
/// for `η_Y² = k/grid`, `k = 1..=grid`.
pub fn robustness_contour(theta: &Estimate, scales: &Scales, grid: usize) -> Result<Contour> {
    if grid < 1 {
        return param("contour grid needs at least one point");
    }
    let empty = |flag: &str| Contour { points: Vec::new(), lambda_root: None, flag: Some(flag.into()) };
    if theta.value >= 0.0 {
        return Ok(empty("nonnegative_estimate"));
    }
    let u = |l: f64| adjusted_upper(theta, scales, l);
    if u(0.0) >= 0.0 {
        return Ok(empty("not_significant"));
    }
    let tol = 1e-6 * theta.value.abs();
    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut bracketed = false;
    for _ in 0..200 {
        if u(hi) >= 0.0 {
            bracketed = true;
            break;
        }
        lo = hi;
        hi *= 2.0;
    }
    if !bracketed {
        return Ok(empty("no_root"));
    }
    let mut root = hi;
    for _ in 0..500 {
        let mid = 0.5 * (lo + hi);
        let v = u(mid);
        root = mid;
        if v.abs() <= tol {
            break;
        }
        if v < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let points = (1..=grid)
        .map(|k| {
            let ey = k as f64 / grid as f64;
            let t = root * root / ey;
            (ey, t / (1.0 + t))
        })
        .collect();
    Ok(Contour { points, lambda_root: Some(root), flag: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;

    fn est(value: f64, influence: Vec<f64>) -> Estimate {
        let n = influence.len() as f64;
        let se = (influence.iter().map(|v| v * v).sum::<f64>()).sqrt() / n;
        Estimate { value, se: Some(se), ci_95: Some([value - 1.96 * se, value + 1.96 * se]), influence }
    }

    #[test]
    fn bias_bound_values() {
        let p = SensitivityParams::new(0.25, 0.5).unwrap();
        assert!((bias_bound(2.0, &p) - 1.0).abs() < 1e-15);
        assert_eq!(bias_bound(2.0, &SensitivityParams::new(0.0, 0.5).unwrap()), 0.0);
        let near = SensitivityParams::new(1.0, 1.0 - 1e-15).unwrap();
        assert!(bias_bound(1.0, &near) > 1e6);
        assert!(SensitivityParams::new(0.5, 1.0).is_err());
    }

    #[test]
    fn calibrate_values() {
        assert_eq!(calibrate(0.3, 0.0).unwrap(), 0.0);
        assert!((calibrate(0.0686, 1.0).unwrap() - 0.0642).abs() < 5e-5);
        assert!(calibrate(0.3, 1e12).unwrap() > 0.999_999);
    }

    #[test]
    fn zero_tilt_has_zero_scale() {
        let y = Array1::from(vec![1.0, 2.0, 0.5]);
        let mu = Array1::from(vec![0.8, 2.1, 0.7]);
        let s = Scales::from_parts(y.view(), mu.view(), Array1::ones(3).view()).unwrap();
        assert_eq!(s.nu_sq, 0.0);
        assert_eq!(s.s_hat, 0.0);
        let t = est(0.1, vec![0.3, -0.1, -0.2]);
        let r = endpoint_bounds(&t, &s, &SensitivityParams::new(0.2, 0.2).unwrap()).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.b_hat, 0.0);
    }

    #[test]
    fn zero_params_collapse_to_eif_interval() {
        let y = Array1::from(vec![1.0, 2.0, 0.5, 1.5]);
        let mu = Array1::from(vec![0.8, 2.1, 0.7, 1.0]);
        let r = Array1::from(vec![1.2, 0.9, 0.8, 1.1]);
        let s = Scales::from_parts(y.view(), mu.view(), r.view()).unwrap();
        let t = est(-0.4, vec![0.3, -0.1, -0.2, 0.0]);
        let rep = endpoint_bounds(&t, &s, &SensitivityParams::new(0.0, 0.0).unwrap()).unwrap();
        let se = t.se.unwrap();
        assert!((rep.ci_lo - (-0.4 - Z_ONE_SIDED * se)).abs() < 1e-15);
        assert!((rep.ci_hi - (-0.4 + Z_ONE_SIDED * se)).abs() < 1e-15);
    }

    #[test]
    fn contour_empty_for_nonnegative() {
        let s = Scales::from_parts(
            Array1::from(vec![1.0, 0.0]).view(),
            Array1::from(vec![0.5, 0.5]).view(),
            Array1::from(vec![1.5, 0.5]).view(),
        )
        .unwrap();
        let c = robustness_contour(&est(0.2, vec![0.1, -0.1]), &s, 25).unwrap();
        assert!(c.points.is_empty());
        assert_eq!(c.flag.as_deref(), Some("nonnegative_estimate"));
    }
}
