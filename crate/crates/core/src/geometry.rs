//! Gaussian closed forms and the Gelbrich constraint defining fair shifts.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{param, Error, Result};
use crate::linalg::{psd_sqrt, sym_eigen_desc, symmetrize};
use crate::nuisance::ConditionalExposureModel;

/// Mean vector and covariance matrix of a q-dimensional law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentPair {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl MomentPair {
    /// Validates symmetry (1e-10) and clips roundoff-negative eigenvalues to zero.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let q = mean.len();
        if cov.nrows() != q || cov.ncols() != q {
            return param("mean and covariance dimensions differ");
        }
        let scale = cov.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
        if (&cov - cov.transpose()).amax() > 1e-10 * scale {
            return Err(Error::Numeric("covariance is not symmetric".into()));
        }
        let (vals, vecs) = sym_eigen_desc(&cov);
        if vals.iter().any(|&v| v < -1e-10 * scale) {
            return Err(Error::Numeric("covariance is not positive semidefinite".into()));
        }
        let clipped = vals.map(|v| v.max(0.0));
        let cov = &vecs * DMatrix::from_diagonal(&clipped) * vecs.transpose();
        Ok(Self { mean, cov: symmetrize(&cov) })
    }

    pub fn q(&self) -> usize {
        self.mean.len()
    }
}

/// Squared Gelbrich distance
/// `‖μ₁−μ₂‖² + tr(Σ₁ + Σ₂ − 2(Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2})`.
pub fn gelbrich_sq(a: &MomentPair, b: &MomentPair) -> Result<f64> {
    if a.q() != b.q() {
        return param("moment pairs have different dimensions");
    }
    let mean_part = (&a.mean - &b.mean).norm_squared();
    let ra = psd_sqrt(&a.cov)?;
    let cross = psd_sqrt(&symmetrize(&(&ra * &b.cov * &ra)))?;
    let trace = a.cov.trace() + b.cov.trace() - 2.0 * cross.trace();
    Ok((mean_part + trace).max(0.0))
}

fn check_dims(sigma: &DMatrix<f64>, delta: &[f64]) -> Result<()> {
    if sigma.nrows() != delta.len() || sigma.ncols() != delta.len() {
        return param(format!(
            "dimension mismatch: covariance {}x{}, delta {}",
            sigma.nrows(),
            sigma.ncols(),
            delta.len()
        ));
    }
    Ok(())
}

/// Tilting `N(μ, Σ)` by `exp(δᵀw)` gives `N(μ + Σδ, Σ)`.
pub fn tilted_normal_moments(mu: &[f64], sigma: &DMatrix<f64>, delta: &[f64]) -> Result<MomentPair> {
    check_dims(sigma, delta)?;
    if mu.len() != delta.len() {
        return param("mean and delta dimensions differ");
    }
    let d = DVector::from_column_slice(delta);
    let mean = DVector::from_column_slice(mu) + sigma * d;
    Ok(MomentPair { mean, cov: sigma.clone() })
}

/// Variance of the Gaussian density ratio `g_δ/f`: `exp(δᵀΣδ) − 1`.
pub fn ratio_variance_normal(sigma: &DMatrix<f64>, delta: &[f64]) -> Result<f64> {
    check_dims(sigma, delta)?;
    let d = DVector::from_column_slice(delta);
    Ok(d.dot(&(sigma * &d)).exp_m1())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficientDirection {
    pub delta: Vec<f64>,
    /// The top eigenvalue is repeated; the returned direction is the canonical
    /// projection of the first coordinate axes onto the top eigenspace.
    pub tie: bool,
}

/// Top-eigenvector direction scaled so that `δᵀΣ²δ = c²`, with its first
/// nonzero coordinate positive.
pub fn efficient_direction(sigma: &DMatrix<f64>, c: f64) -> Result<EfficientDirection> {
    if !(c > 0.0) {
        return param("Gelbrich radius c must be positive");
    }
    let q = sigma.nrows();
    let (vals, vecs) = sym_eigen_desc(sigma);
    let top = vals[0];
    if !(top > 0.0) {
        return Err(Error::Numeric("covariance has no positive eigenvalue".into()));
    }
    let mult = vals.iter().take_while(|&&v| (top - v).abs() <= 1e-8 * top).count();
    let tie = mult > 1;
    let mut v: DVector<f64> = vecs.column(0).into_owned();
    if tie {
        log::warn!("top eigenvalue has multiplicity {mult}; using canonical direction");
        let basis = vecs.columns(0, mult);
        for j in 0..q {
            let e = DVector::from_fn(q, |i, _| if i == j { 1.0 } else { 0.0 });
            let proj = &basis * (basis.transpose() * &e);
            if proj.norm() > 1e-8 {
                v = proj.normalize();
                break;
            }
        }
    }
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
        if *first < 0.0 {
            v = -v;
        }
    }
    let s = c / top;
    Ok(EfficientDirection { delta: v.iter().map(|x| x * s).collect(), tie })
}

/// `c Σ⁻¹ e_j`: under normality the tilted mean moves by exactly `c e_j`.
pub fn single_exposure_direction(sigma: &DMatrix<f64>, j: usize, c: f64) -> Result<Vec<f64>> {
    let q = sigma.nrows();
    if j >= q {
        return param(format!("exposure index {j} out of range for q={q}"));
    }
    if !(c > 0.0) {
        return param("Gelbrich radius c must be positive");
    }
    let chol = sigma.clone().cholesky().ok_or_else(|| {
        Error::Numeric("covariance is singular; add ridge regularization to the exposure model".into())
    })?;
    let e = DVector::from_fn(q, |i, _| if i == j { 1.0 } else { 0.0 });
    Ok(chol.solve(&e).iter().map(|v| v * c).collect())
}

/// Settings for the Monte Carlo constraint `Ĝ(δ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSpec {
    pub c: f64,
    #[serde(default = "default_mc_draws")]
    pub mc_draws: usize,
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_mc_draws() -> usize {
    50_000
}

fn default_fd_step() -> f64 {
    1e-3
}

impl ConstraintSpec {
    pub fn new(c: f64, seed: u64) -> Self {
        Self { c, mc_draws: default_mc_draws(), fd_step: default_fd_step(), seed }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return param("Gelbrich radius c must be positive");
        }
        if self.mc_draws < 1000 {
            return param("mc_draws must be at least 1000");
        }
        if !(self.fd_step > 0.0) {
            return param("fd_step must be positive");
        }
        Ok(())
    }
}

/// `Ĝ(δ)`: squared Gelbrich distance between the model-implied marginal law of
/// W and its tilted counterpart.
///
/// Under the location-shift model the tilted residual law does not depend on
/// x, so one set of residual draws serves every covariate row. The marginal
/// moments follow from total expectation and total covariance:
/// `E_δ[W] = mean_i m̂(x_i) + E_δ[s]`, `Cov_δ[W] = Cov_i m̂(x_i) + Cov_δ[s]`.
/// The baseline uses the same draws at δ = 0, so `Ĝ(0) = 0` exactly.
#[derive(Debug, Clone)]
pub struct GelbrichConstraint {
    draws: Array2<f64>,
    mean_x: DVector<f64>,
    cov_x: DMatrix<f64>,
    baseline: MomentPair,
    pub fd_step: f64,
}

/// Self-normalized tilt weights `∝ exp(δᵀ s_k)` and their effective sample size.
pub fn tilt_weights(draws: ArrayView2<f64>, delta: &[f64]) -> Result<(Vec<f64>, f64)> {
    if draws.ncols() != delta.len() {
        return param(format!("delta has length {}, expected {}", delta.len(), draws.ncols()));
    }
    let logits: Vec<f64> = draws
        .rows()
        .into_iter()
        .map(|r| r.iter().zip(delta).map(|(a, b)| a * b).sum())
        .collect();
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return Err(Error::Overflow("tilt weights are not finite; use a smaller tilt".into()));
    }
    let mut w: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= sum);
    let ess = 1.0 / w.iter().map(|v| v * v).sum::<f64>();
    Ok((w, ess))
}

impl GelbrichConstraint {
    pub fn new(model: &ConditionalExposureModel, x: ArrayView2<f64>, spec: &ConstraintSpec) -> Result<Self> {
        spec.validate()?;
        let draws = model.residual_draws(spec.mc_draws, spec.seed);
        let means = model.means_for(x);
        Self::from_parts(draws, means.view(), spec.fd_step)
    }

    /// Builds the constraint from residual draws and the fitted conditional means `m̂(x_i)`.
    pub fn from_parts(draws: Array2<f64>, means: ArrayView2<f64>, fd_step: f64) -> Result<Self> {
        let (n, q) = means.dim();
        if draws.ncols() != q {
            return param("draws and means have different widths");
        }
        if n == 0 || draws.nrows() == 0 {
            return Err(Error::EmptyData);
        }
        let mean_x = DVector::from_fn(q, |j, _| means.column(j).sum() / n as f64);
        let mut cov_x = DMatrix::zeros(q, q);
        for row in means.rows() {
            for a in 0..q {
                for b in 0..=a {
                    cov_x[(a, b)] += (row[a] - mean_x[a]) * (row[b] - mean_x[b]);
                }
            }
        }
        for a in 0..q {
            for b in 0..=a {
                cov_x[(a, b)] /= n as f64;
                cov_x[(b, a)] = cov_x[(a, b)];
            }
        }
        let mut out = Self {
            draws,
            mean_x,
            cov_x,
            baseline: MomentPair { mean: DVector::zeros(q), cov: DMatrix::zeros(q, q) },
            fd_step,
        };
        out.baseline = out.tilted_moments(&vec![0.0; q])?;
        Ok(out)
    }

    pub fn q(&self) -> usize {
        self.draws.ncols()
    }

    pub fn draws(&self) -> ArrayView2<'_, f64> {
        self.draws.view()
    }

    pub fn baseline(&self) -> &MomentPair {
        &self.baseline
    }

    /// Weighted mean and covariance of the residual draws under the tilt.
    pub fn tilted_residual_moments(&self, delta: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>, f64)> {
        if delta.iter().any(|v| !v.is_finite()) {
            return param("delta must be finite");
        }
        let (w, ess) = tilt_weights(self.draws.view(), delta)?;
        if !(ess >= 2.0) {
            return Err(Error::Overflow(format!(
                "importance weights degenerate (effective sample size {ess:.2}); use a smaller tilt"
            )));
        }
        let q = self.q();
        let mut mean = DVector::zeros(q);
        for (row, wk) in self.draws.rows().into_iter().zip(&w) {
            for j in 0..q {
                mean[j] += wk * row[j];
            }
        }
        let mut cov = DMatrix::zeros(q, q);
        let mut dev = vec![0.0; q];
        for (row, wk) in self.draws.rows().into_iter().zip(&w) {
            for j in 0..q {
                dev[j] = row[j] - mean[j];
            }
            for a in 0..q {
                let da = wk * dev[a];
                for b in 0..=a {
                    cov[(a, b)] += da * dev[b];
                }
            }
        }
        for a in 0..q {
            for b in 0..a {
                cov[(b, a)] = cov[(a, b)];
            }
        }
        Ok((mean, cov, ess))
    }

    /// Marginal moments of W under the tilted law.
    pub fn tilted_moments(&self, delta: &[f64]) -> Result<MomentPair> {
        let (m, c, _) = self.tilted_residual_moments(delta)?;
        Ok(MomentPair { mean: &self.mean_x + m, cov: &self.cov_x + c })
    }

    /// Change in the marginal mean of W induced by the tilt.
    pub fn mean_shift(&self, delta: &[f64]) -> Result<DVector<f64>> {
        let m = self.tilted_moments(delta)?;
        Ok(m.mean - &self.baseline.mean)
    }

    /// Residual covariance implied by the draws (the δ = 0 tilted covariance).
    pub fn residual_covariance(&self) -> DMatrix<f64> {
        &self.baseline.cov - &self.cov_x
    }

    pub fn value(&self, delta: &[f64]) -> Result<f64> {
        let tilted = self.tilted_moments(delta)?;
        gelbrich_sq(&self.baseline, &tilted)
    }

    /// Centered finite differences of `Ĝ`; the draws are shared by every
    /// evaluation (common random numbers).
    pub fn grad(&self, delta: &[f64]) -> Result<Vec<f64>> {
        central_difference(|d| self.value(d), delta, self.fd_step)
    }
}

/// Centered finite-difference gradient of `f` at `x` with step `h`.
pub fn central_difference<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let mut buf = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        buf[j] = x[j] + h;
        let fp = f(&buf)?;
        buf[j] = x[j] - h;
        let fm = f(&buf)?;
        buf[j] = x[j];
        g.push((fp - fm) / (2.0 * h));
    }
    Ok(g)
}

/// `Ĝ(δ)` against the model-implied baseline over the covariate rows of `baseline`.
#[allow(non_snake_case)]
pub fn gelbrich_constraint_G(
    delta: &[f64],
    model: &ConditionalExposureModel,
    baseline: &Dataset,
    spec: &ConstraintSpec,
) -> Result<f64> {
    GelbrichConstraint::new(model, baseline.x.view(), spec)?.value(delta)
}

#[allow(non_snake_case)]
pub fn grad_G(
    delta: &[f64],
    model: &ConditionalExposureModel,
    baseline: &Dataset,
    spec: &ConstraintSpec,
) -> Result<Vec<f64>> {
    GelbrichConstraint::new(model, baseline.x.view(), spec)?.grad(delta)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupShift {
    pub delta: Vec<f64>,
    /// Largest absolute mean shift among exposures outside the group.
    pub off_group_shift: f64,
    pub iterations: usize,
}

/// Tilt that moves the marginal means of the `group` exposures by a common
/// amount, leaves the other means fixed, and sits on `Ĝ(δ) = c²`. Damped
/// Newton on the moment equations, started from the Gaussian solution
/// `t Σ⁻¹ 1_G`.
pub fn group_shift_direction(group: &[usize], constraint: &GelbrichConstraint, c: f64) -> Result<GroupShift> {
    let q = constraint.q();
    if group.is_empty() {
        return param("group must be nonempty");
    }
    if group.iter().any(|&j| j >= q) {
        return param(format!("group index out of range for q={q}"));
    }
    let mut sorted = group.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != group.len() {
        return param("group indices must be distinct");
    }
    if !(c > 0.0) {
        return param("Gelbrich radius c must be positive");
    }
    let in_group: Vec<bool> = (0..q).map(|j| sorted.contains(&j)).collect();
    let lead = sorted[0];

    let residual = |delta: &[f64]| -> Result<DVector<f64>> {
        let shift = constraint.mean_shift(delta)?;
        let g = constraint.value(delta)?;
        let mut f = DVector::zeros(q);
        let mut k = 0;
        for j in 0..q {
            if j == lead {
                continue;
            }
            f[k] = if in_group[j] { shift[j] - shift[lead] } else { shift[j] };
            k += 1;
        }
        f[q - 1] = (g - c * c) / (2.0 * c);
        Ok(f)
    };

    let sigma = constraint.residual_covariance();
    let ones = DVector::from_fn(q, |j, _| if in_group[j] { 1.0 } else { 0.0 });
    let start = sigma
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numeric("residual covariance is singular".into()))?
        .solve(&ones);
    let t = c / (sorted.len() as f64).sqrt();
    let mut delta: Vec<f64> = start.iter().map(|v| v * t).collect();
    let mut f = residual(&delta)?;
    let tol = 1e-11 * c.max(1e-3);
    let h = 1e-6;
    for iter in 0..50 {
        let norm = f.amax();
        if norm <= tol {
            return Ok(finish(delta, constraint, &in_group, iter)?);
        }
        let mut jac = DMatrix::zeros(q, q);
        let mut buf = delta.clone();
        for j in 0..q {
            buf[j] = delta[j] + h;
            let fp = residual(&buf)?;
            buf[j] = delta[j] - h;
            let fm = residual(&buf)?;
            buf[j] = delta[j];
            jac.set_column(j, &((fp - fm) / (2.0 * h)));
        }
        let step = jac
            .lu()
            .solve(&(-&f))
            .ok_or_else(|| Error::Numeric("singular Jacobian in group shift solve".into()))?;
        let mut lambda = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let cand: Vec<f64> = delta.iter().zip(step.iter()).map(|(d, s)| d + lambda * s).collect();
            if let Ok(fc) = residual(&cand) {
                if fc.amax() < norm {
                    delta = cand;
                    f = fc;
                    improved = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        if !improved {
            if norm <= 1e-8 * c {
                return Ok(finish(delta, constraint, &in_group, iter)?);
            }
            return Err(Error::Convergence(format!("group shift Newton stalled with residual {norm:.3e}")));
        }
    }
    let norm = f.amax();
    if norm <= 1e-8 * c {
        return finish(delta, constraint, &in_group, 50);
    }
    Err(Error::Convergence(format!(
        "group shift Newton did not converge in 50 iterations (residual {norm:.3e})"
    )))
}

fn finish(delta: Vec<f64>, constraint: &GelbrichConstraint, in_group: &[bool], iterations: usize) -> Result<GroupShift> {
    let shift = constraint.mean_shift(&delta)?;
    let off_group_shift = (0..shift.len())
        .filter(|&j| !in_group[j])
        .map(|j| shift[j].abs())
        .fold(0.0, f64::max);
    Ok(GroupShift { delta, off_group_shift, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nuisance::exposure::standard_scores;

    fn pair(mean: &[f64], cov: &[f64]) -> MomentPair {
        let q = mean.len();
        MomentPair::new(DVector::from_column_slice(mean), DMatrix::from_row_slice(q, q, cov)).unwrap()
    }

    #[test]
    fn gelbrich_identities() {
        let a = pair(&[1.0, 2.0], &[2.0, 0.3, 0.3, 1.0]);
        assert!(gelbrich_sq(&a, &a).unwrap().abs() < 1e-10);
        let b = pair(&[0.0, 0.0], &[2.0, 0.3, 0.3, 1.0]);
        assert!((gelbrich_sq(&a, &b).unwrap() - 5.0).abs() < 1e-10);
        let s1 = pair(&[0.0], &[4.0]);
        let s2 = pair(&[0.0], &[1.0]);
        assert!((gelbrich_sq(&s1, &s2).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gelbrich_rejects_indefinite() {
        let bad = MomentPair { mean: DVector::zeros(2), cov: DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]) };
        let ok = pair(&[0.0, 0.0], &[1.0, 0.0, 0.0, 1.0]);
        assert!(matches!(gelbrich_sq(&bad, &ok), Err(Error::Numeric(_))));
    }

    #[test]
    fn efficient_direction_hand_values() {
        let s = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0]));
        let e = efficient_direction(&s, 1.0).unwrap();
        assert!((e.delta[0] - 0.25).abs() < 1e-12 && e.delta[1].abs() < 1e-12);
        assert!(!e.tie);
        let e2 = efficient_direction(&s, 2.0).unwrap();
        assert!((e2.delta[0] - 0.5).abs() < 1e-12);
        let id = efficient_direction(&DMatrix::identity(3, 3), 1.0).unwrap();
        assert!(id.tie);
        assert!((id.delta[0] - 1.0).abs() < 1e-12 && id.delta[1].abs() < 1e-12);
    }

    #[test]
    fn single_exposure_two_by_two() {
        let rho = 0.4;
        let s = DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]);
        let d = single_exposure_direction(&s, 0, 0.3).unwrap();
        assert!((d[0] - 0.3 / (1.0 - rho * rho)).abs() < 1e-12);
        assert!((d[1] + 0.3 * rho / (1.0 - rho * rho)).abs() < 1e-12);
        let m = tilted_normal_moments(&[0.0, 0.0], &s, &d).unwrap();
        assert!((m.mean[0] - 0.3).abs() < 1e-12 && m.mean[1].abs() < 1e-12);
        let sing = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(single_exposure_direction(&sing, 0, 1.0).is_err());
    }

    fn gaussian_constraint(sigma: &DMatrix<f64>, m: usize) -> GelbrichConstraint {
        let q = sigma.nrows();
        let z = standard_scores(q, m, 11);
        let l = sigma.clone().cholesky().unwrap().l();
        let draws = Array2::from_shape_fn((m, q), |(i, j)| (0..=j).map(|k| l[(j, k)] * z[(i, k)]).sum());
        let means = Array2::from_shape_fn((50, q), |(i, j)| ((i + j) % 7) as f64 * 0.1);
        GelbrichConstraint::from_parts(draws, means.view(), 1e-3).unwrap()
    }

    #[test]
    fn constraint_is_zero_without_tilt() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 2.0]);
        let g = gaussian_constraint(&s, 4000);
        assert!(g.value(&[0.0, 0.0]).unwrap().abs() < 1e-12);
        assert!(g.grad(&[0.0, 0.0]).unwrap().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn extreme_tilt_overflows() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let g = gaussian_constraint(&s, 2000);
        assert!(matches!(g.value(&[500.0, 0.0]), Err(Error::Overflow(_))));
    }

    #[test]
    fn group_shift_single_member_matches_closed_form() {
        let s = DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.25, 0.5, 1.0, 0.5, 0.25, 0.5, 1.0]);
        let g = gaussian_constraint(&s, 50_000);
        let c = 0.1;
        let sol = group_shift_direction(&[1], &g, c).unwrap();
        let closed = single_exposure_direction(&g.residual_covariance(), 1, c).unwrap();
        for (a, b) in sol.delta.iter().zip(&closed) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
        assert!(sol.off_group_shift < 1e-3 * c);
        assert!((g.value(&sol.delta).unwrap() - c * c).abs() < 1e-10);
    }
}
