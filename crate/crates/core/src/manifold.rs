//! Riemannian BFGS on the level set `M_c = {δ : G(δ) = c²}`.
//!
//! Tangent projection `P = I − n nᵀ`, a projection retraction made of Newton
//! corrections along `∇G`, projection vector transport, a weak Wolfe line
//! search along the retraction curve, and a cautious inverse-Hessian update.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{param, Error, Result};
use crate::estimator::NuisanceBundle;
use crate::geometry::{central_difference, GelbrichConstraint};
use crate::linalg::{dot, norm};
use crate::rng::{self, streams, sub_seed};

/// A differentiable scalar function of δ.
pub trait Smooth: Sync {
    fn value(&self, x: &[f64]) -> Result<f64>;
    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>>;
}

/// Wraps a closure; the gradient is a centered finite difference with `step`.
pub struct FiniteDiff<F> {
    pub f: F,
    pub step: f64,
}

impl<F> Smooth for FiniteDiff<F>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    fn value(&self, x: &[f64]) -> Result<f64> {
        (self.f)(x)
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        central_difference(&self.f, x, self.step)
    }
}

/// Closure pair with an analytic gradient.
pub struct Analytic<F, G> {
    pub f: F,
    pub grad: G,
}

impl<F, G> Smooth for Analytic<F, G>
where
    F: Fn(&[f64]) -> f64 + Sync,
    G: Fn(&[f64]) -> Vec<f64> + Sync,
{
    fn value(&self, x: &[f64]) -> Result<f64> {
        Ok((self.f)(x))
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok((self.grad)(x))
    }
}

impl Smooth for GelbrichConstraint {
    fn value(&self, x: &[f64]) -> Result<f64> {
        GelbrichConstraint::value(self, x)
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.grad(x)
    }
}

/// One-step ψ̂(δ) with frozen cross-fitted nuisances (MC-density path) and a
/// finite-difference gradient. The shared draws make this a deterministic,
/// smooth surface in δ.
pub struct PsiObjective<'a> {
    pub data: &'a Dataset,
    pub bundle: &'a NuisanceBundle,
    pub fd_step: f64,
}

impl Smooth for PsiObjective<'_> {
    fn value(&self, x: &[f64]) -> Result<f64> {
        self.bundle.psi_hat(self.data, x)
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        central_difference(|d| self.bundle.psi_hat(self.data, d), x, self.fd_step)
    }
}

/// `v − (nᵀv) n`.
pub fn project_tangent(v: &[f64], n: &[f64]) -> Vec<f64> {
    let s = dot(n, v);
    v.iter().zip(n).map(|(a, b)| a - s * b).collect()
}

/// Projection vector transport onto the tangent space at the new point. It is
/// a contraction and in general not an isometry.
pub fn transport(v: &[f64], n_new: &[f64]) -> Vec<f64> {
    project_tangent(v, n_new)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifoldPoint {
    pub delta: Vec<f64>,
    pub g_value: f64,
    /// `∇G / ‖∇G‖` at `delta`.
    pub normal: Vec<f64>,
}

fn point_at(constraint: &dyn Smooth, delta: Vec<f64>, g_value: f64) -> Result<ManifoldPoint> {
    let grad = constraint.gradient(&delta)?;
    let gn = norm(&grad);
    if !(gn > 0.0 && gn.is_finite()) {
        return Err(Error::Retraction("constraint gradient vanishes; normal undefined".into()));
    }
    Ok(ManifoldPoint { normal: grad.iter().map(|v| v / gn).collect(), delta, g_value })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbfgsOptions {
    /// Absolute feasibility tolerance on `|G − c²|`; defaults to `1e-6 c²`.
    #[serde(default)]
    pub feas_tol: Option<f64>,
    #[serde(default = "defaults::grad_tol")]
    pub grad_tol: f64,
    #[serde(default = "defaults::max_iter")]
    pub max_iter: usize,
    #[serde(default = "defaults::c1")]
    pub c1: f64,
    #[serde(default = "defaults::c2")]
    pub c2: f64,
    #[serde(default = "defaults::doublings")]
    pub max_doublings: usize,
    #[serde(default = "defaults::corrections")]
    pub max_corrections: usize,
    #[serde(default = "defaults::ls_steps")]
    pub max_line_search: usize,
}

mod defaults {
    pub fn grad_tol() -> f64 {
        1e-5
    }
    pub fn max_iter() -> usize {
        200
    }
    pub fn c1() -> f64 {
        1e-4
    }
    pub fn c2() -> f64 {
        0.9
    }
    pub fn doublings() -> usize {
        10
    }
    pub fn corrections() -> usize {
        10
    }
    pub fn ls_steps() -> usize {
        60
    }
}

impl Default for RbfgsOptions {
    fn default() -> Self {
        Self {
            feas_tol: None,
            grad_tol: defaults::grad_tol(),
            max_iter: defaults::max_iter(),
            c1: defaults::c1(),
            c2: defaults::c2(),
            max_doublings: defaults::doublings(),
            max_corrections: defaults::corrections(),
            max_line_search: defaults::ls_steps(),
        }
    }
}

impl RbfgsOptions {
    pub fn feas_tol(&self, c: f64) -> f64 {
        self.feas_tol.unwrap_or(1e-6 * c * c)
    }
}

/// Newton corrections `y ← y − (G(y) − c²)/‖∇G(y)‖² ∇G(y)` from `δ + ξ` until
/// `|G − c²| ≤ feas_tol`.
pub fn retract(
    point: &ManifoldPoint,
    xi: &[f64],
    constraint: &dyn Smooth,
    c: f64,
    feas_tol: f64,
    max_corrections: usize,
) -> Result<ManifoldPoint> {
    let target = c * c;
    let mut y: Vec<f64> = point.delta.iter().zip(xi).map(|(a, b)| a + b).collect();
    let mut gv = constraint.value(&y).map_err(|e| Error::Retraction(e.to_string()))?;
    let mut gap = (gv - target).abs();
    for _ in 0..max_corrections {
        if gap <= feas_tol {
            break;
        }
        let grad = constraint.gradient(&y).map_err(|e| Error::Retraction(e.to_string()))?;
        let g2 = dot(&grad, &grad);
        if !(g2 > 0.0 && g2.is_finite()) {
            return Err(Error::Retraction("constraint gradient vanishes".into()));
        }
        let s = (gv - target) / g2;
        y.iter_mut().zip(&grad).for_each(|(v, g)| *v -= s * g);
        gv = constraint.value(&y).map_err(|e| Error::Retraction(e.to_string()))?;
        let new_gap = (gv - target).abs();
        if !(new_gap < gap) && new_gap > feas_tol {
            return Err(Error::Retraction(format!("normal corrections diverge (gap {new_gap:.3e})")));
        }
        gap = new_gap;
    }
    if !(gap <= feas_tol) {
        return Err(Error::Retraction(format!("infeasible after {max_corrections} corrections (gap {gap:.3e})")));
    }
    point_at(constraint, y, gv)
}

/// Scales `direction` by `t > 0` so that `|G(t·direction) − c²| ≤ feas_tol`.
/// The bracket `(0, t_max]` starts at 1 and doubles up to 20 times.
pub fn init_on_manifold(direction: &[f64], constraint: &dyn Smooth, c: f64, feas_tol: f64) -> Result<Vec<f64>> {
    if norm(direction) == 0.0 || direction.iter().any(|v| !v.is_finite()) {
        return param("initial direction must be finite and nonzero");
    }
    let target = c * c;
    let eval = |t: f64| -> Option<f64> {
        let x: Vec<f64> = direction.iter().map(|v| v * t).collect();
        constraint.value(&x).ok().filter(|v| v.is_finite()).map(|v| v - target)
    };
    let mut lo = 0.0;
    let mut hi = 1.0;
    let mut found = false;
    for _ in 0..=20 {
        match eval(hi) {
            Some(g) if g.abs() <= feas_tol => return Ok(direction.iter().map(|v| v * hi).collect()),
            Some(g) if g < 0.0 => {
                lo = hi;
                hi *= 2.0;
            }
            // past the level set, or too far to evaluate
            _ => {
                found = true;
                break;
            }
        }
    }
    if !found {
        return Err(Error::Initialization("constraint radius unreachable along direction".into()));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        match eval(mid) {
            Some(g) if g.abs() <= feas_tol => return Ok(direction.iter().map(|v| v * mid).collect()),
            Some(g) if g < 0.0 => lo = mid,
            _ => hi = mid,
        }
    }
    Err(Error::Initialization("bisection did not reach the constraint tolerance".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iter: usize,
    pub objective: f64,
    pub grad_norm: f64,
    pub step: f64,
    pub feasibility: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbfgsResult {
    pub delta: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
    pub trace: Vec<TraceEntry>,
    /// Why the iteration stopped.
    pub stop: String,
}

impl RbfgsResult {
    /// Trace as JSON lines.
    pub fn trace_jsonl(&self) -> String {
        self.trace
            .iter()
            .map(|t| serde_json::to_string(t).expect("trace serializes") + "\n")
            .collect()
    }
}

/// Snapshot of the optimizer state exposed for testing.
#[derive(Debug, Clone)]
pub struct RbfgsState {
    pub point: ManifoldPoint,
    pub inv_hessian: DMatrix<f64>,
    pub riem_grad: Vec<f64>,
    pub iter: usize,
    /// `(‖grad‖, objective)` per accepted iterate.
    pub history: Vec<(f64, f64)>,
    /// `(a_k, b_k)` of the last BFGS update, `None` when it was skipped.
    pub secant_pair: Option<(Vec<f64>, Vec<f64>)>,
}

struct Eval {
    point: ManifoldPoint,
    value: f64,
    rgrad: Vec<f64>,
}

fn evaluate(objective: &dyn Smooth, point: ManifoldPoint, iter: usize) -> Result<Eval> {
    let wrap = |e: Error| Error::Objective { iter, source: Box::new(e) };
    let value = objective.value(&point.delta).map_err(wrap)?;
    let grad = objective.gradient(&point.delta).map_err(wrap)?;
    if !value.is_finite() || grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::Objective { iter, source: Box::new(Error::Numeric("non-finite objective".into())) });
    }
    let rgrad = project_tangent(&grad, &point.normal);
    Ok(Eval { point, value, rgrad })
}

fn history(trace: &[TraceEntry]) -> Vec<(f64, f64)> {
    trace.iter().map(|t| (t.grad_norm, t.objective)).collect()
}

fn proj_matrix(n: &[f64]) -> DMatrix<f64> {
    let v = DVector::from_column_slice(n);
    DMatrix::identity(n.len(), n.len()) - &v * v.transpose()
}

/// Minimizes `objective` over `M_c` from a feasible `start`.
pub fn rbfgs(objective: &dyn Smooth, constraint: &dyn Smooth, c: f64, start: &[f64], opts: &RbfgsOptions) -> Result<RbfgsResult> {
    rbfgs_observed(objective, constraint, c, start, opts, |_| {})
}

/// [`rbfgs`] with a callback receiving the state after every accepted iterate.
pub fn rbfgs_observed(
    objective: &dyn Smooth,
    constraint: &dyn Smooth,
    c: f64,
    start: &[f64],
    opts: &RbfgsOptions,
    mut observe: impl FnMut(&RbfgsState),
) -> Result<RbfgsResult> {
    if !(c > 0.0) {
        return param("Gelbrich radius c must be positive");
    }
    let q = start.len();
    let feas_tol = opts.feas_tol(c);
    let g0 = constraint.value(start)?;
    if !((g0 - c * c).abs() <= feas_tol) {
        return Err(Error::Initialization(format!(
            "start is not feasible: |G − c²| = {:.3e} > {feas_tol:.3e}",
            (g0 - c * c).abs()
        )));
    }
    let mut cur = evaluate(objective, point_at(constraint, start.to_vec(), g0)?, 0)?;
    let mut b = DMatrix::<f64>::identity(q, q);
    let mut trace = vec![TraceEntry {
        iter: 0,
        objective: cur.value,
        grad_norm: norm(&cur.rgrad),
        step: 0.0,
        feasibility: (g0 - c * c).abs(),
    }];
    observe(&RbfgsState {
        point: cur.point.clone(),
        inv_hessian: b.clone(),
        riem_grad: cur.rgrad.clone(),
        iter: 0,
        history: history(&trace),
        secant_pair: None,
    });
    let mut stop = String::from("max_iter");
    let mut converged = false;
    let mut iter = 0;
    while iter < opts.max_iter {
        let gnorm = norm(&cur.rgrad);
        if gnorm <= opts.grad_tol {
            converged = true;
            stop = "grad_tol".into();
            break;
        }
        let g = DVector::from_column_slice(&cur.rgrad);
        let pm = proj_matrix(&cur.point.normal);
        let mut p = -(&pm * &b * &g);
        let mut slope = g.dot(&p);
        if !(slope < 0.0) {
            b = DMatrix::identity(q, q);
            p = -(&pm * &g);
            slope = g.dot(&p);
        }
        let p_vec: Vec<f64> = p.iter().copied().collect();

        // weak Wolfe bracketing along the retraction curve
        let mut lo = 0.0_f64;
        let mut hi = f64::INFINITY;
        let mut alpha = 1.0;
        let mut doublings = 0;
        let mut accepted: Option<(f64, Eval)> = None;
        let mut armijo_only: Option<(f64, Eval)> = None;
        for _ in 0..opts.max_line_search {
            let xi: Vec<f64> = p_vec.iter().map(|v| v * alpha).collect();
            match retract(&cur.point, &xi, constraint, c, feas_tol, opts.max_corrections) {
                Err(Error::Retraction(_)) => hi = alpha,
                Err(e) => return Err(e),
                Ok(pt) => {
                    let trial = evaluate(objective, pt, iter + 1)?;
                    if trial.value > cur.value + opts.c1 * alpha * slope {
                        hi = alpha;
                    } else {
                        let moved = transport(&p_vec, &trial.point.normal);
                        if dot(&trial.rgrad, &moved) < opts.c2 * slope {
                            lo = alpha;
                            armijo_only = Some((alpha, trial));
                        } else {
                            accepted = Some((alpha, trial));
                            break;
                        }
                    }
                }
            }
            if hi.is_finite() {
                alpha = 0.5 * (lo + hi);
            } else if doublings < opts.max_doublings {
                alpha *= 2.0;
                doublings += 1;
            } else {
                break;
            }
        }
        let Some((alpha, next)) = accepted.or(armijo_only) else {
            stop = "line_search".into();
            break;
        };
        iter += 1;

        let n_new = next.point.normal.clone();
        let pn = proj_matrix(&n_new);
        let a = &pn * (&p * alpha);
        let g_old_t = &pn * &g;
        let bvec = DVector::from_column_slice(&next.rgrad) - g_old_t;
        let bt = &pn * &b * &pn;
        let ba = bvec.dot(&a);
        let mut secant_pair = None;
        b = if ba > 1e-10 * a.norm_squared() {
            secant_pair = Some((a.iter().copied().collect(), bvec.iter().copied().collect()));
            let rho = 1.0 / ba;
            let id = DMatrix::<f64>::identity(q, q);
            let left = &id - &a * bvec.transpose() * rho;
            let right = &id - &bvec * a.transpose() * rho;
            let upd = &left * &bt * &right + &a * a.transpose() * rho;
            (&upd + upd.transpose()) * 0.5
        } else {
            bt
        };
        cur = next;
        trace.push(TraceEntry {
            iter,
            objective: cur.value,
            grad_norm: norm(&cur.rgrad),
            step: alpha,
            feasibility: (cur.point.g_value - c * c).abs(),
        });
        observe(&RbfgsState {
            point: cur.point.clone(),
            inv_hessian: b.clone(),
            riem_grad: cur.rgrad.clone(),
            iter,
            history: history(&trace),
            secant_pair,
        });
    }
    if !converged && norm(&cur.rgrad) <= opts.grad_tol {
        converged = true;
        stop = "grad_tol".into();
    }
    Ok(RbfgsResult {
        grad_norm: norm(&cur.rgrad),
        delta: cur.point.delta,
        value: cur.value,
        iterations: iter,
        converged,
        trace,
        stop,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartOutcome {
    pub index: usize,
    pub direction: Vec<f64>,
    pub result: Option<RbfgsResult>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultistartResult {
    pub best_index: usize,
    pub best: RbfgsResult,
    pub runs: Vec<StartOutcome>,
}

/// Uniformly random unit direction for start `index`.
pub fn start_direction(q: usize, seed: u64, index: usize) -> Vec<f64> {
    let mut r = rng::rng(sub_seed(sub_seed(seed, streams::MULTISTART), index as u64));
    loop {
        let v: Vec<f64> = (0..q).map(|_| StandardNormal.sample(&mut r)).collect();
        let nv = norm(&v);
        if nv > 1e-12 {
            return v.iter().map(|x| x / nv).collect();
        }
    }
}

/// Independent RBFGS runs from random feasible starts. The winner has the
/// smallest objective; values within 1e-8 go to the lowest start index.
pub fn multistart(
    objective: &dyn Smooth,
    constraint: &dyn Smooth,
    c: f64,
    q: usize,
    n_starts: usize,
    seed: u64,
    opts: &RbfgsOptions,
) -> Result<MultistartResult> {
    if n_starts < 1 {
        return param("n_starts must be at least 1");
    }
    let feas_tol = opts.feas_tol(c);
    let runs: Vec<StartOutcome> = (0..n_starts)
        .into_par_iter()
        .map(|index| {
            let direction = start_direction(q, seed, index);
            let res = init_on_manifold(&direction, constraint, c, feas_tol)
                .and_then(|s| rbfgs(objective, constraint, c, &s, opts));
            match res {
                Ok(r) => StartOutcome { index, direction, result: Some(r), error: None },
                Err(e) => StartOutcome { index, direction, result: None, error: Some(e.to_string()) },
            }
        })
        .collect();
    let mut best: Option<(usize, f64)> = None;
    for run in &runs {
        if let Some(r) = &run.result {
            match best {
                Some((_, v)) if r.value >= v - 1e-8 => {}
                _ => best = Some((run.index, r.value)),
            }
        }
    }
    let Some((best_index, _)) = best else {
        let first = runs.iter().find_map(|r| r.error.clone()).unwrap_or_default();
        return Err(Error::Convergence(format!("every start failed; first error: {first}")));
    };
    Ok(MultistartResult { best_index, best: runs[best_index].result.clone().expect("winner ran"), runs })
}
