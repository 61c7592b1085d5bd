use std::path::Path as FsPath;

use exptilt::dataset::{load_csv, Dataset};
use exptilt::estimator::{
    fit_bundle, onestep_psi, plugin_psi, theta_from_reports, Estimate, EstimateReport, NuisanceBundle, TiltVector,
};
use exptilt::geometry::{
    efficient_direction, group_shift_direction, single_exposure_direction, ConstraintSpec, GelbrichConstraint,
};
use exptilt::manifold::{init_on_manifold, multistart, PsiObjective, RbfgsOptions};
use exptilt::nuisance::exposure::{fit_exposure_model, ConditionalExposureModel};
use exptilt::rng::{streams, sub_seed};
use exptilt::sensitivity::{
    benchmark_outcome, benchmark_rr, endpoint_bounds, robustness_contour, scales, Contour, SensitivityParams,
};
use exptilt::simbench::run_benchmark;
use serde::Serialize;
use serde_json::json;

use crate::config::{EstimatorKind, RunConfig, TiltSpec};
use crate::output::{num, opt, OutDir, Table};

pub type RunResult<T> = Result<T, String>;

fn ctx<E: std::fmt::Display>(what: &str) -> impl FnOnce(E) -> String + '_ {
    move |e| format!("{what}: {e}")
}

/// Data on the working scale plus the fitted pieces shared by subcommands.
struct Prepared {
    data: Dataset,
    bundle: NuisanceBundle,
    model: ConditionalExposureModel,
    constraint: GelbrichConstraint,
}

fn prepare(cfg: &RunConfig) -> RunResult<Prepared> {
    let spec = cfg.data.as_ref().expect("validated");
    let raw = load_csv(&spec.path, &spec.schema()).map_err(ctx("dataset"))?;
    let data = if cfg.standardize { raw.standardize().map_err(ctx("dataset"))? } else { raw };
    let mut ncfg = cfg.nuisance.clone();
    ncfg.seed = cfg.seed;
    let bundle = fit_bundle(&data, &ncfg).map_err(ctx("nuisance"))?;
    let model = fit_exposure_model(&data, ncfg.family, &ncfg.exposure_learner, sub_seed(cfg.seed, streams::EXPOSURE))
        .map_err(ctx("nuisance"))?;
    let cspec = ConstraintSpec {
        c: 1.0,
        mc_draws: cfg.constraint.mc_draws,
        fd_step: cfg.constraint.fd_step,
        seed: sub_seed(cfg.seed, streams::CONSTRAINT),
    };
    let constraint = GelbrichConstraint::new(&model, data.x.view(), &cspec).map_err(ctx("geometry"))?;
    Ok(Prepared { data, bundle, model, constraint })
}

#[derive(Debug, Clone, Serialize)]
struct Tilt {
    label: String,
    gelbrich_target: f64,
    delta: Vec<f64>,
}

impl Prepared {
    /// Puts a closed-form direction onto the estimated level set `Ĝ = c²`.
    fn rescale(&self, dir: &[f64], c: f64) -> RunResult<Vec<f64>> {
        init_on_manifold(dir, &self.constraint, c, RbfgsOptions::default().feas_tol(c)).map_err(ctx("geometry"))
    }

    fn efficient(&self, c: f64) -> RunResult<Vec<f64>> {
        let dir = efficient_direction(&self.model.residual_cov, c).map_err(ctx("geometry"))?.delta;
        self.rescale(&dir, c)
    }

    fn single(&self, j: usize, c: f64) -> RunResult<Vec<f64>> {
        let dir = single_exposure_direction(&self.model.residual_cov, j, c).map_err(ctx("geometry"))?;
        self.rescale(&dir, c)
    }

    fn group(&self, members: &[usize], c: f64) -> RunResult<Vec<f64>> {
        Ok(group_shift_direction(members, &self.constraint, c).map_err(ctx("geometry"))?.delta)
    }

    fn group_label(&self, members: &[usize]) -> String {
        let names: Vec<&str> = members.iter().map(|&j| self.data.exposure_names[j].as_str()).collect();
        format!("group:{}", names.join("+"))
    }

    fn resolve(&self, spec: &TiltSpec) -> RunResult<Vec<Tilt>> {
        let q = self.data.q();
        if let TiltSpec::Explicit { deltas, labels } = spec {
            return deltas
                .iter()
                .enumerate()
                .map(|(i, d)| {
                    let g = self.constraint.value(d).map_err(ctx("geometry"))?;
                    Ok(Tilt {
                        label: labels.as_ref().map_or_else(|| format!("tilt{i}"), |l| l[i].clone()),
                        gelbrich_target: g.max(0.0).sqrt(),
                        delta: d.clone(),
                    })
                })
                .collect();
        }
        let label = match spec {
            TiltSpec::SingleExposure { index, .. } => self.data.exposure_names[*index].clone(),
            TiltSpec::Efficient { .. } => "efficient".into(),
            TiltSpec::Group { members, .. } => self.group_label(members),
            TiltSpec::Explicit { .. } => unreachable!(),
        };
        spec.targets()
            .iter()
            .map(|&c| {
                let delta = if c == 0.0 {
                    vec![0.0; q]
                } else {
                    match spec {
                        TiltSpec::SingleExposure { index, .. } => self.single(*index, c)?,
                        TiltSpec::Efficient { .. } => self.efficient(c)?,
                        TiltSpec::Group { members, .. } => self.group(members, c)?,
                        TiltSpec::Explicit { .. } => unreachable!(),
                    }
                };
                Ok(Tilt { label: label.clone(), gelbrich_target: c, delta })
            })
            .collect()
    }
}

/// θ̂ reports for a list of tilts, sharing one ψ̂(0).
fn estimate_tilts(cfg: &RunConfig, p: &Prepared, tilts: &[Tilt]) -> RunResult<Vec<EstimateReport>> {
    let q = p.data.q();
    let zero = TiltVector::zero(q);
    let psi = |t: &TiltVector| match cfg.estimator {
        EstimatorKind::OneStep => onestep_psi(&p.data, &p.bundle, t, cfg.path),
        EstimatorKind::Plugin => plugin_psi(&p.data, &p.bundle, t),
    };
    let base = psi(&zero).map_err(ctx("estimator"))?;
    tilts
        .iter()
        .map(|t| {
            let tv = TiltVector::labeled(t.delta.clone(), t.label.clone()).map_err(ctx("estimator"))?;
            let at = psi(&tv).map_err(ctx("estimator"))?;
            Ok(match cfg.estimator {
                EstimatorKind::OneStep => theta_from_reports(at, &base),
                EstimatorKind::Plugin => {
                    let mut at = at;
                    let value = at.psi.value - base.psi.value;
                    at.theta = Some(Estimate { value, se: None, ci_95: None, influence: Vec::new() });
                    at
                }
            })
        })
        .collect()
}

fn without_influence(r: &EstimateReport) -> EstimateReport {
    let mut r = r.clone();
    r.psi.influence.clear();
    if let Some(t) = r.theta.as_mut() {
        t.influence.clear();
    }
    r
}

fn delta_header(d: &Dataset) -> Vec<String> {
    d.exposure_names.iter().map(|n| format!("delta_{n}")).collect()
}

fn curve_table(d: &Dataset) -> Table {
    let mut h: Vec<String> =
        ["label", "gelbrich_target", "theta_hat", "se", "ci_lo", "ci_hi", "path"].map(String::from).to_vec();
    h.extend(delta_header(d));
    Table::new(h)
}

fn curve_row(t: &Tilt, r: &EstimateReport) -> Vec<String> {
    let th = r.headline();
    let mut row = vec![
        t.label.clone(),
        num(t.gelbrich_target),
        num(th.value),
        opt(th.se),
        opt(th.ci_95.map(|c| c[0])),
        opt(th.ci_95.map(|c| c[1])),
        r.path.label().to_string(),
    ];
    row.extend(t.delta.iter().map(|v| num(*v)));
    row
}

fn tilt_json(p: &Prepared, t: &Tilt, r: &EstimateReport) -> serde_json::Value {
    json!({
        "label": t.label,
        "gelbrich_target": t.gelbrich_target,
        "delta": t.delta,
        "delta_raw": p.data.delta_to_raw(&t.delta),
        "report": without_influence(r),
    })
}

fn io<T>(r: std::io::Result<T>) -> RunResult<T> {
    r.map_err(|e| format!("output: {e}"))
}

pub fn estimate(cfg: &RunConfig, out: &FsPath) -> RunResult<()> {
    let p = prepare(cfg)?;
    let tilts = p.resolve(cfg.tilt.as_ref().expect("validated"))?;
    let reports = estimate_tilts(cfg, &p, &tilts)?;
    let dir = io(OutDir::create(out, cfg))?;
    let mut curve = curve_table(&p.data);
    for (t, r) in tilts.iter().zip(&reports) {
        curve.push(curve_row(t, r));
    }
    io(dir.write_csv("curve.csv", &curve))?;
    let body = json!({
        "config": cfg,
        "n": p.data.n(),
        "tilts": tilts.iter().zip(&reports).map(|(t, r)| tilt_json(&p, t, r)).collect::<Vec<_>>(),
    });
    io(dir.write_json("report.json", &body))
}

pub fn optimize(cfg: &RunConfig, out: &FsPath) -> RunResult<()> {
    let o = cfg.optimize.as_ref().expect("validated");
    let p = prepare(cfg)?;
    let q = p.data.q();
    let objective = PsiObjective { data: &p.data, bundle: &p.bundle, fd_step: o.fd_step };
    let dir = io(OutDir::create(out, cfg))?;

    let mut starts_h: Vec<String> =
        ["gelbrich_target", "start", "objective", "converged", "iterations", "grad_norm", "stop", "error"]
            .map(String::from)
            .to_vec();
    starts_h.extend(delta_header(&p.data));
    let mut starts = Table::new(starts_h);
    let mut traces = String::new();
    let mut curve_tilts = Vec::new();
    let mut summaries = Vec::new();

    for &c in &o.targets {
        let m = multistart(&objective, &p.constraint, c, q, o.n_starts, cfg.seed, &o.rbfgs)
            .map_err(ctx("manifold_optimizer"))?;
        for run in &m.runs {
            let mut row = vec![num(c), run.index.to_string()];
            match &run.result {
                Some(r) => {
                    row.extend([
                        num(r.value),
                        r.converged.to_string(),
                        r.iterations.to_string(),
                        num(r.grad_norm),
                        r.stop.clone(),
                        String::new(),
                    ]);
                    row.extend(r.delta.iter().map(|v| num(*v)));
                    for t in &r.trace {
                        let line = json!({"gelbrich_target": c, "start": run.index, "trace": t});
                        traces.push_str(&line.to_string());
                        traces.push('\n');
                    }
                }
                None => {
                    row.extend(["", "false", "", "", "", run.error.as_deref().unwrap_or("")].map(String::from));
                    row.extend(std::iter::repeat_n(String::new(), q));
                }
            }
            starts.push(row);
        }

        // Closed-form paths at the same target, both signs.
        let mut paths: Vec<Tilt> = Vec::new();
        let mut add = |label: String, delta: Vec<f64>| {
            let neg: Vec<f64> = delta.iter().map(|v| -v).collect();
            paths.push(Tilt { label: format!("{label}+"), gelbrich_target: c, delta });
            paths.push(Tilt { label: format!("{label}-"), gelbrich_target: c, delta: neg });
        };
        for j in 0..q {
            add(p.data.exposure_names[j].clone(), p.single(j, c)?);
        }
        add("efficient".into(), p.efficient(c)?);
        if let Some(TiltSpec::Group { members, .. }) = &cfg.tilt {
            add(p.group_label(members), p.group(members, c)?);
        }
        let mut comparisons = Vec::new();
        for t in &paths {
            let v = p.bundle.psi_hat(&p.data, &t.delta).map_err(ctx("estimator"))?;
            comparisons.push(json!({"label": t.label, "objective": v, "delta": t.delta}));
        }
        let winner_is_best = comparisons.iter().all(|c| c["objective"].as_f64().is_some_and(|v| m.best.value <= v));
        summaries.push(json!({
            "gelbrich_target": c,
            "best_start": m.best_index,
            "objective": m.best.value,
            "converged": m.best.converged,
            "delta": m.best.delta,
            "delta_raw": p.data.delta_to_raw(&m.best.delta),
            "winner_is_best": winner_is_best,
            "comparisons": comparisons,
        }));
        curve_tilts.push(Tilt { label: "bfgs".into(), gelbrich_target: c, delta: m.best.delta.clone() });
        curve_tilts.extend(paths);
    }

    let reports = estimate_tilts(cfg, &p, &curve_tilts)?;
    let mut curve = curve_table(&p.data);
    for (t, r) in curve_tilts.iter().zip(&reports) {
        curve.push(curve_row(t, r));
    }
    io(dir.write_csv("starts.csv", &starts))?;
    io(dir.write("traces.jsonl", traces.as_bytes()))?;
    io(dir.write_csv("curve.csv", &curve))?;
    let body = json!({
        "config": cfg,
        "n": p.data.n(),
        "targets": summaries,
        "curve": curve_tilts.iter().zip(&reports).map(|(t, r)| tilt_json(&p, t, r)).collect::<Vec<_>>(),
    });
    io(dir.write_json("optimize.json", &body))
}

pub fn sensitivity(cfg: &RunConfig, out: &FsPath) -> RunResult<()> {
    let s = &cfg.sensitivity;
    let p = prepare(cfg)?;
    let tilts = p.resolve(cfg.tilt.as_ref().expect("validated"))?;
    let reports = estimate_tilts(cfg, &p, &tilts)?;
    let dir = io(OutDir::create(out, cfg))?;
    let cov = &p.data.covariate_names;

    let outcome_bench = (0..p.data.p())
        .map(|j| benchmark_outcome(&p.data, j).map_err(ctx("sensitivity")))
        .collect::<RunResult<Vec<_>>>()?;
    let mut ob = Table::new(["covariate", "eta_sq", "f_sq", "degenerate"]);
    for (j, b) in outcome_bench.iter().enumerate() {
        ob.push(vec![cov[j].clone(), num(b.eta_sq), num(b.f_sq), b.degenerate.to_string()]);
    }
    let f_y_max = outcome_bench.iter().map(|b| b.f_sq).fold(0.0, f64::max);

    let mut rb = Table::new(["label", "gelbrich_target", "covariate", "eta_sq", "f_sq", "degenerate"]);
    let mut rows = Table::new([
        "label",
        "gelbrich_target",
        "setting",
        "eta_y_sq",
        "eta_alpha_sq",
        "theta_hat",
        "s_hat",
        "b_hat",
        "theta_lo",
        "theta_hi",
        "ci_lo",
        "ci_hi",
        "degenerate",
    ]);
    let mut ct = Table::new(["label", "gelbrich_target", "flag", "lambda_root", "eta_y_sq", "eta_alpha_sq"]);
    let mut per_tilt = Vec::new();
    let mut least: Option<(usize, f64)> = None;

    for (i, (t, r)) in tilts.iter().zip(&reports).enumerate() {
        let th = r.theta.as_ref().expect("theta present");
        if th.se.is_none() {
            return Err("sensitivity: requires the one-step estimator".into());
        }
        let sc = scales(&p.data, &p.bundle, &t.delta, cfg.path).map_err(ctx("sensitivity"))?;

        let mut settings: Vec<(String, SensitivityParams)> =
            s.settings.iter().enumerate().map(|(k, v)| (format!("setting{k}"), v.clone())).collect();
        if let Some(m) = &s.benchmark {
            let rr = (0..p.data.p())
                .map(|j| benchmark_rr(&p.data, &p.bundle, &t.delta, j).map_err(ctx("sensitivity")))
                .collect::<RunResult<Vec<_>>>()?;
            for (j, b) in rr.iter().enumerate() {
                rb.push(vec![
                    t.label.clone(),
                    num(t.gelbrich_target),
                    cov[j].clone(),
                    num(b.eta_sq),
                    num(b.f_sq),
                    b.degenerate.to_string(),
                ]);
            }
            let f_a_max = rr.iter().map(|b| b.f_sq).fold(0.0, f64::max);
            let params = SensitivityParams::calibrated(f_y_max, m.k_y, f_a_max, m.k_d).map_err(ctx("sensitivity"))?;
            settings.push(("benchmark".into(), params));
        }

        let mut bounds = Vec::new();
        for (name, params) in &settings {
            let b = endpoint_bounds(th, &sc, params).map_err(ctx("sensitivity"))?;
            rows.push(vec![
                t.label.clone(),
                num(t.gelbrich_target),
                name.clone(),
                num(params.eta_y_sq),
                num(params.eta_alpha_sq),
                num(b.theta_hat),
                num(b.s_hat),
                num(b.b_hat),
                num(b.theta_lo),
                num(b.theta_hi),
                num(b.ci_lo),
                num(b.ci_hi),
                b.degenerate.to_string(),
            ]);
            bounds.push(json!({"setting": name, "bounds": b}));
        }

        let contour: Contour = robustness_contour(th, &sc, s.contour_points).map_err(ctx("sensitivity"))?;
        if contour.points.is_empty() {
            ct.push(vec![
                t.label.clone(),
                num(t.gelbrich_target),
                contour.flag.clone().unwrap_or_default(),
                opt(contour.lambda_root),
                String::new(),
                String::new(),
            ]);
        } else {
            let mean_alpha =
                contour.points.iter().map(|(_, a)| a).sum::<f64>() / contour.points.len() as f64;
            if least.is_none_or(|(_, m)| mean_alpha < m) {
                least = Some((i, mean_alpha));
            }
            for (ey, ea) in &contour.points {
                ct.push(vec![
                    t.label.clone(),
                    num(t.gelbrich_target),
                    String::new(),
                    opt(contour.lambda_root),
                    num(*ey),
                    num(*ea),
                ]);
            }
        }
        per_tilt.push(json!({
            "label": t.label,
            "gelbrich_target": t.gelbrich_target,
            "delta": t.delta,
            "theta": without_influence(r).theta,
            "sigma_sq": sc.sigma_sq,
            "nu_sq": sc.nu_sq,
            "s_hat": sc.s_hat,
            "bounds": bounds,
            "contour": contour,
        }));
    }

    io(dir.write_csv("sensitivity.csv", &rows))?;
    io(dir.write_csv("benchmark_outcome.csv", &ob))?;
    if s.benchmark.is_some() {
        io(dir.write_csv("benchmark_rr.csv", &rb))?;
    }
    io(dir.write_csv("contours.csv", &ct))?;
    let least_favorable = least.map(|(i, m)| {
        json!({"label": tilts[i].label, "gelbrich_target": tilts[i].gelbrich_target, "mean_eta_alpha_sq": m})
    });
    let body = json!({
        "config": cfg,
        "n": p.data.n(),
        "tilts": per_tilt,
        "least_favorable": least_favorable,
    });
    io(dir.write_json("sensitivity.json", &body))
}

pub fn simulate(cfg: &RunConfig, out: &FsPath) -> RunResult<()> {
    let mut bc = cfg.simulate.clone().expect("validated");
    bc.seed = cfg.seed;
    let table = run_benchmark(&bc).map_err(ctx("simbench"))?;
    let dir = io(OutDir::create(out, cfg))?;

    let mut metrics = Table::new(["design", "pipeline", "mean_bias", "mean_abs_bias", "rmse", "reps"]);
    for r in table.per_design.iter().chain(&table.rows) {
        metrics.push(vec![
            r.design.clone().unwrap_or_else(|| "all".into()),
            r.pipeline.clone(),
            num(r.mean_bias),
            num(r.mean_abs_bias),
            num(r.rmse),
            r.reps.to_string(),
        ]);
    }
    let mut reps = Table::new(["design", "rep", "pipeline", "estimate", "se", "truth", "error"]);
    for r in &table.records {
        reps.push(vec![
            r.design.clone(),
            r.rep.to_string(),
            r.pipeline.clone(),
            opt(r.estimate),
            opt(r.se),
            opt(r.truth),
            r.error.clone().unwrap_or_default(),
        ]);
    }
    let descriptions: Vec<(String, String)> = bc.pipelines.iter().map(|p| (p.label(), p.description())).collect();
    io(dir.write_csv("metrics.csv", &metrics))?;
    io(dir.write_csv("reps.csv", &reps))?;
    io(dir.write("metrics.txt", table.to_text(&descriptions).as_bytes()))?;
    let body = json!({
        "config": cfg,
        "failures": table.failures,
        "rows": table.rows,
        "per_design": table.per_design,
    });
    io(dir.write_json("simulate.json", &body))
}
