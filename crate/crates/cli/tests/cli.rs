use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use exptilt::simbench::{Dgp, DgpSpec, ExposureScenario, OutcomeScenario};
use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_exptilt"))
}

fn write_data(dir: &Path, n: usize, seed: u64) -> PathBuf {
    let dgp = Dgp::new(DgpSpec::new(ExposureScenario::Gaussian, OutcomeScenario::Linear, n, 3)).unwrap();
    let d = dgp.generate(seed).unwrap();
    let mut s = String::new();
    let mut names: Vec<String> = (1..=d.p()).map(|j| format!("x{j}")).collect();
    names.extend((1..=d.q()).map(|j| format!("w{j}")));
    names.push("y".into());
    s.push_str(&names.join(","));
    s.push('\n');
    for i in 0..d.n() {
        let mut row: Vec<String> = d.x.row(i).iter().map(|v| v.to_string()).collect();
        row.extend(d.w.row(i).iter().map(|v| v.to_string()));
        row.push(d.y[i].to_string());
        s.push_str(&row.join(","));
        s.push('\n');
    }
    let path = dir.join("data.csv");
    fs::write(&path, s).unwrap();
    path
}

fn base_config(data: &Path, extra: Value) -> Value {
    let mut cfg = json!({
        "data": {
            "path": data,
            "covariates": (1..=10).map(|j| format!("x{j}")).collect::<Vec<_>>(),
            "exposures": (1..=6).map(|j| format!("w{j}")).collect::<Vec<_>>(),
            "outcome": "y",
        },
        "seed": 11,
        "nuisance": {"folds": 2, "mc_draws": 300},
        "constraint": {"mc_draws": 5000},
    });
    for (k, v) in extra.as_object().unwrap() {
        cfg[k] = v.clone();
    }
    cfg
}

fn run(dir: &Path, sub: &str, cfg: &Value, out: &str) -> Output {
    let cfg_path = dir.join(format!("{out}.json"));
    fs::write(&cfg_path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    bin().arg(sub).arg("--config").arg(&cfg_path).arg("--out").arg(dir.join(out)).output().unwrap()
}

fn read_csv(path: &Path) -> (Value, Vec<csv::StringRecord>, csv::StringRecord) {
    let text = fs::read_to_string(path).unwrap();
    let first = text.lines().next().unwrap();
    let config: Value = serde_json::from_str(first.strip_prefix("# config=").unwrap()).unwrap();
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path).unwrap();
    let header = r.headers().unwrap().clone();
    let rows = r.records().map(|x| x.unwrap()).collect();
    (config, rows, header)
}

fn ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr));
}

#[test]
fn estimate_zero_tilt_row_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path(), 300, 1);
    let cfg = base_config(&data, json!({"tilt": {"mode": "efficient", "targets": [0.0, 0.1, 0.2]}}));
    ok(&run(dir.path(), "estimate", &cfg, "a"));
    ok(&run(dir.path(), "estimate", &cfg, "b"));

    for f in ["curve.csv", "report.json"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between identical runs");
    }

    let (config, rows, header) = read_csv(&dir.path().join("a/curve.csv"));
    assert_eq!(config["seed"], 11);
    assert_eq!(rows.len(), 3);
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let zero = &rows[0];
    assert_eq!(zero[col("gelbrich_target")].parse::<f64>().unwrap(), 0.0);
    assert_eq!(zero[col("theta_hat")].parse::<f64>().unwrap(), 0.0);
    for r in &rows {
        let lo: f64 = r[col("ci_lo")].parse().unwrap();
        let hi: f64 = r[col("ci_hi")].parse().unwrap();
        let th: f64 = r[col("theta_hat")].parse().unwrap();
        assert!(lo <= th && th <= hi);
    }
    let report: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("a/report.json")).unwrap()).unwrap();
    assert_eq!(report["tilts"].as_array().unwrap().len(), 3);
    assert_eq!(report["config"]["seed"], 11);
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path(), 200, 2);
    let cfg = base_config(&data, json!({"tilt": {"mode": "single_exposure", "index": 1, "targets": [0.2]}}));
    let cfg_path = dir.path().join("c.json");
    fs::write(&cfg_path, cfg.to_string()).unwrap();
    let o = bin()
        .args(["estimate", "--seed", "99", "--threads", "2", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(dir.path().join("o"))
        .output()
        .unwrap();
    ok(&o);
    let (config, rows, _) = read_csv(&dir.path().join("o/curve.csv"));
    assert_eq!(config["seed"], 99);
    assert_eq!(&rows[0][0], "w2");
}

#[test]
fn explicit_and_group_tilts() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path(), 300, 3);
    let cfg = base_config(
        &data,
        json!({"tilt": {"mode": "explicit", "deltas": [[0.0, 0.0, 0.0, 0.0, 0.0, 0.0], [0.1, 0.0, 0.0, 0.0, 0.0, -0.1]], "labels": ["none", "mixed"]}}),
    );
    ok(&run(dir.path(), "estimate", &cfg, "e"));
    let (_, rows, _) = read_csv(&dir.path().join("e/curve.csv"));
    assert_eq!(&rows[0][0], "none");
    assert_eq!(rows[0][1].parse::<f64>().unwrap(), 0.0);
    assert!(rows[1][1].parse::<f64>().unwrap() > 0.0);

    let cfg = base_config(&data, json!({"tilt": {"mode": "group", "members": [0, 1], "targets": [0.15]}}));
    ok(&run(dir.path(), "estimate", &cfg, "g"));
    let (_, rows, _) = read_csv(&dir.path().join("g/curve.csv"));
    assert_eq!(&rows[0][0], "group:w1+w2");
}

#[test]
fn optimize_winner_beats_closed_form_paths() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path(), 300, 4);
    let cfg = base_config(&data, json!({"optimize": {"targets": [0.2], "n_starts": 3}}));
    ok(&run(dir.path(), "optimize", &cfg, "opt"));
    let (_, starts, _) = read_csv(&dir.path().join("opt/starts.csv"));
    assert_eq!(starts.len(), 3);
    let body: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("opt/optimize.json")).unwrap()).unwrap();
    let t = &body["targets"][0];
    assert_eq!(t["winner_is_best"], true, "{t}");
    let (_, curve, _) = read_csv(&dir.path().join("opt/curve.csv"));
    // winner plus both signs of six single-exposure paths and the efficient path
    assert_eq!(curve.len(), 1 + 2 * 6 + 2);
    assert_eq!(&curve[0][0], "bfgs");
    let traces = fs::read_to_string(dir.path().join("opt/traces.jsonl")).unwrap();
    for line in traces.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert!(v["trace"]["objective"].is_number());
    }
}

#[test]
fn sensitivity_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path(), 300, 5);
    let cfg = base_config(
        &data,
        json!({
            "tilt": {"mode": "efficient", "targets": [0.0, 0.2]},
            "sensitivity": {
                "settings": [{"eta_y_sq": 0.05, "eta_alpha_sq": 0.05}, {"eta_y_sq": 0.0, "eta_alpha_sq": 0.0}],
                "benchmark": {"k_y": 1.0, "k_d": 1.0}
            }
        }),
    );
    ok(&run(dir.path(), "sensitivity", &cfg, "s"));
    let (_, rows, header) = read_csv(&dir.path().join("s/sensitivity.csv"));
    assert_eq!(rows.len(), 2 * 3);
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    for r in &rows {
        let lo: f64 = r[col("theta_lo")].parse().unwrap();
        let hi: f64 = r[col("theta_hi")].parse().unwrap();
        let ci_lo: f64 = r[col("ci_lo")].parse().unwrap();
        let ci_hi: f64 = r[col("ci_hi")].parse().unwrap();
        assert!(ci_lo <= lo && lo <= hi && hi <= ci_hi);
        if &r[col("setting")] == "setting1" {
            assert_eq!(r[col("b_hat")].parse::<f64>().unwrap(), 0.0);
        }
    }
    let (_, ob, _) = read_csv(&dir.path().join("s/benchmark_outcome.csv"));
    assert_eq!(ob.len(), 10);
    let (_, rr, _) = read_csv(&dir.path().join("s/benchmark_rr.csv"));
    assert_eq!(rr.len(), 2 * 10);
    read_csv(&dir.path().join("s/contours.csv"));
    let body: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("s/sensitivity.json")).unwrap()).unwrap();
    assert_eq!(body["tilts"].as_array().unwrap().len(), 2);
}

#[test]
fn simulate_smoke_writes_seven_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "seed": 5,
        "simulate": {"reps": 2, "n": 200, "truth_draws": 20000, "nuisance": {"folds": 2, "mc_draws": 200}}
    });
    ok(&run(dir.path(), "simulate", &cfg, "sim"));
    let (config, rows, _) = read_csv(&dir.path().join("sim/metrics.csv"));
    assert_eq!(config["simulate"]["reps"], 2);
    let all: Vec<_> = rows.iter().filter(|r| &r[0] == "all").collect();
    assert_eq!(all.len(), 7);
    assert_eq!(rows.len(), 7 * 7);
    let text = fs::read_to_string(dir.path().join("sim/metrics.txt")).unwrap();
    assert_eq!(text.lines().count(), 8);
    let (_, reps, _) = read_csv(&dir.path().join("sim/reps.csv"));
    assert_eq!(reps.len(), 6 * 2 * 7);
}

#[test]
fn config_errors_exit_2_with_field_path() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path(), 50, 6);

    let cfg = base_config(&data, json!({"tilt": {"mode": "single_exposure", "index": 9, "targets": [0.1]}}));
    let o = run(dir.path(), "estimate", &cfg, "bad1");
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("tilt.index"));

    let cfg = base_config(&data, json!({"tilt": {"mode": "efficient", "targets": [0.1]}, "nuisance": {"folds": "five"}}));
    let o = run(dir.path(), "estimate", &cfg, "bad2");
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nuisance.folds"));

    let mut cfg = base_config(&data, json!({"tilt": {"mode": "efficient", "targets": [0.1]}}));
    cfg["data"]["path"] = json!(dir.path().join("missing.csv"));
    let o = run(dir.path(), "estimate", &cfg, "bad3");
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("data.path"));

    let cfg = base_config(&data, json!({"tilt": {"mode": "efficient", "targets": [0.1]}, "typo": 1}));
    assert_eq!(run(dir.path(), "estimate", &cfg, "bad4").status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_data(dir.path(), 50, 7);
    let mut cfg = base_config(&data, json!({"tilt": {"mode": "efficient", "targets": [0.1]}}));
    cfg["data"]["outcome"] = json!("not_a_column");
    let o = run(dir.path(), "estimate", &cfg, "rt");
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("dataset"));
}
