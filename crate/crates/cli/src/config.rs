//! Run configuration: one JSON document, with a few fields overridable from
//! the command line.

use std::path::{Path as FsPath, PathBuf};

use exptilt::dataset::{CsvSchema, NonFinitePolicy};
use exptilt::estimator::{NuisanceConfig, Path};
use exptilt::manifold::RbfgsOptions;
use exptilt::sensitivity::{SensitivityParams, CONTOUR_POINTS};
use exptilt::simbench::BenchmarkConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub path: PathBuf,
    pub covariates: Vec<String>,
    pub exposures: Vec<String>,
    pub outcome: String,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    #[serde(default)]
    pub non_finite: NonFinitePolicy,
}

fn default_delimiter() -> char {
    ','
}

impl DataSpec {
    pub fn schema(&self) -> CsvSchema {
        let cov: Vec<&str> = self.covariates.iter().map(String::as_str).collect();
        let exp: Vec<&str> = self.exposures.iter().map(String::as_str).collect();
        let mut s = CsvSchema::new(&cov, &exp, &self.outcome);
        s.delimiter = self.delimiter;
        s.non_finite = self.non_finite;
        s
    }
}

/// How tilts are chosen. Every mode except `explicit` is evaluated at each
/// Gelbrich target; a zero target gives δ = 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum TiltSpec {
    Explicit {
        deltas: Vec<Vec<f64>>,
        #[serde(default)]
        labels: Option<Vec<String>>,
    },
    SingleExposure {
        index: usize,
        targets: Vec<f64>,
    },
    Efficient {
        targets: Vec<f64>,
    },
    Group {
        members: Vec<usize>,
        targets: Vec<f64>,
    },
}

impl TiltSpec {
    pub fn targets(&self) -> &[f64] {
        match self {
            TiltSpec::Explicit { .. } => &[],
            TiltSpec::SingleExposure { targets, .. } | TiltSpec::Efficient { targets } | TiltSpec::Group { targets, .. } => {
                targets
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSettings {
    #[serde(default = "defaults::constraint_draws")]
    pub mc_draws: usize,
    #[serde(default = "defaults::fd_step")]
    pub fd_step: f64,
}

impl Default for ConstraintSettings {
    fn default() -> Self {
        Self { mc_draws: defaults::constraint_draws(), fd_step: defaults::fd_step() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    #[default]
    OneStep,
    Plugin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizeSettings {
    /// Gelbrich targets at which to optimize.
    pub targets: Vec<f64>,
    #[serde(default = "defaults::n_starts")]
    pub n_starts: usize,
    /// Finite-difference step of the objective gradient.
    #[serde(default = "defaults::fd_step")]
    pub fd_step: f64,
    #[serde(default)]
    pub rbfgs: RbfgsOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkMultipliers {
    #[serde(default = "defaults::one")]
    pub k_y: f64,
    #[serde(default = "defaults::one")]
    pub k_d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivitySettings {
    #[serde(default)]
    pub settings: Vec<SensitivityParams>,
    #[serde(default)]
    pub benchmark: Option<BenchmarkMultipliers>,
    #[serde(default = "defaults::contour_points")]
    pub contour_points: usize,
}

impl Default for SensitivitySettings {
    fn default() -> Self {
        Self { settings: Vec::new(), benchmark: None, contour_points: CONTOUR_POINTS }
    }
}

mod defaults {
    pub fn constraint_draws() -> usize {
        50_000
    }
    pub fn fd_step() -> f64 {
        1e-3
    }
    pub fn n_starts() -> usize {
        10
    }
    pub fn one() -> f64 {
        1.0
    }
    pub fn contour_points() -> usize {
        exptilt::sensitivity::CONTOUR_POINTS
    }
    pub fn yes() -> bool {
        true
    }
    pub fn path() -> super::Path {
        super::Path::RatioRegression
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub data: Option<DataSpec>,
    /// Work on standardized X and W; tilts are then per standard deviation.
    #[serde(default = "defaults::yes")]
    pub standardize: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub nuisance: NuisanceConfig,
    #[serde(default = "defaults::path")]
    pub path: Path,
    #[serde(default)]
    pub estimator: EstimatorKind,
    #[serde(default)]
    pub tilt: Option<TiltSpec>,
    #[serde(default)]
    pub constraint: ConstraintSettings,
    #[serde(default)]
    pub optimize: Option<OptimizeSettings>,
    #[serde(default)]
    pub sensitivity: SensitivitySettings,
    #[serde(default)]
    pub simulate: Option<BenchmarkConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Estimate,
    Optimize,
    Sensitivity,
    Simulate,
}

/// A configuration problem, reported with the offending field path.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn err<T>(field: &str, msg: impl std::fmt::Display) -> Result<T, ConfigError> {
    Err(ConfigError(format!("{field}: {msg}")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ConfigError(format!("{}: {}", if path == "." { "config".into() } else { path }, e.inner()))
        })
    }

    pub fn load(path: &FsPath) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("--config: cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Checks everything that can be checked before touching data.
    pub fn validate(&self, cmd: Command) -> Result<(), ConfigError> {
        if cmd != Command::Simulate {
            let Some(data) = &self.data else {
                return err("data", "required for this subcommand (or pass --data with a config naming the columns)");
            };
            if !data.path.is_file() {
                return err("data.path", format!("file not found: {}", data.path.display()));
            }
            if data.exposures.is_empty() {
                return err("data.exposures", "at least one exposure column is required");
            }
            if data.covariates.is_empty() {
                return err("data.covariates", "at least one covariate column is required");
            }
            if self.nuisance.folds < 2 {
                return err("nuisance.folds", "must be at least 2");
            }
            if self.nuisance.mc_draws < 1 {
                return err("nuisance.mc_draws", "must be positive");
            }
            if self.constraint.mc_draws < 1000 {
                return err("constraint.mc_draws", "must be at least 1000");
            }
            if !(self.constraint.fd_step > 0.0) {
                return err("constraint.fd_step", "must be positive");
            }
            let q = data.exposures.len();
            match &self.tilt {
                None if cmd != Command::Optimize => return err("tilt", "required for this subcommand"),
                Some(t) => validate_tilt(t, q)?,
                None => {}
            }
        }
        match cmd {
            Command::Optimize => {
                let Some(o) = &self.optimize else {
                    return err("optimize", "required for the optimize subcommand");
                };
                if o.targets.is_empty() {
                    return err("optimize.targets", "needs at least one Gelbrich target");
                }
                for (i, c) in o.targets.iter().enumerate() {
                    if !(*c > 0.0 && c.is_finite()) {
                        return err(&format!("optimize.targets[{i}]"), "must be positive");
                    }
                }
                if o.n_starts < 1 {
                    return err("optimize.n_starts", "must be at least 1");
                }
                if !(o.fd_step > 0.0) {
                    return err("optimize.fd_step", "must be positive");
                }
            }
            Command::Sensitivity => {
                for (i, p) in self.sensitivity.settings.iter().enumerate() {
                    if let Err(e) = p.validate() {
                        return err(&format!("sensitivity.settings[{i}]"), e);
                    }
                }
                if let Some(b) = &self.sensitivity.benchmark {
                    if !(b.k_y >= 0.0 && b.k_d >= 0.0) {
                        return err("sensitivity.benchmark", "multipliers must be nonnegative");
                    }
                }
                if self.sensitivity.contour_points < 1 {
                    return err("sensitivity.contour_points", "must be at least 1");
                }
            }
            Command::Simulate => {
                let Some(s) = &self.simulate else {
                    return err("simulate", "required for the simulate subcommand");
                };
                if s.reps < 1 {
                    return err("simulate.reps", "must be at least 1");
                }
                if s.n < 10 {
                    return err("simulate.n", "must be at least 10");
                }
                if s.designs.is_empty() {
                    return err("simulate.designs", "needs at least one design");
                }
                if !(s.c > 0.0) {
                    return err("simulate.c", "must be positive");
                }
            }
            Command::Estimate => {}
        }
        Ok(())
    }
}

fn validate_tilt(t: &TiltSpec, q: usize) -> Result<(), ConfigError> {
    match t {
        TiltSpec::Explicit { deltas, labels } => {
            if deltas.is_empty() {
                return err("tilt.deltas", "needs at least one tilt");
            }
            for (i, d) in deltas.iter().enumerate() {
                if d.len() != q {
                    return err(&format!("tilt.deltas[{i}]"), format!("has length {}, expected {q}", d.len()));
                }
                if d.iter().any(|v| !v.is_finite()) {
                    return err(&format!("tilt.deltas[{i}]"), "must be finite");
                }
            }
            if let Some(l) = labels {
                if l.len() != deltas.len() {
                    return err("tilt.labels", "must have one label per tilt");
                }
            }
        }
        TiltSpec::SingleExposure { index, .. } if *index >= q => {
            return err("tilt.index", format!("out of range for {q} exposures"));
        }
        TiltSpec::Group { members, .. } => {
            if members.is_empty() {
                return err("tilt.members", "must be nonempty");
            }
            if let Some(m) = members.iter().find(|m| **m >= q) {
                return err("tilt.members", format!("index {m} out of range for {q} exposures"));
            }
        }
        _ => {}
    }
    if !matches!(t, TiltSpec::Explicit { .. }) {
        if t.targets().is_empty() {
            return err("tilt.targets", "needs at least one Gelbrich target");
        }
        for (i, c) in t.targets().iter().enumerate() {
            if !(*c >= 0.0 && c.is_finite()) {
                return err(&format!("tilt.targets[{i}]"), "must be finite and nonnegative");
            }
        }
    }
    Ok(())
}
