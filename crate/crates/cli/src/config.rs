//! Scenario files: TOML with a fixed set of sections; unknown keys are errors.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use weakmfg::registry::{ParamValue, Params};

/// Environment variable capping the estimated working set, in MiB.
pub const MEMORY_ENV: &str = "WEAKMFG_MAX_MEMORY_MB";

#[derive(Debug)]
pub struct ConfigInvalid {
    pub line: Option<usize>,
    pub message: String,
}

impl std::fmt::Display for ConfigInvalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.line {
            Some(l) => write!(f, "invalid config (line {l}): {}", self.message),
            None => write!(f, "invalid config: {}", self.message),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    pub grid: GridConfig,
    pub ensemble: EnsembleConfig,
    pub fields: FieldsConfig,
    #[serde(default = "StrategyConfig::quadratic")]
    pub model: StrategyConfig,
    pub terminal: StrategyConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default)]
    pub t0: f64,
    pub t_end: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub particles: usize,
    /// "point" or "gaussian".
    pub initial: String,
    #[serde(default)]
    pub point: Option<Vec<f64>>,
    #[serde(default)]
    pub mean: Option<Vec<f64>>,
    #[serde(default)]
    pub std: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldsConfig {
    pub kind: String,
    #[serde(default)]
    pub params: BTreeMap<String, ParamValue>,
    #[serde(default = "default_drift")]
    pub drift: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    pub kind: String,
    #[serde(default)]
    pub params: BTreeMap<String, ParamValue>,
}

impl StrategyConfig {
    fn quadratic() -> Self {
        Self {
            kind: "quadratic".into(),
            params: BTreeMap::new(),
        }
    }

    pub fn params(&self) -> Params {
        Params::from_map(self.params.clone())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TruncationSetting {
    Named(String),
    Radius(f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub basis: StrategyConfig,
    pub damping: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub measure_mode: String,
    pub initial_guess: StrategyConfig,
    pub truncation: TruncationSetting,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            basis: StrategyConfig {
                kind: "polynomial".into(),
                params: BTreeMap::new(),
            },
            damping: 1.0,
            tol: 1e-3,
            max_iter: 50,
            measure_mode: "tilted".into(),
            initial_guess: StrategyConfig {
                kind: "uniform".into(),
                params: BTreeMap::new(),
            },
            truncation: TruncationSetting::Named("auto".into()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    pub bmo: bool,
    pub master_field: bool,
    pub z_representation: bool,
    pub malliavin: bool,
    pub malliavin_probes: usize,
    pub tangent: bool,
    pub residual: bool,
    pub density: bool,
    /// Defaults to the last node.
    pub density_node: Option<usize>,
    pub density_coordinate: usize,
    pub assumptions: bool,
    pub x_radius: f64,
    pub a_radius: f64,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            bmo: false,
            master_field: true,
            z_representation: true,
            malliavin: false,
            malliavin_probes: 50,
            tangent: false,
            residual: false,
            density: false,
            density_node: None,
            density_coordinate: 0,
            assumptions: false,
            x_radius: 2.0,
            a_radius: 2.0,
        }
    }
}

fn default_drift() -> String {
    "zero".into()
}

/// 1-based line of `key` inside `[section]` (top level when empty), or of
/// the section header when the key is absent.
pub fn line_of(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    let mut header = None;
    for (k, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = name.trim().to_string();
            if current == section {
                header = Some(k + 1);
            }
            continue;
        }
        if current == section {
            if let Some((lhs, _)) = line.split_once('=') {
                if lhs.trim() == key {
                    return Some(k + 1);
                }
            }
        }
    }
    header
}

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigInvalid> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigInvalid {
            line: e.span().map(|s| text[..s.start].matches('\n').count() + 1),
            message: e.message().to_string(),
        })?;
        cfg.validate(text)?;
        Ok(cfg)
    }

    fn validate(&self, text: &str) -> Result<(), ConfigInvalid> {
        let fail = |section: &str, key: &str, message: String| ConfigInvalid {
            line: line_of(text, section, key),
            message,
        };
        if self.grid.steps < 1 {
            return Err(fail("grid", "steps", "grid.steps must be at least 1".into()));
        }
        if !(self.grid.t_end > self.grid.t0) {
            return Err(fail("grid", "t_end", "grid.t_end must exceed grid.t0".into()));
        }
        if self.ensemble.particles < 1 {
            return Err(fail("ensemble", "particles", "ensemble.particles must be at least 1".into()));
        }
        let s = &self.solver;
        if !(s.tol > 0.0) {
            return Err(fail("solver", "tol", "solver.tol must be positive".into()));
        }
        if !(s.damping > 0.0 && s.damping <= 1.0) {
            return Err(fail("solver", "damping", "solver.damping must lie in (0, 1]".into()));
        }
        if s.max_iter < 1 {
            return Err(fail("solver", "max_iter", "solver.max_iter must be at least 1".into()));
        }
        match self.ensemble.initial.as_str() {
            "point" if self.ensemble.point.is_none() => {
                return Err(fail("ensemble", "initial", "initial = \"point\" needs ensemble.point".into()))
            }
            "gaussian" if self.ensemble.mean.is_none() => {
                return Err(fail("ensemble", "initial", "initial = \"gaussian\" needs ensemble.mean".into()))
            }
            "point" | "gaussian" => {}
            other => {
                return Err(fail(
                    "ensemble",
                    "initial",
                    format!("unknown ensemble.initial '{other}' (known: point, gaussian)"),
                ))
            }
        }
        if let TruncationSetting::Named(n) = &s.truncation {
            if n != "auto" && n != "off" {
                return Err(fail("solver", "truncation", format!("solver.truncation must be \"auto\", \"off\" or a radius, got '{n}'")));
            }
        }
        Ok(())
    }

    /// Rough working-set estimate in MiB: states, increments, Y, Z, weights
    /// and regression buffers.
    pub fn estimated_memory_mb(&self, dim: usize, noise_dim: usize) -> f64 {
        let cells = self.ensemble.particles as f64 * (self.grid.steps + 1) as f64;
        cells * (dim + 4 * noise_dim + 3) as f64 * 8.0 * 2.0 / (1024.0 * 1024.0)
    }
}
