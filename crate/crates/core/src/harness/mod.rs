//! Experiment orchestration: TOML configs, suite sweeps over
//! (domain, density, h, pole, height), result persistence, and the
//! acceptance-suite runner.

pub mod acceptance;
pub mod suites;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::ConvexDomain;
use crate::solver::DensitySpec;

pub const OUT_ENV: &str = "MALAB_OUT";

/// Known suite names, in canonical execution order.
pub const SUITES: [&str; 9] = [
    "solve",
    "sections",
    "green_bounds",
    "gradient_lp",
    "identities",
    "capacity",
    "decay",
    "removable",
    "convergence",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityConfig {
    /// Closed form in x, y, z, h (grid spacing): e.g. "1 + 0.5*sin(4*x)*sin(4*y)".
    pub expr: String,
    pub f_min: f64,
    pub f_max: f64,
}

impl DensityConfig {
    pub fn spec(&self) -> Result<DensitySpec> {
        DensitySpec::from_expr(&self.expr, self.f_min, self.f_max)
    }
}

fn default_workers() -> usize {
    1
}

fn default_tol() -> f64 {
    1e-8
}

fn default_alpha() -> f64 {
    0.5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// RNG seed for probe points; fixed seed means byte-identical outputs.
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Grid spacings, strictly decreasing.
    pub h_list: Vec<f64>,
    /// Section/Green pole points (snapped to nearest nodes per grid).
    pub poles: Vec<Vec<f64>>,
    /// Section heights.
    pub heights: Vec<f64>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub suites: Vec<String>,
    pub domain: ConvexDomain,
    pub density: DensityConfig,
    /// Green's-function domain V (defaults to a concentric shrink of the
    /// domain when omitted).
    #[serde(default)]
    pub v_shape: Option<ConvexDomain>,
}

impl ExperimentConfig {
    pub fn from_toml_path(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.suites {
            if !SUITES.contains(&s.as_str()) {
                return Err(Error::Config(format!(
                    "suites: unknown suite '{s}' (known: {})",
                    SUITES.join(", ")
                )));
            }
        }
        if self.suites.is_empty() {
            return Err(Error::Config("suites: empty suite list".into()));
        }
        if self.h_list.is_empty() {
            return Err(Error::Config("h_list: must not be empty".into()));
        }
        if self.h_list.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config("h_list: spacings must be strictly decreasing".into()));
        }
        if self.heights.is_empty() {
            return Err(Error::Config("heights: must not be empty".into()));
        }
        if self.heights.iter().any(|&t| t <= 0.0) {
            return Err(Error::Config("heights: all heights must be positive".into()));
        }
        if self.poles.is_empty() {
            return Err(Error::Config("poles: must not be empty".into()));
        }
        for p in &self.poles {
            if p.len() != self.domain.dim() {
                return Err(Error::Config(format!(
                    "poles: point {p:?} does not match the domain dimension {}",
                    self.domain.dim()
                )));
            }
        }
        if !(0.0 < self.alpha && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha: must lie in (0, 1], got {}", self.alpha)));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers: must be at least 1".into()));
        }
        self.density.spec()?;
        Ok(())
    }

    pub fn pole_point(&self, k: usize) -> [f64; 3] {
        let p = &self.poles[k];
        let mut out = [0.0; 3];
        for (a, &v) in p.iter().enumerate() {
            out[a] = v;
        }
        out
    }

    /// Output root: config value, else $MALAB_OUT, else ./malab-out.
    pub fn out_root(&self) -> PathBuf {
        if let Some(d) = &self.out_dir {
            return d.clone();
        }
        if let Ok(env) = std::env::var(OUT_ENV) {
            if !env.is_empty() {
                return PathBuf::from(env);
            }
        }
        PathBuf::from("malab-out")
    }
}

/// One verified statement inside a suite run.
#[derive(Debug, Clone, Serialize)]
pub struct CheckRecord {
    pub suite: String,
    pub name: String,
    pub pass: bool,
    pub value: f64,
    pub expected: String,
}

impl CheckRecord {
    pub fn new(suite: &str, name: &str, pass: bool, value: f64, expected: &str) -> Self {
        CheckRecord {
            suite: suite.to_string(),
            name: name.to_string(),
            pass,
            value,
            expected: expected.to_string(),
        }
    }
}

/// Deterministic summary of a suite run (no wall times inside: those go to
/// stderr so reruns stay byte-identical).
#[derive(Debug, Serialize)]
pub struct SuiteSummary {
    pub seed: u64,
    pub suites: Vec<String>,
    pub records: Vec<CheckRecord>,
    pub solver_failures: Vec<String>,
}

impl SuiteSummary {
    pub fn all_passed(&self) -> bool {
        self.records.iter().all(|r| r.pass) && self.solver_failures.is_empty()
    }

    /// 0 = pass, 1 = assertion failure, 3 = solver failure.
    pub fn exit_code(&self) -> i32 {
        if !self.solver_failures.is_empty() {
            3
        } else if self.records.iter().any(|r| !r.pass) {
            1
        } else {
            0
        }
    }
}
