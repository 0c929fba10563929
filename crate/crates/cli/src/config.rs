use std::path::{Path, PathBuf};

use entroflow::sde::PolicySpec;
use entroflow::{Grid, InitialDensity, Interval, PotentialSpec, SolverSettings};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Experiment description. Every field has a default; see `README.md` for the table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub potential: PotentialSpec,
    pub domain: [f64; 2],
    pub resolution: usize,
    pub initial: InitialDensity,
    pub horizon: f64,
    pub dt: f64,
    pub store_every: usize,
    pub particles: usize,
    pub seed: u64,
    pub policies: Vec<PolicySpec>,
    pub stages: usize,
    pub stop_below: Option<f64>,
    /// Iteration stages whose optimal cost is re-simulated.
    pub verify_stages: Vec<usize>,
    pub forward_ensemble: bool,
    pub output: Option<PathBuf>,
    pub csv: CsvConfig,
    pub ergodic: ErgodicConfig,
    pub tolerances: Tolerances,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CsvConfig {
    /// Write every k-th stored slice to density.csv.
    pub density_every: usize,
    /// Bins of the histogram grid used for ensemble marginals.
    pub histogram_bins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ErgodicConfig {
    pub set: [f64; 2],
    pub horizon: f64,
    pub trajectories: usize,
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub relative: f64,
    pub std_errors: f64,
    pub mass: f64,
    pub tv: f64,
    pub dissipation: f64,
    pub integral: f64,
    pub pinsker: f64,
    pub occupation: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            potential: PotentialSpec {
                name: "quadratic".into(),
                params: vec![],
            },
            domain: [-8.0, 8.0],
            resolution: 1024,
            initial: InitialDensity::Gaussian {
                mean: 1.0,
                variance: 1.0,
            },
            horizon: 0.5,
            dt: 1e-3,
            store_every: 1,
            particles: 100_000,
            seed: 0,
            policies: vec![PolicySpec::Optimal, PolicySpec::Zero],
            stages: 6,
            stop_below: None,
            verify_stages: vec![],
            forward_ensemble: false,
            output: None,
            csv: CsvConfig::default(),
            ergodic: ErgodicConfig::default(),
            tolerances: Tolerances::default(),
        }
    }
}

impl Default for CsvConfig {
    fn default() -> Self {
        Self {
            density_every: 10,
            histogram_bins: 129,
        }
    }
}

impl Default for ErgodicConfig {
    fn default() -> Self {
        Self {
            set: [0.0, 8.0],
            horizon: 1e4,
            trajectories: 16,
            dt: 1e-2,
        }
    }
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            relative: 0.01,
            std_errors: 3.0,
            mass: 1e-10,
            tv: 0.02,
            dissipation: 0.02,
            integral: 0.01,
            pinsker: 1e-6,
            occupation: 0.01,
        }
    }
}

fn positive(key: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::Config(format!(
            "`{key}` must be positive and finite, got {v}"
        )))
    }
}

fn at_least(key: &str, v: usize, min: usize) -> Result<(), CliError> {
    if v >= min {
        Ok(())
    } else {
        Err(CliError::Config(format!("`{key}` must be at least {min}, got {v}")))
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let [lo, hi] = self.domain;
        if !(lo < hi && lo.is_finite() && hi.is_finite()) {
            return Err(CliError::Config(format!(
                "`domain` must be an increasing pair, got [{lo}, {hi}]"
            )));
        }
        at_least("resolution", self.resolution, 16)?;
        positive("horizon", self.horizon)?;
        positive("dt", self.dt)?;
        let steps = self.horizon / self.dt;
        if (steps - steps.round()).abs() > 1e-6 * steps.max(1.0) {
            return Err(CliError::Config(format!(
                "`horizon` ({}) must be a multiple of `dt` ({})",
                self.horizon, self.dt
            )));
        }
        at_least("store_every", self.store_every, 1)?;
        at_least("particles", self.particles, 2)?;
        at_least("stages", self.stages, 1)?;
        if let Some(s) = self.stop_below {
            positive("stop_below", s)?;
        }
        if let Some(k) = self.verify_stages.iter().find(|k| **k == 0 || **k > self.stages) {
            return Err(CliError::Config(format!(
                "`verify_stages` entry {k} is outside 1..={}",
                self.stages
            )));
        }
        at_least("csv.density_every", self.csv.density_every, 1)?;
        at_least("csv.histogram_bins", self.csv.histogram_bins, 16)?;
        let [a, b] = self.ergodic.set;
        if a.is_nan() || b.is_nan() || a >= b {
            return Err(CliError::Config(format!(
                "`ergodic.set` must be increasing, got [{a}, {b}]"
            )));
        }
        positive("ergodic.horizon", self.ergodic.horizon)?;
        positive("ergodic.dt", self.ergodic.dt)?;
        at_least("ergodic.trajectories", self.ergodic.trajectories, 1)?;
        let t = &self.tolerances;
        for (key, v) in [
            ("tolerances.relative", t.relative),
            ("tolerances.std_errors", t.std_errors),
            ("tolerances.mass", t.mass),
            ("tolerances.tv", t.tv),
            ("tolerances.dissipation", t.dissipation),
            ("tolerances.integral", t.integral),
            ("tolerances.pinsker", t.pinsker),
            ("tolerances.occupation", t.occupation),
        ] {
            positive(key, v)?;
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid, CliError> {
        Ok(Grid::new(self.domain[0], self.domain[1], self.resolution)?)
    }

    pub fn histogram_grid(&self) -> Result<Grid, CliError> {
        Ok(Grid::new(self.domain[0], self.domain[1], self.csv.histogram_bins)?)
    }

    pub fn solver(&self) -> SolverSettings {
        SolverSettings::new(self.dt).with_stride(self.store_every)
    }

    pub fn ergodic_set(&self) -> Interval {
        Interval::new(self.ergodic.set[0], self.ergodic.set[1])
    }

    /// Number of SDE steps between recorded ensemble states (about ten records per run).
    pub fn record_every(&self) -> usize {
        ((self.horizon / self.dt).round() as usize / 10).max(1)
    }
}
