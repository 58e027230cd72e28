//! Run configuration read from TOML (unknown keys rejected) or from a
//! previously written `run-manifest.json`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::FrameSchedule;
use crate::error::{Error, Result};
use crate::kinetics::InputFunction;
use crate::projector::Geometry2D;
use crate::recon::ReconConfig;
use crate::simulate::RegionParams;

/// Frame timing: either `runs = [[count, seconds], ...]` or an explicit
/// `durations` list, both starting at `t0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default)]
    pub t0: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runs: Option<Vec<(usize, f64)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub durations: Option<Vec<f64>>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            t0: 0.0,
            runs: Some(vec![(12, 10.0), (2, 30.0), (3, 60.0), (2, 120.0), (4, 300.0), (1, 600.0)]),
            durations: None,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<FrameSchedule> {
        let durations: Vec<f64> = match (&self.runs, &self.durations) {
            (Some(runs), None) => runs.iter().flat_map(|&(n, d)| std::iter::repeat_n(d, n)).collect(),
            (None, Some(d)) => d.clone(),
            _ => return Err(Error::invalid("schedule", "give exactly one of 'runs' or 'durations'")),
        };
        FrameSchedule::from_durations(self.t0, &durations)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    #[serde(default = "default_counts")]
    pub target_counts: f64,
    #[serde(default = "default_background")]
    pub background_fraction: f64,
    pub seed: u64,
}

fn default_counts() -> f64 {
    5e6
}

fn default_background() -> f64 {
    0.2
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_counts > 0.0 && self.target_counts.is_finite()) {
            return Err(Error::invalid("simulation.target_counts", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.background_fraction) {
            return Err(Error::invalid("simulation.background_fraction", "must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Input files for `recon`, `fit` and `metrics`; defaults point at the
/// outputs of `simulate` in the output directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputsConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sinograms: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    /// Where `.sysm` files are cached; defaults to the output directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix_cache: Option<PathBuf>,
    #[serde(default)]
    pub geometry: Geometry2D,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub input: InputFunction,
    #[serde(default)]
    pub phantom: RegionParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimulationConfig>,
    #[serde(default)]
    pub recon: ReconConfig,
    #[serde(default = "default_checkpoints")]
    pub checkpoints: Vec<usize>,
    #[serde(default)]
    pub betas: Vec<f64>,
    #[serde(default)]
    pub inputs: InputsConfig,
    /// Write per-voxel fit diagnostics.
    #[serde(default)]
    pub verbose: bool,
}

fn default_out() -> PathBuf {
    PathBuf::from("dynpet-out")
}

pub fn default_checkpoints() -> Vec<usize> {
    vec![1, 10, 25, 50, 100]
}

impl Default for RunConfig {
    fn default() -> Self {
        toml::from_str("").expect("empty config uses defaults")
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    /// Load TOML, or the `config` member of a JSON run manifest.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = if path.extension().is_some_and(|e| e == "json") {
            #[derive(Deserialize)]
            struct Manifest {
                config: RunConfig,
            }
            serde_json::from_str::<Manifest>(&text)
                .map_err(|e| Error::Config {
                    path: path.to_path_buf(),
                    message: format!("line {}: {e}", e.line()),
                })?
                .config
        } else {
            RunConfig::from_toml_str(&text, path)?
        };
        cfg.validate().map_err(|e| Error::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        let schedule = self.schedule.build()?;
        self.input.validate(schedule.end())?;
        self.phantom.validate()?;
        if let Some(sim) = &self.simulation {
            sim.validate()?;
        }
        self.recon.validate()?;
        if self.checkpoints.contains(&0) {
            return Err(Error::invalid("checkpoints", "cycles are numbered from 1"));
        }
        Ok(())
    }

    pub fn matrix_dir(&self) -> &Path {
        self.matrix_cache.as_deref().unwrap_or(&self.out_dir)
    }

    pub fn sinogram_path(&self) -> PathBuf {
        self.inputs.sinograms.clone().unwrap_or_else(|| self.out_dir.join("sinograms.dpt"))
    }

    pub fn truth_path(&self) -> PathBuf {
        self.inputs.truth.clone().unwrap_or_else(|| self.out_dir.join("truth.dpt"))
    }
}
