//! The declarative run configuration.

use std::path::{Path, PathBuf};

use knav_core::dataset::CollectionConfig;
use knav_core::mpc::MpcConfig;
use knav_core::nav::NavConfig;
use knav_core::plant::PlantParams;
use knav_core::sysid::{FitMode, LiftSpec, DEFAULT_HORIZON, DEFAULT_RCOND, DEFAULT_SEQUENCES};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed: training collection, window sampling and navigation
    /// scenarios derive from it.
    pub seed: u64,
    /// Seed of the validation collection; `seed + 1` when unset.
    pub validation_seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub plant: PlantParams,
    /// Collection settings; the seed field is replaced by the master seed.
    pub collection: CollectionConfig,
    pub fit: FitSection,
    pub eval: EvalSection,
    pub mpc: MpcConfig,
    pub nav: NavSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSection {
    pub lifts: Vec<LiftSpec>,
    /// Training window length.
    pub window: usize,
    pub rcond: f64,
    pub mode: FitMode,
}

impl Default for FitSection {
    fn default() -> Self {
        Self {
            lifts: vec![
                LiftSpec::Componentwise,
                LiftSpec::Identity,
                LiftSpec::Poly3,
                LiftSpec::TimeDelay(10),
                LiftSpec::TimeDelay(30),
            ],
            window: 100,
            rcond: DEFAULT_RCOND,
            mode: FitMode::Full,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub sequences: usize,
    pub horizon: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            sequences: DEFAULT_SEQUENCES,
            horizon: DEFAULT_HORIZON,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NavSection {
    pub maps: Vec<String>,
    /// Episodes per map; each map's default when unset.
    pub runs: Option<usize>,
    /// Lift of the model file used when no model is given on the command line.
    pub model: LiftSpec,
    #[serde(flatten)]
    pub robot: NavConfig,
}

impl Default for NavSection {
    fn default() -> Self {
        Self {
            maps: vec!["corridor1".into(), "corridor2".into(), "maze75".into(), "maze70".into()],
            runs: None,
            model: LiftSpec::Identity,
            robot: NavConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.plant.validate()?;
        self.collection.step_counts(self.plant.dt)?;
        for lift in &self.fit.lifts {
            lift.validate()?;
        }
        if self.fit.window < 2 {
            return Err(CliError::config("fit window must be at least 2"));
        }
        if self.eval.sequences == 0 || self.eval.horizon == 0 {
            return Err(CliError::config("eval sequences and horizon must be positive"));
        }
        self.mpc.validate()?;
        self.nav.robot.validate()?;
        if self.nav.runs == Some(0) {
            return Err(CliError::config("nav runs must be at least 1"));
        }
        Ok(())
    }

    pub fn training_collection(&self) -> CollectionConfig {
        CollectionConfig {
            seed: self.seed,
            ..self.collection.clone()
        }
    }

    pub fn validation_collection(&self) -> CollectionConfig {
        CollectionConfig {
            seed: self.validation_seed.unwrap_or(self.seed.wrapping_add(1)),
            ..self.collection.clone()
        }
    }
}
