//! Strict JSON run configuration. Every section is optional and falls back
//! to desk-scale defaults; unknown keys anywhere are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize};

use gentron::guidance::GuidanceConfig;
use gentron::model::{GenTronConfig, Variant};
use gentron::schedule::ScheduleConfig;
use gentron::trainer::TrainConfig;

use crate::error::CliError;

pub const SEED_ENV: &str = "GENTRON_SEED";
pub const DEFAULT_SEED: u64 = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub model: GenTronConfig,
    /// Keys given here override [`desk_train`], not `TrainConfig::default`.
    #[serde(deserialize_with = "over_desk_train")]
    pub train: TrainConfig,
    pub schedule: ScheduleConfig,
    pub guidance: GuidanceConfig,
    /// Image dataset directory.
    pub dataset: Option<PathBuf>,
    /// Video dataset directory, for fine-tuning.
    pub video_dataset: Option<PathBuf>,
}

/// Training defaults for desk-scale runs: lr 1e-3 over 2000 steps.
pub fn desk_train() -> TrainConfig {
    TrainConfig { lr: 1e-3, steps: 2000, ..TrainConfig::default() }
}

fn over_desk_train<'de, D: Deserializer<'de>>(d: D) -> Result<TrainConfig, D::Error> {
    let patch = serde_json::Map::<String, serde_json::Value>::deserialize(d)?;
    let mut base = serde_json::to_value(desk_train()).map_err(D::Error::custom)?;
    let fields = base.as_object_mut().expect("struct serializes to an object");
    fields.extend(patch);
    serde_json::from_value(base).map_err(D::Error::custom)
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            model: GenTronConfig::desk(2, 64, Variant::CrossAttention),
            train: desk_train(),
            schedule: ScheduleConfig::default(),
            guidance: GuidanceConfig::default(),
            dataset: None,
            video_dataset: None,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads `path`, or the defaults when no path is given. A missing file
    /// is a usage error.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                Self::parse(&text)
            }
        }
    }

    /// Flag, then config file, then the environment, then the default.
    pub fn resolve_seed(&self, flag: Option<u64>) -> Result<u64, CliError> {
        if let Some(s) = flag.or(self.seed) {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => v.trim().parse().map_err(|_| CliError::Usage(format!("{SEED_ENV}={v} is not a u64"))),
            Err(_) => Ok(DEFAULT_SEED),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let wrap = |e: gentron::Error| CliError::Config(e.to_string());
        self.model.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        self.guidance.validate().map_err(wrap)?;
        self.schedule.build().map_err(wrap)?;
        Ok(())
    }
}
