//! Run configuration: every module's settings in one JSON document.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::VelocityConfig;
use crate::checkpoint::config_hash;
use crate::dataset::{DataConfig, GenSettings};
use crate::encoders::EncoderConfig;
use crate::error::{ensure, Error, Result};
use crate::eval::EvalConfig;
use crate::motion::{default_actions, procedural_actions, validate_actions, ActionClass, MotionConfig};
use crate::stage1::Stage1Config;
use crate::stage2::Stage2Config;
use crate::world::WorldConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub motion: MotionConfig,
    pub data: DataConfig,
    pub actions: Vec<ActionClass>,
    pub encoder: EncoderConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub velocity: VelocityConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            world: WorldConfig::default(),
            motion: MotionConfig::default(),
            data: DataConfig::default(),
            actions: default_actions(),
            encoder: EncoderConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            velocity: VelocityConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Larger profile: 800 Hz IMU, 8192-point patches and 35 procedurally
    /// generated action classes on the same 20×20 grid.
    pub fn paper_scale() -> Self {
        let mut c = Self::default();
        c.motion.rate_hz = 800;
        c.encoder.imu_rate = 800;
        c.velocity.imu_rate = 800;
        c.world.patch_points = 8192;
        c.encoder.patch_points = 8192;
        c.world.grid_cells = 20;
        let names: Vec<String> = c.world.anchor_types.iter().map(|t| t.name.clone()).collect();
        c.actions = procedural_actions(35, &names, c.seed);
        c
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::default()),
            "paper-scale" => Ok(Self::paper_scale()),
            other => Err(Error::Config(format!("unknown profile {other:?}; expected desk or paper-scale"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.motion.validate()?;
        self.data.validate()?;
        validate_actions(&self.actions).map_err(|e| Error::Config(e.to_string()))?;
        self.encoder.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.velocity.validate()?;
        self.eval.validate()?;
        ensure!(self.encoder.imu_rate == self.motion.rate_hz, Config, "encoder rate {} differs from IMU rate {}", self.encoder.imu_rate, self.motion.rate_hz);
        ensure!(self.velocity.imu_rate == self.motion.rate_hz, Config, "velocity net rate {} differs from IMU rate {}", self.velocity.imu_rate, self.motion.rate_hz);
        ensure!(self.encoder.patch_points == self.world.patch_points, Config, "encoder expects {} patch points, world produces {}", self.encoder.patch_points, self.world.patch_points);
        ensure!(self.data.sequence_s >= self.stage2.clip_s, Config, "sequences ({} s) shorter than a stage-2 clip ({} s)", self.data.sequence_s, self.stage2.clip_s);
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self)?)
    }

    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }

    /// Settings that determine the generated dataset.
    pub fn gen_settings(&self) -> GenSettings {
        GenSettings { world: self.world.clone(), motion: self.motion.clone(), data: self.data.clone(), actions: self.actions.clone() }
    }

    pub fn dataset_hash(&self) -> Result<String> {
        config_hash(&self.gen_settings())
    }
}
