//! Synthetic egocentric IMU localization: scene and motion simulation,
//! contrastive encoders, sequential localization and evaluation.

pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod export;
pub mod motion;
pub mod numerics;
pub mod pipeline;
pub mod rng;
pub mod stage1;
pub mod stage2;
pub mod world;
