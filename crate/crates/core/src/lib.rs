//! Monocular depth estimation with adaptive depth bins, a pyramid scene
//! transformer bottleneck and distribution-aligned two-stage training.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the bottom of this file name the common instantiations.

pub mod bins;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod optim;
pub mod pst;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod types;

pub use checkpoint::Checkpoint;
pub use data::SceneSample;
pub use error::{Error, Result};
pub use losses::StageConfig;
pub use metrics::DriftReport;
pub use network::{DaNet, NetworkConfig};
pub use scalar::Scalar;
pub use train::{TrainConfig, Trainer};
pub use types::{BinPartition, BinProbabilityMap, DepthMap, DepthRange, RgbImage};

pub type DaNet32 = DaNet<f32>;
pub type DaNet64 = DaNet<f64>;
pub type DepthMap32 = DepthMap<f32>;
pub type DepthMap64 = DepthMap<f64>;
pub type Checkpoint32 = Checkpoint<f32>;
pub type Checkpoint64 = Checkpoint<f64>;
pub type Trainer32 = Trainer<f32>;
pub type Trainer64 = Trainer<f64>;
pub type SceneSample32 = SceneSample<f32>;
pub type SceneSample64 = SceneSample<f64>;
