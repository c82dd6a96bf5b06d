//! Next-frame prediction pre-training for point-cloud policies.
//!
//! A history of observed point clouds is encoded into a per-point latent,
//! a conditional denoiser learns to predict the next frame, and the
//! pre-trained encoder is then reused by a behavior-cloning policy.

pub mod cloud;
pub mod config;
pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod encoder;
pub mod env;
pub mod error;
pub mod exec;
pub mod nn;
pub mod probe;
pub mod rng;
pub mod trainer;

pub use cloud::{chamfer_distance, farthest_point_sample, normalize_cloud, Normalization, PointCloud};
pub use dataset::{generate_synthetic, load_demoset, save_demoset, DemoSet, PairIndex, TrainingPair};
pub use denoiser::{AugmentedCloud, Denoiser, DenoiserConfig};
pub use diffusion::{NoiseSchedule, ScheduleConfig};
pub use encoder::{Encoder, EncoderConfig, EncoderKind, LatentLayout, LatentRepresentation};
pub use env::{EnvState, SceneConfig};
pub use error::{Error, Result};
pub use exec::Exec;
pub use trainer::{
    evaluate_prediction, load_checkpoint, pretrain, save_checkpoint, Checkpoint, ConditionMode, PretrainConfig,
};
