//! Subject-driven video editing on a latent diffusion backbone, guided by
//! semantic patch features.

pub mod ablation;
pub mod autoencoder;
pub mod checkpoint;
pub mod config;
pub mod denoiser;
pub mod error;
pub mod guidance;
pub mod identity;
pub mod inference;
pub mod io;
pub mod lora;
pub mod metrics;
pub mod motion;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod schedule;
pub mod semantic;
pub mod synth;
pub mod text;

pub use error::{Error, Result};
pub use ablation::{run_ablation, AblationSpec, AblationVariant};
pub use autoencoder::{FrameVideo, LatentVideo, ToyAutoencoder};
pub use checkpoint::Checkpoint;
pub use config::{load_config, RunConfig};
pub use denoiser::{Denoiser, DenoiserConfig};
pub use guidance::{AdapterConfig, AdapterSet, GuidanceStack};
pub use inference::{EditConfig, EditResult};
pub use lora::{LoraDelta, LoraSet};
pub use metrics::MetricRow;
pub use pipeline::{Pipeline, SubjectAnalysis};
pub use schedule::NoiseSchedule;
pub use semantic::{ForegroundMask, SemanticFeatureMap};
