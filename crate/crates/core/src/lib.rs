//! Controllable text-to-video diffusion at toy scale.
//!
//! A procedural moving-shape corpus with exact depth and edge maps, a
//! per-frame latent codec, a spatial-temporal UNet with a control branch,
//! residual-based noise initialization, DDIM with dual classifier-free
//! guidance, first-frame conditioned and auto-regressive sampling, and metrics.

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod codec;
pub mod conditioning;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod noise_init;
pub mod pipeline;

pub use codec::{Codec, CodecConfig, CodecMode, LatentSequence};
pub use conditioning::{Context, TextEncoder, Vocabulary};
pub use data::{ControlKind, SceneSampler, SceneSpec, VideoSample};
pub use denoiser::{Denoiser, DenoiserConfig, DenoiserInput};
pub use diffusion::{DiffusionSchedule, GuidanceConfig, GuidanceMode, NoisePredictor};
pub use error::{Error, Result};
pub use metrics::{AttributeClassifier, EvalReport};
pub use noise_init::{InitialNoise, ResidualMasks};
pub use pipeline::{Dataset, ModelConfig, SampleRequest, Sampler, TrainConfig, Trainer, VideoModel};
