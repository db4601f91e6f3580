//! Desk-scale lesion inpainting pipeline: synthetic endoscopy-like data,
//! pseudo-mask geometry, a fixed DCT latent codec, a small inpainting
//! diffusion model trained with a lesion-weighted loss, a retrieval-based
//! mask proposer and the evaluation metrics used to check all of it.

pub mod codec;
pub mod diffusion;
pub mod error;
pub mod features;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod raster;
pub mod retrieval;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use codec::{decode, encode, Latent, LatentMask};
pub use diffusion::checkpoint::Checkpoint;
pub use diffusion::model::{DenoiserInput, DenoiserModel, ModelArch};
pub use diffusion::optim::{OptimConfig, TrainState};
pub use diffusion::sampler::{ddim_sample, ddpm_sample, SamplerConfig, SamplerKind};
pub use diffusion::schedule::Schedule;
pub use diffusion::train::{train, LossRecord, ScheduleConfig, TrainConfig};
pub use error::{Error, Result};
pub use features::{DatabaseEntry, FeatureDB, FeatureGrid, GlobalFeature};
pub use geometry::{MaskConfig, Polygon};
pub use raster::{BBox, BinaryMask, GrayImage};
pub use retrieval::{ClusterParams, MaskProposal, Match};
pub use synth::{DatasetSample, Label, Prompt, SynthConfig};
pub use tensor::Tensor3;
