//! Subject-driven video editing on a toy latent video diffusion model.
//!
//! A source clip is inverted with DDIM, then denoised twice in lockstep: a
//! reconstruction branch under the source prompt records its attention
//! maps, and an edit branch under the edited prompt (optionally fused with
//! a reference-image subject embedding) has its cross-attention maps
//! replaced by the recorded ones, blended across adjacent frames, before
//! the two branches are composited through an attention-derived mask.
//!
//! Every numeric type is generic over [`Scalar`]; the aliases at the crate
//! root fix the `f32` instantiation used for training and sampling.

pub mod autodiff;
pub mod autoencoder;
pub mod checkpoint;
pub mod conditioning;
pub mod config;
pub mod control;
pub mod denoiser;
pub mod error;
pub mod frames;
pub mod gradcheck;
pub mod latent;
pub mod metrics;
pub mod params;
pub mod pipeline;
pub mod scalar;
pub mod schedule;
pub mod synthdata;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Denoiser = denoiser::Denoiser<f32>;
pub type Denoiser64 = denoiser::Denoiser<f64>;
pub type LatentClip = latent::LatentClip<f32>;
pub type LatentClip64 = latent::LatentClip<f64>;
pub type Condition = conditioning::Condition<f32>;
pub type ParamStore = params::ParamStore<f32>;
