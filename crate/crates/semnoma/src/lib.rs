//! Multi-user uplink image transmission over simulated NOMA channels.
//!
//! The pipeline has four pieces that can be used independently or end to end:
//!
//! * [`channel`] — a differentiable channel simulator: real-feature to
//!   complex-symbol mapping under an average power constraint, AWGN and
//!   block-fading Rayleigh channels, non-orthogonal superposition of several
//!   users onto the same resources, and the orthogonal reference transmission.
//! * [`model`] — a ConvNeXt-style joint source-channel codec (shared encoder,
//!   per-user decoders, learned user embeddings) whose features are modulated
//!   by an attention module conditioned on channel side information.
//! * [`distill`] — two-stage training: an interference-free orthogonal
//!   teacher, then a NOMA student optimized with restoration, feature-affinity
//!   and cross-head distillation losses.
//! * [`diffusion`] — forward diffusion, DDIM reverse sampling and the
//!   error-contraction refinement stage that polishes codec outputs with a
//!   small unconditional denoiser.
//!
//! Supporting modules: [`data`] (CIFAR-10 binary archives, image directories,
//! multi-user grouping), [`metrics`] (PSNR/SSIM plus a pluggable perceptual
//! metric registry), [`nn`] (tensor plumbing over candle), [`ckpt`]
//! (single-file checkpoint container), [`config`]/[`run`] (experiment
//! configuration and orchestration used by the CLI and the examples).
//!
//! Everything is CPU-only, `f32`, and deterministic: all randomness flows
//! from a single root seed fanned out into named streams (see [`rng`]).

pub mod channel;
pub mod ckpt;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod distill;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod run;

pub use error::{Error, Result};
