//! Safemark: traceable generative watermarking at desk scale.
//!
//! The library implements a two-stage pipeline. Stage one is a unified
//! watermark injector/extractor built from a shared graphic encoder, a
//! learned injection convolution, and two architecturally identical
//! decoders (a frozen image generator and a trainable watermark
//! extractor). Stage two is a latent diffuser: lambda-sampling forward
//! diffusion that records a binary traceability key, and key-controlled
//! inverted DDIM denoising that re-injects the watermark at key-marked
//! steps. A prompt trigger selects the watermark from a registry, and an
//! evaluation harness provides metrics, attacks, detection and the
//! experiment suites.
//!
//! Entry points: [`diffuser::generate`] / [`diffuser::extract_watermark`]
//! for the pipeline, [`autoencoder::train_stage1`] and
//! [`diffuser::finetune_stage2`] for training, and [`eval`] for the
//! harness. The `safemark` CLI wraps all of them.

pub mod autoencoder;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod denoiser;
pub mod diffuser;
pub mod error;
pub mod eval;
pub mod image;
pub mod latent;
pub mod ledger;
pub mod nn;
pub mod rng;
pub mod schedule;
pub mod trigger;

pub use error::{Error, Result};
