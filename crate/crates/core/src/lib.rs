//! Core library for multi-scale projected-discriminator GAN training with a
//! FakeTwins self-supervised generator objective.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`graph`]: dense f64 tensors and a reverse-mode tape.
//! - [`rng`]: counter-based deterministic random streams.
//! - [`ssl`]: Barlow Twins / VICReg / NT-Xent objectives.
//! - [`augment`]: differentiable image and latent augmentations.
//! - [`features`]: frozen feature networks and random projection pyramids.
//! - [`nets`]: generator, discriminator bank, projection head, optimizer.
//! - [`losses`]: adversarial, consistency, and FakeTwins objectives.
//! - [`metrics`]: FID/KID/precision-recall/PPL over a frozen embedder.
//! - [`config`], [`data`], [`checkpoint`], [`trainer`]: the training harness.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod rng;
pub mod ssl;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::{Graph, PadMode, Var};
pub use rng::RngStream;
pub use tensor::Tensor;
