//! Elastic latent interface transformer.
//!
//! A DiT-style rectified-flow generator extended with a variable-length
//! latent interface: grouped Read/Write cross-attention layers move
//! information between spatial tokens and a set of shared, importance-ordered
//! latent tokens. The number of retained latents per group is a user-facing
//! compute knob at inference time.
//!
//! The crate is organised around the main moving parts:
//!
//! * [`flow`] — rectified-flow objective, probability path, Euler sampler.
//! * [`backbone`] — DiT blocks and the head/core/tail pipeline.
//! * [`latent`] — grouped latents, tail dropping, budget sampling.
//! * [`guidance`] — CFG / autoguidance / cheap CFG velocity combinators.
//! * [`cost`] — analytic MAC cost model and an instrumented op-count oracle.
//! * [`data`], [`train`] — toy datasets, the zero-padding probe, and the
//!   multi-budget training loop.
//! * [`config`], [`checkpoint`], [`cli`] — run configuration and artifact I/O.

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod flow;
pub mod guidance;
pub mod latent;
pub mod nn;

pub mod probe;
pub mod train;

pub use error::{Error, Result};
