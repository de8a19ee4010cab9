//! Core algorithms for learning an inverse of a black-box data protection
//! from leaked (clean, protected) pairs.
//!
//! The crate is `no_std` with `alloc`. Everything here is a pure function of
//! its inputs and explicit seeds; file formats, dataset folders, experiment
//! orchestration and the command line live in the `bridgepure` crate.
//!
//! - [`bridge_math`]: linear VE/VP schedules, transition kernels, Doob
//!   h-function, pinned bridge marginals and analytic scores.
//! - [`score_model`]: endpoint-conditioned denoiser and its score-matching
//!   training loop.
//! - [`sampler`]: hybrid Euler–Maruyama / Heun integration of the reverse
//!   bridge, i.e. purification.
//! - [`protections`]: stand-in availability attacks and Gaussian
//!   pre-processing.
//! - [`metrics`], [`classifier`]: fidelity metrics and the downstream
//!   classifier used to measure availability.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod bridge_math;
pub mod classifier;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod pairing;
pub mod protections;
pub mod rng;
pub mod sampler;
pub mod score_model;
pub mod synth;

pub use error::{Error, Result};
