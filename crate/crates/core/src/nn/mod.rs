//! A small CPU neural-network toolkit with hand-written backward passes.
//!
//! Activations are row-major `f32` buffers; convolutional activations use
//! `[n, c, h, w]`. Parameters live in a [`ParamStore`] so that training
//! weights, their exponential average and optimizer moments can be swapped
//! and serialized independently of the layer graph.

mod ops;
mod optim;
mod params;

pub use ops::*;
pub use optim::{Adam, Ema, Sgd};
pub use params::{Grads, Param, ParamId, ParamStore};
