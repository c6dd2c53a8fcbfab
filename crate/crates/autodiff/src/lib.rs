//! Reverse-mode automatic differentiation for small convolutional networks.
//!
//! A [`Tape`] records operations on [`Var`] handles; [`Tape::backward`]
//! replays them in reverse. Everything runs in `f64` on one thread, so a
//! computation repeated with the same inputs is bit-identical.

pub mod check;
pub mod nn;
pub mod ops;
pub mod params;
pub mod tape;

pub use nn::ConvGeometry;
pub use params::{Adam, AdamConfig, Binding, ParamId, ParamStore};
pub use tape::{sum_to, Array, Grads, Tape, Var};
