//! Minimal reverse-mode automatic differentiation over dense `f64` matrices,
//! plus the Adam optimizer used to train the GAN.

mod adam;
mod matrix;
mod tape;

pub use adam::{AdamConfig, AdamState, Param};
pub use matrix::Matrix;
pub use tape::{Tape, Var};
pub(crate) use tape::sigmoid;


/// Floor applied before taking logs inside loss helpers.
pub const LOG_FLOOR: f64 = 1e-12;
