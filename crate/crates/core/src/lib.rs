//! Self-conditioned GAN training on synthetic 2D Gaussian mixtures.
//!
//! A class-conditional GAN is trained on labels obtained by k-means
//! clustering of real data in the discriminator's own feature space; the
//! partition is refreshed periodically (warm-started and matched to the old
//! labels) or continuously with online k-means. Everything numerical,
//! including reverse-mode differentiation, lives in this crate.

// `!(x > 0.0)` guards are deliberate: NaN must fail them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod clustering;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod models;
pub mod rng;
pub mod trainer;

pub use autodiff::{AdamConfig, AdamState, Matrix, Param, Tape, Var};
pub use error::{Error, Result};
pub use rng::Rng;
pub use trainer::{train, Checkpoint, TrainConfig, Trainer};
