//! Unary-pairwise attention (UPA) for point clouds.
//!
//! The crate is `no_std` (it needs `alloc`) and holds the numerical pieces:
//!
//! * [`tensor`]: dense tensors, a reverse-mode tape, parameters, optimizers
//! * [`geometry`]: point clouds, exact kNN, farthest point sampling, augmentation
//! * [`attention`]: global/local self-attention, unary and pairwise attention,
//!   and the attention blocks that wrap them
//! * [`backbone`]: a small set-abstraction / feature-propagation network
//! * [`analysis`]: Jensen–Shannon divergence statistics over attention maps
//! * [`metrics`]: accuracy and IoU bookkeeping
//!
//! File formats, synthetic data, training, and the command-line tool live in
//! the companion `upa` crate.
#![no_std]

extern crate alloc;

pub mod analysis;
pub mod attention;
pub mod backbone;
mod error;
pub mod geometry;
pub mod gradcheck;
pub mod math;
pub mod metrics;
pub mod tensor;

pub use error::{Error, Result};
