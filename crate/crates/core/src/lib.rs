//! Landscape analysis for deep linear networks trained with the square loss.
//!
//! The crate constructs critical points of `L(W) = ‖W_H⋯W_1 X − Y‖_F²`,
//! classifies them as global minimizers, strict saddles or non-strict saddles,
//! produces explicit negative-curvature directions, and runs the saddle-escape
//! experiment comparing both kinds of saddle.

pub mod classifier;
pub mod critical_points;
pub mod curvature;
pub mod data;
pub mod error;
pub mod experiments;
pub mod io;
pub mod linalg;
pub mod network;

pub use error::{Error, Result};
