//! Unsupervised domain adaptation for point-cloud classification.
//!
//! The pipeline couples two self-supervised contrastive objectives (between
//! augmented point clouds, and between point clouds and their rendered
//! multi-view images) with an optimal-transport alignment loss across
//! source and target batches, on top of a supervised mixup classifier.
//! All numerics, including the autodiff engine and the transport solvers,
//! are implemented in this crate.

pub mod checks;
pub mod config;
pub mod datagen;
pub mod eval;
pub mod error;
pub mod losses;
pub mod models;
pub mod ot;
pub mod par;
pub mod pointcloud;
pub mod renderer;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
