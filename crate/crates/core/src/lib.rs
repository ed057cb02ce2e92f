//! Temporally tracked point-cloud patches ("t-patches") and the hierarchical
//! network built on top of them.
//!
//! The crate is organised bottom-up:
//!
//! * [`pcseq`] stores point cloud sequences and their PCSQ binary encoding.
//! * [`sampling`] provides farthest point sampling and exact k-nearest
//!   neighbor search (brute force and a uniform hash grid).
//! * [`tpatch`] tracks patches through time and reports temporal collapse.
//! * [`nnkit`] is a small dense-tensor toolkit with hand-written backward
//!   passes, Adam, finite-difference checking and checkpoint I/O.
//! * [`model`] assembles the hierarchical network, its training loop and
//!   per-point GradCAM saliency.
//! * [`dataeval`] generates synthetic labelled sequences and computes the
//!   frame-wise evaluation metrics.
//! * [`config`] parses the flat `key = value` run configuration.

pub mod config;
pub mod dataeval;
mod error;
pub mod model;
pub mod nnkit;
pub mod pcseq;
pub mod sampling;
pub mod tpatch;

pub use error::{Error, Result};

/// A 3D position.
pub type Point3 = [f32; 3];
