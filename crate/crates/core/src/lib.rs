//! Face presentation-attack detection on 3D point clouds.
//!
//! The pipeline runs in four stages:
//!
//! 1. [`cloudio`] reads ASCII PLY / XYZ clouds, normalizes them into the unit
//!    cube and produces augmented copies.
//! 2. [`voxel`] turns a normalized cloud into a binary occupancy grid.
//! 3. [`tengine`] is a small dense tensor engine with reverse-mode autodiff;
//!    [`voxatnnet`] builds the 3D convolutional attention network on top of it
//!    and trains it with SGD + momentum.
//! 4. [`padeval`] computes APCER / BPCER / D-EER and DET curves and produces
//!    the intra / inter / both train-test protocol splits.
//!
//! [`synthface`] generates labeled synthetic face clouds for experiments that
//! do not have access to captured data.

pub mod cloudio;
pub mod error;
pub mod padeval;
pub mod synthface;
pub mod tengine;
pub mod voxatnnet;
pub mod voxel;

pub use error::{Error, Result};

use rand::{RngCore, SeedableRng};

/// Deterministic child seed for `tag` under `parent`.
pub fn derive_seed(parent: u64, tag: u64) -> u64 {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(parent);
    rng.set_stream(tag);
    rng.next_u64()
}
