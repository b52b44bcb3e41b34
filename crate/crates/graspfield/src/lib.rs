//! Grasp-success fields on synthetic tabletop scenes.
//!
//! The crate trains a pixel-conditioned neural field that scores gripper
//! poses by their grasp success and finds grasps by running multi-start
//! Adam on candidate poses against that field. Everything is CPU-only,
//! seed-deterministic and 32-bit float.
//!
//! Layout:
//! - [`tensor`]: dense tensors, a reverse-mode tape and Adam.
//! - [`camera`]: pinhole projection, rays, stratified samples.
//! - [`scene`]: prismatic object sets, scene spawning, ground-truth
//!   ray-cast rendering and grasp oracles.
//! - [`field`]: positional encoding, image encoder, field core, grasp
//!   head, volumetric rendering and checkpoints.
//! - [`train`]: novel-view-synthesis pretraining and grasp-head transfer.
//! - [`optim`]: multi-start gradient-based pose optimization.
//! - [`eval`]: task runner, translation-error metrics and report tables.
//! - [`dataset`]: on-disk scene datasets and run manifests.

pub mod camera;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod field;
pub mod optim;
pub mod parallel;
pub mod pipeline;
pub mod scene;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
