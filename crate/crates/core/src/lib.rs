//! Temporally evolving object intrinsics.
//!
//! The crate is organised around the stages of the generation pipeline:
//!
//! - [`field4d`]: the hybrid 4D field (six feature planes fused by Hadamard
//!   product, keyframed multiresolution hash grids, SDF and material heads).
//! - [`gradtape`]: batched reverse-mode differentiation used by every
//!   optimisation in the crate.
//! - [`renderer`]: sphere tracing, Disney-style shading under environment
//!   light, intrinsic AOVs and isosurface export.
//! - [`template`]: the deformable template mesh, its flow-supervised fitting
//!   and the neural state maps derived from it.
//! - [`distill`]: noise schedules, score providers and the distillation loop.
//! - [`io`]: tensor containers, flow files, meshes and images.

pub mod distill;
pub mod error;
pub mod field4d;
pub mod gradtape;
pub mod io;
pub mod math;
pub mod mesh;
pub mod optim;
pub mod renderer;
pub mod schedule;
pub mod template;

pub use error::{Error, Result};
