//! Implicit feature networks for 3D shape reconstruction and completion.
//!
//! The crate covers the whole pipeline: synthetic watertight shapes and
//! their inputs (voxel grids, point clouds, depth-culled partial scans),
//! a small reverse-mode autodiff engine, the multi-scale feature-grid
//! encoder with its point-wise decoder, training-sample generation,
//! Adam training, marching-cubes meshing and evaluation metrics.

pub mod autodiff;
pub mod codec;
pub mod geometry;
pub mod mesher;
pub mod metrics;
pub mod model;
pub mod sampler;
pub mod trainer;
