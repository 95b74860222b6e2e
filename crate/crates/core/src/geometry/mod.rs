//! Meshes, point clouds and voxel grids over the canonical cube
//! `D = [-0.5, 0.5]^3`, plus the inside/outside oracle and the synthetic
//! shape generator.
//!
//! A grid of resolution `K` covers `D` exactly; cell `(i, j, k)` has its
//! center at `-0.5 + (i + 0.5) / K` along each axis. Linear cell indices are
//! x-fastest: `i + K * (j + K * k)`.

mod bvh;
mod depth;
pub mod io;
mod mesh;
mod oracle;
mod sampling;
pub mod synthetic;
mod voxel;

use thiserror::Error;

use crate::codec::DecodeError;

pub use bvh::{Bvh, RayHit};
pub use depth::depth_cull;
pub use mesh::{normalize, ClosednessReport, Transform, TriMesh};
pub use oracle::{occupancy_oracle, OccupancyOracle};
pub use sampling::{sample_surface, sample_surface_with_faces, PointCloud};
pub use synthetic::{gen_synthetic, Capsule, ShapeKind, ShapeParams, SyntheticShape};
pub use voxel::{voxelize_mesh, voxelize_points, VoxelGrid};

pub type Vec3 = nalgebra::Vector3<f64>;

/// Half edge length of the canonical cube.
pub const DOMAIN_HALF: f64 = 0.5;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("mesh is empty")]
    EmptyMesh,
    #[error("mesh has zero extent (all vertices coincide)")]
    ZeroExtent,
    #[error("face {face} references vertex {index} but the mesh has {vertex_count} vertices")]
    FaceIndex {
        face: usize,
        index: usize,
        vertex_count: usize,
    },
    #[error("mesh is not watertight: {0}")]
    NotWatertight(ClosednessReport),
    #[error("ray casting for point {point_index} stayed ambiguous after all retries")]
    RetryExhausted { point_index: usize },
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

pub type Result<T, E = GeometryError> = std::result::Result<T, E>;

/// Center of cell `index` along one axis of a resolution-`k` grid.
#[inline]
pub fn cell_center(index: usize, k: usize) -> f64 {
    -DOMAIN_HALF + (index as f64 + 0.5) / k as f64
}

/// Centers of all cells of a resolution-`k` grid, x-fastest.
pub fn grid_centers(k: usize) -> Vec<Vec3> {
    let mut out = Vec::with_capacity(k * k * k);
    for z in 0..k {
        for y in 0..k {
            for x in 0..k {
                out.push(Vec3::new(cell_center(x, k), cell_center(y, k), cell_center(z, k)));
            }
        }
    }
    out
}

/// True if `p` lies in the closed canonical cube.
pub fn in_domain(p: &Vec3) -> bool {
    p.iter().all(|c| (-DOMAIN_HALF..=DOMAIN_HALF).contains(c))
}

pub fn clamp_to_domain(p: &Vec3) -> Vec3 {
    p.map(|c| c.clamp(-DOMAIN_HALF, DOMAIN_HALF))
}
