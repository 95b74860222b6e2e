//! Dense occupancy evaluation on a regular grid and isosurface extraction.

mod marching;
mod tables;

use std::path::Path;

use thiserror::Error;

pub use marching::extract_isosurface;

use crate::codec::{DecodeError, Reader, Writer};
use crate::geometry::{grid_centers, Transform, TriMesh, VoxelGrid};
use crate::model::{decode_points, encode, ModelError, ModelParams};

const MAGIC: &[u8; 4] = b"IFFD";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MesherError {
    #[error("invalid mesher configuration: {0}")]
    Config(String),
    #[error(
        "decoding {chunk} points per chunk needs about {needed} bytes, over the budget of {budget}; use a smaller chunk"
    )]
    MemoryBudget { chunk: usize, needed: usize, budget: usize },
    #[error("field value {value} at cell {index} is not a probability")]
    InvalidField { index: usize, value: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = MesherError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq)]
pub struct MesherConfig {
    /// Output grid resolution M.
    pub resolution: usize,
    /// Iso threshold t; values `>= t` are inside.
    pub threshold: f64,
    /// Points decoded per batch.
    pub chunk: usize,
    /// Upper bound on decoder working memory across all threads, in bytes.
    pub memory_budget: usize,
}

impl Default for MesherConfig {
    fn default() -> Self {
        Self {
            resolution: 128,
            threshold: 0.5,
            chunk: 4096,
            memory_budget: 1 << 31,
        }
    }
}

impl MesherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 2 {
            return Err(MesherError::Config(format!(
                "resolution {} is below 2",
                self.resolution
            )));
        }
        check_threshold(self.threshold)?;
        if self.chunk == 0 {
            return Err(MesherError::Config("chunk size must be positive".into()));
        }
        Ok(())
    }
}

fn check_threshold(t: f64) -> Result<()> {
    if !(t > 0.0 && t < 1.0) {
        return Err(MesherError::Config(format!("threshold {t} outside (0, 1)")));
    }
    Ok(())
}

/// Probabilities at the cell centers of an `M^3` grid over the cube, x-fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyField {
    resolution: usize,
    values: Vec<f64>,
}

impl OccupancyField {
    pub fn new(resolution: usize, values: Vec<f64>) -> Result<Self> {
        if resolution < 2 || values.len() != resolution.pow(3) {
            return Err(MesherError::Config(format!(
                "{} values do not fill a {resolution}^3 field",
                values.len()
            )));
        }
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(MesherError::InvalidField { index, value });
        }
        Ok(Self { resolution, values })
    }

    /// Samples `f` at every cell center.
    pub fn from_fn(resolution: usize, f: impl Fn(&crate::geometry::Vec3) -> f64) -> Result<Self> {
        Self::new(resolution, grid_centers(resolution).iter().map(f).collect())
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn inside_count(&self, t: f64) -> usize {
        self.values.iter().filter(|&&v| v >= t).count()
    }

    /// "IFFD" dump: magic, version, resolution, then f32 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.magic(MAGIC);
        w.u32(VERSION);
        w.u32(self.resolution as u32);
        for &v in &self.values {
            w.f32(v as f32);
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(MAGIC)?;
        r.expect_version(VERSION)?;
        let m = r.u32()? as usize;
        let cells = m.checked_pow(3).ok_or_else(|| r.invalid(format!("resolution {m}")))?;
        let values = (0..cells)
            .map(|_| r.f32().map(f64::from))
            .collect::<Result<Vec<_>, _>>()?;
        if !r.is_empty() {
            return Err(r.invalid("trailing bytes after field").into());
        }
        Self::new(m, values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Rough decoder working set for one chunk: feature rows plus every
/// hidden activation, in f64.
fn chunk_bytes(params: &ModelParams, chunk: usize) -> usize {
    let cfg = params.config();
    let per_row = cfg.feature_width() + cfg.decoder.hidden.iter().sum::<usize>() * 2 + 2;
    chunk.saturating_mul(per_row).saturating_mul(8)
}

/// Encodes `x` once and decodes every cell center of the output grid.
pub fn evaluate_field(params: &ModelParams, x: &VoxelGrid, cfg: &MesherConfig) -> Result<OccupancyField> {
    cfg.validate()?;
    let needed = chunk_bytes(params, cfg.chunk).saturating_mul(rayon::current_num_threads());
    if needed > cfg.memory_budget {
        return Err(MesherError::MemoryBudget {
            chunk: cfg.chunk,
            needed,
            budget: cfg.memory_budget,
        });
    }
    let grids = encode(params, x)?;
    let values = decode_points(params, &grids, &grid_centers(cfg.resolution), cfg.chunk)?;
    OccupancyField::new(cfg.resolution, values)
}

/// Isosurface of `field` at `t`. An all-inside or all-outside field
/// yields an empty mesh.
pub fn marching_cubes(field: &OccupancyField, t: f64) -> Result<TriMesh> {
    check_threshold(t)?;
    Ok(extract_isosurface(&field.values, field.resolution, t))
}

/// Full inference: field evaluation then meshing. With `to_original`,
/// vertices are mapped back through the inverse of that normalization.
pub fn reconstruct(
    params: &ModelParams,
    x: &VoxelGrid,
    cfg: &MesherConfig,
    to_original: Option<&Transform>,
) -> Result<TriMesh> {
    let field = evaluate_field(params, x, cfg)?;
    let mesh = marching_cubes(&field, cfg.threshold)?;
    Ok(match to_original {
        Some(t) => mesh.transformed(&t.inverse()),
        None => mesh,
    })
}
