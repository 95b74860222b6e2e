//! Volumetric IoU, Chamfer-L2 and normal consistency between meshes.

mod kdtree;

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

pub use kdtree::{brute_force_nearest, KdTree};

use crate::geometry::{sample_surface, GeometryError, OccupancyOracle, PointCloud, TriMesh, Vec3};

/// Relative padding of the IoU sampling box on each side.
const BOX_PADDING: f64 = 0.05;
/// Mixed into the seed so volume samples do not reuse surface draws.
const VOLUME_STREAM: u64 = 0x766f_6c75_6d65_0001;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("{0} mesh is empty")]
    EmptyMesh(&'static str),
    #[error("no sample falls inside either mesh")]
    EmptyUnion,
    #[error("sample count must be positive")]
    NoSamples,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T, E = MetricError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricConfig {
    /// Volume samples for IoU.
    pub iou_points: usize,
    /// Surface samples per mesh for Chamfer and normal consistency.
    pub surface_points: usize,
    pub seed: u64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            iou_points: 100_000,
            surface_points: 100_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub iou: f64,
    /// Squared canonical units.
    pub chamfer_l2: f64,
    pub normal_consistency: f64,
    pub iou_points: usize,
    pub surface_points: usize,
    pub seed: u64,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "iou,chamfer_l2,normal_consistency,iou_points,surface_points,seed";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.iou, self.chamfer_l2, self.normal_consistency, self.iou_points, self.surface_points, self.seed
        )
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "IoU                 {:.4}", self.iou)?;
        writeln!(f, "Chamfer-L2          {:.6e}", self.chamfer_l2)?;
        writeln!(f, "Normal consistency  {:.4}", self.normal_consistency)?;
        write!(
            f,
            "samples             {} volume, {} surface, seed {}",
            self.iou_points, self.surface_points, self.seed
        )
    }
}

fn labels(mesh: &TriMesh, points: &[Vec3]) -> Result<Vec<bool>> {
    // an empty reconstruction encloses nothing
    if mesh.faces.is_empty() {
        return Ok(vec![false; points.len()]);
    }
    Ok(OccupancyOracle::new(mesh)?.classify(points)?)
}

/// Monte-Carlo IoU: uniform samples in the padded bounding box of both
/// meshes, labelled against each. Sampling a superset of the union keeps
/// the ratio unbiased.
pub fn iou(pred: &TriMesh, gt: &TriMesh, n_points: usize, seed: u64) -> Result<f64> {
    if n_points == 0 {
        return Err(MetricError::NoSamples);
    }
    let (lo, hi) = [pred, gt]
        .iter()
        .filter_map(|m| m.bounding_box())
        .reduce(|(a, b), (c, d)| (a.inf(&c), b.sup(&d)))
        .ok_or(MetricError::EmptyUnion)?;
    let pad = (hi - lo) * BOX_PADDING;
    let (lo, size) = (lo - pad, hi - lo + 2.0 * pad);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ VOLUME_STREAM);
    let points: Vec<Vec3> = (0..n_points)
        .map(|_| lo + Vec3::new(rng.random(), rng.random(), rng.random()).component_mul(&size))
        .collect();
    let (a, b) = (labels(pred, &points)?, labels(gt, &points)?);
    let both = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
    let either = a.iter().zip(&b).filter(|(x, y)| **x || **y).count();
    if either == 0 {
        return Err(MetricError::EmptyUnion);
    }
    Ok(both as f64 / either as f64)
}

fn surface(mesh: &TriMesh, name: &'static str, n: usize, seed: u64) -> Result<PointCloud> {
    if mesh.faces.is_empty() {
        return Err(MetricError::EmptyMesh(name));
    }
    if n == 0 {
        return Err(MetricError::NoSamples);
    }
    Ok(sample_surface(mesh, n, seed)?)
}

/// Surface samples of one mesh indexed for nearest-neighbor queries.
struct SurfaceSamples {
    tree: KdTree,
}

impl SurfaceSamples {
    fn new(mesh: &TriMesh, name: &'static str, n: usize, seed: u64) -> Result<Self> {
        let cloud = surface(mesh, name, n, seed)?;
        let normals = cloud.normals.expect("surface samples carry normals");
        Ok(Self {
            tree: KdTree::with_normals(cloud.points, normals),
        })
    }

    /// Mean squared distance and mean absolute normal cosine from these
    /// samples to their nearest neighbors in `other`.
    fn one_sided(&self, other: &Self) -> (f64, f64) {
        let pairs: Vec<(f64, f64)> = self
            .tree
            .points()
            .par_iter()
            .enumerate()
            .map(|(i, p)| {
                let (j, d2) = other.tree.nearest(p).expect("non-empty");
                let cos = self
                    .tree
                    .normal(i)
                    .expect("normals")
                    .dot(other.tree.normal(j).expect("normals"));
                (d2, cos.abs())
            })
            .collect();
        let n = pairs.len() as f64;
        let (d, c) = pairs.iter().fold((0.0, 0.0), |(a, b), (d, c)| (a + d, b + c));
        (d / n, c / n)
    }
}

fn both_ways(pred: &TriMesh, gt: &TriMesh, n_points: usize, seed: u64) -> Result<(f64, f64)> {
    let a = SurfaceSamples::new(pred, "predicted", n_points, seed)?;
    let b = SurfaceSamples::new(gt, "ground-truth", n_points, seed)?;
    let (d_ab, c_ab) = a.one_sided(&b);
    let (d_ba, c_ba) = b.one_sided(&a);
    Ok(((d_ab + d_ba) / 2.0, (c_ab + c_ba) / 2.0))
}

/// Symmetric mean squared nearest-sample distance; both meshes are sampled
/// with the same seed.
pub fn chamfer_l2(pred: &TriMesh, gt: &TriMesh, n_points: usize, seed: u64) -> Result<f64> {
    Ok(both_ways(pred, gt, n_points, seed)?.0)
}

/// Mean absolute cosine between each sample's normal and the normal of its
/// nearest sample on the other mesh, averaged over both directions.
pub fn normal_consistency(pred: &TriMesh, gt: &TriMesh, n_points: usize, seed: u64) -> Result<f64> {
    Ok(both_ways(pred, gt, n_points, seed)?.1)
}

/// Mean squared distance from each point of `from` to the nearest of `to`.
pub fn one_sided_chamfer(from: &[Vec3], to: &[Vec3]) -> Result<f64> {
    if from.is_empty() || to.is_empty() {
        return Err(MetricError::NoSamples);
    }
    let tree = KdTree::new(to.to_vec());
    let d: Vec<f64> = from.par_iter().map(|p| tree.nearest(p).expect("non-empty").1).collect();
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// All three metrics with one seed; surface samples are shared between
/// Chamfer and normal consistency.
pub fn evaluate(pred: &TriMesh, gt: &TriMesh, cfg: &MetricConfig) -> Result<MetricReport> {
    let (chamfer, nc) = both_ways(pred, gt, cfg.surface_points, cfg.seed)?;
    Ok(MetricReport {
        iou: iou(pred, gt, cfg.iou_points, cfg.seed)?,
        chamfer_l2: chamfer,
        normal_consistency: nc,
        iou_points: cfg.iou_points,
        surface_points: cfg.surface_points,
        seed: cfg.seed,
    })
}
