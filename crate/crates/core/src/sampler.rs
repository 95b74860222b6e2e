//! Training samples: surface points displaced by isotropic Gaussian noise
//! at two scales, labelled by the occupancy oracle, plus the on-disk
//! dataset container and mini-batch subsampling.

use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::codec::{DecodeError, Reader, Writer};
use crate::geometry::{clamp_to_domain, sample_surface, GeometryError, OccupancyOracle, TriMesh, Vec3, VoxelGrid};

const MAGIC: &[u8; 4] = b"IFDS";
const VERSION: u32 = 1;
/// Mixed into the seed so noise and surface draws use separate streams.
const NOISE_STREAM: u64 = 0x6e6f_6973_6500_0001;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid sampler configuration: {0}")]
    Config(String),
    #[error("subsample of {requested} exceeds the {available} samples of shape {shape}")]
    SubsampleTooLarge {
        shape: usize,
        requested: usize,
        available: usize,
    },
    #[error("batch refers to record {0}, which does not exist")]
    UnknownRecord(usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = SamplerError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    /// Samples per shape.
    pub count: usize,
    pub sigma1: f64,
    pub sigma2: f64,
    /// Fraction of samples displaced with `sigma1`.
    pub ratio: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            count: 50_000,
            sigma1: 0.01,
            sigma2: 0.1,
            ratio: 0.5,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(SamplerError::Config("sample count must be at least 1".into()));
        }
        if !(self.sigma1 > 0.0 && self.sigma1 < self.sigma2 && self.sigma2.is_finite()) {
            return Err(SamplerError::Config(format!(
                "need 0 < sigma1 < sigma2, got {} and {}",
                self.sigma1, self.sigma2
            )));
        }
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(SamplerError::Config(format!("ratio {} outside [0, 1]", self.ratio)));
        }
        Ok(())
    }

    /// Number of samples drawn with `sigma1`.
    pub fn near_count(&self) -> usize {
        ((self.ratio * self.count as f64).round() as usize).min(self.count)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainingSample {
    pub p: Vec3,
    pub occupied: bool,
}

/// One shape of a dataset: its id, where the ground truth lives, the
/// encoder input and the training samples.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeRecord {
    pub id: String,
    pub mesh_path: String,
    pub voxels: VoxelGrid,
    /// Source point cloud when the input was voxelized from points.
    pub points: Option<Vec<Vec3>>,
    pub samples: Vec<TrainingSample>,
}

/// Surface samples plus Gaussian displacement, clamped into the cube and
/// labelled by the occupancy oracle. The first `near_count` samples use
/// `sigma1`, the rest `sigma2`.
pub fn sample_training_points(mesh: &TriMesh, cfg: &SamplerConfig) -> Result<Vec<TrainingSample>> {
    cfg.validate()?;
    let oracle = OccupancyOracle::new(mesh)?;
    let surface = sample_surface(mesh, cfg.count, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ NOISE_STREAM);
    let near = cfg.near_count();
    let n1 = Normal::new(0.0, cfg.sigma1).expect("validated sigma");
    let n2 = Normal::new(0.0, cfg.sigma2).expect("validated sigma");
    let points: Vec<Vec3> = surface
        .points
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let dist = if i < near { &n1 } else { &n2 };
            let noise = Vec3::new(dist.sample(&mut rng), dist.sample(&mut rng), dist.sample(&mut rng));
            clamp_to_domain(&(s + noise))
        })
        .collect();
    let labels = oracle.classify(&points)?;
    Ok(points
        .into_iter()
        .zip(labels)
        .map(|(p, occupied)| TrainingSample { p, occupied })
        .collect())
}

pub fn dataset_to_bytes(records: &[ShapeRecord]) -> Vec<u8> {
    let mut w = Writer::new();
    w.magic(MAGIC);
    w.u32(VERSION);
    w.u32(records.len() as u32);
    for r in records {
        w.string(&r.id);
        w.string(&r.mesh_path);
        w.u32(r.voxels.resolution() as u32);
        w.bytes(r.voxels.data());
        match &r.points {
            Some(pts) => {
                w.u8(1);
                w.u32(pts.len() as u32);
                for p in pts {
                    w.f64s(p.as_slice());
                }
            }
            None => w.u8(0),
        }
        w.u32(r.samples.len() as u32);
        for s in &r.samples {
            w.f64s(s.p.as_slice());
            w.u8(s.occupied as u8);
        }
    }
    w.into_bytes()
}

fn read_vec3(r: &mut Reader<'_>) -> Result<Vec3, DecodeError> {
    let v = r.f64s(3)?;
    Ok(Vec3::new(v[0], v[1], v[2]))
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Vec<ShapeRecord>> {
    let mut r = Reader::new(bytes);
    r.expect_magic(MAGIC)?;
    r.expect_version(VERSION)?;
    let n = r.u32()? as usize;
    let mut records = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let id = r.string()?;
        let mesh_path = r.string()?;
        let res_at = r.offset();
        let res = r.u32()? as usize;
        let cells = res.checked_pow(3).filter(|_| res >= 2).ok_or(DecodeError::Invalid {
            offset: res_at,
            message: format!("voxel resolution {res}"),
        })?;
        let voxels = VoxelGrid::from_data(res, r.take(cells)?.to_vec()).map_err(|e| DecodeError::Invalid {
            offset: res_at,
            message: e.to_string(),
        })?;
        let points = match r.u8()? {
            0 => None,
            1 => {
                let count = r.u32()? as usize;
                Some((0..count).map(|_| read_vec3(&mut r)).collect::<Result<_, _>>()?)
            }
            flag => return Err(r.invalid(format!("bad point-cloud flag {flag}")).into()),
        };
        let count = r.u32()? as usize;
        let mut samples = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let p = read_vec3(&mut r)?;
            let occupied = match r.u8()? {
                0 => false,
                1 => true,
                v => return Err(r.invalid(format!("label {v} is not 0 or 1")).into()),
            };
            samples.push(TrainingSample { p, occupied });
        }
        records.push(ShapeRecord {
            id,
            mesh_path,
            voxels,
            points,
            samples,
        });
    }
    if !r.is_empty() {
        return Err(r.invalid("trailing bytes after the last record").into());
    }
    Ok(records)
}

pub fn write_dataset(path: impl AsRef<Path>, records: &[ShapeRecord]) -> Result<()> {
    std::fs::write(path, dataset_to_bytes(records))?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<ShapeRecord>> {
    dataset_from_bytes(&std::fs::read(path)?)
}

/// Subsampled points of one shape in a mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchItem {
    /// Index into the record list.
    pub record: usize,
    pub points: Vec<Vec3>,
    /// 1.0 inside, 0.0 outside.
    pub labels: Vec<f64>,
}

/// For each shape in `batch_ids`, a fresh uniform subsample of `r_size`
/// of its training samples, drawn without replacement.
pub fn make_batch(
    records: &[ShapeRecord],
    batch_ids: &[usize],
    r_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<BatchItem>> {
    batch_ids
        .iter()
        .map(|&id| {
            let rec = records.get(id).ok_or(SamplerError::UnknownRecord(id))?;
            let s = rec.samples.len();
            if r_size > s || r_size == 0 {
                return Err(SamplerError::SubsampleTooLarge {
                    shape: id,
                    requested: r_size,
                    available: s,
                });
            }
            let picked = sample(rng, s, r_size);
            let (points, labels) = picked
                .iter()
                .map(|i| {
                    let t = &rec.samples[i];
                    (t.p, t.occupied as u8 as f64)
                })
                .unzip();
            Ok(BatchItem {
                record: id,
                points,
                labels,
            })
        })
        .collect()
}
