use std::path::Path;

use super::network::{mlp_infer, mlp_on_tape, trunk_infer, trunk_on_tape, voxel_tensor};
use super::params::{
    check_shapes, init_tensors, mlp_shapes, read_encoder, read_tensors, read_widths, trunk_shapes, write_encoder,
    write_tensors, write_widths,
};
use super::{EncoderConfig, ModelError, Result};
use crate::autodiff::kernels::sigmoid;
use crate::autodiff::{Tape, Tensor, Var};
use crate::codec::{Reader, Writer};
use crate::geometry::{Vec3, VoxelGrid};

const MAGIC: &[u8; 4] = b"IFBL";
const VERSION: u32 = 1;

/// Global-latent model: the same conv trunk, mean-pooled to one vector
/// `z`, decoded per point from `(z, p)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineConfig {
    pub encoder: EncoderConfig,
    pub hidden: Vec<usize>,
}

impl BaselineConfig {
    /// Latent width plus three coordinates.
    pub fn decoder_input_width(&self) -> usize {
        self.encoder.channels.last().copied().unwrap_or(0) + 3
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineParams {
    config: BaselineConfig,
    tensors: Vec<(String, Tensor)>,
}

impl BaselineParams {
    pub fn shapes(config: &BaselineConfig) -> Vec<(String, Vec<usize>)> {
        let mut s = trunk_shapes("trunk", &config.encoder);
        s.extend(mlp_shapes("head", config.decoder_input_width(), &config.hidden));
        s
    }

    pub fn init(config: BaselineConfig, seed: u64) -> Result<Self> {
        config.encoder.validate()?;
        let tensors = init_tensors(&Self::shapes(&config), seed);
        Ok(Self { config, tensors })
    }

    pub fn from_tensors(config: BaselineConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        config.encoder.validate()?;
        check_shapes(&tensors, &Self::shapes(&config))?;
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &BaselineConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.tensors[index].1
    }

    fn head_start(&self) -> usize {
        2 * self.config.encoder.scales * self.config.encoder.convs_per_scale
    }

    /// The pooled latent vector of `x`.
    pub fn latent(&self, x: &VoxelGrid) -> Result<Vec<f64>> {
        let e = &self.config.encoder;
        if x.resolution() != e.resolution {
            return Err(ModelError::ResolutionMismatch {
                expected: e.resolution,
                found: x.resolution(),
            });
        }
        let grids = trunk_infer(&self.tensors, e, x);
        let last = grids.last().expect("at least two scales");
        let c = last.shape()[0];
        let per = last.len() / c;
        Ok(last
            .data()
            .chunks_exact(per)
            .map(|ch| ch.iter().sum::<f64>() / per as f64)
            .collect())
    }

    /// Logits `[Q, 1]` recorded on a tape.
    pub fn logits_on_tape(&self, tape: &mut Tape, x: &VoxelGrid, points: &[Vec3]) -> Result<(Vec<Var>, Var)> {
        let vars: Vec<Var> = self.tensors.iter().map(|(_, t)| tape.param(t.clone())).collect();
        let xv = tape.constant(voxel_tensor(x));
        let grids = trunk_on_tape(tape, &vars, &self.config.encoder, xv)?;
        let z = tape.mean_pool(*grids.last().expect("scales"))?;
        let zr = tape.repeat_rows(z, points.len())?;
        let p = tape.constant(Tensor::new(
            vec![points.len(), 3],
            points.iter().flat_map(|p| [p.x, p.y, p.z]).collect(),
        )?);
        let input = tape.concat(&[zr, p], 1)?;
        let logits = mlp_on_tape(tape, &vars[self.head_start()..], input)?;
        Ok((vars, logits))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.magic(MAGIC);
        w.u32(VERSION);
        write_encoder(&mut w, &self.config.encoder);
        write_widths(&mut w, &self.config.hidden);
        write_tensors(&mut w, &self.tensors);
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(MAGIC)?;
        r.expect_version(VERSION)?;
        let encoder = read_encoder(&mut r)?;
        let hidden = read_widths(&mut r)?;
        let tensors = read_tensors(&mut r)?;
        if !r.is_empty() {
            return Err(r.invalid("trailing bytes").into());
        }
        Self::from_tensors(BaselineConfig { encoder, hidden }, tensors)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

/// Occupancy probabilities from the global latent and raw coordinates.
pub fn baseline_forward(params: &BaselineParams, x: &VoxelGrid, points: &[Vec3]) -> Result<Vec<f64>> {
    if points.is_empty() {
        return Ok(Vec::new());
    }
    let z = params.latent(x)?;
    let width = z.len() + 3;
    let mut rows = Vec::with_capacity(points.len() * width);
    for p in points {
        rows.extend_from_slice(&z);
        rows.extend_from_slice(&[p.x, p.y, p.z]);
    }
    let input = Tensor::new(vec![points.len(), width], rows)?;
    let logits = mlp_infer(&params.tensors[params.head_start()..], &input);
    Ok(logits.into_iter().map(sigmoid).collect())
}
