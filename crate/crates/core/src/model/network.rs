use rayon::prelude::*;

use super::params::ParamLayout;
use super::{EncoderConfig, ModelError, ModelParams, QueryConfig, Result};
use crate::autodiff::kernels::{self, Volume};
use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::geometry::{clamp_to_domain, in_domain, Vec3, VoxelGrid};

/// Query positions per point: the point and its six axis neighbors.
pub const QUERY_COUNT: usize = 7;

/// Decoder rows evaluated together by [`forward`].
const DEFAULT_CHUNK: usize = 4096;

/// Multi-scale feature grids, finest first; grid `k` is `[F_k, K_k, K_k, K_k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGridSet {
    grids: Vec<Tensor>,
}

impl FeatureGridSet {
    /// Checks that every grid is cubic and each resolution halves the last.
    pub fn new(grids: Vec<Tensor>) -> Result<Self> {
        let mut prev: Option<usize> = None;
        for g in &grids {
            let k = match g.shape() {
                &[_, d, h, w] if d == h && h == w => d,
                s => return Err(ModelError::Config(format!("feature grid shape {s:?} is not cubic"))),
            };
            if let Some(p) = prev {
                if p != 2 * k {
                    return Err(ModelError::Config(format!("grid resolution {k} does not halve {p}")));
                }
            }
            prev = Some(k);
        }
        Ok(Self { grids })
    }

    pub fn grids(&self) -> &[Tensor] {
        &self.grids
    }

    pub fn resolutions(&self) -> Vec<usize> {
        self.grids.iter().map(|g| g.shape()[1]).collect()
    }

    pub fn total_channels(&self) -> usize {
        self.grids.iter().map(|g| g.shape()[0]).sum()
    }
}

/// The voxel grid as a one-channel `[1, N, N, N]` tensor.
pub fn voxel_tensor(x: &VoxelGrid) -> Tensor {
    let n = x.resolution();
    Tensor::new(vec![1, n, n, n], x.data().iter().map(|&v| v as f64).collect()).expect("N^3 voxels")
}

fn check_resolution(e: &EncoderConfig, x: &VoxelGrid) -> Result<()> {
    if x.resolution() != e.resolution {
        return Err(ModelError::ResolutionMismatch {
            expected: e.resolution,
            found: x.resolution(),
        });
    }
    Ok(())
}

/// Conv trunk without a tape. `tensors` starts with the trunk weights in
/// layout order.
pub(crate) fn trunk_infer(tensors: &[(String, Tensor)], e: &EncoderConfig, x: &VoxelGrid) -> Vec<Tensor> {
    let layout = ParamLayout::new(e);
    let n = e.resolution;
    let mut v = Volume {
        channels: 1,
        d: n,
        h: n,
        w: n,
    };
    let mut cur: Vec<f64> = x.data().iter().map(|&b| b as f64).collect();
    let mut grids = Vec::with_capacity(e.scales);
    for (k, &c) in e.channels.iter().enumerate() {
        if k > 0 {
            cur = kernels::maxpool2_forward(&cur, &v).0;
            v = Volume {
                channels: v.channels,
                d: v.d / 2,
                h: v.h / 2,
                w: v.w / 2,
            };
        }
        for j in 0..e.convs_per_scale {
            let i = layout.conv(k, j);
            cur = kernels::conv3d_forward(&cur, &v, tensors[i].1.data(), tensors[i + 1].1.data(), c);
            cur.iter_mut().for_each(|a| *a = a.max(0.0));
            v.channels = c;
        }
        grids.push(Tensor::new(vec![c, v.d, v.h, v.w], cur.clone()).expect("grid shape"));
    }
    grids
}

pub(crate) fn trunk_on_tape(tape: &mut Tape, vars: &[Var], e: &EncoderConfig, x: Var) -> Result<Vec<Var>> {
    let layout = ParamLayout::new(e);
    let mut cur = x;
    let mut grids = Vec::with_capacity(e.scales);
    for k in 0..e.scales {
        if k > 0 {
            cur = tape.downsample2(cur)?;
        }
        for j in 0..e.convs_per_scale {
            let i = layout.conv(k, j);
            cur = tape.conv3d(cur, vars[i], vars[i + 1])?;
            cur = tape.relu(cur)?;
        }
        grids.push(cur);
    }
    Ok(grids)
}

/// MLP logits without a tape; relu between layers, no final activation.
pub(crate) fn mlp_infer(tensors: &[(String, Tensor)], input: &Tensor) -> Vec<f64> {
    let (q, mut width) = (input.shape()[0], input.shape()[1]);
    let mut h = input.data().to_vec();
    let layers = tensors.len() / 2;
    for l in 0..layers {
        let (w, b) = (&tensors[2 * l].1, &tensors[2 * l + 1].1);
        h = kernels::linear_forward(&h, q, width, w.data(), b.data());
        width = b.len();
        if l + 1 < layers {
            h.iter_mut().for_each(|a| *a = a.max(0.0));
        }
    }
    h
}

pub(crate) fn mlp_on_tape(tape: &mut Tape, vars: &[Var], input: Var) -> Result<Var> {
    let layers = vars.len() / 2;
    let mut h = input;
    for l in 0..layers {
        h = tape.linear(h, vars[2 * l], vars[2 * l + 1])?;
        if l + 1 < layers {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

/// Multi-scale feature grids of `x`: scale 1 is convolved at full
/// resolution; every later scale max-pools the previous one first.
pub fn encode(params: &ModelParams, x: &VoxelGrid) -> Result<FeatureGridSet> {
    let e = &params.config().encoder;
    check_resolution(e, x)?;
    FeatureGridSet::new(trunk_infer(params.tensors(), e, x))
}

/// `p`, then `p +- d` along x, y and z, each clamped into the cube.
pub fn query_points(p: &Vec3, cfg: &QueryConfig) -> [Vec3; QUERY_COUNT] {
    let mut out = [*p; QUERY_COUNT];
    for axis in 0..3 {
        out[1 + 2 * axis][axis] += cfg.d;
        out[2 + 2 * axis][axis] -= cfg.d;
    }
    out.map(|q| clamp_to_domain(&q))
}

fn check_points(points: &[Vec3]) -> Result<()> {
    match points.iter().position(|p| !in_domain(p)) {
        Some(index) => Err(AutodiffError::QueryOutOfDomain { index }.into()),
        None => Ok(()),
    }
}

/// Features of one point: per scale (finest first), per query position,
/// the interpolated channel values.
pub fn extract_features(grids: &FeatureGridSet, p: &Vec3, cfg: &QueryConfig) -> Result<Vec<f64>> {
    Ok(extract_features_batch(grids, std::slice::from_ref(p), cfg)?.into_data())
}

/// `[Q, 7 * sum F_k]` feature rows for `points`.
pub fn extract_features_batch(grids: &FeatureGridSet, points: &[Vec3], cfg: &QueryConfig) -> Result<Tensor> {
    check_points(points)?;
    if points.is_empty() {
        return Err(ModelError::Config("no query points".into()));
    }
    let width = QUERY_COUNT * grids.total_channels();
    let lasts: Vec<Vec<f64>> = grids
        .grids()
        .iter()
        .map(|g| kernels::channels_last(g.data(), g.shape()[0]))
        .collect();
    let mut out = vec![0.0; points.len() * width];
    for (p, row) in points.iter().zip(out.chunks_exact_mut(width)) {
        let queries = query_points(p, cfg);
        let mut offset = 0;
        for (g, last) in grids.grids().iter().zip(&lasts) {
            let (c, k) = (g.shape()[0], g.shape()[1]);
            for q in &queries {
                kernels::trilinear_gather(last, &kernels::trilinear_stencil(q, k), &mut row[offset..offset + c]);
                offset += c;
            }
        }
    }
    Ok(Tensor::new(vec![points.len(), width], out)?)
}

/// Occupancy probabilities and logits for feature rows.
pub fn decode(params: &ModelParams, features: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let want = params.config().feature_width();
    match *features.shape() {
        [_, w] if w == want => {}
        _ => {
            return Err(ModelError::WidthMismatch {
                expected: want,
                found: features.shape().last().copied().unwrap_or(0),
            })
        }
    }
    let start = params.layout().dense(0);
    let logits = mlp_infer(&params.tensors()[start..], features);
    if !logits.iter().all(|v| v.is_finite()) {
        return Err(AutodiffError::NonFinite { op: "decode" }.into());
    }
    let probs = logits.iter().map(|&l| kernels::sigmoid(l)).collect();
    Ok((probs, logits))
}

/// Occupancy probability at each point; the input is encoded once.
pub fn forward(params: &ModelParams, x: &VoxelGrid, points: &[Vec3]) -> Result<Vec<f64>> {
    forward_chunked(params, x, points, DEFAULT_CHUNK)
}

/// [`forward`] decoding at most `chunk` points at a time.
pub fn forward_chunked(params: &ModelParams, x: &VoxelGrid, points: &[Vec3], chunk: usize) -> Result<Vec<f64>> {
    let grids = encode(params, x)?;
    decode_points(params, &grids, points, chunk)
}

/// Probabilities at `points` from already-encoded grids, `chunk` points per batch.
pub fn decode_points(params: &ModelParams, grids: &FeatureGridSet, points: &[Vec3], chunk: usize) -> Result<Vec<f64>> {
    if chunk == 0 {
        return Err(ModelError::Config("chunk size must be positive".into()));
    }
    let cfg = &params.config().query;
    let parts: Vec<Vec<f64>> = points
        .par_chunks(chunk)
        .map(|ps| {
            let f = extract_features_batch(grids, ps, cfg)?;
            Ok(decode(params, &f)?.0)
        })
        .collect::<Result<_>>()?;
    Ok(parts.concat())
}

/// The network recorded on a tape, for training and gradient checks.
pub struct TapeModel<'a> {
    params: &'a ModelParams,
    vars: Vec<Var>,
}

impl<'a> TapeModel<'a> {
    /// Adds every parameter tensor to `tape` as a differentiable leaf.
    pub fn register(tape: &mut Tape, params: &'a ModelParams) -> Self {
        let vars = params.tensors().iter().map(|(_, t)| tape.param(t.clone())).collect();
        Self { params, vars }
    }

    /// Uses existing tape leaves, in layout order, as the parameters.
    pub fn from_vars(params: &'a ModelParams, vars: Vec<Var>) -> Self {
        assert_eq!(vars.len(), params.tensors().len(), "one handle per parameter tensor");
        Self { params, vars }
    }

    /// Parameter handles in layout order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn encode(&self, tape: &mut Tape, x: &VoxelGrid) -> Result<Vec<Var>> {
        let e = &self.params.config().encoder;
        check_resolution(e, x)?;
        let xv = tape.constant(voxel_tensor(x));
        trunk_on_tape(tape, &self.vars, e, xv)
    }

    /// `[Q, 7 * sum F_k]` features sampled from grids on the tape.
    pub fn features(&self, tape: &mut Tape, grids: &[Var], points: &[Vec3]) -> Result<Var> {
        check_points(points)?;
        let cfg = &self.params.config().query;
        let queries: Vec<Vec3> = points.iter().flat_map(|p| query_points(p, cfg)).collect();
        let mut per_scale = Vec::with_capacity(grids.len());
        for &g in grids {
            let c = tape.value(g).shape()[0];
            let s = tape.trilinear_sample(g, &queries)?;
            per_scale.push(tape.reshape(s, &[points.len(), QUERY_COUNT * c])?);
        }
        Ok(tape.concat(&per_scale, 1)?)
    }

    /// `[Q, 1]` logits.
    pub fn decode(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        let start = self.params.layout().dense(0);
        mlp_on_tape(tape, &self.vars[start..], features)
    }

    pub fn logits(&self, tape: &mut Tape, x: &VoxelGrid, points: &[Vec3]) -> Result<Var> {
        let grids = self.encode(tape, x)?;
        let f = self.features(tape, &grids, points)?;
        self.decode(tape, f)
    }
}
