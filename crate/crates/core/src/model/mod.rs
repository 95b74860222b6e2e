//! The feature-grid network: a 3D convolutional encoder producing grids
//! of decreasing resolution, a seven-point neighborhood feature query and
//! a point-wise MLP decoder. Also the global-latent baseline that decodes
//! from one pooled vector plus raw coordinates.

mod baseline;
mod network;
mod params;

use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::codec::DecodeError;

pub use baseline::{baseline_forward, BaselineConfig, BaselineParams};
pub use network::{
    decode, decode_points, encode, extract_features, extract_features_batch, forward, forward_chunked, query_points,
    voxel_tensor, FeatureGridSet, TapeModel, QUERY_COUNT,
};
pub use params::{ModelParams, ParamLayout};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("input resolution {found} does not match the model resolution {expected}")]
    ResolutionMismatch { expected: usize, found: usize },
    #[error("feature width {found} does not match the decoder input width {expected}")]
    WidthMismatch { expected: usize, found: usize },
    #[error("missing parameter tensor {0:?}")]
    MissingTensor(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Input grid resolution N.
    pub resolution: usize,
    /// Number of scales n.
    pub scales: usize,
    /// Feature width per scale.
    pub channels: Vec<usize>,
    pub convs_per_scale: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            scales: 4,
            channels: vec![16, 32, 64, 128],
            convs_per_scale: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.scales < 2 {
            return bad(format!("need at least 2 scales, got {}", self.scales));
        }
        if self.channels.len() != self.scales {
            return bad(format!(
                "{} channel widths for {} scales",
                self.channels.len(),
                self.scales
            ));
        }
        if self.channels.contains(&0) {
            return bad("channel widths must be positive".into());
        }
        if self.convs_per_scale == 0 {
            return bad("convs_per_scale must be positive".into());
        }
        let step = 1usize << (self.scales - 1);
        if self.resolution < 2 || !self.resolution.is_multiple_of(step) {
            return bad(format!("resolution {} not divisible by {step}", self.resolution));
        }
        Ok(())
    }

    /// Grid resolution of every scale, finest first.
    pub fn grid_resolutions(&self) -> Vec<usize> {
        (0..self.scales).map(|k| self.resolution >> k).collect()
    }

    /// Sum of feature widths over scales.
    pub fn total_channels(&self) -> usize {
        self.channels.iter().sum()
    }

    /// Per scale, the number of boundary cells whose features differ from
    /// an unbounded zero-extended input. Cells at least this far from every
    /// face are unaffected by padding.
    pub fn boundary_bands(&self) -> Vec<usize> {
        let c = self.convs_per_scale;
        let mut bands = vec![c - 1];
        for _ in 1..self.scales {
            let prev = *bands.last().unwrap();
            bands.push(prev.div_ceil(2) + c);
        }
        bands
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryConfig {
    /// Neighbor offset along each axis, in canonical units.
    pub d: f64,
}

impl QueryConfig {
    /// One input cell width.
    pub fn for_resolution(resolution: usize) -> Self {
        Self {
            d: 1.0 / resolution as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d > 0.0 && self.d < 0.5) {
            return Err(ModelError::Config(format!("offset d = {} outside (0, 0.5)", self.d)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub hidden: Vec<usize>,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { hidden: vec![256, 256] }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub query: QueryConfig,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let encoder = EncoderConfig::default();
        let query = QueryConfig::for_resolution(encoder.resolution);
        Self {
            encoder,
            query,
            decoder: DecoderConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.query.validate()?;
        if self.decoder.hidden.contains(&0) {
            return Err(ModelError::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }

    /// Decoder input width, seven query positions per scale.
    pub fn feature_width(&self) -> usize {
        QUERY_COUNT * self.encoder.total_channels()
    }
}
