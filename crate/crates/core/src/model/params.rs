use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DecoderConfig, EncoderConfig, ModelConfig, ModelError, QueryConfig, Result};
use crate::autodiff::Tensor;
use crate::codec::{DecodeError, Reader, Writer};

const MAGIC: &[u8; 4] = b"IFCK";
pub(crate) const VERSION: u32 = 1;
/// Marks an optional section appended after the model tensors.
pub(crate) const APPENDIX_MAGIC: &[u8; 4] = b"OPTS";

/// Position of each tensor in the flat parameter list: per scale and
/// convolution a weight then a bias, then the same for each decoder layer.
#[derive(Clone, Copy, Debug)]
pub struct ParamLayout {
    convs_per_scale: usize,
    encoder_convs: usize,
}

impl ParamLayout {
    pub fn new(encoder: &EncoderConfig) -> Self {
        Self {
            convs_per_scale: encoder.convs_per_scale,
            encoder_convs: encoder.scales * encoder.convs_per_scale,
        }
    }

    /// Index of the weight of convolution `conv` at `scale`; the bias follows.
    pub fn conv(&self, scale: usize, conv: usize) -> usize {
        2 * (scale * self.convs_per_scale + conv)
    }

    /// Index of the weight of decoder layer `layer`; the bias follows.
    pub fn dense(&self, layer: usize) -> usize {
        2 * (self.encoder_convs + layer)
    }
}

/// Shapes of the conv trunk, `(name, shape)` in layout order.
pub(crate) fn trunk_shapes(prefix: &str, e: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let mut c_in = 1;
    for (k, &c) in e.channels.iter().enumerate() {
        for j in 0..e.convs_per_scale {
            out.push((format!("{prefix}.{k}.{j}.weight"), vec![c, c_in, 3, 3, 3]));
            out.push((format!("{prefix}.{k}.{j}.bias"), vec![c]));
            c_in = c;
        }
    }
    out
}

pub(crate) fn mlp_shapes(prefix: &str, input: usize, hidden: &[usize]) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let mut f_in = input;
    for (l, &f_out) in hidden.iter().chain(std::iter::once(&1)).enumerate() {
        out.push((format!("{prefix}.{l}.weight"), vec![f_out, f_in]));
        out.push((format!("{prefix}.{l}.bias"), vec![f_out]));
        f_in = f_out;
    }
    out
}

/// He-uniform weights (bound `sqrt(6 / fan_in)`), zero biases.
pub(crate) fn init_tensors(shapes: &[(String, Vec<usize>)], seed: u64) -> Vec<(String, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes
        .iter()
        .map(|(name, shape)| {
            let t = if shape.len() == 1 {
                Tensor::zeros(shape)
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                let n = shape.iter().product();
                Tensor::new(shape.clone(), (0..n).map(|_| rng.random_range(-bound..bound)).collect())
                    .expect("shape is consistent")
            };
            (name.clone(), t)
        })
        .collect()
}

pub(crate) fn check_shapes(tensors: &[(String, Tensor)], shapes: &[(String, Vec<usize>)]) -> Result<()> {
    if tensors.len() != shapes.len() {
        return Err(ModelError::Config(format!(
            "{} tensors stored, architecture needs {}",
            tensors.len(),
            shapes.len()
        )));
    }
    for ((name, t), (want_name, want_shape)) in tensors.iter().zip(shapes) {
        if name != want_name || t.shape() != &want_shape[..] {
            return Err(ModelError::Config(format!(
                "tensor {name:?} {:?} does not match {want_name:?} {want_shape:?}",
                t.shape()
            )));
        }
    }
    Ok(())
}

pub(crate) fn write_tensors(w: &mut Writer, tensors: &[(String, Tensor)]) {
    w.u32(tensors.len() as u32);
    for (name, t) in tensors {
        w.string(name);
        t.encode(w);
    }
}

pub(crate) fn read_tensors(r: &mut Reader<'_>) -> std::result::Result<Vec<(String, Tensor)>, DecodeError> {
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let name = r.string()?;
        out.push((name, Tensor::decode(r)?));
    }
    Ok(out)
}

pub(crate) fn write_encoder(w: &mut Writer, e: &EncoderConfig) {
    w.u32(e.resolution as u32);
    w.u32(e.scales as u32);
    w.u32(e.channels.len() as u32);
    for &c in &e.channels {
        w.u32(c as u32);
    }
    w.u32(e.convs_per_scale as u32);
}

pub(crate) fn read_encoder(r: &mut Reader<'_>) -> std::result::Result<EncoderConfig, DecodeError> {
    let resolution = r.u32()? as usize;
    let scales = r.u32()? as usize;
    let n = r.u32()? as usize;
    if n > 64 {
        return Err(r.invalid(format!("{n} scales is implausible")));
    }
    let channels = (0..n)
        .map(|_| r.u32().map(|c| c as usize))
        .collect::<std::result::Result<_, _>>()?;
    let convs_per_scale = r.u32()? as usize;
    Ok(EncoderConfig {
        resolution,
        scales,
        channels,
        convs_per_scale,
    })
}

pub(crate) fn write_widths(w: &mut Writer, widths: &[usize]) {
    w.u32(widths.len() as u32);
    for &h in widths {
        w.u32(h as u32);
    }
}

pub(crate) fn read_widths(r: &mut Reader<'_>) -> std::result::Result<Vec<usize>, DecodeError> {
    let n = r.u32()? as usize;
    if n > 64 {
        return Err(r.invalid(format!("{n} layers is implausible")));
    }
    (0..n).map(|_| r.u32().map(|c| c as usize)).collect()
}

/// All learnable tensors of the encoder and decoder, with the architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: Vec<(String, Tensor)>,
}

impl ModelParams {
    pub fn shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let mut s = trunk_shapes("enc", &config.encoder);
        s.extend(mlp_shapes("dec", config.feature_width(), &config.decoder.hidden));
        s
    }

    /// Randomly initialised parameters.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let tensors = init_tensors(&Self::shapes(&config), seed);
        Ok(Self { config, tensors })
    }

    /// All weights and biases zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let tensors = Self::shapes(&config)
            .into_iter()
            .map(|(n, s)| (n, Tensor::zeros(&s)))
            .collect();
        Ok(Self { config, tensors })
    }

    pub fn from_tensors(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        check_shapes(&tensors, &Self::shapes(&config))?;
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(&self.config.encoder)
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    /// Mutable access to values; names and shapes stay fixed.
    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.tensors[index].1
    }

    pub fn tensor(&self, index: usize) -> &Tensor {
        &self.tensors[index].1
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }

    pub(crate) fn encode(&self, w: &mut Writer) {
        w.magic(MAGIC);
        w.u32(VERSION);
        write_encoder(w, &self.config.encoder);
        w.f64(self.config.query.d);
        write_widths(w, &self.config.decoder.hidden);
        write_tensors(w, &self.tensors);
    }

    pub(crate) fn decode(r: &mut Reader<'_>) -> Result<Self> {
        r.expect_magic(MAGIC)?;
        r.expect_version(VERSION)?;
        let encoder = read_encoder(r)?;
        let d = r.f64()?;
        let hidden = read_widths(r)?;
        let tensors = read_tensors(r)?;
        let config = ModelConfig {
            encoder,
            query: QueryConfig { d },
            decoder: DecoderConfig { hidden },
        };
        Self::from_tensors(config, tensors)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.encode(&mut w);
        w.into_bytes()
    }

    /// Reads a checkpoint; a trailing optimizer appendix is skipped.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let p = Self::decode(&mut r)?;
        if !r.is_empty() {
            let at = r.offset();
            if bytes[at..].len() < 4 || &bytes[at..at + 4] != APPENDIX_MAGIC {
                return Err(r.invalid("unexpected bytes after the tensor table").into());
            }
        }
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
