use std::path::Path;

use super::{AutodiffError, Result};
use crate::codec::{DecodeError, Reader, Writer};

const MAGIC: &[u8; 4] = b"IFTN";
const VERSION: u32 = 1;

/// Dense row-major tensor of doubles; the last axis is fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Fails when a dimension is zero or the value count does not match.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(AutodiffError::shape("tensor", format!("zero dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(AutodiffError::shape(
                "tensor",
                format!("shape {shape:?} holds {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(!shape.contains(&0), "zero dimension in {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Rank-0 tensor.
    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector tensor");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Debug dump: magic, version, rank, u64 dims, f64 values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.magic(MAGIC);
        w.u32(VERSION);
        self.encode(&mut w);
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        r.expect_magic(MAGIC)?;
        r.expect_version(VERSION)?;
        let t = Self::decode(&mut r)?;
        if !r.is_empty() {
            return Err(r.invalid("trailing bytes after tensor"));
        }
        Ok(t)
    }

    /// Rank, dims and values without the file header.
    pub(crate) fn encode(&self, w: &mut Writer) {
        w.u32(self.shape.len() as u32);
        for &d in &self.shape {
            w.u64(d as u64);
        }
        w.f64s(&self.data);
    }

    pub(crate) fn decode(r: &mut Reader<'_>) -> std::result::Result<Self, DecodeError> {
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(r.invalid(format!("tensor rank {rank} too large")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut count = 1usize;
        for _ in 0..rank {
            let d = r.u64()? as usize;
            if d == 0 {
                return Err(r.invalid("zero tensor dimension"));
            }
            count = count.checked_mul(d).ok_or_else(|| r.invalid("tensor size overflow"))?;
            shape.push(d);
        }
        let data = r.f64s(count)?;
        Ok(Self { shape, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::from_bytes(&std::fs::read(path)?)?)
    }
}
