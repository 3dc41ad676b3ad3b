//! Channel-first volumes carrying geometry, metadata and an applied-transform
//! trace.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::geometry::Affine;

/// Dense channel-first `f32` array of shape `(C, D1[, D2[, D3]])`, row-major
/// with the last axis fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.len() < 2 || shape.len() > 4 {
            return Err(Error::Shape(format!(
                "expected a channel axis plus 1-3 spatial axes, got shape {shape:?}"
            )));
        }
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero-sized axis in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Result<Self> {
        let n = shape.iter().product();
        Tensor::new(shape, vec![value; n])
    }

    /// Builds a tensor by evaluating `f(channel, spatial_index)` per element.
    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize, &[usize]) -> f32) -> Result<Self> {
        let t = Tensor::zeros(shape)?;
        let spatial = t.spatial_dims().to_vec();
        let per = t.spatial_len();
        let mut data = Vec::with_capacity(t.data.len());
        let mut idx = vec![0usize; spatial.len()];
        for c in 0..t.channels() {
            idx.iter_mut().for_each(|i| *i = 0);
            for _ in 0..per {
                data.push(f(c, &idx));
                increment(&mut idx, &spatial);
            }
        }
        Tensor::new(t.shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    pub fn spatial_dims(&self) -> &[usize] {
        &self.shape[1..]
    }

    pub fn spatial_rank(&self) -> usize {
        self.shape.len() - 1
    }

    pub fn spatial_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.spatial_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.spatial_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Flat offset of a spatial index within one channel.
    pub fn offset(&self, idx: &[usize]) -> usize {
        offset(self.spatial_dims(), idx)
    }

    pub fn get(&self, c: usize, idx: &[usize]) -> f32 {
        self.data[c * self.spatial_len() + self.offset(idx)]
    }

    pub fn set(&mut self, c: usize, idx: &[usize], v: f32) {
        let o = c * self.spatial_len() + self.offset(idx);
        self.data[o] = v;
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "shape mismatch in max_abs_diff");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

pub(crate) fn offset(dims: &[usize], idx: &[usize]) -> usize {
    idx.iter().zip(dims).fold(0, |acc, (&i, &d)| acc * d + i)
}

/// Row-major odometer increment; returns false after wrapping past the end.
pub(crate) fn increment(idx: &mut [usize], dims: &[usize]) -> bool {
    for k in (0..idx.len()).rev() {
        idx[k] += 1;
        if idx[k] < dims[k] {
            return true;
        }
        idx[k] = 0;
    }
    false
}

/// Metadata value: string, number or number list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetaValue {
    Num(f64),
    List(Vec<f64>),
    Str(String),
}

impl From<&str> for MetaValue {
    fn from(s: &str) -> Self {
        MetaValue::Str(s.to_string())
    }
}

impl From<String> for MetaValue {
    fn from(s: String) -> Self {
        MetaValue::Str(s)
    }
}

impl From<f64> for MetaValue {
    fn from(v: f64) -> Self {
        MetaValue::Num(v)
    }
}

impl From<Vec<f64>> for MetaValue {
    fn from(v: Vec<f64>) -> Self {
        MetaValue::List(v)
    }
}

/// Ordered metadata map. Keys prefixed `sys.` are reserved for the engine.
pub type Meta = IndexMap<String, MetaValue>;

/// One applied transform: identity, parameters and inversion payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub transform_id: String,
    pub do_transform: bool,
    pub orig_size: Vec<usize>,
    pub orig_affine: Affine,
    #[serde(default)]
    pub extra: Map<String, Value>,
}

impl TraceRecord {
    pub fn new(transform_id: &str, do_transform: bool, before: &MetaVolume) -> Self {
        TraceRecord {
            transform_id: transform_id.to_string(),
            do_transform,
            orig_size: before.spatial_dims().to_vec(),
            orig_affine: before.affine,
            extra: Map::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.extra.insert(key.to_string(), value.into());
        self
    }

    pub(crate) fn get<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self.extra.get(key).ok_or_else(|| {
            Error::Format(format!(
                "trace record '{}' lacks field '{key}'",
                self.transform_id
            ))
        })?;
        Ok(serde_json::from_value(v.clone())?)
    }
}

/// Metadata-carrying volume.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaVolume {
    pub array: Tensor,
    pub affine: Affine,
    pub meta: Meta,
    pub applied: Vec<TraceRecord>,
}

impl MetaVolume {
    pub fn new(array: Tensor, affine: Affine) -> Result<Self> {
        affine.validate()?;
        Ok(MetaVolume {
            array,
            affine,
            meta: Meta::new(),
            applied: Vec::new(),
        })
    }

    pub fn with_identity(array: Tensor) -> Self {
        MetaVolume {
            array,
            affine: Affine::identity(),
            meta: Meta::new(),
            applied: Vec::new(),
        }
    }

    pub fn channels(&self) -> usize {
        self.array.channels()
    }

    pub fn spatial_dims(&self) -> &[usize] {
        self.array.spatial_dims()
    }

    pub fn spatial_rank(&self) -> usize {
        self.array.spatial_rank()
    }

    /// Same geometry, metadata and trace; new array.
    pub fn with_array(&self, array: Tensor) -> MetaVolume {
        MetaVolume {
            array,
            affine: self.affine,
            meta: self.meta.clone(),
            applied: self.applied.clone(),
        }
    }

    /// World coordinate (mm) of a voxel index. Missing trailing spatial axes
    /// are taken as 0.
    pub fn volume_to_world(&self, index: &[i64]) -> Result<[f64; 3]> {
        let dims = self.spatial_dims();
        if index.len() != dims.len()
            || index
                .iter()
                .zip(dims)
                .any(|(&i, &d)| i < 0 || i as usize >= d)
        {
            return Err(Error::IndexOutOfBounds {
                index: index.to_vec(),
                dims: dims.to_vec(),
            });
        }
        Ok(self.affine.apply(pad3(index)))
    }

    pub fn push_trace(&mut self, rec: TraceRecord) {
        self.applied.push(rec);
    }
}

pub(crate) fn pad3(index: &[i64]) -> [f64; 3] {
    let mut p = [0.0; 3];
    for (o, &i) in p.iter_mut().zip(index) {
        *o = i as f64;
    }
    p
}
