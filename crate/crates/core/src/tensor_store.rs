//! Named tensors, checkpoints, and the on-disk checkpoint format.
//!
//! File layout:
//!
//! ```text
//! bytes 0..8      u64 little-endian N, the header length
//! bytes 8..8+N    UTF-8 JSON: name -> {"dtype", "shape", "data_offsets": [begin, end]}
//!                 plus an optional "__metadata__": {string: string}
//! bytes 8+N..     little-endian row-major tensor data; offsets are relative to 8+N
//! ```
//!
//! Tensors are laid out in lexicographic name order, contiguously, so writing
//! the same checkpoint twice yields identical bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::Deserialize;
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

const METADATA_KEY: &str = "__metadata__";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_in_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "F32",
            DType::F64 => "F64",
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "F32" | "f32" => Ok(DType::F32),
            "F64" | "f64" => Ok(DType::F64),
            other => Err(Error::UnsupportedDtype(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values widened to f64 (exact for both dtypes).
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    /// Narrows f64 values to `dtype` with round-to-nearest-even.
    pub fn from_f64(values: Vec<f64>, dtype: DType) -> Self {
        match dtype {
            DType::F64 => TensorData::F64(values),
            DType::F32 => TensorData::F32(values.into_iter().map(|x| x as f32).collect()),
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn read_le(bytes: &[u8], dtype: DType) -> Self {
        match dtype {
            DType::F32 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        }
    }

    fn bits_eq(&self, other: &TensorData) -> bool {
        match (self, other) {
            (TensorData::F32(a), TensorData::F32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (TensorData::F64(a), TensorData::F64(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }
}

/// A named, shaped, row-major array. An empty shape denotes a scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: TensorData,
}

fn element_count(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::InvalidTensor {
                name,
                reason: "name must be non-empty".into(),
            });
        }
        if name == METADATA_KEY {
            return Err(Error::InvalidTensor {
                name,
                reason: "name is reserved for checkpoint metadata".into(),
            });
        }
        match element_count(&shape) {
            Some(n) if n == data.len() => Ok(Self { name, shape, data }),
            Some(n) => Err(Error::InvalidTensor {
                name,
                reason: format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            }),
            None => Err(Error::InvalidTensor {
                name,
                reason: format!("shape {shape:?} overflows"),
            }),
        }
    }

    pub fn from_f64(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::new(name, shape, TensorData::F64(data))
    }

    pub fn from_f32(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(name, shape, TensorData::F32(data))
    }

    pub fn scalar(name: impl Into<String>, value: f64) -> Result<Self> {
        Self::from_f64(name, Vec::new(), vec![value])
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.to_f64_vec()
    }

    /// Same name and shape, new values narrowed to `dtype`.
    pub fn with_values(&self, values: Vec<f64>, dtype: DType) -> Result<Self> {
        Self::new(self.name.clone(), self.shape.clone(), TensorData::from_f64(values, dtype))
    }

    /// Same name, shape and dtype.
    pub fn is_compatible(&self, other: &NamedTensor) -> bool {
        self.name == other.name && self.shape == other.shape && self.dtype() == other.dtype()
    }

    pub fn bits_eq(&self, other: &NamedTensor) -> bool {
        self.name == other.name && self.shape == other.shape && self.data.bits_eq(&other.data)
    }
}

/// Ordered map of tensors plus free-form string metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    tensors: BTreeMap<String, NamedTensor>,
    metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_tensors(tensors: impl IntoIterator<Item = NamedTensor>) -> Result<Self> {
        let mut ckpt = Self::new();
        for t in tensors {
            ckpt.insert(t)?;
        }
        Ok(ckpt)
    }

    /// Adds a tensor; names must be unique.
    pub fn insert(&mut self, tensor: NamedTensor) -> Result<()> {
        if self.tensors.contains_key(tensor.name()) {
            return Err(Error::InvalidTensor {
                name: tensor.name().to_string(),
                reason: "duplicate tensor name".into(),
            });
        }
        self.tensors.insert(tensor.name().to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.get(name)
    }

    /// Tensors in lexicographic name order.
    pub fn tensors(&self) -> impl Iterator<Item = &NamedTensor> {
        self.tensors.values()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    /// Elementwise bit-identical tensors and equal metadata.
    pub fn bits_eq(&self, other: &Checkpoint) -> bool {
        self.metadata == other.metadata
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .values()
                .zip(other.tensors.values())
                .all(|(a, b)| a.bits_eq(b))
    }

    /// Names that differ in presence, shape, or dtype between the two
    /// checkpoints; empty when they are compatible.
    pub fn incompatible_names(&self, other: &Checkpoint) -> Vec<String> {
        let names: BTreeSet<&String> = self.tensors.keys().chain(other.tensors.keys()).collect();
        names
            .into_iter()
            .filter(|name| match (self.tensors.get(*name), other.tensors.get(*name)) {
                (Some(a), Some(b)) => !a.is_compatible(b),
                _ => true,
            })
            .cloned()
            .collect()
    }

    pub fn ensure_compatible(&self, other: &Checkpoint) -> Result<()> {
        let names = self.incompatible_names(other);
        if names.is_empty() {
            Ok(())
        } else {
            Err(Error::Incompatible { names })
        }
    }

    /// Serializes to the checkpoint byte layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut table = Map::new();
        let mut offset = 0usize;
        for t in self.tensors.values() {
            let len = t.numel() * t.dtype().size_in_bytes();
            table.insert(
                t.name().to_string(),
                json!({
                    "dtype": t.dtype().as_str(),
                    "shape": t.shape(),
                    "data_offsets": [offset, offset + len],
                }),
            );
            offset += len;
        }
        if !self.metadata.is_empty() {
            table.insert(METADATA_KEY.to_string(), json!(self.metadata));
        }
        let header = serde_json::to_vec(&Value::Object(table)).expect("header serializes");

        let mut out = Vec::with_capacity(8 + header.len() + offset);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            t.data().write_le(&mut out);
        }
        out
    }

    /// Parses the checkpoint byte layout, validating every table entry.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Structural(format!(
                "file is {} bytes, shorter than the 8-byte header length",
                bytes.len()
            )));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        let available = (bytes.len() - 8) as u64;
        if header_len > available {
            return Err(Error::Structural(format!(
                "header length {header_len} exceeds the {available} bytes after the length prefix"
            )));
        }
        let header_end = 8 + header_len as usize;
        let header = &bytes[8..header_end];
        let data = &bytes[header_end..];

        let table: Map<String, Value> =
            serde_json::from_slice(header).map_err(|e| header_error(header, &e))?;

        let mut ckpt = Checkpoint::new();
        let mut spans: Vec<(usize, usize, &str)> = Vec::with_capacity(table.len());
        for (name, value) in &table {
            if name == METADATA_KEY {
                let meta: BTreeMap<String, String> = serde_json::from_value(value.clone())
                    .map_err(|e| Error::Structural(format!("bad {METADATA_KEY}: {e}")))?;
                ckpt.metadata = meta;
                continue;
            }
            let entry: TableEntry = serde_json::from_value(value.clone())
                .map_err(|e| Error::Structural(format!("bad table entry {name:?}: {e}")))?;
            let dtype: DType = entry.dtype.parse()?;
            let [begin, end] = entry.data_offsets;
            if begin > end || end > data.len() as u64 {
                return Err(Error::Structural(format!(
                    "tensor {name:?} offsets [{begin}, {end}] outside data region of {} bytes",
                    data.len()
                )));
            }
            let (begin, end) = (begin as usize, end as usize);
            let numel = element_count(&entry.shape).ok_or_else(|| {
                Error::Structural(format!("tensor {name:?} shape {:?} overflows", entry.shape))
            })?;
            let expected = numel.checked_mul(dtype.size_in_bytes());
            if expected != Some(end - begin) {
                return Err(Error::Structural(format!(
                    "tensor {name:?} spans {} bytes but shape {:?} of {dtype} needs {}",
                    end - begin,
                    entry.shape,
                    numel.saturating_mul(dtype.size_in_bytes())
                )));
            }
            spans.push((begin, end, name.as_str()));
            let tensor = NamedTensor::new(
                name.clone(),
                entry.shape,
                TensorData::read_le(&data[begin..end], dtype),
            )
            .map_err(|e| Error::Structural(e.to_string()))?;
            ckpt.insert(tensor)?;
        }

        spans.sort_unstable();
        for pair in spans.windows(2) {
            let (_, prev_end, prev) = pair[0];
            let (begin, _, name) = pair[1];
            if begin < prev_end {
                return Err(Error::Structural(format!(
                    "tensors {prev:?} and {name:?} have overlapping data ranges"
                )));
            }
        }
        // the data region must be tiled exactly, with no gaps or trailing bytes
        let mut cursor = 0;
        for &(begin, end, name) in &spans {
            if begin != cursor {
                return Err(Error::Structural(format!(
                    "gap of {} bytes before tensor {name:?}",
                    begin - cursor
                )));
            }
            cursor = end;
        }
        if cursor != data.len() {
            return Err(Error::Structural(format!(
                "{} trailing bytes after the last tensor",
                data.len() - cursor
            )));
        }
        Ok(ckpt)
    }
}

#[derive(Deserialize)]
struct TableEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

fn header_error(header: &[u8], err: &serde_json::Error) -> Error {
    // serde_json reports 1-based line/column; convert to an absolute file offset.
    let mut offset = 0usize;
    for _ in 1..err.line() {
        match header[offset..].iter().position(|&b| b == b'\n') {
            Some(p) => offset += p + 1,
            None => break,
        }
    }
    offset = (offset + err.column().saturating_sub(1)).min(header.len());
    Error::HeaderParse {
        offset: 8 + offset as u64,
        message: err.to_string(),
    }
}

/// Writes `ckpt` to `path` atomically (temp file plus rename).
pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &ckpt.to_bytes())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| e.context(path.display().to_string()))
}

/// Euclidean distance between two compatible checkpoints over every tensor,
/// accumulated in f64.
pub fn checkpoint_l2_distance(a: &Checkpoint, b: &Checkpoint) -> Result<f64> {
    a.ensure_compatible(b)?;
    let mut sum = 0.0f64;
    for (ta, tb) in a.tensors().zip(b.tensors()) {
        for (x, y) in ta.to_f64_vec().iter().zip(tb.to_f64_vec()) {
            let d = x - y;
            sum += d * d;
        }
    }
    Ok(sum.sqrt())
}
