//! Safetensors reader and writer.
//!
//! Layout: an 8-byte little-endian header length, a JSON header mapping each
//! tensor name to `{dtype, shape, data_offsets}` (plus an optional
//! `__metadata__` string map), then the raw little-endian payload. Offsets are
//! relative to the end of the header.
//!
//! Only `F32` and `F16` tensors are supported. `F16` values are widened to
//! `f32` on load and rounded to nearest-even on save.

use std::collections::BTreeMap;
use std::path::Path;

use half::f16;
use serde_json::{Map, Value};

use crate::error::{Error, Result};

const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F16,
}

impl DType {
    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "F32",
            DType::F16 => "F16",
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F16 => 2,
        }
    }

    fn parse(s: &str) -> Option<DType> {
        match s {
            "F32" => Some(DType::F32),
            "F16" => Some(DType::F16),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dtype: DType, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Checkpoint(format!(
                "shape {shape:?} holds {numel} elements but {} values were given",
                data.len()
            )));
        }
        Ok(Tensor { dtype, shape, data })
    }

    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Tensor::new(DType::F32, shape, data)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    fn encode(&self, out: &mut Vec<u8>) {
        match self.dtype {
            DType::F32 => {
                for v in &self.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            DType::F16 => {
                for v in &self.data {
                    out.extend_from_slice(&f16::from_f32(*v).to_le_bytes());
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorCheckpoint {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl TensorCheckpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    /// Serializes to safetensors bytes. Tensors are laid out in name order and
    /// the header is space-padded to a multiple of eight bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = Map::new();
        if !self.metadata.is_empty() {
            let meta: Map<String, Value> = self
                .metadata
                .iter()
                .map(|(k, v)| (k.clone(), Value::String(v.clone())))
                .collect();
            header.insert(METADATA_KEY.into(), Value::Object(meta));
        }
        let mut payload = Vec::new();
        for (name, tensor) in &self.tensors {
            if name == METADATA_KEY {
                return Err(Error::Checkpoint(format!("tensor name `{METADATA_KEY}` is reserved")));
            }
            let start = payload.len();
            tensor.encode(&mut payload);
            header.insert(
                name.clone(),
                serde_json::json!({
                    "dtype": tensor.dtype.as_str(),
                    "shape": tensor.shape,
                    "data_offsets": [start, payload.len()],
                }),
            );
        }
        let mut header_bytes = serde_json::to_vec(&Value::Object(header))?;
        while header_bytes.len() % 8 != 0 {
            header_bytes.push(b' ');
        }
        let mut out = Vec::with_capacity(8 + header_bytes.len() + payload.len());
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Err(Error::Checkpoint(m));
        if bytes.len() < 8 {
            return bad(format!("file is {} bytes, too short for the header length", bytes.len()));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        let available = (bytes.len() - 8) as u64;
        if header_len > available {
            return bad(format!(
                "header length {header_len} exceeds the {available} bytes after the length prefix"
            ));
        }
        let header_end = 8 + header_len as usize;
        let header: Value = serde_json::from_slice(&bytes[8..header_end])
            .map_err(|e| Error::Checkpoint(format!("header is not valid JSON: {e}")))?;
        let header = match header {
            Value::Object(map) => map,
            _ => return bad("header is not a JSON object".into()),
        };
        let data = &bytes[header_end..];

        let mut metadata = BTreeMap::new();
        let mut spans = Vec::new();
        let mut tensors = BTreeMap::new();
        for (name, entry) in &header {
            if name == METADATA_KEY {
                let map = entry
                    .as_object()
                    .ok_or_else(|| Error::Checkpoint("`__metadata__` is not an object".into()))?;
                for (k, v) in map {
                    let v = v.as_str().ok_or_else(|| {
                        Error::Checkpoint(format!("metadata value for `{k}` is not a string"))
                    })?;
                    metadata.insert(k.clone(), v.to_string());
                }
                continue;
            }
            let field = |f: &str| {
                entry
                    .get(f)
                    .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` has no `{f}`")))
            };
            let dtype_str = field("dtype")?
                .as_str()
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}`: dtype is not a string")))?;
            let dtype = DType::parse(dtype_str).ok_or_else(|| {
                Error::Checkpoint(format!("tensor `{name}`: unsupported dtype {dtype_str}"))
            })?;
            let shape = field("shape")?
                .as_array()
                .and_then(|dims| dims.iter().map(|d| d.as_u64().map(|d| d as usize)).collect::<Option<Vec<_>>>())
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}`: shape is not a list of integers")))?;
            let offsets = field("data_offsets")?
                .as_array()
                .filter(|o| o.len() == 2)
                .and_then(|o| Some((o[0].as_u64()? as usize, o[1].as_u64()? as usize)))
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}`: data_offsets is not [start, end]")))?;
            let (start, end) = offsets;
            if start > end {
                return bad(format!("tensor `{name}`: data_offsets start {start} > end {end}"));
            }
            if end > data.len() {
                return bad(format!(
                    "tensor `{name}`: data ends at {end} but the payload has {} bytes (truncated)",
                    data.len()
                ));
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}`: shape {shape:?} overflows")))?;
            if numel * dtype.size() != end - start {
                return bad(format!(
                    "tensor `{name}`: shape {shape:?} of {dtype_str} needs {} bytes but offsets span {}",
                    numel * dtype.size(),
                    end - start
                ));
            }
            let raw = &data[start..end];
            let values: Vec<f32> = match dtype {
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                DType::F16 => raw
                    .chunks_exact(2)
                    .map(|c| f16::from_le_bytes(c.try_into().unwrap()).to_f32())
                    .collect(),
            };
            spans.push((start, end, name.clone()));
            tensors.insert(name.clone(), Tensor { dtype, shape, data: values });
        }

        spans.sort();
        let mut cursor = 0usize;
        for (start, end, name) in &spans {
            if *start < cursor {
                return bad(format!("tensor `{name}` overlaps the preceding tensor at byte {start}"));
            }
            if *start > cursor {
                return bad(format!("gap in payload before tensor `{name}` ({cursor}..{start})"));
            }
            cursor = *end;
        }
        if cursor != data.len() {
            return bad(format!(
                "payload has {} trailing bytes not covered by any tensor",
                data.len() - cursor
            ));
        }
        Ok(TensorCheckpoint { tensors, metadata })
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TensorCheckpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    TensorCheckpoint::from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn save_checkpoint(ckpt: &TensorCheckpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}
