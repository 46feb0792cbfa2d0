//! Reader and writer for the safetensors container.
//!
//! Layout:
//!
//! ```text
//! [u64 LE header length N][N bytes of JSON header][data region]
//! ```
//!
//! The header maps tensor names to `{"dtype", "shape", "data_offsets"}`,
//! with offsets relative to the start of the data region, plus an optional
//! `"__metadata__"` string map. Only `F32` and `F64` payloads are accepted.
//!
//! Serialization is canonical: metadata first, tensors sorted by name,
//! packed in name order, no whitespace in the header. Equal inputs always
//! produce identical bytes.

use std::collections::BTreeMap;
use std::fmt;

use serde::de::{Deserializer, MapAccess, Visitor};
use serde::Deserialize;
use thiserror::Error;

use crate::linalg::Matrix;

/// Upper bound on the header length accepted from untrusted input.
pub const MAX_HEADER_BYTES: u64 = 100_000_000;

const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TensorError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("tensors {first:?} and {second:?} have overlapping data offsets")]
    OverlappingOffsets { first: String, second: String },
    #[error("tensor {name:?}: shape needs {expected} bytes but offsets span {actual}")]
    ShapeSizeMismatch {
        name: String,
        expected: u64,
        actual: u64,
    },
    #[error("tensor {name:?}: unsupported dtype {dtype:?}")]
    UnsupportedDtype { name: String, dtype: String },
    #[error("tensor {name:?}: data offsets [{begin}, {end}] outside data region of {len} bytes")]
    OffsetsOutOfBounds {
        name: String,
        begin: u64,
        end: u64,
        len: u64,
    },
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("tensor {0:?} not found")]
    NotFound(String),
    #[error("tensor {name:?} has rank {rank}, expected a matrix")]
    NotAMatrix { name: String, rank: usize },
    #[error("tensor {0:?} contains a non-finite value")]
    NonFiniteValue(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn byte_width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "F32",
            Dtype::F64 => "F64",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "F32" => Some(Dtype::F32),
            "F64" => Some(Dtype::F64),
            _ => None,
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub data_offsets: (usize, usize),
}

impl TensorInfo {
    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn byte_len(&self) -> usize {
        self.data_offsets.1 - self.data_offsets.0
    }
}

/// A parsed, validated container. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    tensors: BTreeMap<String, TensorInfo>,
    metadata: Option<BTreeMap<String, String>>,
    bytes: Vec<u8>,
    data_start: usize,
}

// Header entries are collected as a list so duplicate names can be detected;
// a map would silently keep the last one.
struct HeaderEntries(Vec<(String, serde_json::Value)>);

impl<'de> Deserialize<'de> for HeaderEntries {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = HeaderEntries;
            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a JSON object")
            }
            fn visit_map<A: MapAccess<'de>>(
                self,
                mut map: A,
            ) -> std::result::Result<HeaderEntries, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, serde_json::Value>()? {
                    out.push((k, v));
                }
                Ok(HeaderEntries(out))
            }
        }
        d.deserialize_map(V)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    dtype: String,
    shape: Vec<u64>,
    data_offsets: [u64; 2],
}

/// Parses and validates a complete container held in memory.
pub fn parse_file(bytes: &[u8]) -> Result<TensorFile> {
    TensorFile::from_bytes(bytes.to_vec())
}

impl TensorFile {
    /// Parses a container, taking ownership of the buffer without copying
    /// tensor payloads.
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        let malformed = |m: &str| TensorError::MalformedHeader(m.to_string());
        if bytes.len() < 8 {
            return Err(malformed("file shorter than the 8-byte length prefix"));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        if header_len > MAX_HEADER_BYTES {
            return Err(TensorError::MalformedHeader(format!(
                "header length {header_len} exceeds limit {MAX_HEADER_BYTES}"
            )));
        }
        let available = (bytes.len() - 8) as u64;
        if header_len > available {
            return Err(TensorError::MalformedHeader(format!(
                "header length {header_len} exceeds the {available} bytes after the prefix"
            )));
        }
        let data_start = 8 + header_len as usize;
        let text = std::str::from_utf8(&bytes[8..data_start])
            .map_err(|e| TensorError::MalformedHeader(format!("header is not UTF-8: {e}")))?;
        let entries: HeaderEntries = serde_json::from_str(text).map_err(|e| {
            TensorError::MalformedHeader(format!("header is not a JSON object: {e}"))
        })?;
        let data_len = (bytes.len() - data_start) as u64;

        let mut tensors = BTreeMap::new();
        let mut metadata = None;
        for (name, value) in entries.0 {
            if name == METADATA_KEY {
                if metadata.is_some() {
                    return Err(TensorError::DuplicateName(name));
                }
                let m: BTreeMap<String, String> = serde_json::from_value(value).map_err(|e| {
                    TensorError::MalformedHeader(format!(
                        "__metadata__ must map strings to strings: {e}"
                    ))
                })?;
                metadata = Some(m);
                continue;
            }
            if tensors.contains_key(&name) {
                return Err(TensorError::DuplicateName(name));
            }
            let raw: RawEntry = serde_json::from_value(value)
                .map_err(|e| TensorError::MalformedHeader(format!("entry {name:?}: {e}")))?;
            let info = validate_entry(&name, raw, data_len)?;
            tensors.insert(name, info);
        }

        let mut spans: Vec<(&String, (usize, usize))> = tensors
            .iter()
            .map(|(n, i)| (n, i.data_offsets))
            .filter(|(_, (b, e))| e > b)
            .collect();
        spans.sort_by_key(|(_, (b, e))| (*b, *e));
        for w in spans.windows(2) {
            if w[1].1 .0 < w[0].1 .1 {
                return Err(TensorError::OverlappingOffsets {
                    first: w[0].0.clone(),
                    second: w[1].0.clone(),
                });
            }
        }

        Ok(Self {
            tensors,
            metadata,
            bytes,
            data_start,
        })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Tensor names in lexicographic order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &TensorInfo)> {
        self.tensors.iter().map(|(n, i)| (n.as_str(), i))
    }

    pub fn info(&self, name: &str) -> Result<&TensorInfo> {
        self.tensors
            .get(name)
            .ok_or_else(|| TensorError::NotFound(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn metadata(&self) -> Option<&BTreeMap<String, String>> {
        self.metadata.as_ref()
    }

    /// Raw little-endian payload of a tensor.
    pub fn payload(&self, name: &str) -> Result<&[u8]> {
        let info = self.info(name)?;
        let (b, e) = info.data_offsets;
        Ok(&self.bytes[self.data_start + b..self.data_start + e])
    }

    /// All values of a tensor, widened to `f64`.
    pub fn read_values(&self, name: &str) -> Result<Vec<f64>> {
        let info = self.info(name)?;
        Ok(decode(info.dtype, self.payload(name)?))
    }

    /// Reads a rank-2 tensor as a row-major matrix. `F32` values are widened
    /// exactly.
    pub fn read_matrix(&self, name: &str) -> Result<Matrix> {
        let info = self.info(name)?;
        if info.shape.len() != 2 {
            return Err(TensorError::NotAMatrix {
                name: name.to_string(),
                rank: info.shape.len(),
            });
        }
        let values = self.read_values(name)?;
        Matrix::new(info.shape[0], info.shape[1], values)
            .map_err(|_| TensorError::NonFiniteValue(name.to_string()))
    }

    /// Total element count over all tensors.
    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(TensorInfo::element_count).sum()
    }

    /// The buffer the file was parsed from.
    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }
}

/// Free-function form of [`TensorFile::read_matrix`].
pub fn read_matrix(file: &TensorFile, name: &str) -> Result<Matrix> {
    file.read_matrix(name)
}

fn validate_entry(name: &str, raw: RawEntry, data_len: u64) -> Result<TensorInfo> {
    let dtype = Dtype::parse(&raw.dtype).ok_or_else(|| TensorError::UnsupportedDtype {
        name: name.to_string(),
        dtype: raw.dtype.clone(),
    })?;
    let [begin, end] = raw.data_offsets;
    if begin > end || end > data_len {
        return Err(TensorError::OffsetsOutOfBounds {
            name: name.to_string(),
            begin,
            end,
            len: data_len,
        });
    }
    let expected = raw
        .shape
        .iter()
        .try_fold(dtype.byte_width() as u64, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| TensorError::MalformedHeader(format!("tensor {name:?}: shape overflows")))?;
    let actual = end - begin;
    if expected != actual {
        return Err(TensorError::ShapeSizeMismatch {
            name: name.to_string(),
            expected,
            actual,
        });
    }
    // Everything is bounded by data_len at this point, so fits in usize.
    Ok(TensorInfo {
        dtype,
        shape: raw.shape.iter().map(|&d| d as usize).collect(),
        data_offsets: (begin as usize, end as usize),
    })
}

fn decode(dtype: Dtype, bytes: &[u8]) -> Vec<f64> {
    match dtype {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    }
}

fn encode(name: &str, dtype: Dtype, values: &[f64], out: &mut Vec<u8>) -> Result<()> {
    for &v in values {
        if !v.is_finite() {
            return Err(TensorError::NonFiniteValue(name.to_string()));
        }
        match dtype {
            Dtype::F32 => {
                let x = v as f32;
                if !x.is_finite() {
                    return Err(TensorError::NonFiniteValue(name.to_string()));
                }
                out.extend_from_slice(&x.to_le_bytes());
            }
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct PendingTensor {
    dtype: Dtype,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

/// Collects tensors and serializes them canonically.
#[derive(Debug, Clone, Default)]
pub struct TensorWriter {
    tensors: BTreeMap<String, PendingTensor>,
    metadata: Option<BTreeMap<String, String>>,
}

impl TensorWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_metadata(mut self, metadata: Option<BTreeMap<String, String>>) -> Self {
        self.metadata = metadata;
        self
    }

    fn insert(&mut self, name: &str, t: PendingTensor) -> Result<()> {
        if name == METADATA_KEY || self.tensors.contains_key(name) {
            return Err(TensorError::DuplicateName(name.to_string()));
        }
        self.tensors.insert(name.to_string(), t);
        Ok(())
    }

    pub fn add_matrix(&mut self, name: &str, m: &Matrix, dtype: Dtype) -> Result<()> {
        self.add_values(name, vec![m.rows(), m.cols()], m.as_slice(), dtype)
    }

    pub fn add_values(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        values: &[f64],
        dtype: Dtype,
    ) -> Result<()> {
        let count: usize = shape.iter().product();
        if count != values.len() {
            return Err(TensorError::ShapeSizeMismatch {
                name: name.to_string(),
                expected: (count * dtype.byte_width()) as u64,
                actual: (values.len() * dtype.byte_width()) as u64,
            });
        }
        let mut bytes = Vec::with_capacity(count * dtype.byte_width());
        encode(name, dtype, values, &mut bytes)?;
        self.insert(
            name,
            PendingTensor {
                dtype,
                shape,
                bytes,
            },
        )
    }

    /// Adds an already-encoded payload verbatim.
    pub fn add_raw(
        &mut self,
        name: &str,
        dtype: Dtype,
        shape: Vec<usize>,
        bytes: Vec<u8>,
    ) -> Result<()> {
        let expected = shape.iter().product::<usize>() * dtype.byte_width();
        if expected != bytes.len() {
            return Err(TensorError::ShapeSizeMismatch {
                name: name.to_string(),
                expected: expected as u64,
                actual: bytes.len() as u64,
            });
        }
        self.insert(
            name,
            PendingTensor {
                dtype,
                shape,
                bytes,
            },
        )
    }

    /// Copies a tensor from a parsed file without re-encoding it.
    pub fn copy_from(&mut self, file: &TensorFile, name: &str) -> Result<()> {
        let info = file.info(name)?;
        self.add_raw(
            name,
            info.dtype,
            info.shape.clone(),
            file.payload(name)?.to_vec(),
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::from("{");
        let mut first = true;
        if let Some(meta) = &self.metadata {
            header.push_str(&json_string(METADATA_KEY));
            header.push(':');
            header.push_str(&serde_json::to_string(meta).expect("string map serializes"));
            first = false;
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            if !first {
                header.push(',');
            }
            first = false;
            let end = offset + t.bytes.len();
            let shape: Vec<String> = t.shape.iter().map(usize::to_string).collect();
            header.push_str(&format!(
                "{}:{{\"dtype\":\"{}\",\"shape\":[{}],\"data_offsets\":[{},{}]}}",
                json_string(name),
                t.dtype,
                shape.join(","),
                offset,
                end
            ));
            offset = end;
        }
        header.push('}');

        let mut out = Vec::with_capacity(8 + header.len() + offset);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for t in self.tensors.values() {
            out.extend_from_slice(&t.bytes);
        }
        out
    }
}

fn json_string(s: &str) -> String {
    serde_json::to_string(s).expect("strings serialize")
}

/// Serializes named matrices with one dtype.
pub fn write_file(
    tensors: &BTreeMap<String, Matrix>,
    dtype: Dtype,
    metadata: Option<&BTreeMap<String, String>>,
) -> Result<Vec<u8>> {
    let mut w = TensorWriter::new().with_metadata(metadata.cloned());
    for (name, m) in tensors {
        w.add_matrix(name, m, dtype)?;
    }
    Ok(w.to_bytes())
}
