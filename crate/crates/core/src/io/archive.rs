//! Named-tensor archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "YOLE" | version: u32 | manifest_len: u64 | manifest (UTF-8 JSON) | blob
//! ```
//!
//! The manifest maps each tensor name to
//! `{"dtype": "f32"|"f64", "shape": [..], "offset": u64, "byteLength": u64}`
//! with offsets relative to the start of the blob. Entries are written in
//! name order, each starting on an 8-byte boundary. An optional
//! `"__metadata__"` key holds a string→string map.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"YOLE";
pub const VERSION: u32 = 1;
pub const METADATA_KEY: &str = "__metadata__";
const HEADER_LEN: usize = 16;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ArchiveError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported archive version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated: {0}")]
    Truncated(String),
    #[error("malformed manifest: {0}")]
    BadManifest(String),
    #[error("unknown dtype `{0}`")]
    UnknownDtype(String),
    #[error("tensor `{name}` declares {declared} bytes but its shape needs {expected}")]
    ByteLengthMismatch { name: String, declared: u64, expected: u64 },
    #[error("tensor `{0}` lies outside the data blob")]
    OutOfBounds(String),
    #[error("tensors `{0}` and `{1}` overlap")]
    Overlap(String, String),
    #[error("invalid tensor name `{0}`")]
    InvalidName(String),
    #[error("tensor `{name}` has dtype {found}, expected {expected}")]
    DtypeMismatch {
        name: String,
        found: DType,
        expected: DType,
    },
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("io error: {0}")]
    Io(String),
}

impl ArchiveError {
    /// Stable numeric code per error class.
    pub fn code(&self) -> u32 {
        match self {
            ArchiveError::BadMagic => 1,
            ArchiveError::UnsupportedVersion(_) => 2,
            ArchiveError::Truncated(_) => 3,
            ArchiveError::BadManifest(_) => 4,
            ArchiveError::UnknownDtype(_) => 5,
            ArchiveError::ByteLengthMismatch { .. } => 6,
            ArchiveError::OutOfBounds(_) => 7,
            ArchiveError::Overlap(..) => 8,
            ArchiveError::InvalidName(_) => 9,
            ArchiveError::DtypeMismatch { .. } => 10,
            ArchiveError::MissingTensor(_) => 11,
            ArchiveError::Io(_) => 12,
        }
    }
}

/// A tensor of either supported dtype.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to the requested scalar type (lossless when dtypes match).
    pub fn to_scalar<T: Scalar>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }

    fn byte_len(&self) -> usize {
        self.shape().iter().product::<usize>() * self.dtype().size_of()
    }

    fn write_bytes(&self, out: &mut Vec<u8>) {
        match self {
            AnyTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(out)),
            AnyTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(out)),
        }
    }
}

impl From<Tensor<f32>> for AnyTensor {
    fn from(t: Tensor<f32>) -> Self {
        AnyTensor::F32(t)
    }
}

impl From<Tensor<f64>> for AnyTensor {
    fn from(t: Tensor<f64>) -> Self {
        AnyTensor::F64(t)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct ManifestEntry {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    byte_length: u64,
}

/// Tensors plus free-form string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    pub tensors: BTreeMap<String, AnyTensor>,
    pub metadata: BTreeMap<String, String>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: impl Into<AnyTensor>) {
        self.tensors.insert(name.into(), t.into());
    }

    pub fn get(&self, name: &str) -> Result<&AnyTensor, ArchiveError> {
        self.tensors
            .get(name)
            .ok_or_else(|| ArchiveError::MissingTensor(name.to_string()))
    }

    /// Fetches `name` converted to `T`.
    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>, ArchiveError> {
        Ok(self.get(name)?.to_scalar())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ArchiveError> {
        encode(&self.tensors, &self.metadata)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ArchiveError> {
        decode(bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ArchiveError> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| ArchiveError::Io(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ArchiveError> {
        let bytes = std::fs::read(path).map_err(|e| ArchiveError::Io(e.to_string()))?;
        decode(&bytes)
    }
}

/// Writes `tensors` to `path` with no metadata.
pub fn save_archive(tensors: &BTreeMap<String, AnyTensor>, path: impl AsRef<Path>) -> Result<(), ArchiveError> {
    let bytes = encode(tensors, &BTreeMap::new())?;
    std::fs::write(path, bytes).map_err(|e| ArchiveError::Io(e.to_string()))
}

pub fn load_archive(path: impl AsRef<Path>) -> Result<BTreeMap<String, AnyTensor>, ArchiveError> {
    Archive::load(path).map(|a| a.tensors)
}

fn pad8(n: usize) -> usize {
    (n + 7) & !7
}

pub fn encode(
    tensors: &BTreeMap<String, AnyTensor>,
    metadata: &BTreeMap<String, String>,
) -> Result<Vec<u8>, ArchiveError> {
    let mut manifest = Map::new();
    let mut offset = 0usize;
    for (name, t) in tensors {
        if name.is_empty() || name == METADATA_KEY {
            return Err(ArchiveError::InvalidName(name.clone()));
        }
        let entry = ManifestEntry {
            dtype: t.dtype().as_str().to_string(),
            shape: t.shape().to_vec(),
            offset: offset as u64,
            byte_length: t.byte_len() as u64,
        };
        manifest.insert(name.clone(), serde_json::to_value(entry).unwrap());
        offset += pad8(t.byte_len());
    }
    if !metadata.is_empty() {
        manifest.insert(METADATA_KEY.to_string(), serde_json::to_value(metadata).unwrap());
    }
    let manifest = serde_json::to_vec(&Value::Object(manifest)).unwrap();

    let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    let blob_start = out.len();
    for t in tensors.values() {
        t.write_bytes(&mut out);
        let written = out.len() - blob_start;
        out.resize(blob_start + pad8(written), 0);
    }
    Ok(out)
}

fn read_tensor<T: Scalar>(shape: Vec<usize>, bytes: &[u8]) -> Tensor<T> {
    let size = T::DTYPE.size_of();
    let data = bytes.chunks_exact(size).map(T::read_le).collect();
    Tensor::from_parts(shape, data)
}

pub fn decode(bytes: &[u8]) -> Result<Archive, ArchiveError> {
    if bytes.len() < 4 {
        return Err(ArchiveError::Truncated("missing magic".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(ArchiveError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(ArchiveError::Truncated("incomplete header".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(ArchiveError::UnsupportedVersion(version));
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let available = (bytes.len() - HEADER_LEN) as u64;
    if manifest_len > available {
        return Err(ArchiveError::Truncated(format!(
            "manifest needs {manifest_len} bytes, {available} available"
        )));
    }
    let manifest_end = HEADER_LEN + manifest_len as usize;
    let manifest: Value = serde_json::from_slice(&bytes[HEADER_LEN..manifest_end])
        .map_err(|e| ArchiveError::BadManifest(e.to_string()))?;
    let Value::Object(map) = manifest else {
        return Err(ArchiveError::BadManifest("manifest is not an object".into()));
    };
    let blob = &bytes[manifest_end..];

    let mut archive = Archive::new();
    let mut ranges: Vec<(u64, u64, String)> = Vec::new();
    let mut pending = Vec::new();
    for (name, value) in map {
        if name == METADATA_KEY {
            archive.metadata =
                serde_json::from_value(value).map_err(|e| ArchiveError::BadManifest(format!("metadata: {e}")))?;
            continue;
        }
        if name.is_empty() {
            return Err(ArchiveError::InvalidName(name));
        }
        let entry: ManifestEntry =
            serde_json::from_value(value).map_err(|e| ArchiveError::BadManifest(format!("{name}: {e}")))?;
        let dtype = match entry.dtype.as_str() {
            "f32" => DType::F32,
            "f64" => DType::F64,
            other => return Err(ArchiveError::UnknownDtype(other.to_string())),
        };
        if entry.shape.is_empty() || entry.shape.contains(&0) {
            return Err(ArchiveError::BadManifest(format!(
                "{name}: invalid shape {:?}",
                entry.shape
            )));
        }
        let expected = entry
            .shape
            .iter()
            .try_fold(dtype.size_of() as u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| ArchiveError::BadManifest(format!("{name}: shape overflows")))?;
        if expected != entry.byte_length {
            return Err(ArchiveError::ByteLengthMismatch {
                name,
                declared: entry.byte_length,
                expected,
            });
        }
        let end = entry
            .offset
            .checked_add(entry.byte_length)
            .ok_or_else(|| ArchiveError::OutOfBounds(name.clone()))?;
        ranges.push((entry.offset, end, name.clone()));
        pending.push((name, dtype, entry));
    }
    ranges.sort();
    // Walk in offset order: if the first range past the end starts inside the
    // blob or its final alignment padding, the file was cut short; otherwise
    // the offset points nowhere.
    if let Some((start, _, name)) = ranges.iter().find(|r| r.1 > blob.len() as u64) {
        if *start <= pad8(blob.len()) as u64 {
            return Err(ArchiveError::Truncated(format!("tensor `{name}` data cut short")));
        }
        return Err(ArchiveError::OutOfBounds(name.clone()));
    }
    for pair in ranges.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(ArchiveError::Overlap(pair[0].2.clone(), pair[1].2.clone()));
        }
    }
    for (name, dtype, entry) in pending {
        let start = entry.offset as usize;
        let slice = &blob[start..start + entry.byte_length as usize];
        let t = match dtype {
            DType::F32 => AnyTensor::F32(read_tensor(entry.shape, slice)),
            DType::F64 => AnyTensor::F64(read_tensor(entry.shape, slice)),
        };
        archive.tensors.insert(name, t);
    }
    Ok(archive)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_archive_round_trips() {
        let a = Archive::new();
        let bytes = a.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"YOLE");
        assert_eq!(Archive::from_bytes(&bytes).unwrap(), a);
    }

    #[test]
    fn single_tensor_file_size() {
        let mut a = Archive::new();
        a.insert("w", Tensor::<f32>::new([2, 2], vec![1., 2., 3., 4.]).unwrap());
        let bytes = a.to_bytes().unwrap();
        let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 4 + 4 + 8 + manifest_len + 16);
        assert_eq!(Archive::from_bytes(&bytes).unwrap(), a);
    }

    #[test]
    fn entries_are_eight_byte_aligned() {
        let mut a = Archive::new();
        a.insert("a", Tensor::<f32>::ones([3]));
        a.insert("b", Tensor::<f64>::ones([1]));
        let bytes = a.to_bytes().unwrap();
        let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let manifest: Value = serde_json::from_slice(&bytes[16..16 + manifest_len]).unwrap();
        assert_eq!(manifest["b"]["offset"], 16);
        assert_eq!(bytes.len() - 16 - manifest_len, 24);
    }

    #[test]
    fn metadata_round_trips() {
        let mut a = Archive::new();
        a.insert("x", Tensor::<f64>::ones([1]));
        a.metadata.insert("names".into(), "[\"cat\"]".into());
        assert_eq!(Archive::from_bytes(&a.to_bytes().unwrap()).unwrap(), a);
    }

    #[test]
    fn corruption_classes_are_distinct() {
        let mut a = Archive::new();
        a.insert("x", Tensor::<f32>::ones([4]));
        let good = a.to_bytes().unwrap();

        let mut bad = good.clone();
        bad[0] = b'Z';
        assert_eq!(decode(&bad), Err(ArchiveError::BadMagic));

        let mut bad = good.clone();
        bad[4] = 9;
        assert_eq!(decode(&bad), Err(ArchiveError::UnsupportedVersion(9)));

        let cut = &good[..good.len() - 3];
        assert!(matches!(decode(cut), Err(ArchiveError::Truncated(_))));

        let with_manifest = |json: &str| {
            let mut out = Vec::new();
            out.extend_from_slice(MAGIC);
            out.extend_from_slice(&VERSION.to_le_bytes());
            out.extend_from_slice(&(json.len() as u64).to_le_bytes());
            out.extend_from_slice(json.as_bytes());
            out.extend_from_slice(&[0u8; 32]);
            out
        };
        let overlap = with_manifest(
            r#"{"a":{"dtype":"f32","shape":[4],"offset":0,"byteLength":16},"b":{"dtype":"f32","shape":[2],"offset":8,"byteLength":8}}"#,
        );
        assert!(matches!(decode(&overlap), Err(ArchiveError::Overlap(..))));
        let dtype = with_manifest(r#"{"a":{"dtype":"i8","shape":[4],"offset":0,"byteLength":4}}"#);
        assert_eq!(decode(&dtype), Err(ArchiveError::UnknownDtype("i8".into())));
        let len = with_manifest(r#"{"a":{"dtype":"f32","shape":[4],"offset":0,"byteLength":12}}"#);
        assert!(matches!(decode(&len), Err(ArchiveError::ByteLengthMismatch { .. })));
        let oob = with_manifest(r#"{"a":{"dtype":"f32","shape":[2],"offset":64,"byteLength":8}}"#);
        assert!(matches!(decode(&oob), Err(ArchiveError::OutOfBounds(_))));
        let junk = with_manifest("{not json");
        assert!(matches!(decode(&junk), Err(ArchiveError::BadManifest(_))));
    }

    #[test]
    fn cutting_into_the_blob_is_truncation_whatever_the_name_order() {
        let mut a = Archive::new();
        for name in ["a", "b", "c", "d"] {
            a.insert(name, Tensor::<f32>::ones([3]));
        }
        let good = a.to_bytes().unwrap();
        // the last 4 bytes are padding, so cuts start inside tensor data
        for cut in 5..=56 {
            let r = decode(&good[..good.len() - cut]);
            assert!(matches!(r, Err(ArchiveError::Truncated(_))), "cut {cut}: {r:?}");
        }
    }
}
