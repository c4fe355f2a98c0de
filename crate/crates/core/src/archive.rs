//! Single-file checkpoint container.
//!
//! Layout: the magic line `DIFFAUG-ARCHIVE`, one JSON header line
//! (`format_version`, `kind`, free-form `meta`, tensor table), then the raw
//! little-endian `f32` tensor data in table order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::manifest::write_atomic;

const MAGIC: &[u8] = b"DIFFAUG-ARCHIVE\n";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArchiveHeader {
    format_version: u32,
    kind: String,
    meta: Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub kind: String,
    pub meta: Value,
    tensors: Vec<(TensorEntry, Vec<f32>)>,
}

impl Archive {
    pub fn new(kind: impl Into<String>, meta: Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: &[f32]) {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape/data mismatch"
        );
        self.tensors.push((
            TensorEntry {
                name: name.into(),
                shape: shape.to_vec(),
            },
            data.to_vec(),
        ));
    }

    pub fn get(&self, name: &str) -> Result<(&[usize], &[f32])> {
        self.tensors
            .iter()
            .find(|(e, _)| e.name == name)
            .map(|(e, d)| (e.shape.as_slice(), d.as_slice()))
            .ok_or_else(|| Error::data(format!("archive '{}' has no tensor '{name}'", self.kind)))
    }

    /// Tensor data, checking the stored shape.
    pub fn get_shaped(&self, name: &str, shape: &[usize]) -> Result<&[f32]> {
        let (s, d) = self.get(name)?;
        if s != shape {
            return Err(Error::data(format!(
                "tensor '{name}' has shape {s:?}, expected {shape:?}"
            )));
        }
        Ok(d)
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(e, _)| e.name.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = ArchiveHeader {
            format_version: ARCHIVE_VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self.tensors.iter().map(|(e, _)| e.clone()).collect(),
        };
        let mut out = MAGIC.to_vec();
        out.extend(serde_json::to_vec(&header).expect("archive header serializes"));
        out.push(b'\n');
        for (_, d) in &self.tensors {
            for v in d {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let rest = bytes
            .strip_prefix(MAGIC)
            .ok_or_else(|| Error::data("not a diffaug archive (bad magic)"))?;
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::data("archive header is not terminated"))?;
        let header: ArchiveHeader = serde_json::from_slice(&rest[..nl])
            .map_err(|e| Error::data(format!("bad archive header: {e}")))?;
        if header.format_version != ARCHIVE_VERSION {
            return Err(Error::data(format!(
                "unsupported archive version {}",
                header.format_version
            )));
        }
        let mut data = &rest[nl + 1..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            if data.len() < n * 4 {
                return Err(Error::data(format!(
                    "archive truncated in tensor '{}'",
                    e.name
                )));
            }
            let vals = data[..n * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            data = &data[n * 4..];
            tensors.push((e, vals));
        }
        if !data.is_empty() {
            return Err(Error::data("trailing bytes after archive tensors"));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn expect_kind(self, kind: &str) -> Result<Self> {
        if self.kind != kind {
            return Err(Error::data(format!(
                "expected a '{kind}' archive, found '{}'",
                self.kind
            )));
        }
        Ok(self)
    }
}
