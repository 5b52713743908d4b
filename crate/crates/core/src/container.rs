//! Single-file container used for checkpoints, transfer bundles and datasets.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic "STTLPACK"
//! 8       4     u32 format version (currently 1)
//! 12      8     u64 manifest length M
//! 20      M     manifest, UTF-8 text, one entry per line
//! 20+M    ...   blob payloads, concatenated in manifest order
//! end-32  32    SHA-256 of every preceding byte
//! ```
//!
//! Manifest lines are `kind=<kind>`, `meta.<key>=<value>` or
//! `blob=<name>;<dtype>;<d0>,<d1>,...` with dtype `f32` or `f64`. A blob's
//! payload length is the product of its dimensions times the dtype width.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"STTLPACK";
pub const VERSION: u32 = 1;
const HEADER: usize = 20;
const TRAILER: usize = 32;

/// Lower-case hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a container file (bad magic)")]
    BadMagic,
    #[error("unsupported container version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checksum mismatch: file is truncated or corrupted")]
    Checksum,
    #[error("file too short for its declared layout")]
    Truncated,
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("expected a {expected} container, found {found}")]
    Kind { expected: String, found: String },
    #[error("missing entry {0}")]
    Missing(String),
}

#[derive(Clone, Debug, PartialEq)]
pub enum BlobData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl BlobData {
    fn dtype(&self) -> &'static str {
        match self {
            BlobData::F32(_) => "f32",
            BlobData::F64(_) => "f64",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            BlobData::F32(v) => v.len(),
            BlobData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            BlobData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            BlobData::F64(v) => v.clone(),
        }
    }

    pub fn to_f32(&self) -> Vec<f32> {
        match self {
            BlobData::F32(v) => v.clone(),
            BlobData::F64(v) => v.iter().map(|&x| x as f32).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: BlobData,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Container {
    pub kind: String,
    pub meta: BTreeMap<String, String>,
    pub blobs: Vec<Blob>,
}

fn check_token(s: &str, what: &str, forbidden: &[char]) -> Result<(), ContainerError> {
    if s.is_empty() && what != "meta value" {
        return Err(ContainerError::Manifest(format!("empty {what}")));
    }
    if s.contains('\n') || s.contains('\r') || s.chars().any(|c| forbidden.contains(&c)) {
        return Err(ContainerError::Manifest(format!(
            "{what} {s:?} contains a reserved character"
        )));
    }
    Ok(())
}

impl Container {
    pub fn new(kind: &str) -> Self {
        Container {
            kind: kind.to_string(),
            ..Default::default()
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Result<&str, ContainerError> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| ContainerError::Missing(format!("meta.{key}")))
    }

    pub fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T, ContainerError> {
        self.get(key)?
            .parse()
            .map_err(|_| ContainerError::Manifest(format!("meta.{key} has an invalid value")))
    }

    pub fn push_f32(&mut self, name: &str, shape: &[usize], data: Vec<f32>) {
        self.blobs.push(Blob {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: BlobData::F32(data),
        });
    }

    pub fn push_f64(&mut self, name: &str, shape: &[usize], data: Vec<f64>) {
        self.blobs.push(Blob {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: BlobData::F64(data),
        });
    }

    pub fn blob(&self, name: &str) -> Result<&Blob, ContainerError> {
        self.blobs
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| ContainerError::Missing(format!("blob {name}")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), ContainerError> {
        if self.kind != kind {
            return Err(ContainerError::Kind {
                expected: kind.to_string(),
                found: self.kind.clone(),
            });
        }
        Ok(())
    }

    fn manifest(&self) -> Result<String, ContainerError> {
        check_token(&self.kind, "kind", &['='])?;
        let mut m = format!("kind={}\n", self.kind);
        for (k, v) in &self.meta {
            check_token(k, "meta key", &['='])?;
            check_token(v, "meta value", &[])?;
            m.push_str(&format!("meta.{k}={v}\n"));
        }
        for b in &self.blobs {
            check_token(&b.name, "blob name", &[';', '='])?;
            if b.shape.iter().product::<usize>() != b.data.len() {
                return Err(ContainerError::Manifest(format!(
                    "blob {} holds {} values but has shape {:?}",
                    b.name,
                    b.data.len(),
                    b.shape
                )));
            }
            let dims: Vec<String> = b.shape.iter().map(usize::to_string).collect();
            m.push_str(&format!("blob={};{};{}\n", b.name, b.data.dtype(), dims.join(",")));
        }
        Ok(m)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ContainerError> {
        let manifest = self.manifest()?;
        let payload: usize = self
            .blobs
            .iter()
            .map(|b| match &b.data {
                BlobData::F32(v) => 4 * v.len(),
                BlobData::F64(v) => 8 * v.len(),
            })
            .sum();
        let mut out = Vec::with_capacity(HEADER + manifest.len() + payload + TRAILER);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for b in &self.blobs {
            match &b.data {
                BlobData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                BlobData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ContainerError> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        if bytes.len() < HEADER + TRAILER {
            return Err(ContainerError::Checksum);
        }
        let (body, digest) = bytes.split_at(bytes.len() - TRAILER);
        if Sha256::digest(body).as_slice() != digest {
            return Err(ContainerError::Checksum);
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(ContainerError::Version {
                found: version,
                expected: VERSION,
            });
        }
        let mlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let manifest = body
            .get(HEADER..HEADER.checked_add(mlen).ok_or(ContainerError::Truncated)?)
            .ok_or(ContainerError::Truncated)?;
        let manifest =
            std::str::from_utf8(manifest).map_err(|_| ContainerError::Manifest("manifest is not UTF-8".into()))?;

        let mut c = Container::default();
        let mut kind = None;
        let mut pos = HEADER + mlen;
        for line in manifest.lines() {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ContainerError::Manifest(format!("line without '=': {line:?}")))?;
            if key == "kind" {
                kind = Some(value.to_string());
            } else if let Some(k) = key.strip_prefix("meta.") {
                c.meta.insert(k.to_string(), value.to_string());
            } else if key == "blob" {
                let mut parts = value.split(';');
                let (Some(name), Some(dtype), Some(dims), None) =
                    (parts.next(), parts.next(), parts.next(), parts.next())
                else {
                    return Err(ContainerError::Manifest(format!("bad blob line {line:?}")));
                };
                let shape: Vec<usize> = dims
                    .split(',')
                    .map(|d| d.parse())
                    .collect::<Result<_, _>>()
                    .map_err(|_| ContainerError::Manifest(format!("bad dimensions in {line:?}")))?;
                let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
                let n = n.ok_or_else(|| ContainerError::Manifest(format!("blob {name} is too large")))?;
                let width = match dtype {
                    "f32" => 4,
                    "f64" => 8,
                    other => return Err(ContainerError::Manifest(format!("unknown dtype {other}"))),
                };
                let len = n.checked_mul(width).ok_or(ContainerError::Truncated)?;
                let end = pos.checked_add(len).ok_or(ContainerError::Truncated)?;
                let raw = body.get(pos..end).ok_or(ContainerError::Truncated)?;
                pos = end;
                let data = if width == 4 {
                    BlobData::F32(
                        raw.chunks_exact(4)
                            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                            .collect(),
                    )
                } else {
                    BlobData::F64(
                        raw.chunks_exact(8)
                            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                            .collect(),
                    )
                };
                c.blobs.push(Blob {
                    name: name.to_string(),
                    shape,
                    data,
                });
            } else {
                return Err(ContainerError::Manifest(format!("unknown entry {key}")));
            }
        }
        if pos != body.len() {
            return Err(ContainerError::Manifest("trailing bytes after the last blob".into()));
        }
        c.kind = kind.ok_or_else(|| ContainerError::Manifest("missing kind".into()))?;
        Ok(c)
    }

    pub fn write(&self, path: &Path) -> Result<(), ContainerError> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|source| ContainerError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self, ContainerError> {
        let bytes = fs::read(path).map_err(|source| ContainerError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}
