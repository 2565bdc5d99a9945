//! `.ens` ensemble files.
//!
//! ```text
//! fluxmc-ensemble 1
//! metadata: {"members":..., ...}
//! checksum: sha256:<hex of metadata line bytes followed by payload>
//!
//! <payload>
//! ```
//!
//! The payload is `(M + 1) * m` little-endian IEEE-754 doubles: the member
//! array row-major, then the control `mu`.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::ensemble::{EnsembleStore, StoreMetadata};
use crate::error::{Result, StoreError};
use crate::linalg::Matrix;

pub const MAGIC: &str = "fluxmc-ensemble";
pub const VERSION: u32 = 1;

/// Parsed header of an `.ens` file.
#[derive(Debug, Clone, PartialEq)]
pub struct StoreHeader {
    pub version: u32,
    pub metadata: StoreMetadata,
    pub checksum: String,
    /// Byte offset of the payload.
    pub payload_offset: usize,
}

fn checksum(metadata_json: &str, payload: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(metadata_json.as_bytes());
    h.update(payload);
    hex::encode(h.finalize())
}

pub fn to_bytes(store: &EnsembleStore) -> Result<Vec<u8>> {
    let json = serde_json::to_string(store.metadata())
        .map_err(|e| StoreError::MalformedHeader(e.to_string()))?;
    let values = store.members().as_slice().iter().chain(store.control());
    let mut payload = Vec::with_capacity((store.len() + 1) * store.dim() * 8);
    for v in values {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    let mut out = Vec::with_capacity(payload.len() + json.len() + 128);
    writeln!(out, "{MAGIC} {VERSION}")?;
    writeln!(out, "metadata: {json}")?;
    writeln!(out, "checksum: sha256:{}", checksum(&json, &payload))?;
    writeln!(out)?;
    out.extend_from_slice(&payload);
    Ok(out)
}

fn next_line<'a>(bytes: &'a [u8], pos: &mut usize) -> std::result::Result<&'a str, StoreError> {
    let rest = &bytes[*pos..];
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| StoreError::MalformedHeader("header ended early".into()))?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end])
        .map_err(|_| StoreError::MalformedHeader("header is not UTF-8".into()))
}

fn parse_header(bytes: &[u8]) -> std::result::Result<(StoreHeader, String), StoreError> {
    let mut pos = 0;
    let first = next_line(bytes, &mut pos).map_err(|_| StoreError::BadMagic)?;
    let (magic, version) = first.split_once(' ').ok_or(StoreError::BadMagic)?;
    if magic != MAGIC {
        return Err(StoreError::BadMagic);
    }
    let version: u32 = version
        .parse()
        .map_err(|_| StoreError::MalformedHeader(format!("bad version field {version:?}")))?;
    if version != VERSION {
        return Err(StoreError::UnsupportedVersion(version));
    }
    let json = next_line(bytes, &mut pos)?
        .strip_prefix("metadata: ")
        .ok_or_else(|| StoreError::MalformedHeader("missing metadata line".into()))?
        .to_string();
    let metadata: StoreMetadata =
        serde_json::from_str(&json).map_err(|e| StoreError::MalformedHeader(e.to_string()))?;
    let sum = next_line(bytes, &mut pos)?
        .strip_prefix("checksum: sha256:")
        .ok_or_else(|| StoreError::MalformedHeader("missing checksum line".into()))?
        .to_string();
    if !next_line(bytes, &mut pos)?.is_empty() {
        return Err(StoreError::MalformedHeader(
            "expected a blank line before the payload".into(),
        ));
    }
    Ok((
        StoreHeader {
            version,
            metadata,
            checksum: sum,
            payload_offset: pos,
        },
        json,
    ))
}

pub fn from_bytes(bytes: &[u8]) -> Result<EnsembleStore> {
    let (header, json) = parse_header(bytes)?;
    let meta = header.metadata;
    let payload = &bytes[header.payload_offset..];
    let expected = meta
        .members
        .checked_add(1)
        .and_then(|r| r.checked_mul(meta.m))
        .and_then(|c| c.checked_mul(8))
        .ok_or_else(|| StoreError::MetadataInconsistent("shape overflows".into()))?;
    if payload.len() != expected {
        return Err(StoreError::ShapeMismatch {
            expected,
            actual: payload.len(),
        }
        .into());
    }
    let actual = checksum(&json, payload);
    if actual != header.checksum {
        return Err(StoreError::ChecksumMismatch {
            expected: header.checksum,
            actual,
        }
        .into());
    }
    let mut values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let control = values.split_off(meta.members * meta.m);
    let members = Matrix::new(meta.members, meta.m, values)
        .map_err(|e| StoreError::MetadataInconsistent(e.to_string()))?;
    EnsembleStore::new(meta, members, control)
}

pub fn save_store(store: &EnsembleStore, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(store)?)?;
    Ok(())
}

pub fn load_store(path: impl AsRef<Path>) -> Result<EnsembleStore> {
    from_bytes(&fs::read(path)?)
}

/// Reads and parses only the text header.
pub fn read_header(path: impl AsRef<Path>) -> Result<StoreHeader> {
    let bytes = fs::read(path)?;
    Ok(parse_header(&bytes)?.0)
}
