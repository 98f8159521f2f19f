//! Versioned checkpoint archive: a JSON manifest plus named parameter blobs,
//! integrity-checked with a trailing SHA-256 digest.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "RSCK" | u32 version | u64 manifest_len | manifest JSON
//! u64 blob_count
//! per blob: u32 name_len | name | u32 dtype_len | dtype
//!           u32 ndim | u64 dims[ndim] | element data
//! sha256 digest of everything above
//! ```
//!
//! Writes land in a temporary sibling file first and are renamed into place,
//! so a crash never leaves a truncated archive under the target name.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};

use crate::err::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"RSCK";
const VERSION: u32 = 1;

/// A decoded archive: manifest plus blobs keyed by name.
#[derive(Debug, Clone)]
pub struct Container<S: Scalar> {
    pub manifest: serde_json::Value,
    pub blobs: BTreeMap<String, ArrayD<S>>,
}

pub fn write_container<S: Scalar>(
    path: &Path,
    manifest: &serde_json::Value,
    blobs: &[(String, ArrayD<S>)],
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let manifest_bytes = serde_json::to_vec(manifest)
        .map_err(|e| Error::format(format!("manifest serialization failed: {e}")))?;
    buf.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&manifest_bytes);
    buf.extend_from_slice(&(blobs.len() as u64).to_le_bytes());
    for (name, arr) in blobs {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        let dtype = S::DTYPE.as_bytes();
        buf.extend_from_slice(&(dtype.len() as u32).to_le_bytes());
        buf.extend_from_slice(dtype);
        buf.extend_from_slice(&(arr.ndim() as u32).to_le_bytes());
        for &d in arr.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        let mut data = Vec::with_capacity(arr.len() * S::BYTES);
        for &v in arr.iter() {
            v.write_le(&mut data);
        }
        buf.extend_from_slice(&data);
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);

    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&buf)?;
    tmp.flush()?;
    tmp.persist(path)
        .map_err(|e| Error::runtime(format!("could not move archive into place: {e}")))?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::format("archive truncated"));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_container<S: Scalar>(path: &Path) -> Result<Container<S>> {
    let raw = std::fs::read(path)?;
    if raw.len() < 4 + 4 + 8 + 32 {
        return Err(Error::format("archive too short"));
    }
    let (body, digest) = raw.split_at(raw.len() - 32);
    let computed = Sha256::digest(body);
    if computed.as_slice() != digest {
        return Err(Error::format("archive digest mismatch, file is corrupt"));
    }

    let mut cur = Cursor { data: body, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::format("not a checkpoint archive (bad magic)"));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::format(format!(
            "archive version {version} unsupported (expected {VERSION})"
        )));
    }
    let mlen = cur.u64()? as usize;
    let manifest: serde_json::Value = serde_json::from_slice(cur.take(mlen)?)
        .map_err(|e| Error::format(format!("manifest is not valid JSON: {e}")))?;
    let count = cur.u64()? as usize;
    let mut blobs = BTreeMap::new();
    for _ in 0..count {
        let nlen = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(nlen)?)
            .map_err(|_| Error::format("blob name is not UTF-8"))?
            .to_string();
        let dlen = cur.u32()? as usize;
        let dtype = std::str::from_utf8(cur.take(dlen)?)
            .map_err(|_| Error::format("blob dtype is not UTF-8"))?
            .to_string();
        if dtype != S::DTYPE {
            return Err(Error::format(format!(
                "blob '{name}' holds {dtype} data, expected {}",
                S::DTYPE
            )));
        }
        let ndim = cur.u32()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(cur.u64()? as usize);
        }
        let len: usize = dims.iter().product();
        let bytes = cur.take(len * S::BYTES)?;
        let mut vals = Vec::with_capacity(len);
        for chunk in bytes.chunks_exact(S::BYTES) {
            vals.push(S::read_le(chunk));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), vals)
            .map_err(|e| Error::format(format!("blob '{name}' has inconsistent shape: {e}")))?;
        if blobs.insert(name.clone(), arr).is_some() {
            return Err(Error::format(format!("duplicate blob '{name}'")));
        }
    }
    if cur.pos != body.len() {
        return Err(Error::format("trailing bytes after the last blob"));
    }
    Ok(Container { manifest, blobs })
}

/// Fetches a required string field from an archive manifest.
pub fn manifest_str<'a>(manifest: &'a serde_json::Value, key: &str) -> Result<&'a str> {
    manifest
        .get(key)
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::format(format!("manifest is missing string field '{key}'")))
}

/// Fetches a required integer field from an archive manifest.
pub fn manifest_u64(manifest: &serde_json::Value, key: &str) -> Result<u64> {
    manifest
        .get(key)
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::format(format!("manifest is missing integer field '{key}'")))
}
