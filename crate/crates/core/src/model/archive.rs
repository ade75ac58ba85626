// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tar container holding a JSON header and named little-endian `f32` arrays.
//!
//! Layout:
//!
//! ```text
//! header.json          {"format": "<tag>", "metadata": {...}, "arrays": [{"name", "dtype", "shape", "path"}]}
//! arrays/<name>.bin    raw little-endian f32, row-major
//! ```
//!
//! Entries are written with zeroed timestamps and sorted array names, so the
//! same content always produces the same bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const HEADER: &str = "header.json";
const DTYPE: &str = "f32le";

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    path: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    metadata: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub format: String,
    pub metadata: serde_json::Value,
    pub arrays: BTreeMap<String, ArrayD<f32>>,
}

fn append(builder: &mut tar::Builder<impl Write>, path: &str, bytes: &[u8]) -> Result<()> {
    let mut header = tar::Header::new_gnu();
    header.set_size(bytes.len() as u64);
    header.set_mode(0o644);
    header.set_mtime(0);
    header.set_entry_type(tar::EntryType::Regular);
    builder.append_data(&mut header, path, bytes)?;
    Ok(())
}

impl Archive {
    pub fn new(format: impl Into<String>, metadata: serde_json::Value) -> Self {
        Self {
            format: format.into(),
            metadata,
            arrays: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, array: ArrayD<f32>) {
        self.arrays.insert(name.into(), array);
    }

    pub fn write_to(&self, writer: impl Write) -> Result<()> {
        let mut builder = tar::Builder::new(writer);
        let entries: Vec<ArrayEntry> = self
            .arrays
            .iter()
            .map(|(name, a)| ArrayEntry {
                name: name.clone(),
                dtype: DTYPE.into(),
                shape: a.shape().to_vec(),
                path: format!("arrays/{name}.bin"),
            })
            .collect();
        let header = Header {
            format: self.format.clone(),
            metadata: self.metadata.clone(),
            arrays: entries,
        };
        append(&mut builder, HEADER, &serde_json::to_vec_pretty(&header)?)?;
        for (entry, array) in header.arrays.iter().zip(self.arrays.values()) {
            let mut bytes = Vec::with_capacity(array.len() * 4);
            for v in array.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            append(&mut builder, &entry.path, &bytes)?;
        }
        builder.into_inner()?.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    /// Reads an archive, requiring its format tag to equal `expect_format`.
    pub fn read_from(reader: impl Read, expect_format: &str) -> Result<Self> {
        // tar reports truncated or garbled input as I/O errors.
        let files = (|| -> std::io::Result<BTreeMap<String, Vec<u8>>> {
            let mut files = BTreeMap::new();
            let mut archive = tar::Archive::new(reader);
            for entry in archive.entries()? {
                let mut entry = entry?;
                let path = entry.path()?.to_string_lossy().into_owned();
                let mut buf = Vec::with_capacity(entry.size() as usize);
                entry.read_to_end(&mut buf)?;
                files.insert(path, buf);
            }
            Ok(files)
        })()
        .map_err(|e| Error::Format(format!("unreadable archive: {e}")))?;
        let header: Header = serde_json::from_slice(
            files
                .get(HEADER)
                .ok_or_else(|| Error::format("archive has no header.json"))?,
        )?;
        if header.format != expect_format {
            return Err(Error::format(format!(
                "expected a `{expect_format}` archive, found `{}`",
                header.format
            )));
        }
        let mut arrays = BTreeMap::new();
        for entry in header.arrays {
            if entry.dtype != DTYPE {
                return Err(Error::format(format!(
                    "unsupported dtype `{}`",
                    entry.dtype
                )));
            }
            let bytes = files
                .get(&entry.path)
                .ok_or_else(|| Error::format(format!("missing array file `{}`", entry.path)))?;
            let numel: usize = entry.shape.iter().product();
            if bytes.len() != numel * 4 {
                return Err(Error::format(format!(
                    "array `{}` holds {} bytes, shape {:?} needs {}",
                    entry.name,
                    bytes.len(),
                    entry.shape,
                    numel * 4
                )));
            }
            let data: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let array = ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
                .map_err(|e| Error::format(e.to_string()))?;
            arrays.insert(entry.name, array);
        }
        Ok(Self {
            format: header.format,
            metadata: header.metadata,
            arrays,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    #[test]
    fn round_trip_preserves_arrays_and_is_deterministic() {
        let mut a = Archive::new("test-v1", serde_json::json!({"k": 3}));
        a.insert(
            "x",
            Array::from_shape_fn((2, 3), |(i, j)| (i * 3 + j) as f32 - 0.5).into_dyn(),
        );
        a.insert("y", Array::from_elem(4, 1.25f32).into_dyn());
        let bytes = a.to_bytes().unwrap();
        assert_eq!(bytes, a.to_bytes().unwrap());
        let back = Archive::read_from(&bytes[..], "test-v1").unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn wrong_format_tag_is_rejected() {
        let bytes = Archive::new("a-v1", serde_json::Value::Null)
            .to_bytes()
            .unwrap();
        let err = Archive::read_from(&bytes[..], "b-v1").unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }
}
