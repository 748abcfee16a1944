//! Single-file tensor archive.
//!
//! Layout: 8-byte magic, little-endian u64 header length, JSON header, then
//! the concatenated f64 payload in little-endian byte order. The header
//! records tensor names, shapes and offsets plus a free-form string metadata
//! map. Writing the same content twice produces identical bytes, which the
//! determinism contracts rely on.

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"WHTAR01\0";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in f64 elements.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

/// An ordered collection of named f64 tensors plus string metadata.
#[derive(Debug, Clone, Default)]
pub struct TensorArchive {
    pub meta: BTreeMap<String, String>,
    tensors: Vec<(String, ArrayD<f64>)>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert or replace a tensor. Insertion order is preserved on disk.
    pub fn insert(&mut self, name: &str, tensor: ArrayD<f64>) {
        if let Some(slot) = self.tensors.iter_mut().find(|(n, _)| n == name) {
            slot.1 = tensor;
        } else {
            self.tensors.push((name.to_string(), tensor));
        }
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.get(name)
            .ok_or_else(|| Error::Data(format!("archive has no tensor named {name:?}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn meta_get(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Data(format!("archive metadata missing key {key:?}")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, tensor) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: tensor.shape().to_vec(),
                offset,
            });
            offset += tensor.len() as u64;
        }
        let header = Header {
            meta: self.meta.clone(),
            tensors: entries,
        };
        let header_json =
            serde_json::to_vec(&header).map_err(|e| Error::Data(format!("header encode: {e}")))?;

        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        file.write_all(MAGIC)?;
        file.write_all(&(header_json.len() as u64).to_le_bytes())?;
        file.write_all(&header_json)?;
        for (_, tensor) in &self.tensors {
            // Row-major traversal; arrays are kept in standard layout.
            for &v in tensor.iter() {
                file.write_all(&v.to_le_bytes())?;
            }
        }
        file.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        file.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Data(format!(
                "{} is not a tensor archive (bad magic)",
                path.display()
            )));
        }
        let mut len_bytes = [0u8; 8];
        file.read_exact(&mut len_bytes)?;
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let mut header_json = vec![0u8; header_len];
        file.read_exact(&mut header_json)?;
        let header: Header = serde_json::from_slice(&header_json)
            .map_err(|e| Error::Data(format!("header decode: {e}")))?;

        let mut payload = Vec::new();
        file.read_to_end(&mut payload)?;
        if payload.len() % 8 != 0 {
            return Err(Error::Data("payload is not a whole number of f64s".into()));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();

        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let count: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start.checked_add(count).filter(|&e| e <= values.len()).ok_or_else(
                || Error::Data(format!("tensor {:?} overruns archive payload", entry.name)),
            )?;
            let data = values[start..end].to_vec();
            let array = ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
                .map_err(|e| Error::Data(format!("tensor {:?}: {e}", entry.name)))?;
            tensors.push((entry.name, array));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn round_trip_preserves_tensors_and_meta() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");

        let mut arc = TensorArchive::new();
        arc.meta.insert("tool_version".into(), "0.1.0".into());
        arc.insert("a", array![[1.0, 2.0], [3.0, -4.5]].into_dyn());
        arc.insert("b", array![0.25].into_dyn());
        arc.write(&path).unwrap();

        let back = TensorArchive::read(&path).unwrap();
        assert_eq!(back.meta_get("tool_version").unwrap(), "0.1.0");
        assert_eq!(back.get("a").unwrap(), arc.get("a").unwrap());
        assert_eq!(back.get("b").unwrap(), arc.get("b").unwrap());
        assert_eq!(back.names().collect::<Vec<_>>(), vec!["a", "b"]);
    }

    #[test]
    fn identical_content_writes_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("one.bin");
        let p2 = dir.path().join("two.bin");

        let mut arc = TensorArchive::new();
        arc.meta.insert("seed".into(), "42".into());
        arc.insert("w", ndarray::Array::linspace(0.0, 1.0, 64).into_dyn());
        arc.write(&p1).unwrap();
        arc.write(&p2).unwrap();

        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn bad_magic_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.bin");
        std::fs::write(&path, b"not an archive at all").unwrap();
        assert!(matches!(TensorArchive::read(&path), Err(Error::Data(_))));
    }

    #[test]
    fn insert_replaces_existing_name() {
        let mut arc = TensorArchive::new();
        arc.insert("x", array![1.0].into_dyn());
        arc.insert("x", array![2.0].into_dyn());
        assert_eq!(arc.len(), 1);
        assert_eq!(arc.get("x").unwrap()[[0]], 2.0);
    }
}
