//! Named parameter storage and the `WGT1` weight file.
//!
//! `WGT1` layout, all integers u32 little-endian:
//! magic `"WGT1"`, entry count, then per entry: name length, UTF-8 name,
//! rank, extents, and `product(extents)` f32 LE values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const WGT_MAGIC: &[u8; 4] = b"WGT1";

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    tensor: Tensor,
    trainable: bool,
}

/// Ordered map of named tensors. Trainable entries are optimised; the rest
/// (batch-norm running statistics) are buffers that travel with the weights.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor,
        trainable: bool,
    ) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Contract(format!(
                "parameter {name:?} already exists"
            )));
        }
        self.entries.insert(name, Entry { tensor, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|e| e.trainable)
    }

    /// Marks every entry as a non-trainable buffer.
    pub fn freeze(&mut self) {
        for e in self.entries.values_mut() {
            e.trainable = false;
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(k, _)| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.len())
            .sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(WGT_MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, e) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(e.tensor.shape().len() as u32).to_le_bytes());
            for &d in e.tensor.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in e.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a weight file into `(name, tensor)` pairs in file order.
    pub fn parse_bytes(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            if pos + n > bytes.len() {
                return Err(Error::Length {
                    expected: pos + n,
                    actual: bytes.len(),
                });
            }
            let s = &bytes[pos..pos + n];
            pos += n;
            Ok(s)
        };
        if take(4)? != WGT_MAGIC {
            return Err(Error::Format("bad weight file magic".into()));
        }
        let word = |b: &[u8]| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize;
        let count = word(take(4)?);
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let len = word(take(4)?);
            let name = String::from_utf8(take(len)?.to_vec())
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let rank = word(take(4)?);
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(word(take(4)?));
            }
            let n: usize = shape.iter().product();
            let data = take(4 * n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            out.push((name, Tensor::new(shape, data)?));
        }
        if pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes in weight file",
                bytes.len() - pos
            )));
        }
        Ok(out)
    }

    /// Overwrites every entry from a weight file. The file must contain
    /// exactly this store's names with matching shapes.
    pub fn load_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let parsed = Self::parse_bytes(bytes)?;
        if parsed.len() != self.entries.len() {
            return Err(Error::Format(format!(
                "weight file has {} entries, network expects {}",
                parsed.len(),
                self.entries.len()
            )));
        }
        for (name, t) in parsed {
            let e = self
                .entries
                .get_mut(&name)
                .ok_or_else(|| Error::Format(format!("unexpected parameter {name:?}")))?;
            if e.tensor.shape() != t.shape() {
                return Err(Error::Dimension(format!(
                    "{name}: file shape {:?}, expected {:?}",
                    t.shape(),
                    e.tensor.shape()
                )));
            }
            e.tensor = t;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        self.load_bytes(&bytes)
    }
}
