//! Tagged array container shared by every binary format.
//!
//! Layout: the tag followed by `\n`, the manifest length as a little-endian
//! `u64`, the JSON manifest, then every array's values as little-endian
//! `f64` in manifest order. The manifest is
//! `{"meta": ..., "arrays": [{"name": ..., "shape": [...]}, ...]}`.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use cdbuffer_core::Tensor;

use crate::error::{RunError, RunResult};

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    meta: Value,
    arrays: Vec<ArrayEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub tag: String,
    pub meta: Value,
    pub arrays: Vec<(String, Tensor)>,
}

fn bad(tag: &str, m: impl std::fmt::Display) -> RunError {
    RunError::Io(format!("malformed {tag} file: {m}"))
}

impl Container {
    pub fn new(tag: &str, meta: Value) -> Self {
        Self { tag: tag.to_string(), meta, arrays: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        self.arrays.push((name.into(), t.clone()));
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = Manifest {
            meta: self.meta.clone(),
            arrays: self.arrays.iter().map(|(n, t)| ArrayEntry { name: n.clone(), shape: t.shape().to_vec() }).collect(),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let n: usize = self.arrays.iter().map(|(_, t)| t.numel()).sum();
        let mut out = Vec::with_capacity(self.tag.len() + 9 + json.len() + 8 * n);
        out.extend_from_slice(self.tag.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.arrays {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], tag: &str) -> RunResult<Self> {
        let head = tag.len() + 1;
        if bytes.len() < head + 8 || &bytes[..tag.len()] != tag.as_bytes() || bytes[tag.len()] != b'\n' {
            let end = bytes.iter().position(|&b| b == b'\n').unwrap_or(bytes.len()).min(32);
            return Err(bad(tag, format!("expected tag line {tag:?}, found {:?}", String::from_utf8_lossy(&bytes[..end]))));
        }
        let len = u64::from_le_bytes(bytes[head..head + 8].try_into().expect("8 bytes")) as usize;
        let body = head + 8;
        let json = bytes.get(body..body.saturating_add(len)).ok_or_else(|| bad(tag, "truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(json).map_err(|e| bad(tag, e))?;
        let mut pos = body + len;
        let mut arrays = Vec::with_capacity(manifest.arrays.len());
        for e in manifest.arrays {
            let n: usize = e.shape.iter().product();
            let raw = bytes.get(pos..pos + 8 * n).ok_or_else(|| bad(tag, format!("array {} truncated", e.name)))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            arrays.push((e.name, Tensor::new(e.shape, data).map_err(|x| bad(tag, x))?));
            pos += 8 * n;
        }
        if pos != bytes.len() {
            return Err(bad(tag, format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Self { tag: tag.to_string(), meta: manifest.meta, arrays })
    }

    pub fn get(&self, name: &str) -> RunResult<&Tensor> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| bad(&self.tag, format!("missing array {name}")))
    }

    /// Array `name`, required to have the given shape.
    pub fn get_shaped(&self, name: &str, shape: &[usize]) -> RunResult<Tensor> {
        let t = self.get(name)?;
        if t.shape() != shape {
            return Err(bad(&self.tag, format!("array {name} has shape {:?}, expected {shape:?}", t.shape())));
        }
        Ok(t.clone())
    }

    pub fn meta_as<T: serde::de::DeserializeOwned>(&self) -> RunResult<T> {
        serde_json::from_value(self.meta.clone()).map_err(|e| bad(&self.tag, e))
    }
}
