//! Weight files: `TFW1`, a little-endian `u32` manifest length, a JSON
//! manifest of tensor names and shapes (plus the optional network config as
//! TOML), then every tensor as 32-bit little-endian floats in manifest order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TFW1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<String>,
    pub tensors: Vec<TensorEntry>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format {
        what: "weight file",
        msg: msg.into(),
    }
}

pub fn write<T: Real>(
    mut out: impl Write,
    store: &ParamStore<T>,
    config: Option<&str>,
) -> std::io::Result<()> {
    let manifest = Manifest {
        config: config.map(str::to_string),
        tensors: store
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&manifest).expect("manifest serialises");
    out.write_all(MAGIC)?;
    out.write_all(&(header.len() as u32).to_le_bytes())?;
    out.write_all(&header)?;
    for (_, t) in store.iter() {
        for &x in t.data() {
            out.write_all(&(x.f64() as f32).to_le_bytes())?;
        }
    }
    out.flush()
}

pub fn read<T: Real>(mut input: impl Read) -> Result<(Manifest, Vec<Tensor<T>>)> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| format_err(format!("read failed: {e}")))?;
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(format_err("missing TFW1 header"));
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let header = bytes
        .get(8..8 + len)
        .ok_or_else(|| format_err("truncated manifest"))?;
    let manifest: Manifest =
        serde_json::from_slice(header).map_err(|e| format_err(format!("bad manifest: {e}")))?;
    let mut body = bytes[8 + len..].chunks_exact(4);
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let count: usize = entry.shape.iter().product();
        let data: Vec<T> = body
            .by_ref()
            .take(count)
            .map(|b| T::c(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
            .collect();
        if data.len() != count {
            return Err(format_err(format!(
                "data for `{}` is truncated",
                entry.name
            )));
        }
        tensors.push(Tensor::new(entry.shape.clone(), data)?);
    }
    if body.next().is_some() || !body.remainder().is_empty() {
        return Err(format_err("trailing bytes after the last tensor"));
    }
    Ok((manifest, tensors))
}

pub fn save<T: Real>(path: &Path, store: &ParamStore<T>, config: Option<&str>) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write(std::io::BufWriter::new(f), store, config).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: &Path) -> Result<(Manifest, Vec<Tensor<T>>)> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read(std::io::BufReader::new(f))
}

/// Load a file into an existing store, checking names and shapes.
pub fn load_into<T: Real>(path: &Path, store: &mut ParamStore<T>) -> Result<Manifest> {
    let (manifest, tensors) = load(path)?;
    if manifest.tensors.len() != store.len() {
        return Err(format_err(format!(
            "file has {} tensors, model has {}",
            manifest.tensors.len(),
            store.len()
        )));
    }
    for (entry, (name, _)) in manifest.tensors.iter().zip(store.iter()) {
        if entry.name != name {
            return Err(format_err(format!(
                "expected `{name}`, file has `{}`",
                entry.name
            )));
        }
    }
    store.load(tensors)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_in_memory() {
        let mut s = ParamStore::<f32>::new();
        s.push(
            "a",
            Tensor::new([2, 2], vec![1.0, -2.5, 3.25, 0.1]).unwrap(),
        );
        s.push("b.c", Tensor::scalar(7.0));
        let mut buf = Vec::new();
        write(&mut buf, &s, Some("x = 1")).unwrap();
        let (m, t) = read::<f32>(buf.as_slice()).unwrap();
        assert_eq!(m.config.as_deref(), Some("x = 1"));
        assert_eq!(m.tensors[1].name, "b.c");
        assert_eq!(t, s.tensors());
        buf.pop();
        assert!(read::<f32>(buf.as_slice()).is_err());
        assert!(read::<f32>(&b"TFW0"[..]).is_err());
    }
}
