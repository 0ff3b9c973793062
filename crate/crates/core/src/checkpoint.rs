//! Tensor checkpoint files.
//!
//! Layout: an 8-byte little-endian header length, a JSON header, then the raw
//! little-endian payloads in header order:
//!
//! ```text
//! {"metadata": {...}, "tensors": [{"name": "params/global.stem.w", "dtype": "f32",
//!                                  "shape": [16, 3, 3, 3], "offset": 0}, ...]}
//! ```
//!
//! Offsets are relative to the start of the payload section. Tensor names are
//! `group/name` so one file can hold parameters and optimizer moments.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    metadata: Value,
    tensors: Vec<Entry>,
}

pub type Groups<T> = BTreeMap<String, ParamStore<T>>;

pub fn to_bytes<T: Real>(metadata: &Value, groups: &[(&str, &ParamStore<T>)]) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    for (group, store) in groups {
        if group.contains('/') {
            return Err(Error::invalid(format!("checkpoint group `{group}` contains '/'")));
        }
        for (name, t) in store.iter() {
            entries.push(Entry {
                name: format!("{group}/{name}"),
                dtype: T::DTYPE.to_string(),
                shape: t.shape().to_vec(),
                offset: payload.len(),
            });
            for &x in t.data() {
                x.write_le(&mut payload);
            }
        }
    }
    let header = serde_json::to_vec(&Header {
        metadata: metadata.clone(),
        tensors: entries,
    })?;
    let mut out = Vec::with_capacity(8 + header.len() + payload.len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn read_as<T: Real, S: Real>(bytes: &[u8]) -> Vec<T> {
    bytes
        .chunks_exact(S::BYTES)
        .map(|c| T::c(S::read_le(c).f64()))
        .collect()
}

pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<(Value, Groups<T>)> {
    let parse_err = |offset: usize, msg: String| Error::Parse {
        what: "checkpoint".into(),
        offset,
        msg,
    };
    if bytes.len() < 8 {
        return Err(parse_err(0, "missing header length".into()));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let hend = 8usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| parse_err(0, format!("header length {hlen} exceeds file")))?;
    let header: Header = serde_json::from_slice(&bytes[8..hend])
        .map_err(|e| parse_err(8, e.to_string()))?;
    let payload = &bytes[hend..];
    let mut groups: Groups<T> = BTreeMap::new();
    for e in header.tensors {
        let width = match e.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(parse_err(hend + e.offset, format!("unsupported dtype {other}"))),
        };
        let n: usize = e.shape.iter().product();
        let end = e.offset + n * width;
        if end > payload.len() {
            return Err(parse_err(hend + e.offset, format!("tensor `{}` truncated", e.name)));
        }
        let raw = &payload[e.offset..end];
        let data = if width == 4 {
            read_as::<T, f32>(raw)
        } else {
            read_as::<T, f64>(raw)
        };
        let (group, name) = e
            .name
            .split_once('/')
            .ok_or_else(|| parse_err(8, format!("tensor name `{}` lacks a group", e.name)))?;
        groups
            .entry(group.to_string())
            .or_default()
            .insert(name, Tensor::new(&e.shape, data)?);
    }
    Ok((header.metadata, groups))
}

pub fn save<T: Real>(path: &Path, metadata: &Value, groups: &[(&str, &ParamStore<T>)]) -> Result<()> {
    let bytes = to_bytes(metadata, groups)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: &Path) -> Result<(Value, Groups<T>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("a.w", Tensor::new(&[2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5e-7]).unwrap());
        s.insert("b", Tensor::new(&[3], vec![0.1, 0.2, 0.3]).unwrap());
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = store();
        let meta = json!({"epoch": 3, "note": "x"});
        let bytes = to_bytes(&meta, &[("params", &s), ("m", &s)]).unwrap();
        let (m2, g) = from_bytes::<f32>(&bytes).unwrap();
        assert_eq!(m2, meta);
        for (k, t) in s.iter() {
            let back = g["params"].get(k).unwrap();
            let a: Vec<u32> = t.data().iter().map(|x| x.to_bits()).collect();
            let b: Vec<u32> = back.data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(a, b);
        }
        let again = to_bytes(&m2, &[("params", &g["params"]), ("m", &g["m"])]).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let bytes = to_bytes(&json!({}), &[("params", &store())]).unwrap();
        let err = from_bytes::<f32>(&bytes[..bytes.len() - 2]).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }), "{err}");
        assert!(from_bytes::<f32>(&bytes[..4]).is_err());
    }
}
