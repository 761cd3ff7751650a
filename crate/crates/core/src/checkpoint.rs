//! Binary container for named f64 tensors.
//!
//! Layout: 8-byte magic, u32 little-endian header length, JSON header, then
//! every tensor's values as little-endian f64 in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"STCKPT01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    /// What the tensors belong to, e.g. `"seq2seq"` or `"classifier"`.
    pub kind: String,
    pub vocab_hash: String,
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Vec<usize>)>,
}

fn bad(path: &Path, detail: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

pub fn save(
    path: &Path,
    kind: &str,
    vocab_hash: &str,
    config: serde_json::Value,
    store: &ParamStore,
) -> Result<()> {
    let header = Header {
        kind: kind.to_string(),
        vocab_hash: vocab_hash.to_string(),
        config,
        tensors: store
            .iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut bytes = Vec::with_capacity(12 + json.len() + store.num_elements() * 8);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&u32::try_from(json.len()).map_err(|_| bad(path, "header too large"))?.to_le_bytes());
    bytes.extend_from_slice(&json);
    for (_, t) in store.iter() {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint without checking it against anything.
pub fn load(path: &Path) -> Result<(Header, ParamStore)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad(path, "not a checkpoint file (bad magic)"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = bytes
        .get(12..12 + hlen)
        .ok_or_else(|| bad(path, "truncated header"))?;
    let header: Header =
        serde_json::from_slice(body).map_err(|e| bad(path, format!("header: {e}")))?;
    let mut data = bytes[12 + hlen..].chunks_exact(8);
    let mut store = ParamStore::new();
    for (name, shape) in &header.tensors {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = data
            .by_ref()
            .take(n)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if values.len() != n {
            return Err(bad(path, format!("truncated data for tensor {name}")));
        }
        store.push(name.clone(), Tensor::new(shape.clone(), values)?);
    }
    if data.next().is_some() || !data.remainder().is_empty() {
        return Err(bad(path, "trailing bytes after tensor data"));
    }
    Ok((header, store))
}

/// Loads values into `store`, checking kind, vocabulary hash, names and shapes.
pub fn load_into(path: &Path, kind: &str, vocab_hash: &str, store: &mut ParamStore) -> Result<Header> {
    let (header, loaded) = load(path)?;
    if header.kind != kind {
        return Err(bad(path, format!("expected a {kind} checkpoint, found {}", header.kind)));
    }
    if header.vocab_hash != vocab_hash {
        return Err(bad(path, "vocabulary hash does not match the current vocabulary"));
    }
    store
        .check_layout(&loaded)
        .map_err(|e| bad(path, e.to_string()))?;
    store.copy_values_from(&loaded)?;
    Ok(header)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.push("w", Tensor::matrix(2, 2, vec![1.0, -2.5, f64::MIN_POSITIVE, 1e300]).unwrap());
        s.push("b", Tensor::vector(vec![0.1]));
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let s = store();
        save(&p, "test", "abc", serde_json::json!({"h": 2}), &s).unwrap();
        let mut back = store();
        back.get_mut(0).data_mut().fill(0.0);
        let header = load_into(&p, "test", "abc", &mut back).unwrap();
        assert_eq!(header.config["h"], 2);
        assert_eq!(back.content_hash(), s.content_hash());
    }

    #[test]
    fn mismatches_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save(&p, "test", "abc", serde_json::Value::Null, &store()).unwrap();
        assert!(load_into(&p, "other", "abc", &mut store()).is_err());
        assert!(load_into(&p, "test", "xyz", &mut store()).is_err());
        let mut wrong = ParamStore::new();
        wrong.push("w", Tensor::zeros(&[4]));
        wrong.push("b", Tensor::zeros(&[1]));
        assert!(load_into(&p, "test", "abc", &mut wrong).is_err());
        fs::write(&p, b"garbage").unwrap();
        assert!(load(&p).is_err());
    }
}
