//! Binary parameter files: one line of compact JSON (the header) terminated
//! by `\n`, followed by every tensor listed in the header as row-major
//! little-endian `f64`, in header order.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    /// Free-form metadata (dims, seed, frozen flag, ...).
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorMeta>,
}

pub fn encode(kind: &str, meta: serde_json::Value, tensors: &[(&str, &Array2<f64>)]) -> Vec<u8> {
    let header = Header {
        kind: kind.to_owned(),
        meta,
        tensors: tensors
            .iter()
            .map(|(n, t)| TensorMeta { name: (*n).to_owned(), rows: t.nrows(), cols: t.ncols() })
            .collect(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    for (_, t) in tensors {
        for x in t.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8], kind: &str) -> Result<(Header, Vec<Array2<f64>>)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("missing header terminator".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..nl])?;
    if header.kind != kind {
        return Err(Error::Checkpoint(format!("expected a {kind:?} file, found {:?}", header.kind)));
    }
    let mut body = &bytes[nl + 1..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let len = t.rows * t.cols;
        if body.len() < len * 8 {
            return Err(Error::Checkpoint(format!("truncated tensor {}", t.name)));
        }
        let data: Vec<f64> = body[..len * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        body = &body[len * 8..];
        tensors.push(Array2::from_shape_vec((t.rows, t.cols), data).expect("shape matches length"));
    }
    if !body.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", body.len())));
    }
    Ok((header, tensors))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_owned()));
    }
    fs::read(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn layout_is_header_line_then_le_floats() {
        let a = array![[1.5, -2.0]];
        let bytes = encode("demo", serde_json::json!({"d": 2}), &[("a", &a)]);
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        assert_eq!(bytes.len() - nl - 1, 16);
        assert_eq!(&bytes[nl + 1..nl + 9], &1.5f64.to_le_bytes());
        let (h, t) = decode(&bytes, "demo").unwrap();
        assert_eq!(h.meta["d"], 2);
        assert_eq!(t[0], a);
        assert!(decode(&bytes, "other").is_err());
        assert!(decode(&bytes[..bytes.len() - 1], "demo").is_err());
    }
}
