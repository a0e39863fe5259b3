//! Binary checkpoint of named parameter tensors.
//!
//! Layout:
//!
//! ```text
//! ADPCKPT1                      8 bytes of magic
//! header length                 u64, little endian
//! header                        UTF-8 text, one line per tensor:
//!                               `<name> <d0>x<d1>x... <byte offset>`
//! data                          f64 little endian, at the given offsets
//! ```
//!
//! Offsets are relative to the start of the data section. Values are stored
//! as raw IEEE-754 bits, so a round trip is bit-exact.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"ADPCKPT1";

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn encode<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<Vec<u8>> {
    let mut header = String::new();
    let mut data = Vec::new();
    for (name, t) in tensors {
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(corrupt(format!("tensor name `{name}` cannot be stored")));
        }
        let shape = if t.shape().is_empty() {
            "scalar".to_string()
        } else {
            t.shape()
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join("x")
        };
        header.push_str(&format!("{name} {shape} {}\n", data.len()));
        for v in t.data() {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(16 + header.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&data);
    Ok(out)
}

fn parse_shape(s: &str) -> Option<Vec<usize>> {
    if s == "scalar" {
        return Some(Vec::new());
    }
    s.split('x').map(|d| d.parse().ok()).collect()
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint (bad magic)"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|h| h.checked_add(16))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| corrupt("header length exceeds file size"))?;
    let header =
        std::str::from_utf8(&bytes[16..header_end]).map_err(|_| corrupt("header is not UTF-8"))?;
    let data = &bytes[header_end..];
    let mut out = Vec::new();
    for (lineno, line) in header.lines().enumerate() {
        let fields: Vec<&str> = line.split(' ').collect();
        let bad = || corrupt(format!("malformed header line {}: `{line}`", lineno + 1));
        let [name, shape, offset] = fields[..] else {
            return Err(bad());
        };
        let shape = parse_shape(shape).ok_or_else(bad)?;
        let offset: usize = offset.parse().map_err(|_| bad())?;
        let count: usize = shape.iter().product();
        let end = offset
            .checked_add(count * 8)
            .filter(|&e| e <= data.len())
            .ok_or_else(|| corrupt(format!("{name}: data runs past end of file")))?;
        let values: Vec<f64> = data[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let tensor = if shape.is_empty() {
            Tensor::scalar(values[0])
        } else {
            Tensor::new(shape, values)?
        };
        out.push((name.to_string(), tensor));
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, params: &ParamStore) -> Result<()> {
    let bytes = encode(params.iter())?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Reads `path` into `params`, which must have exactly the same names and
/// shapes.
pub fn load_checkpoint(path: &Path, params: &mut ParamStore) -> Result<()> {
    params.load(read_checkpoint(path)?)
}
