//! Parameter artifacts: one JSON header line, then the flat parameter vector
//! as little-endian f64.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamHeader {
    pub arch: String,
    pub d_model: usize,
    #[serde(rename = "T")]
    pub chunk_len: usize,
    /// Action dimension.
    pub d: usize,
    pub seed: u64,
    pub n_params: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    /// Architecture-specific extras (hidden widths, expert counts, ...).
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub extra: serde_json::Value,
}

/// Hex SHA-256 of the bytes.
pub fn config_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_params<W: Write>(mut w: W, header: &ParamHeader, params: &[f64]) -> Result<()> {
    if header.n_params != params.len() {
        return Err(Error::invalid(
            "param header",
            format!("n_params {} but {} values", header.n_params, params.len()),
        ));
    }
    let io = |e| Error::io("<params>", e);
    serde_json::to_writer(&mut w, header)?;
    w.write_all(b"\n").map_err(io)?;
    let mut bytes = Vec::with_capacity(params.len() * 8);
    for p in params {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    w.write_all(&bytes).map_err(io)
}

pub fn read_params<R: Read>(r: R) -> Result<(ParamHeader, Vec<f64>)> {
    let io = |e| Error::io("<params>", e);
    let mut r = BufReader::new(r);
    let mut line = String::new();
    r.read_line(&mut line).map_err(io)?;
    let header: ParamHeader = serde_json::from_str(line.trim_end())?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(io)?;
    if bytes.len() != header.n_params * 8 {
        return Err(Error::invalid(
            "param file",
            format!("{} payload bytes for {} params", bytes.len(), header.n_params),
        ));
    }
    let params = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((header, params))
}

pub fn save_params(path: &Path, header: &ParamHeader, params: &[f64]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_params(&mut w, header, params)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_params(path: &Path) -> Result<(ParamHeader, Vec<f64>)> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_params(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(n: usize) -> ParamHeader {
        ParamHeader {
            arch: "mlp".into(),
            d_model: 4,
            chunk_len: 8,
            d: 2,
            seed: 7,
            n_params: n,
            config_hash: Some(config_hash(b"{}")),
            extra: serde_json::json!({"hidden": [64, 64]}),
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let p = vec![1.5, -0.0, f64::MIN_POSITIVE, 1e300, std::f64::consts::PI];
        let mut buf = Vec::new();
        write_params(&mut buf, &header(p.len()), &p).unwrap();
        let first = buf.split(|&b| b == b'\n').next().unwrap();
        let text = std::str::from_utf8(first).unwrap();
        assert!(text.contains("\"T\":8") && text.contains("\"d_model\":4"));
        assert_eq!(buf.len(), first.len() + 1 + 8 * p.len());
        let (h, q) = read_params(&buf[..]).unwrap();
        assert_eq!(h, header(p.len()));
        assert!(p.iter().zip(&q).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn truncated_payload_rejected() {
        let mut buf = Vec::new();
        write_params(&mut buf, &header(2), &[1.0, 2.0]).unwrap();
        buf.pop();
        assert!(read_params(&buf[..]).is_err());
        assert!(write_params(Vec::new(), &header(3), &[1.0]).is_err());
    }

    #[test]
    fn sha256_known_value() {
        assert_eq!(
            config_hash(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("theta.bin");
        save_params(&path, &header(1), &[0.25]).unwrap();
        assert_eq!(load_params(&path).unwrap().1, vec![0.25]);
    }
}
