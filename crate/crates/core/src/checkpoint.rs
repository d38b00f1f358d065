//! Binary checkpoint format.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "DMSC"
//! 4       4     format version (u32 LE), currently 1
//! 8       4     header length N in bytes (u32 LE)
//! 12      N     architecture header: compact JSON of `ModelSpec`
//! 12+N    4·P   parameters as f32 LE, conv layers then dense layers,
//!               each layer weight then bias, row-major
//! end-4   4     CRC-32 (IEEE) of every preceding byte (u32 LE)
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelSpec, Parameters};

pub const MAGIC: &[u8; 4] = b"DMSC";
pub const VERSION: u32 = 1;

pub fn encode(spec: &ModelSpec, params: &Parameters) -> Result<Vec<u8>> {
    spec.validate()?;
    if !params.matches(spec) {
        return Err(Error::param("parameters do not match the model spec"));
    }
    let header = serde_json::to_vec(spec)?;
    let mut buf = Vec::with_capacity(16 + header.len() + 4 * params.count());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    for t in params.tensors() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

fn corrupt(field: &'static str, detail: impl Into<String>) -> Error {
    Error::CorruptCheckpoint {
        field,
        detail: detail.into(),
    }
}

fn read_u32(bytes: &[u8], at: usize, field: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| corrupt(field, format!("file truncated at byte {}", bytes.len())))
}

pub fn decode(bytes: &[u8]) -> Result<(ModelSpec, Parameters)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(corrupt("magic", format!("expected {MAGIC:?}")));
    }
    let version = read_u32(bytes, 4, "version")?;
    if version != VERSION {
        return Err(corrupt("version", format!("unsupported version {version}")));
    }
    let header_len = read_u32(bytes, 8, "header length")? as usize;
    if bytes.len() < 16 + header_len {
        return Err(corrupt("header", "file truncated inside header"));
    }
    let body_end = bytes.len() - 4;
    let stored_crc = read_u32(bytes, body_end, "crc")?;
    let crc = crc32fast::hash(&bytes[..body_end]);
    if crc != stored_crc {
        return Err(corrupt(
            "crc",
            format!("stored {stored_crc:#010x}, computed {crc:#010x}"),
        ));
    }
    let spec: ModelSpec = serde_json::from_slice(&bytes[12..12 + header_len])
        .map_err(|e| corrupt("header", e.to_string()))?;
    spec.validate()
        .map_err(|e| corrupt("header", e.to_string()))?;

    let mut params = Parameters::zeros(&spec);
    let payload = &bytes[12 + header_len..body_end];
    if payload.len() != 4 * params.count() {
        return Err(corrupt(
            "payload",
            format!(
                "{} bytes, architecture needs {}",
                payload.len(),
                4 * params.count()
            ),
        ));
    }
    let mut floats = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v = floats.next().expect("payload length checked");
        }
    }
    Ok((spec, params))
}

pub fn save(path: impl AsRef<Path>, spec: &ModelSpec, params: &Parameters) -> Result<()> {
    std::fs::write(path, encode(spec, params)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<(ModelSpec, Parameters)> {
    decode(&std::fs::read(path)?)
}
