//! Checkpoint files: a JSON header followed by raw little-endian `f32`s.
//!
//! Layout: `u32` header length, header bytes, `u64` value count, values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::draft::{DraftConfig, DraftParams};
use super::model::{ModelConfig, ModelParams};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "config", rename_all = "snake_case")]
enum Header {
    Target(ModelConfig),
    Draft(DraftConfig),
}

fn encode(header: &Header, data: &[f32]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(12 + json.len() + 4 * data.len());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(data.len() as u64).to_le_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn decode(mut bytes: &[u8]) -> Result<(Header, Vec<f32>)> {
    let short = || Error::Checkpoint("truncated file".into());
    let mut u32b = [0u8; 4];
    bytes.read_exact(&mut u32b).map_err(|_| short())?;
    let hlen = u32::from_le_bytes(u32b) as usize;
    if bytes.len() < hlen {
        return Err(short());
    }
    let header: Header = serde_json::from_slice(&bytes[..hlen])?;
    bytes = &bytes[hlen..];
    let mut u64b = [0u8; 8];
    bytes.read_exact(&mut u64b).map_err(|_| short())?;
    let count = u64::from_le_bytes(u64b) as usize;
    if bytes.len() != count * 4 {
        return Err(Error::Checkpoint(format!(
            "expected {} data bytes, found {}",
            count * 4,
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((header, data))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

pub fn save_target(params: &ModelParams, path: &Path) -> Result<()> {
    write(
        path,
        &encode(&Header::Target(*params.config()), params.as_slice())?,
    )
}

pub fn load_target(path: &Path) -> Result<ModelParams> {
    match decode(&fs::read(path)?)? {
        (Header::Target(cfg), data) => ModelParams::from_vec(cfg, data),
        _ => Err(Error::Checkpoint("expected a target checkpoint".into())),
    }
}

pub fn save_draft(params: &DraftParams, path: &Path) -> Result<()> {
    write(
        path,
        &encode(&Header::Draft(*params.config()), params.as_slice())?,
    )
}

pub fn load_draft(path: &Path) -> Result<DraftParams> {
    match decode(&fs::read(path)?)? {
        (Header::Draft(cfg), data) => DraftParams::from_vec(cfg, data),
        _ => Err(Error::Checkpoint("expected a draft checkpoint".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_round_trip_is_bit_exact() {
        let p = ModelParams::init(ModelConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        save_target(&p, &path).unwrap();
        let q = load_target(&path).unwrap();
        assert_eq!(p, q);
        assert!(load_draft(&path).is_err());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let p = ModelParams::init(ModelConfig::default()).unwrap();
        let bytes = encode(&Header::Target(*p.config()), p.as_slice()).unwrap();
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode(&bytes[..2]).is_err());
    }
}
