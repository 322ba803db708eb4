//! Trained-model files.
//!
//! Layout, little-endian: `"MILM"`, format version `u16`, architecture TOML
//! length `u32` and bytes, parameter count `u64`, then the flat parameter
//! vector as `f64`.

use std::io::{Read, Write};
use std::path::Path;

use mil_core::{ArchConfig, ModelParams};

use crate::error::{HarnessError, Result};

pub const MAGIC: [u8; 4] = *b"MILM";
pub const VERSION: u16 = 1;

pub fn encode(params: &ModelParams) -> Vec<u8> {
    let arch = toml::to_string(params.config()).expect("architecture always serializes");
    let flat = params.flat();
    let mut out = Vec::with_capacity(18 + arch.len() + 8 * flat.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(arch.len() as u32).to_le_bytes());
    out.extend_from_slice(arch.as_bytes());
    out.extend_from_slice(&(flat.len() as u64).to_le_bytes());
    for v in flat {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(mut bytes: &[u8]) -> Result<ModelParams> {
    let bad = |why: &str| HarnessError::Data(format!("model file: {why}"));
    let mut take = |n: usize| -> Result<&[u8]> {
        if bytes.len() < n {
            return Err(bad("truncated"));
        }
        let (head, rest) = bytes.split_at(n);
        bytes = rest;
        Ok(head)
    };
    if take(4)? != MAGIC {
        return Err(bad("not a model file"));
    }
    let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let arch_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let arch_text = std::str::from_utf8(take(arch_len)?).map_err(|_| bad("architecture is not UTF-8"))?;
    let arch: ArchConfig =
        toml::from_str(arch_text).map_err(|e| bad(&format!("architecture: {e}")))?;
    let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let payload = take(count.checked_mul(8).ok_or_else(|| bad("parameter count overflow"))?)?;
    let flat: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if !bytes.is_empty() {
        return Err(bad("trailing bytes"));
    }
    Ok(ModelParams::from_flat(&arch, &flat)?)
}

pub fn save(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&encode(params)))
        .map_err(|e| HarnessError::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| HarnessError::io(path, e))?;
    decode(&bytes)
}
