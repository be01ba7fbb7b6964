//! Binary checkpoint container for [`MlpField`].
//!
//! Byte layout (all integers little-endian):
//!
//! | offset      | size  | content                                   |
//! |-------------|-------|-------------------------------------------|
//! | 0           | 8     | magic `b"BFFIELD\0"`                      |
//! | 8           | 4     | format version, `u32` (currently 1)       |
//! | 12          | 4     | header length `H`, `u32`                  |
//! | 16          | H     | UTF-8 JSON header (see [`CheckpointHeader`]) |
//! | 16 + H      | 4 * N | `N = header.param_count` parameters, `f32` |
//!
//! Parameters follow the layer order trunk, density head, feature, color
//! hidden, color output; each layer stores its row-major `out x in` weight
//! matrix followed by its `out` biases.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FieldError, MlpArch, MlpField};

pub const MAGIC: &[u8; 8] = b"BFFIELD\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub arch: MlpArch,
    pub param_count: usize,
    /// Free-form metadata (training step, tracked center, ...).
    #[serde(default)]
    pub metadata: serde_json::Map<String, serde_json::Value>,
}

pub fn encode(field: &MlpField, metadata: serde_json::Map<String, serde_json::Value>) -> Vec<u8> {
    let header = CheckpointHeader {
        arch: *field.arch(),
        param_count: field.param_count(),
        metadata,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + 4 * field.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for p in field.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<(MlpField, CheckpointHeader), FieldError> {
    let bad = |m: &str| FieldError::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(FieldError::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(body).map_err(|e| FieldError::Checkpoint(format!("header: {e}")))?;
    let data = &bytes[16 + hlen..];
    if data.len() != 4 * header.param_count {
        return Err(FieldError::Checkpoint(format!(
            "expected {} parameter bytes, found {}",
            4 * header.param_count,
            data.len()
        )));
    }
    let params = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let field = MlpField::from_params(header.arch, params)?;
    Ok((field, header))
}

pub fn save(
    path: impl AsRef<Path>,
    field: &MlpField,
    metadata: serde_json::Map<String, serde_json::Value>,
) -> Result<(), FieldError> {
    std::fs::write(path, encode(field, metadata))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<(MlpField, CheckpointHeader), FieldError> {
    decode(&std::fs::read(path)?)
}
