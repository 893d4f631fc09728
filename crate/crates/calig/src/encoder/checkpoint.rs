//! Checkpoint file format.
//!
//! Layout (documented byte-exactly in the README):
//!
//! ```text
//! magic line   : "CALIGCKPT v1\n"  (13 bytes, ASCII)
//! header line  : one JSON object followed by '\n', holding the encoder
//!                config and an ordered manifest of
//!                {name, shape, offset, len} entries, where offset/len are
//!                in f64 elements relative to the start of the binary
//!                section, plus the total element count.
//! binary blob  : total_len little-endian IEEE-754 f64 values, in manifest
//!                order, starting immediately after the header newline.
//! ```

use super::{EncoderConfig, EncoderModel};
use crate::error::{CaligError, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8] = b"CALIGCKPT v1\n";

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: EncoderConfig,
    manifest: Vec<ManifestEntry>,
    total_len: usize,
}

pub fn save_checkpoint(model: &EncoderModel, path: &Path) -> Result<()> {
    let mut manifest = Vec::new();
    let mut offset = 0usize;
    for (name, t) in model.named_params() {
        manifest.push(ManifestEntry {
            name,
            shape: t.shape.clone(),
            offset,
            len: t.numel(),
        });
        offset += t.numel();
    }
    let header = Header { config: model.config.clone(), manifest, total_len: offset };

    let mut bytes = Vec::with_capacity(MAGIC.len() + offset * 8 + 256);
    bytes.extend_from_slice(MAGIC);
    serde_json::to_writer(&mut bytes, &header)?;
    bytes.push(b'\n');
    for (_, t) in model.named_params() {
        for v in &t.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<EncoderModel> {
    let bytes = fs::read(path)?;
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CaligError::Parse {
            offset: 0,
            detail: "missing CALIGCKPT v1 magic".into(),
        });
    }
    let header_start = MAGIC.len();
    let header_end = bytes[header_start..]
        .iter()
        .position(|&b| b == b'\n')
        .map(|p| header_start + p)
        .ok_or(CaligError::Parse {
            offset: bytes.len(),
            detail: "unterminated header line".into(),
        })?;
    let header: Header =
        serde_json::from_slice(&bytes[header_start..header_end]).map_err(|e| {
            CaligError::Parse {
                offset: header_start + e.column().saturating_sub(1),
                detail: e.to_string(),
            }
        })?;
    header.config.validate()?;

    let blob = &bytes[header_end + 1..];
    if blob.len() != header.total_len * 8 {
        return Err(CaligError::Integrity {
            tensor: "<binary section>".into(),
            detail: format!(
                "expected {} bytes of parameter data, found {}",
                header.total_len * 8,
                blob.len()
            ),
        });
    }

    // Rebuild a template model so expected names/shapes come from the config,
    // then overwrite every tensor from the blob.
    let mut model = EncoderModel::init(header.config.clone(), 0)?;
    {
        let params = model.named_params_mut();
        if params.len() != header.manifest.len() {
            return Err(CaligError::Integrity {
                tensor: "<manifest>".into(),
                detail: format!(
                    "manifest has {} tensors, config implies {}",
                    header.manifest.len(),
                    params.len()
                ),
            });
        }
        let mut cursor = 0usize;
        for (entry, (name, tensor)) in header.manifest.iter().zip(params) {
            if entry.name != name {
                return Err(CaligError::Integrity {
                    tensor: entry.name.clone(),
                    detail: format!("unexpected tensor order, wanted '{name}'"),
                });
            }
            if entry.shape != tensor.shape {
                return Err(CaligError::Integrity {
                    tensor: entry.name.clone(),
                    detail: format!(
                        "shape {:?} disagrees with config-derived {:?}",
                        entry.shape, tensor.shape
                    ),
                });
            }
            let numel: usize = entry.shape.iter().product();
            if entry.len != numel || entry.offset != cursor {
                return Err(CaligError::Integrity {
                    tensor: entry.name.clone(),
                    detail: format!(
                        "manifest offset/len ({}, {}) inconsistent, expected ({}, {})",
                        entry.offset, entry.len, cursor, numel
                    ),
                });
            }
            let mut values = Vec::with_capacity(numel);
            for i in 0..numel {
                let at = (entry.offset + i) * 8;
                let mut raw = [0u8; 8];
                raw.copy_from_slice(&blob[at..at + 8]);
                values.push(f64::from_le_bytes(raw));
            }
            *tensor = Tensor {
                shape: entry.shape.clone(),
                values,
                requires_grad: false,
                grad: None,
            };
            cursor += numel;
        }
    }
    Ok(model)
}
