//! MITW weight container, a sibling of the MITC trace format.
//!
//! ```text
//! "MITW" | version u32 | manifest_len u32 | manifest (UTF-8 JSON)
//!        | parameters as f32, in manifest order | CRC-32 u32
//! ```
//!
//! All integers and floats are little-endian. The manifest holds the model
//! configuration and the name and shape of every tensor; it must agree with
//! the layout the configuration implies.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ToyConfig;
use super::model::ToyTransformer;
use crate::error::Result;
use crate::trace_io::{f32s, Cursor, ParseError};

pub const WEIGHTS_MAGIC: [u8; 4] = *b"MITW";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    config: ToyConfig,
    tensors: Vec<TensorEntry>,
}

fn manifest_of(model: &ToyTransformer) -> Manifest {
    Manifest {
        config: model.config().clone(),
        tensors: model
            .tensors()
            .iter()
            .map(|t| TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
    }
}

/// Parameters are narrowed to f32.
pub fn encode_weights(model: &ToyTransformer) -> Vec<u8> {
    let manifest = serde_json::to_vec(&manifest_of(model)).expect("manifest serializes");
    let mut out = Vec::with_capacity(16 + manifest.len() + 4 * model.param_count());
    out.extend_from_slice(&WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest);
    for &p in model.params() {
        out.extend_from_slice(&(p as f32).to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Parameters are widened back to f64.
pub fn decode_weights(data: &[u8]) -> std::result::Result<ToyTransformer, ParseError> {
    if data.len() < 4 || data[..4] != WEIGHTS_MAGIC {
        return Err(ParseError::BadMagic {
            expected: "MITW",
            found: data[..data.len().min(4)].to_vec(),
        });
    }
    let mut cur = Cursor { data, pos: 4 };
    let version = cur.u32()?;
    if version != WEIGHTS_VERSION {
        return Err(ParseError::UnsupportedVersion(version));
    }
    let manifest_len = cur.u32()? as u64;
    let manifest_bytes = cur.bytes(manifest_len)?;
    let manifest: Manifest =
        serde_json::from_slice(manifest_bytes).map_err(|e| ParseError::Malformed(format!("manifest: {e}")))?;
    manifest
        .config
        .validate()
        .map_err(|e| ParseError::Malformed(format!("manifest: {e}")))?;
    let zeros = ToyTransformer::zeros(manifest.config.clone()).expect("validated config");
    if manifest_of(&zeros) != manifest {
        return Err(ParseError::Malformed(
            "manifest tensors disagree with the configured layout".into(),
        ));
    }
    let payload = cur.bytes(4 * zeros.param_count() as u64)?;
    let body_end = cur.pos;
    let expected_total = body_end as u64 + 4;
    let actual_total = data.len() as u64;
    if actual_total < expected_total {
        return Err(ParseError::Truncated {
            expected: expected_total,
            actual: actual_total,
        });
    }
    if actual_total > expected_total {
        return Err(ParseError::TrailingBytes {
            extra: actual_total - expected_total,
        });
    }
    let stored = u32::from_le_bytes(data[body_end..].try_into().unwrap());
    let computed = crc32fast::hash(&data[..body_end]);
    if stored != computed {
        return Err(ParseError::Checksum {
            expected: stored,
            actual: computed,
        });
    }
    let params: Vec<f64> = f32s(payload).into_iter().map(f64::from).collect();
    if params.iter().any(|p| !p.is_finite()) {
        return Err(ParseError::Malformed("non-finite parameter".into()));
    }
    Ok(ToyTransformer::from_params(manifest.config, params).expect("length checked"))
}

pub fn write_weights_file(model: &ToyTransformer, path: &Path) -> Result<usize> {
    let bytes = encode_weights(model);
    fs::write(path, &bytes)?;
    Ok(bytes.len())
}

pub fn read_weights_file(path: &Path) -> Result<ToyTransformer> {
    Ok(decode_weights(&fs::read(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> ToyTransformer {
        let cfg = ToyConfig {
            vocab_size: 11,
            model_dim: 8,
            layers: 1,
            heads: 2,
            context: 6,
            ff_dim: 8,
            seed: 2,
        };
        ToyTransformer::new(cfg).unwrap()
    }

    #[test]
    fn round_trip_is_f32_exact() {
        let m = model();
        let back = decode_weights(&encode_weights(&m)).unwrap();
        assert_eq!(back.config(), m.config());
        for (a, b) in back.params().iter().zip(m.params()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        assert_eq!(encode_weights(&back), encode_weights(&m));
    }

    #[test]
    fn corruption_is_named() {
        let bytes = encode_weights(&model());
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 10] ^= 1;
        assert!(matches!(decode_weights(&bad), Err(ParseError::Checksum { .. })));
        assert!(matches!(
            decode_weights(&bytes[..n - 1]),
            Err(ParseError::Truncated { .. })
        ));
        assert!(matches!(decode_weights(b"MITC"), Err(ParseError::BadMagic { .. })));
        let mut extra = bytes.clone();
        extra.push(0);
        assert_eq!(decode_weights(&extra), Err(ParseError::TrailingBytes { extra: 1 }));
    }
}
