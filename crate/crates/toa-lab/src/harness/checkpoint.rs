//! Network parameter checkpoints.
//!
//! Layout (little-endian):
//!   magic "TOAP", version u32, M u32, N_RB u32, frozen-extractor u8,
//!   then every tensor in serialization order (extractor first, heads in
//!   case order): ndims u32, each dim u32, then the f32 values.

use std::io::Write;
use std::path::Path;

use crate::error::{Result, ToaError};
use crate::neural::{init_network, NetworkParams};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TOAP";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode(params: &NetworkParams<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.m as u32).to_le_bytes());
    out.extend_from_slice(&(params.n_rb as u32).to_le_bytes());
    out.push(u8::from(params.frozen_extractor));
    for tensor in params.tensor_refs() {
        out.extend_from_slice(&(tensor.shape.len() as u32).to_le_bytes());
        for &d in &tensor.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &tensor.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<NetworkParams<f32>> {
    let need = |pos: usize, n: usize, what: &str| -> Result<()> {
        if pos + n > bytes.len() {
            return Err(ToaError::Format {
                offset: pos as u64,
                message: format!("truncated while reading {what}"),
            });
        }
        Ok(())
    };
    need(0, 13, "header")?;
    if bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(ToaError::Format {
            offset: 0,
            message: format!("bad magic {:?}, expected \"TOAP\"", &bytes[0..4]),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(ToaError::Format {
            offset: 4,
            message: format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            ),
        });
    }
    let m = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let n_rb = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    need(16, 1, "frozen flag")?;
    let frozen = bytes[16] != 0;
    let mut pos = 17usize;

    // build the structural skeleton, then overwrite every tensor
    let mut params = init_network::<f32>(m, n_rb, 0).map_err(|e| ToaError::Format {
        offset: 8,
        message: format!("invalid geometry M={m}, N_RB={n_rb}: {e}"),
    })?;
    params.frozen_extractor = frozen;
    for tensor in params.tensor_refs_mut() {
        need(pos, 4, "tensor rank")?;
        let ndims = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        pos += 4;
        need(pos, 4 * ndims, "tensor dims")?;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize);
            pos += 4;
        }
        if shape != tensor.shape {
            return Err(ToaError::Format {
                offset: pos as u64,
                message: format!("tensor shape {shape:?} does not match expected {:?}", tensor.shape),
            });
        }
        let numel: usize = shape.iter().product();
        need(pos, 4 * numel, "tensor values")?;
        for v in tensor.data.iter_mut() {
            *v = f32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap());
            pos += 4;
        }
    }
    if pos != bytes.len() {
        return Err(ToaError::Format {
            offset: pos as u64,
            message: format!("{} trailing bytes after last tensor", bytes.len() - pos),
        });
    }
    Ok(params)
}

pub fn write_file(params: &NetworkParams<f32>, path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(&encode(params))?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<NetworkParams<f32>> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_byte_identical() {
        let mut params = init_network::<f32>(32, 6, 1234).unwrap();
        params.frozen_extractor = true;
        let bytes = encode(&params);
        let decoded = decode(&bytes).unwrap();
        assert_eq!(decoded, params);
        assert_eq!(encode(&decoded), bytes);
    }

    #[test]
    fn bad_magic_and_version_rejected() {
        let params = init_network::<f32>(8, 2, 0).unwrap();
        let mut bytes = encode(&params);
        bytes[1] = b'!';
        assert!(matches!(decode(&bytes), Err(ToaError::Format { .. })));

        let mut bytes = encode(&params);
        bytes[4..8].copy_from_slice(&9u32.to_le_bytes());
        match decode(&bytes) {
            Err(ToaError::Format { message, .. }) => assert!(message.contains('9')),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_rejected() {
        let params = init_network::<f32>(8, 2, 0).unwrap();
        let bytes = encode(&params);
        assert!(matches!(
            decode(&bytes[..bytes.len() - 3]),
            Err(ToaError::Format { .. })
        ));
    }
}
