//! `LWCK` checkpoint container.
//!
//! ```text
//! "LWCK"                      4 bytes
//! version                     u32 LE (= 1)
//! config                      9 × u32 LE: num_layers, model_dim, conv_kernel,
//!                             num_heads, left_context, feature_dim,
//!                             domain_onehot_dim, subsample_factor, ffn_mult
//! tensor count                u32 LE
//! per tensor:
//!   name length, name         u32 LE, UTF-8 bytes
//!   rank, dims                u32 LE, rank × u32 LE
//!   data                      f32 LE, row-major
//! crc32                       u32 LE over every preceding byte
//! ```

use std::path::Path;

use super::config::EncoderConfig;
use super::state::EncoderState;
use crate::error::{Error, Result};
use crate::io::Reader;
use crate::tensor::NDArray;

pub const MAGIC: &[u8; 4] = b"LWCK";
pub const VERSION: u32 = 1;

fn config_fields(c: &EncoderConfig) -> [usize; 9] {
    [
        c.num_layers,
        c.model_dim,
        c.conv_kernel,
        c.num_heads,
        c.left_context,
        c.feature_dim,
        c.domain_onehot_dim,
        c.subsample_factor,
        c.ffn_mult,
    ]
}

pub fn encode_checkpoint(state: &EncoderState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in config_fields(&state.config) {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&(state.store.len() as u32).to_le_bytes());
    for (_, p) in state.store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Rebuilds an encoder from checkpoint bytes. Every layer is left trainable.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<EncoderState> {
    const WHAT: &str = "checkpoint";
    let mut r = Reader::new(bytes, WHAT);
    if r.take(4)? != MAGIC {
        return Err(Error::Format { what: WHAT, offset: 0, detail: "bad magic, expected \"LWCK\"".into() });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format { what: WHAT, offset: 4, detail: format!("unsupported version {version}") });
    }
    let mut f = [0usize; 9];
    for v in &mut f {
        *v = r.u32()? as usize;
    }
    let config = EncoderConfig {
        num_layers: f[0],
        model_dim: f[1],
        conv_kernel: f[2],
        num_heads: f[3],
        left_context: f[4],
        feature_dim: f[5],
        domain_onehot_dim: f[6],
        subsample_factor: f[7],
        ffn_mult: f[8],
    };
    let cfg_offset = 8;
    config.validate().map_err(|e| Error::Format { what: WHAT, offset: cfg_offset, detail: e.to_string() })?;
    // Layout comes from the config; values are overwritten below.
    let mut state =
        EncoderState::<f32>::new(config, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
    let count_offset = r.offset();
    let count = r.u32()? as usize;
    if count != state.store.len() {
        return Err(Error::Format {
            what: WHAT,
            offset: count_offset,
            detail: format!("{count} tensors, config implies {}", state.store.len()),
        });
    }
    let ids: Vec<_> = state.store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let name_offset = r.offset();
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format { what: WHAT, offset: name_offset, detail: "tensor name is not UTF-8".into() })?
            .to_string();
        let p = state.store.get_mut(id);
        if name != p.name {
            return Err(Error::Format {
                what: WHAT,
                offset: name_offset,
                detail: format!("expected tensor {:?}, found {name:?}", p.name),
            });
        }
        let dims_offset = r.offset();
        let rank = r.u32()? as usize;
        let dims: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        if dims != p.value.shape() {
            return Err(Error::Format {
                what: WHAT,
                offset: dims_offset,
                detail: format!("{name}: dims {dims:?}, expected {:?}", p.value.shape()),
            });
        }
        let n = p.value.len();
        let data = (0..n).map(|_| r.f32()).collect::<Result<Vec<f32>>>()?;
        p.value = NDArray::from_vec(dims, data)?;
    }
    let body_end = r.offset() as usize;
    let crc = r.u32()?;
    if crc != crc32fast::hash(&bytes[..body_end]) {
        return Err(Error::Format { what: WHAT, offset: body_end as u64, detail: "CRC32 mismatch".into() });
    }
    if r.offset() as usize != bytes.len() {
        return Err(Error::Format { what: WHAT, offset: r.offset(), detail: "trailing bytes".into() });
    }
    Ok(state)
}

pub fn save_checkpoint(state: &EncoderState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(state)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<EncoderState> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
