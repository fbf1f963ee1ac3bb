//! `FSEQ` feature files.
//!
//! ```text
//! "FSEQ"                  4 bytes
//! version                 u32 LE (= 1)
//! sequence count          u32 LE
//! per sequence:
//!   frames, dim           u32 LE, u32 LE
//!   has_labels            u8 (0 or 1)
//!   features              frames × dim f32 LE, row-major
//!   labels                frames × u32 LE, present iff has_labels
//! crc32                   u32 LE over every preceding byte
//! ```
//!
//! The file carries no domain id; the reader supplies one.

use std::path::Path;

use super::{Dataset, Sequence};
use crate::error::{Error, Result};
use crate::io::Reader;
use crate::tensor::NDArray;

pub const MAGIC: &[u8; 4] = b"FSEQ";
pub const VERSION: u32 = 1;
const WHAT: &str = "FSEQ file";

pub fn encode_fseq(data: &Dataset) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(data.len() as u32).to_le_bytes());
    for s in &data.sequences {
        out.extend_from_slice(&(s.len() as u32).to_le_bytes());
        out.extend_from_slice(&(s.dim() as u32).to_le_bytes());
        out.push(s.labels.is_some() as u8);
        for v in s.features.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for l in s.labels.iter().flatten() {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode_fseq(bytes: &[u8], domain_id: u32) -> Result<Dataset> {
    let mut r = Reader::new(bytes, WHAT);
    if r.take(4)? != MAGIC {
        return Err(Error::Format { what: WHAT, offset: 0, detail: "bad magic, expected \"FSEQ\"".into() });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format { what: WHAT, offset: 4, detail: format!("unsupported version {version}") });
    }
    let count = r.u32()? as usize;
    let mut sequences = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let at = r.offset();
        let frames = r.u32()? as usize;
        let dim = r.u32()? as usize;
        if frames == 0 || dim == 0 {
            return Err(Error::Format { what: WHAT, offset: at, detail: format!("empty sequence {frames} × {dim}") });
        }
        let flag_at = r.offset();
        let has_labels = match r.u8()? {
            0 => false,
            1 => true,
            b => return Err(Error::Format { what: WHAT, offset: flag_at, detail: format!("has_labels byte {b}") }),
        };
        let n = frames
            .checked_mul(dim)
            .filter(|n| n.checked_mul(4).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| Error::Format { what: WHAT, offset: at, detail: "sequence larger than the file".into() })?;
        let data = (0..n).map(|_| r.f32()).collect::<Result<Vec<f32>>>()?;
        let labels = if has_labels { Some((0..frames).map(|_| r.u32()).collect::<Result<Vec<u32>>>()?) } else { None };
        sequences.push(Sequence { features: NDArray::from_vec([frames, dim], data)?, labels });
    }
    let body_end = r.offset() as usize;
    let crc = r.u32()?;
    if crc != crc32fast::hash(&bytes[..body_end]) {
        return Err(Error::Format { what: WHAT, offset: body_end as u64, detail: "CRC32 mismatch".into() });
    }
    if r.offset() as usize != bytes.len() {
        return Err(Error::Format { what: WHAT, offset: r.offset(), detail: "trailing bytes".into() });
    }
    Ok(Dataset { domain_id, sequences })
}

pub fn write_fseq(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_fseq(data)).map_err(|e| Error::io(path, e))
}

pub fn read_fseq(path: impl AsRef<Path>, domain_id: u32) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_fseq(&bytes, domain_id)
}
