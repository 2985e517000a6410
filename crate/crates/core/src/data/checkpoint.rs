//! The "GDML" model checkpoint.
//!
//! ```text
//! magic "GDML" | version u16 | payload | crc32(payload) u32
//!
//! payload:
//!   architecture name   u16 length + UTF-8
//!   input c, h, w       u16 each
//!   num_classes         u16
//!   width_multiplier    f64
//!   depth               u16
//!   seed                u64
//!   tensor count        u32
//!   per tensor          rank u8, dims u32 * rank, values f32 * numel
//! ```
//!
//! Parameters are narrowed to 32 bits on save, so a loaded model equals the
//! saved one after [`Model::narrow_to_f32`].

use std::path::Path;

use super::{read_file, write_file, ByteReader, DataError};
use crate::models::{Architecture, Model, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GDML";
pub const VERSION: u16 = 1;
const WHAT: &str = "checkpoint";

fn u16_field(v: usize, name: &str) -> Result<u16, DataError> {
    u16::try_from(v)
        .map_err(|_| DataError::Invalid(format!("{name} {v} does not fit a checkpoint field")))
}

pub fn encode_checkpoint(model: &Model) -> Result<Vec<u8>, DataError> {
    let cfg = model.config();
    let mut payload = Vec::new();
    let name = cfg.architecture.name().as_bytes();
    payload.extend_from_slice(&u16_field(name.len(), "name length")?.to_le_bytes());
    payload.extend_from_slice(name);
    let (c, h, w) = cfg.input_shape;
    for (v, n) in [
        (c, "channels"),
        (h, "height"),
        (w, "width"),
        (cfg.num_classes, "num_classes"),
    ] {
        payload.extend_from_slice(&u16_field(v, n)?.to_le_bytes());
    }
    payload.extend_from_slice(&cfg.width_multiplier.to_le_bytes());
    payload.extend_from_slice(&u16_field(cfg.depth, "depth")?.to_le_bytes());
    payload.extend_from_slice(&cfg.seed.to_le_bytes());
    let params = model.params();
    payload.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for t in params {
        payload.push(t.rank() as u8);
        for &d in t.shape() {
            payload.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(payload.len() + 10);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model, DataError> {
    let mut r = ByteReader::new(WHAT, bytes);
    r.expect_magic(MAGIC)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(DataError::UnsupportedVersion {
            what: WHAT,
            version,
        });
    }
    if r.remaining() < 4 {
        return Err(DataError::Truncated {
            what: WHAT,
            offset: r.position(),
            needed: 4,
            available: r.remaining(),
        });
    }
    let payload = &bytes[6..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(DataError::Checksum {
            what: WHAT,
            stored,
            computed,
        });
    }

    let mut r = ByteReader::new(WHAT, payload);
    let name_len = r.u16()? as usize;
    let name_at = r.position() + 6;
    let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| DataError::Malformed {
        what: WHAT,
        offset: name_at,
        message: "architecture name is not UTF-8".into(),
    })?;
    let architecture: Architecture = name.parse()?;
    let input_shape = (r.u16()? as usize, r.u16()? as usize, r.u16()? as usize);
    let num_classes = r.u16()? as usize;
    let width_multiplier = r.f64()?;
    let depth = r.u16()? as usize;
    let seed = r.u64()?;
    let config = ModelConfig {
        architecture,
        input_shape,
        num_classes,
        width_multiplier,
        depth,
        seed,
    };
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let rank = r.u8()? as usize;
        let shape: Vec<usize> = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<_, _>>()?;
        let numel: usize = shape.iter().product();
        if rank == 0 || numel == 0 {
            return Err(r.malformed("empty parameter tensor"));
        }
        let raw = r.take(
            numel
                .checked_mul(4)
                .ok_or_else(|| r.malformed("tensor too large"))?,
        )?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        params.push(Tensor::new(shape, values).map_err(|e| r.malformed(e.to_string()))?);
    }
    r.finish()?;
    Ok(Model::from_params(config, params)?)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<(), DataError> {
    write_file(path, &encode_checkpoint(model)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Model, DataError> {
    decode_checkpoint(&read_file(path)?)
}
