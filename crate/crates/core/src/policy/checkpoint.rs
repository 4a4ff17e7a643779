//! Versioned binary parameter dump.
//!
//! ```text
//! magic "TKVLAPOL" | u32 version | u64 hidden | u64 embed | f64 sigma_w
//! u32 tensor count
//! per tensor: string name | u32 rank | u64 dims... | f64 values...
//! u32 FNV-1a of everything above
//! ```

use std::path::Path;

use super::{tensor_shapes, PolicyConfig, PolicyParams};
use crate::codec::{fnv1a, Reader, Wire};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TKVLAPOL";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(params: &PolicyParams) -> Vec<u8> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    CHECKPOINT_VERSION.encode(&mut out);
    params.config.hidden.encode(&mut out);
    params.config.embed.encode(&mut out);
    params.config.sigma_w.encode(&mut out);
    let tensors = params.tensors();
    (tensors.len() as u32).encode(&mut out);
    for (name, shape, data) in tensors {
        name.to_string().encode(&mut out);
        (shape.len() as u32).encode(&mut out);
        for d in shape {
            d.encode(&mut out);
        }
        for v in data {
            v.encode(&mut out);
        }
    }
    let sum = fnv1a(&out);
    sum.encode(&mut out);
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<PolicyParams> {
    let mut r = Reader::new(bytes);
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: "not a policy checkpoint (bad magic)".into(),
        });
    }
    let version = u32::decode(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(r.error(format!("unsupported checkpoint version {version}")));
    }
    let config = PolicyConfig {
        hidden: usize::decode(&mut r)?,
        embed: usize::decode(&mut r)?,
        sigma_w: f64::decode(&mut r)?,
    };
    if config.hidden == 0 || config.hidden > 4096 || config.embed > 4096 {
        return Err(r.error(format!("implausible network size {config:?}")));
    }
    let expected = tensor_shapes(&config);
    let n = u32::decode(&mut r)? as usize;
    if n != expected.len() {
        return Err(r.error(format!("expected {} tensors, found {n}", expected.len())));
    }
    let mut values = Vec::new();
    for (name, shape) in expected {
        let got = String::decode(&mut r)?;
        if got != name {
            return Err(r.error(format!("expected tensor {name}, found {got}")));
        }
        let rank = r.len_prefix(8)?;
        let dims: Vec<usize> = (0..rank).map(|_| usize::decode(&mut r)).collect::<Result<_>>()?;
        if dims != shape {
            return Err(r.error(format!("tensor {name} has shape {dims:?}, expected {shape:?}")));
        }
        let count: usize = shape.iter().product();
        for _ in 0..count {
            values.push(f64::decode(&mut r)?);
        }
    }
    let body_end = r.offset() as usize;
    let sum = u32::decode(&mut r)?;
    if sum != fnv1a(&bytes[..body_end]) {
        return Err(Error::Parse {
            offset: body_end as u64,
            message: "checkpoint checksum mismatch".into(),
        });
    }
    if !r.is_empty() {
        return Err(r.error("trailing bytes after checkpoint"));
    }
    PolicyParams::from_values(config, values)
}

pub fn save_checkpoint(params: &PolicyParams, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<PolicyParams> {
    let bytes = match std::fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingArtifact {
                path: path.to_path_buf(),
                hint: "no policy checkpoint here; run `pretrain` or `sft` first".into(),
            })
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    decode_checkpoint(&bytes)
}
