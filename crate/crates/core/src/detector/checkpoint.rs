//! `CSCK` checkpoint files.
//!
//! Header: magic `CSCK`, format version, feature dimension and leaf count
//! (all `u32` little-endian), then each leaf name as a `u32` byte length
//! followed by UTF-8 bytes. Body: the five parameter blocks as little-endian
//! `f64` arrays in the order rpn_obj, rpn_reg, head_obj, head_reg, head_cls,
//! each stored row-major as `out x (feature_dim + 1)` with the bias last.

use std::io::{self, Read, Write};
use std::path::Path;

use super::{DetectorError, Linear, ModelParams};
use crate::taxonomy::Taxonomy;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> DetectorError {
    DetectorError::Checkpoint(msg.into())
}

pub fn write_checkpoint(
    params: &ModelParams,
    taxonomy: &Taxonomy,
    mut w: impl Write,
) -> Result<(), DetectorError> {
    if params.num_classes() != taxonomy.num_leaves() {
        return Err(DetectorError::DimMismatch {
            what: "classifier outputs",
            expected: taxonomy.num_leaves(),
            got: params.num_classes(),
        });
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.feature_dim() as u32).to_le_bytes());
    buf.extend_from_slice(&(taxonomy.num_leaves() as u32).to_le_bytes());
    for name in taxonomy.leaf_names() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
    }
    for block in params.blocks() {
        for v in block.weights() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32, DetectorError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => bad("truncated header"),
        _ => DetectorError::Io(e),
    })?;
    Ok(u32::from_le_bytes(b))
}

/// Reads a checkpoint and checks its leaf order against `taxonomy`.
pub fn read_checkpoint(mut r: impl Read, taxonomy: &Taxonomy) -> Result<ModelParams, DetectorError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("missing magic"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let dim = read_u32(&mut r)? as usize;
    let leaves = read_u32(&mut r)? as usize;
    if dim == 0 || dim > 1 << 16 || leaves > 1 << 20 {
        return Err(bad(format!("implausible sizes dim={dim} leaves={leaves}")));
    }
    let mut names = Vec::with_capacity(leaves);
    for _ in 0..leaves {
        let len = read_u32(&mut r)? as usize;
        if len > 1 << 16 {
            return Err(bad("leaf name too long"));
        }
        let mut b = vec![0u8; len];
        r.read_exact(&mut b).map_err(|_| bad("truncated leaf names"))?;
        names.push(String::from_utf8(b).map_err(|_| bad("leaf name is not UTF-8"))?);
    }
    let expected = taxonomy.leaf_names();
    if names != expected {
        return Err(DetectorError::LeafOrderMismatch {
            checkpoint: names,
            taxonomy: expected.iter().map(|s| s.to_string()).collect(),
        });
    }
    let mut params = ModelParams::zeros(dim, leaves);
    for block in params.blocks_mut() {
        let mut bytes = vec![0u8; block.weights().len() * 8];
        r.read_exact(&mut bytes).map_err(|_| bad("truncated parameters"))?;
        for (w, chunk) in block.weights_mut().iter_mut().zip(bytes.chunks_exact(8)) {
            *w = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(bad(format!("{} trailing bytes", rest.len())));
    }
    Ok(params)
}

pub fn save_checkpoint(
    params: &ModelParams,
    taxonomy: &Taxonomy,
    path: impl AsRef<Path>,
) -> Result<(), DetectorError> {
    let mut buf = Vec::new();
    write_checkpoint(params, taxonomy, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(
    path: impl AsRef<Path>,
    taxonomy: &Taxonomy,
) -> Result<ModelParams, DetectorError> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(&bytes[..], taxonomy)
}

impl Linear {
    #[cfg(test)]
    fn fill_with(&mut self, f: impl Fn(usize) -> f64) {
        for (i, w) in self.weights_mut().iter_mut().enumerate() {
            *w = f(i);
        }
    }
}
