//! Binary checkpoint: `"LCPM"`, u32 version, u32 layer count, then per
//! layer a u8 kind tag, u32 rank, u32 dims and f64 weights, then per layer
//! a u32 mask length followed by u32 channel indices (length 0 = no mask).
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use super::{HeadSpec, Layer, LayerKind, ModelGraph};
use crate::error::{Error, Result};
use crate::geometry::BoxCoder;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LCPM";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(model: &ModelGraph) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + model.num_parameters() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.layers.len() as u32).to_le_bytes());
    for layer in &model.layers {
        out.push(layer.kind.tag());
        let shape = layer.weight.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in layer.weight.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for mask in &model.masks {
        let m = mask.as_deref().unwrap_or(&[]);
        out.extend_from_slice(&(m.len() as u32).to_le_bytes());
        for &c in m {
            out.extend_from_slice(&(c as u32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.pos as u64, format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Decode a checkpoint. Default-box layout is not stored; `head` supplies
/// it and the class count is inferred from the head width.
pub fn decode_checkpoint(bytes: &[u8], head: &HeadSpec) -> Result<ModelGraph> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "bad magic, expected LCPM"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let count = r.u32("layer count")? as usize;
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let at = r.pos;
        let tag = r.take(1, "kind tag")?[0];
        let kind = LayerKind::from_tag(tag).ok_or_else(|| Error::format(at as u64, format!("unknown layer kind {tag}")))?;
        let rank_at = r.pos;
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(Error::format(rank_at as u64, format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::format(rank_at as u64, "shape overflows"))?;
        let data = r
            .take(n, "weights")?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        layers.push(Layer {
            kind,
            weight: Tensor::new(shape, data)?,
        });
    }
    let mut masks = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u32("mask length")? as usize;
        let raw = r.take(len.checked_mul(4).ok_or_else(|| Error::format(r.pos as u64, "mask overflows"))?, "mask")?;
        let idx: Vec<usize> = raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
            .collect();
        masks.push((len > 0).then_some(idx));
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes after checkpoint"));
    }
    let head_out = layers
        .iter()
        .find(|l| l.kind == LayerKind::Head)
        .map(|l| l.weight.shape().first().copied().unwrap_or(0))
        .ok_or_else(|| Error::format(12, "checkpoint has no head layer"))?;
    let a = head.anchors_per_cell();
    if head_out % a != 0 || head_out / a < 5 {
        return Err(Error::InvalidArgument(format!(
            "head width {head_out} incompatible with {a} anchors per cell"
        )));
    }
    let model = ModelGraph {
        layers,
        masks,
        head: head.clone(),
        num_classes: head_out / a - 4,
        coder: BoxCoder::default(),
    };
    model.validate()?;
    Ok(model)
}

pub fn save_checkpoint(model: &ModelGraph, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, head: &HeadSpec) -> Result<ModelGraph> {
    decode_checkpoint(&fs::read(path)?, head)
}
