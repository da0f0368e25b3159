//! Bit-packed masks, checkpoints and the memory-footprint calculator.

mod checkpoint;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::transformer::{param_counts, tensor_layout, ModelConfig, TieMode};

pub use checkpoint::{
    inspect, load_checkpoint, save_checkpoint, CheckpointHeader, Flavor, InspectReport, MaskDensity, MaskedCheckpoint,
    ResumeState, SectionStatus, SectionTag, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

pub const BYTES_PER_FLOAT: usize = 4;

/// Bytes needed for `bits` packed bits.
pub fn packed_len(bits: usize) -> usize {
    bits.div_ceil(8)
}

/// Packs booleans row-major, least significant bit first.
pub fn pack_bits(bits: impl IntoIterator<Item = bool>) -> Vec<u8> {
    let mut out = Vec::new();
    for (i, b) in bits.into_iter().enumerate() {
        if i % 8 == 0 {
            out.push(0);
        }
        if b {
            *out.last_mut().unwrap() |= 1 << (i % 8);
        }
    }
    out
}

/// Packs a 0/1 tensor into `ceil(numel/8)` bytes; the tail of the last byte
/// is zero.
pub fn pack_mask(mask: &Tensor) -> Result<Vec<u8>> {
    if let Some((index, &value)) = mask
        .data()
        .iter()
        .enumerate()
        .find(|(_, &v)| v != 0.0 && v != 1.0)
    {
        return Err(Error::NonBinary { index, value });
    }
    Ok(pack_bits(mask.data().iter().map(|&v| v == 1.0)))
}

/// Inverse of [`pack_mask`], returned as a flat `[numel]` tensor.
pub fn unpack_mask(bytes: &[u8], numel: usize) -> Result<Tensor> {
    let expected = packed_len(numel);
    if bytes.len() != expected {
        return Err(Error::MaskLength {
            expected,
            actual: bytes.len(),
        });
    }
    if !numel.is_multiple_of(8) {
        let tail = bytes[expected - 1] >> (numel % 8);
        if tail != 0 {
            return Err(Error::Corrupt(format!(
                "padding bits set in final mask byte {:#04x}",
                bytes[expected - 1]
            )));
        }
    }
    let data = (0..numel)
        .map(|i| f32::from((bytes[i / 8] >> (i % 8)) & 1))
        .collect();
    Tensor::new(vec![numel], data)
}

/// Number of set bits in a packed mask.
pub fn popcount(bytes: &[u8]) -> usize {
    bytes.iter().map(|b| b.count_ones() as usize).sum()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FootprintEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub floats: usize,
    /// Masks applied to this tensor.
    pub masks: usize,
    pub float_bytes: usize,
    pub mask_bytes: usize,
}

/// Closed-form storage cost of an inference checkpoint's payload.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FootprintReport {
    pub tie_mode: TieMode,
    /// Distinct stored floats.
    pub stored_floats: usize,
    pub float_bytes: usize,
    pub mask_count: usize,
    pub mask_bytes: usize,
    pub total_bytes: usize,
    /// Stored floats a mask keeps (see [`crate::transformer::ParamCounts`]).
    pub retained_floats: usize,
    /// `4 × retained_floats`: the cost if only kept weights were stored.
    pub retained_float_bytes: usize,
    pub tensors: Vec<FootprintEntry>,
}

pub fn footprint(cfg: &ModelConfig) -> Result<FootprintReport> {
    let counts = param_counts(cfg)?;
    let tensors: Vec<FootprintEntry> = tensor_layout(cfg)?
        .into_iter()
        .map(|t| {
            let floats = t.numel();
            FootprintEntry {
                floats,
                masks: t.masks,
                float_bytes: BYTES_PER_FLOAT * floats,
                mask_bytes: t.masks * packed_len(floats),
                name: t.name,
                shape: t.shape,
            }
        })
        .collect();
    let float_bytes: usize = tensors.iter().map(|t| t.float_bytes).sum();
    let mask_bytes: usize = tensors.iter().map(|t| t.mask_bytes).sum();
    Ok(FootprintReport {
        tie_mode: cfg.tie_mode,
        stored_floats: counts.stored_weights_no_mask,
        float_bytes,
        mask_count: counts.masks,
        mask_bytes,
        total_bytes: float_bytes + mask_bytes,
        retained_floats: counts.retained_weights,
        retained_float_bytes: BYTES_PER_FLOAT * counts.retained_weights,
        tensors,
    })
}

fn megabytes(bytes: usize) -> f64 {
    bytes as f64 / 1e6
}

impl fmt::Display for FootprintReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<24} {:>12} {:>6} {:>14} {:>12}", "tensor", "floats", "masks", "float bytes", "mask bytes")?;
        for t in &self.tensors {
            writeln!(
                f,
                "{:<24} {:>12} {:>6} {:>14} {:>12}",
                t.name, t.floats, t.masks, t.float_bytes, t.mask_bytes
            )?;
        }
        writeln!(f, "stored floats     {:>14} ({:.2} MB)", self.stored_floats, megabytes(self.float_bytes))?;
        writeln!(
            f,
            "masks             {:>14} ({:.2} MB)",
            self.mask_count,
            megabytes(self.mask_bytes)
        )?;
        writeln!(f, "total             {:>14} bytes ({:.2} MB)", self.total_bytes, megabytes(self.total_bytes))?;
        write!(
            f,
            "retained floats   {:>14} ({:.2} MB at 4 bytes each)",
            self.retained_floats,
            megabytes(self.retained_float_bytes)
        )
    }
}
