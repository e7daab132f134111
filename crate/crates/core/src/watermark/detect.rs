use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::watermark::embed::{flatten_target, projections, sigmoid};
use crate::watermark::{Message, WatermarkKey};

pub const HISTOGRAM_BINS: usize = 32;

/// Equal-width bin counts over `[lo, hi]`; the upper edge falls in the last bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn build(values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let mut counts = vec![0u64; bins];
        let width = (hi - lo) / bins as f64;
        for &v in values {
            let idx = libm::floor((v - lo) / width);
            let idx = if idx < 0.0 {
                0
            } else {
                (idx as usize).min(bins - 1)
            };
            counts[idx] += 1;
        }
        Histogram { lo, hi, counts }
    }
}

/// Result of projecting a target through a key.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionStats {
    /// Raw projections `X·w`.
    pub projections: Vec<f64>,
    /// `σ(X·w)`, clamped like the embedding loss.
    pub y: Vec<f64>,
    /// `1` where the projection is `>= 0`.
    pub bits: Vec<u8>,
    pub histogram: Histogram,
    /// Bit error rate against a reference message, once one is supplied.
    pub ber: Option<f64>,
}

impl DetectionStats {
    pub fn with_reference(mut self, reference: &Message) -> Result<Self> {
        self.ber = Some(ber(&self, reference)?);
        Ok(self)
    }

    pub fn message(&self) -> Message {
        Message::from_bits(self.bits.clone()).expect("extracted bits are binary and non-empty")
    }
}

/// Extracts bits from an `(S, S, D, L)` conv weight.
pub fn extract(key: &WatermarkKey, weight: &Tensor) -> Result<DetectionStats> {
    let target = flatten_target(weight)?;
    extract_flat(key, &target.values)
}

/// Extracts bits from an already flattened target. Bits are decided on the
/// sign of the projection, with an exact zero mapping to `1`.
pub fn extract_flat(key: &WatermarkKey, w: &[f64]) -> Result<DetectionStats> {
    let projections = projections(key, w)?;
    let y: Vec<f64> = projections.iter().map(|&z| sigmoid(z)).collect();
    let bits = projections.iter().map(|&z| (z >= 0.0) as u8).collect();
    let histogram = Histogram::build(&y, 0.0, 1.0, HISTOGRAM_BINS);
    Ok(DetectionStats {
        projections,
        y,
        bits,
        histogram,
        ber: None,
    })
}

/// Hamming distance to the reference divided by `T`.
pub fn ber(stats: &DetectionStats, reference: &Message) -> Result<f64> {
    if stats.bits.len() != reference.len() {
        return Err(Error::input(format!(
            "extracted {} bits but the reference has {}",
            stats.bits.len(),
            reference.len()
        )));
    }
    let errors = stats
        .bits
        .iter()
        .zip(reference.bits())
        .filter(|(a, b)| a != b)
        .count();
    Ok(errors as f64 / reference.len() as f64)
}
