use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::watermark::{Message, WatermarkKey};

/// Sigmoid inputs are clamped to `[-SIGMOID_CLAMP, SIGMOID_CLAMP]`.
pub const SIGMOID_CLAMP: f64 = 30.0;
/// Log arguments are floored at this value.
pub const LOG_FLOOR: f64 = 1e-12;

/// The conv weight averaged over its filters and flattened.
///
/// Index `(i·S + j)·D + k` holds the mean of `W[i][j][k][·]`: filter row
/// first, then filter column, then input channel.
#[derive(Clone, Debug, PartialEq)]
pub struct FlattenedTarget {
    pub values: Vec<f64>,
    pub size: usize,
    pub depth: usize,
    pub filters: usize,
}

impl FlattenedTarget {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn flatten_target(weight: &Tensor) -> Result<FlattenedTarget> {
    let shape = weight.shape();
    if shape.len() != 4 || shape[0] != shape[1] || shape[3] == 0 {
        return Err(Error::input(format!(
            "expected an (S, S, D, L) conv weight, got shape {shape:?}"
        )));
    }
    let filters = shape[3];
    let scale = 1.0 / filters as f64;
    let values = weight
        .data()
        .chunks(filters)
        .map(|f| f.iter().sum::<f64>() * scale)
        .collect();
    Ok(FlattenedTarget {
        values,
        size: shape[0],
        depth: shape[2],
        filters,
    })
}

/// `X·w`.
pub fn projections(key: &WatermarkKey, w: &[f64]) -> Result<Vec<f64>> {
    if w.len() != key.target_len() {
        return Err(Error::input(format!(
            "key expects a target of length {} but got {}",
            key.target_len(),
            w.len()
        )));
    }
    Ok(key
        .rows()
        .map(|row| row.iter().zip(w).map(|(x, v)| x * v).sum())
        .collect())
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    let z = z.clamp(-SIGMOID_CLAMP, SIGMOID_CLAMP);
    1.0 / (1.0 + libm::exp(-z))
}

/// Binary cross-entropy between `σ(X·w)` and the message, summed over bits,
/// and its gradient `Xᵀ(y − b)` with respect to `w`.
pub fn embedding_loss(key: &WatermarkKey, message: &Message, w: &[f64]) -> Result<(f64, Vec<f64>)> {
    if message.len() != key.bits() {
        return Err(Error::config(format!(
            "message has {} bits but the key embeds {}",
            message.len(),
            key.bits()
        )));
    }
    let proj = projections(key, w)?;
    let mut loss = 0.0;
    let mut grad = vec![0.0; w.len()];
    for ((row, z), &b) in key.rows().zip(proj).zip(message.bits()) {
        let y = sigmoid(z);
        let b = b as f64;
        loss -= b * libm::log(y.max(LOG_FLOOR)) + (1.0 - b) * libm::log((1.0 - y).max(LOG_FLOOR));
        let r = y - b;
        for (g, x) in grad.iter_mut().zip(row) {
            *g += x * r;
        }
    }
    Ok((loss, grad))
}
