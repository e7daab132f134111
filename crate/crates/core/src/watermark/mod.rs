//! Projection-based watermarking of a conv layer's filter-mean vector.
//!
//! A `T`-bit message `b` is carried by the signs of `X·w`, where `w` is the
//! conv weight averaged over its filters and `X` is a secret `T×M` key.
//! Embedding minimizes the binary cross-entropy between `σ(X·w)` and `b`.

mod detect;
mod embed;
mod key;
mod message;

pub use detect::{ber, extract, extract_flat, DetectionStats, Histogram, HISTOGRAM_BINS};
pub use embed::{
    embedding_loss, flatten_target, projections, FlattenedTarget, LOG_FLOOR, SIGMOID_CLAMP,
};
pub use key::{make_key, KeyKind, WatermarkKey};
pub use message::Message;
