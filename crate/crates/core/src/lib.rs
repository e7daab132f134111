//! Convolutional network training with a projection-regularizer watermark.
//!
//! The crate is `no_std` with `alloc`. File formats, dataset loading and the
//! command line live in the `nnwm` crate.
//!
//! A watermark is a bit string embedded into one convolutional layer. The
//! layer weight `W` of shape `(S, S, D, L)` is averaged over its `L` filters
//! to give `w` of length `M = S·S·D`; a secret key `X` of shape `(T, M)`
//! reads the bits back as `X·w ≥ 0`. Embedding adds `λ·E_R` to the task
//! loss, where `E_R` is the binary cross-entropy between `σ(X·w)` and the
//! message.

#![no_std]

extern crate alloc;

pub mod attacks;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod hosts;
pub mod layer;
mod linalg;
pub mod model;
pub mod objective;
pub mod optim;
pub mod stats;
pub mod tensor;
pub mod train;
pub mod watermark;

pub use attacks::{
    attack_finetune, attack_overwrite, attack_prune, embed_posthoc, prune_layer, prune_sweep,
    AttackKind, AttackReport, PostHocConfig, PruneOrder, PruneSpec, SweepPoint,
};
pub use data::{Dataset, Split, SyntheticTask};
pub use error::{Error, ErrorKind, Result};
pub use gradcheck::{grad_check, GradCheckReport};
pub use hosts::{build_host, HostPreset};
pub use layer::{FeatureShape, LayerSpec, Params};
pub use model::{
    backward, error_rate, forward, predict, ForwardPass, Gradients, HostModel, Targets,
};
pub use objective::{EmbeddingRegularizer, Evaluation, Objective};
pub use optim::{LrDrop, Sgd, SgdConfig};
pub use tensor::Tensor;
pub use train::{train, EpochRecord, Init, Situation, TrainConfig, TrainOutcome, Watermark};
pub use watermark::{ber, extract, make_key, DetectionStats, KeyKind, Message, WatermarkKey};
