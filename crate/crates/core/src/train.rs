//! Training loop for the three embedding situations.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{error_rate, HostModel, Targets};
use crate::objective::Objective;
use crate::optim::{Sgd, SgdConfig};
use crate::watermark::{
    embedding_loss, extract, flatten_target, DetectionStats, Message, WatermarkKey,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Situation {
    /// Plain training (or plain fine-tuning from a pre-trained model).
    None,
    /// Fresh initialization, labels available.
    TrainToEmbed,
    /// Pre-trained initialization, labels available.
    FineTuneToEmbed,
    /// Pre-trained initialization, teacher soft targets instead of labels.
    DistillToEmbed,
}

impl Situation {
    pub fn embeds(self) -> bool {
        self != Situation::None
    }
}

pub const DESK_LEARNING_RATE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: SgdConfig,
    /// Regularizer strength λ.
    pub lambda: f64,
    pub situation: Situation,
    pub shuffle_seed: u64,
    /// Apply weight decay to the target layer while the regularizer is
    /// active. Off by default: decay shrinks the very projections the
    /// regularizer grows.
    #[serde(default)]
    pub decay_target_layer: bool,
}

impl TrainConfig {
    /// Desk-scale defaults: batch 32, lr 0.05 (×0.2 at 60%), Nesterov
    /// momentum 0.9, weight decay 5e-4, λ = 0.01.
    pub fn desk(epochs: usize, situation: Situation, shuffle_seed: u64) -> Self {
        TrainConfig {
            epochs,
            batch_size: 32,
            optimizer: SgdConfig {
                learning_rate: DESK_LEARNING_RATE,
                ..SgdConfig::default()
            }
            .with_default_schedule(epochs),
            lambda: 0.01,
            situation,
            shuffle_seed,
            decay_target_layer: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda must be nonnegative"));
        }
        self.optimizer.validate()
    }
}

/// Where a message lives: conv layer id, key and payload.
#[derive(Clone, Debug, PartialEq)]
pub struct Watermark {
    pub layer: usize,
    pub key: WatermarkKey,
    pub message: Message,
}

impl Watermark {
    pub fn new(layer: usize, key: WatermarkKey, message: Message) -> Self {
        Watermark {
            layer,
            key,
            message,
        }
    }

    /// Extraction statistics with BER against this watermark's message.
    pub fn detect(&self, model: &HostModel) -> Result<DetectionStats> {
        extract(&self.key, model.conv_weight(self.layer)?)?.with_reference(&self.message)
    }

    pub fn embedding_loss(&self, model: &HostModel) -> Result<f64> {
        let target = flatten_target(model.conv_weight(self.layer)?)?;
        Ok(embedding_loss(&self.key, &self.message, &target.values)?.0)
    }
}

/// Starting point of a training run.
#[derive(Clone, Debug)]
pub enum Init {
    Fresh(HostModel),
    Pretrained(HostModel),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean task loss `E0` over the epoch's mini-batches.
    pub task_loss: f64,
    /// `E_R` at the end of the epoch, recorded only while embedding (`λ > 0`).
    pub embedding_loss: Option<f64>,
    pub test_error: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: HostModel,
    pub history: Vec<EpochRecord>,
    /// Final extraction, when a watermark was supplied.
    pub detection: Option<DetectionStats>,
}

impl TrainOutcome {
    pub fn final_test_error(&self) -> Option<f64> {
        self.history.last().and_then(|r| r.test_error)
    }

    pub fn final_embedding_loss(&self) -> Option<f64> {
        self.history.last().and_then(|r| r.embedding_loss)
    }
}

/// Trains `init` on `train`, evaluating on `test` after every epoch.
///
/// Embedding situations need a watermark; `None` must not carry one.
/// Train-to-embed starts fresh, fine-tune and distill start from a
/// pre-trained model, and distill only accepts soft targets.
pub fn train(
    init: Init,
    train: &Dataset,
    test: Option<&Dataset>,
    config: &TrainConfig,
    watermark: Option<&Watermark>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let situation = config.situation;
    let mut model = match (situation, init) {
        (Situation::TrainToEmbed, Init::Pretrained(_)) => {
            return Err(Error::config(
                "train-to-embed starts from a fresh initialization",
            ))
        }
        (Situation::FineTuneToEmbed, Init::Fresh(_)) => {
            return Err(Error::MissingCheckpoint(
                "fine-tune-to-embed needs a pre-trained model",
            ))
        }
        (Situation::DistillToEmbed, Init::Fresh(_)) => {
            return Err(Error::MissingCheckpoint(
                "distill-to-embed needs a pre-trained model",
            ))
        }
        (_, Init::Fresh(m) | Init::Pretrained(m)) => m,
    };
    match (situation.embeds(), watermark) {
        (true, None) => {
            return Err(Error::config(format!(
                "{situation:?} needs a key and message"
            )));
        }
        (false, Some(_)) => {
            return Err(Error::config(
                "situation none must not carry a key or message",
            ));
        }
        _ => {}
    }
    match (&train.targets, situation) {
        (Targets::Classes(_), Situation::DistillToEmbed) => {
            return Err(Error::config(
                "distill-to-embed trains on teacher outputs, not labels",
            ));
        }
        (Targets::Soft(_), s) if s != Situation::DistillToEmbed => {
            return Err(Error::config(
                "soft targets are only used by distill-to-embed",
            ));
        }
        _ => {}
    }
    let test_labels = match test {
        Some(t) => Some(
            t.labels()
                .ok_or_else(|| Error::config("test data must carry class labels"))?,
        ),
        None => None,
    };

    let objective = match watermark {
        Some(wm) => Objective::attach(
            &model,
            wm.layer,
            wm.key.clone(),
            wm.message.clone(),
            config.lambda,
        )?,
        None => Objective::plain(),
    };
    let mut sgd = Sgd::new(config.optimizer.clone(), &model)?;
    if objective.is_embedding() && !config.decay_target_layer {
        let layer = objective
            .regularizer()
            .expect("embedding implies a regularizer")
            .layer();
        sgd = sgd.exempt_from_decay(&[layer]);
    }

    let mut rng = ChaCha20Rng::seed_from_u64(config.shuffle_seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = config.optimizer.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        let mut task_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            let inputs = train.inputs.select_rows(batch);
            let targets = train.targets.select(batch);
            let eval = objective.evaluate(&model, &inputs, &targets)?;
            task_sum += eval.task_loss;
            batches += 1;
            sgd.step(&mut model, &eval.grads, lr)?;
        }
        let embedding_loss = match objective.regularizer() {
            Some(r) if objective.is_embedding() => Some(r.loss(&model)?),
            _ => None,
        };
        let test_error = match (test, test_labels) {
            (Some(t), Some(labels)) => Some(error_rate(&model, &t.inputs, labels)?),
            _ => None,
        };
        history.push(EpochRecord {
            epoch,
            learning_rate: lr,
            task_loss: task_sum / batches.max(1) as f64,
            embedding_loss,
            test_error,
        });
    }
    let detection = watermark.map(|wm| wm.detect(&model)).transpose()?;
    Ok(TrainOutcome {
        model,
        history,
        detection,
    })
}
