//! Experiment configuration (JSON, unknown fields rejected).
//!
//! Seeds left out of a section are derived from the global `seed`, so a
//! single `--seed` override reseeds the whole run.

use std::path::{Path, PathBuf};

use nnwm_core::{
    FeatureShape, HostPreset, KeyKind, LrDrop, Message, PostHocConfig, PruneOrder, SgdConfig,
    Situation, TrainConfig,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};
use crate::files::read_json;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub host: HostConfig,
    pub dataset: DatasetConfig,
    pub train: TrainSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<KeySpec>,
    /// All ones when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<MessageSpec>,
    /// Pre-trained checkpoint for fine-tune-to-embed and distill-to-embed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attacks: Vec<AttackSpec>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HostConfig {
    pub preset: HostPreset,
    /// Conv layer carrying the watermark; the preset's default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_layer: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        classes: usize,
        height: usize,
        width: usize,
        channels: usize,
        train_count: usize,
        test_count: usize,
        #[serde(default = "default_separation")]
        separation: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    Cifar10 {
        /// Falls back to `NNWM_DATA_DIR`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dir: Option<PathBuf>,
        train_count: usize,
        test_count: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
}

fn default_separation() -> f64 {
    nnwm_core::data::DEFAULT_SEPARATION
}

impl DatasetConfig {
    pub fn input_shape(&self) -> FeatureShape {
        match *self {
            DatasetConfig::Synthetic {
                height,
                width,
                channels,
                ..
            } => FeatureShape::Image {
                height,
                width,
                channels,
            },
            DatasetConfig::Cifar10 { .. } => {
                let side = nnwm_core::data::CIFAR_SIDE;
                FeatureShape::Image {
                    height: side,
                    width: side,
                    channels: 3,
                }
            }
        }
    }

    pub fn classes(&self) -> usize {
        match *self {
            DatasetConfig::Synthetic { classes, .. } => classes,
            DatasetConfig::Cifar10 { .. } => nnwm_core::data::CIFAR_CLASSES,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_true")]
    pub nesterov: bool,
    /// Learning-rate drops; a single ×0.2 drop at 60% of the epochs when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<Vec<LrDrop>>,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    pub situation: Situation,
    #[serde(default)]
    pub decay_target_layer: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shuffle_seed: Option<u64>,
}

fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    nnwm_core::train::DESK_LEARNING_RATE
}
fn default_momentum() -> f64 {
    0.9
}
fn default_decay() -> f64 {
    5e-4
}
fn default_true() -> bool {
    true
}
fn default_lambda() -> f64 {
    0.01
}

impl TrainSection {
    pub fn to_train_config(&self, global_seed: u64) -> TrainConfig {
        let optimizer = SgdConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            nesterov: self.nesterov,
            schedule: Vec::new(),
        };
        let optimizer = match &self.schedule {
            Some(drops) => SgdConfig {
                schedule: drops.clone(),
                ..optimizer
            },
            None => optimizer.with_default_schedule(self.epochs),
        };
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer,
            lambda: self.lambda,
            situation: self.situation,
            shuffle_seed: self.shuffle_seed.unwrap_or(derive(global_seed, 2)),
            decay_target_layer: self.decay_target_layer,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeySpec {
    pub kind: KeyKind,
    #[serde(rename = "T")]
    pub bits: usize,
    /// Checked against the target layer when given.
    #[serde(default, rename = "M", skip_serializing_if = "Option::is_none")]
    pub target_len: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MessageSpec {
    Ones,
    Random {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    Hex {
        hex: String,
        bits: usize,
    },
}

impl MessageSpec {
    pub fn realize(&self, bits: usize, global_seed: u64) -> Result<Message> {
        Ok(match self {
            MessageSpec::Ones => Message::ones(bits)?,
            MessageSpec::Random { seed } => {
                Message::random(bits, seed.unwrap_or(derive(global_seed, 4)))?
            }
            MessageSpec::Hex { hex, bits } => Message::from_hex(hex, *bits)?,
        })
    }

    fn declared_len(&self) -> Option<usize> {
        match self {
            MessageSpec::Hex { bits, .. } => Some(*bits),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum AttackSpec {
    Finetune {
        epochs: usize,
    },
    Prune {
        alphas: Vec<f64>,
        #[serde(default = "all_orders")]
        orders: Vec<PruneOrder>,
        #[serde(default)]
        seed: u64,
    },
    Overwrite {
        epochs: usize,
        key: KeySpec,
        #[serde(default = "random_message")]
        message: MessageSpec,
        #[serde(default = "default_lambda")]
        lambda: f64,
    },
    Posthoc {
        lambda: f64,
        #[serde(default = "default_steps")]
        steps: usize,
        #[serde(default = "default_posthoc_lr")]
        learning_rate: f64,
    },
}

fn all_orders() -> Vec<PruneOrder> {
    PruneOrder::ALL.to_vec()
}
fn random_message() -> MessageSpec {
    MessageSpec::Random { seed: None }
}
fn default_steps() -> usize {
    PostHocConfig::default().steps
}
fn default_posthoc_lr() -> f64 {
    PostHocConfig::default().learning_rate
}

impl AttackSpec {
    pub fn name(&self) -> &'static str {
        match self {
            AttackSpec::Finetune { .. } => "finetune",
            AttackSpec::Prune { .. } => "prune",
            AttackSpec::Overwrite { .. } => "overwrite",
            AttackSpec::Posthoc { .. } => "posthoc",
        }
    }
}

/// Sub-seed `index` of the global seed.
pub fn derive(global: u64, index: u64) -> u64 {
    global
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(index)
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path).map_err(|e| match e {
            CliError::Json { source, .. } => {
                CliError::config(path.display().to_string(), source.to_string())
            }
            other => other,
        })
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self
    }

    pub fn host_seed(&self) -> u64 {
        self.host.seed.unwrap_or(derive(self.seed, 0))
    }

    pub fn data_seed(&self) -> u64 {
        match self.dataset {
            DatasetConfig::Synthetic { seed, .. } | DatasetConfig::Cifar10 { seed, .. } => {
                seed.unwrap_or(derive(self.seed, 1))
            }
        }
    }

    pub fn key_seed(&self) -> Option<u64> {
        self.key
            .as_ref()
            .map(|k| k.seed.unwrap_or(derive(self.seed, 3)))
    }

    pub fn train_config(&self) -> TrainConfig {
        self.train.to_train_config(self.seed)
    }

    pub fn target_layer(&self) -> Option<usize> {
        self.host.target_layer.or(self.host.preset.default_target())
    }

    /// SHA-256 of the canonical JSON form, hex encoded. The output
    /// directory is left out so relocated reruns hash the same.
    pub fn hash(&self) -> String {
        let canonical = ExperimentConfig {
            output_dir: PathBuf::new(),
            ..self.clone()
        };
        let bytes = serde_json::to_vec(&canonical).expect("plain data serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Cross-field checks that need no data and no training.
    pub fn validate(&self) -> Result<()> {
        let input = self.dataset.input_shape();
        let classes = self.dataset.classes();
        match self.dataset {
            DatasetConfig::Synthetic {
                train_count,
                test_count,
                separation,
                ..
            } => {
                if train_count == 0 || test_count == 0 {
                    return Err(CliError::config(
                        "dataset",
                        "train_count and test_count must be positive",
                    ));
                }
                if !(separation >= 0.0 && separation.is_finite()) {
                    return Err(CliError::config(
                        "dataset.separation",
                        "must be a nonnegative number",
                    ));
                }
            }
            DatasetConfig::Cifar10 {
                train_count,
                test_count,
                ..
            } => {
                if train_count == 0 || test_count == 0 {
                    return Err(CliError::config(
                        "dataset",
                        "train_count and test_count must be positive",
                    ));
                }
            }
        }
        let specs = self
            .host
            .preset
            .layers(input, classes)
            .map_err(|e| CliError::config("host.preset", e.to_string()))?;
        let train = self.train_config();
        train
            .validate()
            .map_err(|e| CliError::config("train", e.to_string()))?;

        let situation = self.train.situation;
        let needs_init = matches!(
            situation,
            Situation::FineTuneToEmbed | Situation::DistillToEmbed
        );
        if needs_init && self.init.is_none() {
            return Err(CliError::config(
                "init",
                format!("{situation:?} needs a pre-trained checkpoint"),
            ));
        }
        if situation == Situation::TrainToEmbed && self.init.is_some() {
            return Err(CliError::config(
                "init",
                "train-to-embed starts from a fresh initialization",
            ));
        }

        let target_len = match self.target_layer() {
            Some(layer) => match specs.get(layer) {
                Some(nnwm_core::LayerSpec::Conv2d { size, depth, .. }) => Some(size * size * depth),
                _ => {
                    return Err(CliError::config(
                        "host.target_layer",
                        format!("layer {layer} is not a conv layer"),
                    ))
                }
            },
            None => None,
        };
        if self.key.is_none() && situation.embeds() {
            return Err(CliError::config(
                "key",
                format!("{situation:?} needs a key"),
            ));
        }
        if self.message.is_some() && self.key.is_none() {
            return Err(CliError::config("message", "a message needs a key"));
        }
        if let Some(key) = &self.key {
            let m = target_len.ok_or_else(|| {
                CliError::config("host.target_layer", "the host has no conv layer")
            })?;
            check_key(key, m, self.message.as_ref(), "key", "message")?;
        }
        for (i, attack) in self.attacks.iter().enumerate() {
            let field = format!("attacks[{i}]");
            match attack {
                AttackSpec::Prune { alphas, orders, .. } => {
                    if alphas.is_empty() || orders.is_empty() {
                        return Err(CliError::config(
                            field,
                            "needs at least one alpha and one order",
                        ));
                    }
                    if alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
                        return Err(CliError::config(
                            format!("{field}.alphas"),
                            "values must lie in [0, 1]",
                        ));
                    }
                    if alphas.windows(2).any(|w| w[0] > w[1]) {
                        return Err(CliError::config(
                            format!("{field}.alphas"),
                            "must be ascending",
                        ));
                    }
                }
                AttackSpec::Overwrite {
                    key,
                    message,
                    lambda,
                    ..
                } => {
                    let m = target_len.ok_or_else(|| {
                        CliError::config("host.target_layer", "the host has no conv layer")
                    })?;
                    check_key(
                        key,
                        m,
                        Some(message),
                        &format!("{field}.key"),
                        &format!("{field}.message"),
                    )?;
                    if !(*lambda >= 0.0 && lambda.is_finite()) {
                        return Err(CliError::config(
                            format!("{field}.lambda"),
                            "must be nonnegative",
                        ));
                    }
                }
                AttackSpec::Posthoc {
                    lambda,
                    learning_rate,
                    ..
                } => {
                    if !(*lambda >= 0.0 && lambda.is_finite()) {
                        return Err(CliError::config(
                            format!("{field}.lambda"),
                            "must be nonnegative",
                        ));
                    }
                    if !(*learning_rate > 0.0 && learning_rate.is_finite()) {
                        return Err(CliError::config(
                            format!("{field}.learning_rate"),
                            "must be positive",
                        ));
                    }
                }
                AttackSpec::Finetune { .. } => {}
            }
        }
        Ok(())
    }
}

fn check_key(
    key: &KeySpec,
    m: usize,
    message: Option<&MessageSpec>,
    key_field: &str,
    msg_field: &str,
) -> Result<()> {
    if key.bits == 0 {
        return Err(CliError::config(
            format!("{key_field}.T"),
            "must be at least 1",
        ));
    }
    if let Some(declared) = key.target_len {
        if declared != m {
            return Err(CliError::config(
                format!("{key_field}.M"),
                format!("{declared} does not match the target layer (M = {m})"),
            ));
        }
    }
    if key.kind == KeyKind::Diff && m < 2 {
        return Err(CliError::config(
            format!("{key_field}.kind"),
            "diff keys need M >= 2",
        ));
    }
    if let Some(len) = message.and_then(MessageSpec::declared_len) {
        if len != key.bits {
            return Err(CliError::config(
                format!("{msg_field}.bits"),
                format!("message has {len} bits but the key embeds T = {}", key.bits),
            ));
        }
    }
    Ok(())
}
