//! Command implementations shared by the binary and the tests.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nnwm_core::data::{describe, distill_dataset};
use nnwm_core::watermark::Histogram;
use nnwm_core::{
    attack_finetune, attack_overwrite, build_host, embed_posthoc, grad_check, make_key,
    prune_sweep, train, AttackReport, Dataset, EpochRecord, GradCheckReport, HostModel, HostPreset,
    Init, Message, Objective, PostHocConfig, Situation, SyntheticTask, TrainConfig, Watermark,
    WatermarkKey,
};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, TrainingMeta};
use crate::cifar::{load_cifar10, resolve_dir};
use crate::config::{derive, AttackSpec, DatasetConfig, ExperimentConfig, KeySpec};
use crate::error::{CliError, Result};
use crate::files::{read_key, read_message, write_json, write_text, KeyFile, MessageFile};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const KEY_FILE: &str = "key.json";
pub const MESSAGE_FILE: &str = "message.json";
pub const ATTACK_DIR: &str = "attacks";

/// Written next to every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub seed: u64,
    pub host: HostPreset,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_layer: Option<usize>,
    pub params: usize,
    pub dataset: String,
    pub situation: Situation,
    pub epochs: usize,
    pub lambda: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<KeyFile>,
    pub final_task_loss: Option<f64>,
    /// Absent unless the regularizer was active.
    #[serde(rename = "E_R", default, skip_serializing_if = "Option::is_none")]
    pub embedding_loss: Option<f64>,
    pub test_error: Option<f64>,
    #[serde(rename = "BER", default, skip_serializing_if = "Option::is_none")]
    pub ber: Option<f64>,
}

/// One attack report on disk, with provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackFile {
    pub name: String,
    pub config_hash: String,
    pub seed: u64,
    #[serde(flatten)]
    pub report: AttackReport,
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let seed = cfg.data_seed();
    match &cfg.dataset {
        DatasetConfig::Synthetic {
            classes,
            train_count,
            test_count,
            separation,
            ..
        } => {
            let task = SyntheticTask::new(*classes, cfg.dataset.input_shape(), *separation, seed)?;
            Ok((
                task.sample(*train_count, derive(seed, 1), nnwm_core::Split::Train)?,
                task.sample(*test_count, derive(seed, 2), nnwm_core::Split::Test)?,
            ))
        }
        DatasetConfig::Cifar10 {
            dir,
            train_count,
            test_count,
            ..
        } => {
            let dir = resolve_dir(dir.as_deref())?;
            load_cifar10(&dir, *train_count, *test_count, seed)
        }
    }
}

fn target_len(model: &HostModel, layer: usize) -> Result<usize> {
    let s = model.conv_weight(layer)?.shape();
    Ok(s[0] * s[1] * s[2])
}

fn realize_key(spec: &KeySpec, seed: u64, m: usize) -> Result<WatermarkKey> {
    Ok(make_key(spec.kind, seed, spec.bits, m)?)
}

/// Builds the host the config describes, or loads the `init` checkpoint and
/// checks it has the same architecture.
fn initial_model(cfg: &ExperimentConfig) -> Result<HostModel> {
    let input = cfg.dataset.input_shape();
    let classes = cfg.dataset.classes();
    let model = match &cfg.init {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            if ckpt.model.input_shape() != input
                || ckpt.model.specs() != cfg.host.preset.layers(input, classes)?
            {
                return Err(CliError::config(
                    "init",
                    format!(
                        "{} does not hold a {} host for this dataset",
                        path.display(),
                        cfg.host.preset.name()
                    ),
                ));
            }
            ckpt.model
        }
        None => build_host(cfg.host.preset, input, classes, cfg.host_seed())?,
    };
    match cfg.target_layer() {
        Some(layer) if model.embed_layer() != Some(layer) => Ok(model.with_embed_layer(layer)?),
        _ => Ok(model),
    }
}

fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,E0,E_R,test_error\n");
    for r in history {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{}",
            r.epoch,
            r.task_loss,
            opt(r.embedding_loss),
            opt(r.test_error)
        );
    }
    out
}

/// Trains per `cfg` and writes checkpoint, history, summary, and the key and
/// message files into `out`.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    let hash = cfg.hash();
    let (train_data, test_data) = load_data(cfg)?;
    let model = initial_model(cfg)?;
    let tc: TrainConfig = cfg.train_config();

    let watermark = match (&cfg.key, cfg.target_layer()) {
        (Some(spec), Some(layer)) => {
            let key = realize_key(
                spec,
                cfg.key_seed().expect("key present"),
                target_len(&model, layer)?,
            )?;
            let message = cfg
                .message
                .clone()
                .unwrap_or(crate::config::MessageSpec::Ones);
            Some(Watermark::new(
                layer,
                key,
                message.realize(spec.bits, cfg.seed)?,
            ))
        }
        _ => None,
    };

    let (init, train_set) = match tc.situation {
        Situation::TrainToEmbed => (Init::Fresh(model), train_data),
        Situation::None if cfg.init.is_none() => (Init::Fresh(model), train_data),
        Situation::DistillToEmbed => {
            let soft = distill_dataset(&model, &train_data.inputs)?;
            (Init::Pretrained(model), soft)
        }
        _ => (Init::Pretrained(model), train_data),
    };
    let embed_wm = if tc.situation.embeds() {
        watermark.as_ref()
    } else {
        None
    };
    let outcome = train(init, &train_set, Some(&test_data), &tc, embed_wm)?;

    let ber = match &watermark {
        Some(wm) => wm.detect(&outcome.model)?.ber,
        None => None,
    };
    let summary = RunSummary {
        config_hash: hash.clone(),
        seed: cfg.seed,
        host: cfg.host.preset,
        target_layer: cfg.target_layer(),
        params: outcome.model.param_count(),
        dataset: describe(&train_set),
        situation: tc.situation,
        epochs: tc.epochs,
        lambda: tc.lambda,
        key: watermark.as_ref().map(|wm| KeyFile::of(&wm.key)),
        final_task_loss: outcome.history.last().map(|r| r.task_loss),
        embedding_loss: outcome.final_embedding_loss(),
        test_error: outcome.final_test_error(),
        ber,
    };
    let meta = TrainingMeta {
        epochs: tc.epochs,
        situation: Some(tc.situation),
        final_task_loss: summary.final_task_loss,
        final_embedding_loss: summary.embedding_loss,
        final_test_error: summary.test_error,
        config_hash: Some(hash),
    };
    Checkpoint::new(outcome.model, meta).save(&out.join(CHECKPOINT_FILE))?;
    write_text(&out.join(HISTORY_FILE), &history_csv(&outcome.history))?;
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    if let Some(wm) = &watermark {
        write_json(&out.join(KEY_FILE), &KeyFile::of(&wm.key))?;
        write_json(&out.join(MESSAGE_FILE), &MessageFile::of(&wm.message))?;
    }
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub layer: usize,
    #[serde(rename = "T")]
    pub bits: usize,
    #[serde(rename = "M")]
    pub target_len: usize,
    /// Extracted bits packed most significant first.
    pub hex: String,
    /// Histogram of `σ(X·w)` over `[0, 1]`.
    pub histogram: Histogram,
    #[serde(rename = "BER", default, skip_serializing_if = "Option::is_none")]
    pub ber: Option<f64>,
}

/// Extracts with `key` from `layer` (the checkpoint's embed layer by default).
pub fn cmd_extract(
    checkpoint: &Path,
    key: &Path,
    message: Option<&Path>,
    layer: Option<usize>,
) -> Result<Detection> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let key = read_key(key)?;
    let layer = layer
        .or(ckpt.model.embed_layer())
        .ok_or_else(|| CliError::config("layer", "checkpoint has no embed layer; pass --layer"))?;
    let weight = ckpt
        .model
        .conv_weight(layer)
        .map_err(|e| CliError::config("layer", e.to_string()))?;
    let m = target_len(&ckpt.model, layer)?;
    if key.target_len() != m {
        return Err(CliError::config(
            "key.M",
            format!(
                "key expects M = {} but layer {layer} has M = {m}",
                key.target_len()
            ),
        ));
    }
    let mut stats = nnwm_core::extract(&key, weight)?;
    if let Some(path) = message {
        stats = stats.with_reference(&read_message(path)?)?;
    }
    Ok(Detection {
        layer,
        bits: key.bits(),
        target_len: m,
        hex: stats.message().to_hex(),
        histogram: stats.histogram,
        ber: stats.ber,
    })
}

/// Runs every attack listed in `cfg` against the checkpoint and writes one
/// JSON report per attack (plus a CSV curve for pruning sweeps) into `out`.
pub fn cmd_attack(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    key: &Path,
    message: &Path,
    out: &Path,
) -> Result<Vec<AttackFile>> {
    cfg.validate()?;
    if cfg.attacks.is_empty() {
        return Err(CliError::config("attacks", "no attacks listed"));
    }
    let hash = cfg.hash();
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.model;
    let key = read_key(key)?;
    let message = read_message(message)?;
    let layer = model
        .embed_layer()
        .or(cfg.target_layer())
        .ok_or_else(|| CliError::config("host.target_layer", "no target layer"))?;
    let m = target_len(&model, layer)?;
    if key.target_len() != m {
        return Err(CliError::config(
            "key.M",
            format!(
                "key expects M = {} but the layer has M = {m}",
                key.target_len()
            ),
        ));
    }
    let original = Watermark::new(layer, key, message);
    let needs_data = cfg
        .attacks
        .iter()
        .any(|a| !matches!(a, AttackSpec::Prune { .. }));
    let data = if needs_data {
        Some(load_data(cfg)?)
    } else {
        None
    };
    let test = data.as_ref().map(|d| &d.1);

    let mut files = Vec::new();
    for (i, spec) in cfg.attacks.iter().enumerate() {
        let index = i as u64;
        let report = match spec {
            AttackSpec::Finetune { epochs } => {
                let (train_data, _) = data.as_ref().expect("loaded above");
                let tc = TrainConfig {
                    epochs: *epochs,
                    situation: Situation::None,
                    shuffle_seed: derive(cfg.seed, 10 + index),
                    ..cfg.train_config()
                };
                let tc = TrainConfig {
                    optimizer: tc.optimizer.clone().with_default_schedule(*epochs),
                    ..tc
                };
                attack_finetune(&model, &original, train_data, test, &tc)?
            }
            AttackSpec::Prune {
                alphas,
                orders,
                seed,
            } => prune_sweep(&model, &original, alphas, orders, *seed)?,
            AttackSpec::Overwrite {
                epochs,
                key,
                message,
                lambda,
            } => {
                let (train_data, _) = data.as_ref().expect("loaded above");
                let new_key =
                    realize_key(key, key.seed.unwrap_or(derive(cfg.seed, 20 + index)), m)?;
                let new_message = match message {
                    crate::config::MessageSpec::Random { seed: None } => {
                        Message::random(key.bits, derive(cfg.seed, 30 + index))?
                    }
                    other => other.realize(key.bits, cfg.seed)?,
                };
                let replacement = Watermark::new(layer, new_key, new_message);
                let tc = TrainConfig {
                    epochs: *epochs,
                    lambda: *lambda,
                    situation: Situation::FineTuneToEmbed,
                    shuffle_seed: derive(cfg.seed, 10 + index),
                    ..cfg.train_config()
                };
                let tc = TrainConfig {
                    optimizer: tc.optimizer.clone().with_default_schedule(*epochs),
                    ..tc
                };
                attack_overwrite(&model, &original, &replacement, train_data, test, &tc)?
            }
            AttackSpec::Posthoc {
                lambda,
                steps,
                learning_rate,
            } => {
                let pc = PostHocConfig {
                    lambda: *lambda,
                    steps: *steps,
                    learning_rate: *learning_rate,
                };
                embed_posthoc(&model, &original, &pc, test)?.1
            }
        };
        if !report.is_finite() {
            return Err(nnwm_core::Error::NonFinite {
                layer: Some(layer),
                what: "attack report",
            }
            .into());
        }
        let name = format!("attack-{i}-{}", spec.name());
        let file = AttackFile {
            name: name.clone(),
            config_hash: hash.clone(),
            seed: cfg.seed,
            report,
        };
        write_json(&out.join(format!("{name}.json")), &file)?;
        if !file.report.curve.is_empty() {
            write_text(&out.join(format!("{name}.csv")), &sweep_csv(&file.report))?;
        }
        files.push(file);
    }
    Ok(files)
}

pub fn sweep_csv(report: &AttackReport) -> String {
    let mut out = String::from("alpha,order,E_R,BER\n");
    for p in &report.curve {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            p.alpha,
            p.order.name(),
            p.embedding_loss,
            p.ber
        );
    }
    out
}

pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Gradient check of the configured host and objective on the first
/// `samples` training examples.
pub fn cmd_grad_check(
    cfg: &ExperimentConfig,
    samples: usize,
    tolerance: f64,
) -> Result<GradCheckReport> {
    cfg.validate()?;
    if samples == 0 {
        return Err(CliError::config("samples", "must be positive"));
    }
    let (train_data, _) = load_data(cfg)?;
    let model = initial_model(cfg)?;
    let rows: Vec<usize> = (0..samples.min(train_data.len())).collect();
    let inputs = train_data.inputs.select_rows(&rows);
    let targets = train_data.targets.select(&rows);
    let objective = match (&cfg.key, cfg.target_layer()) {
        (Some(spec), Some(layer)) => {
            let key = realize_key(
                spec,
                cfg.key_seed().expect("key present"),
                target_len(&model, layer)?,
            )?;
            let message = cfg
                .message
                .clone()
                .unwrap_or(crate::config::MessageSpec::Ones)
                .realize(spec.bits, cfg.seed)?;
            Objective::attach(&model, layer, key, message, cfg.train.lambda)?
        }
        _ => Objective::plain(),
    };
    let report = grad_check(
        &model,
        &objective,
        &inputs,
        &targets,
        GRAD_CHECK_STEP,
        tolerance,
    )?;
    Ok(report)
}

/// Default attack output directory for a checkpoint.
pub fn default_attack_dir(checkpoint: &Path) -> PathBuf {
    checkpoint
        .parent()
        .unwrap_or(Path::new("."))
        .join(ATTACK_DIR)
}
