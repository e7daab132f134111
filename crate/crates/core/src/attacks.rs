//! Attacks against an embedded watermark: fine-tuning, magnitude pruning,
//! overwriting with a second key, and direct post-hoc embedding as a
//! baseline. Every attack works on a copy of the model.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{error_rate, HostModel};
use crate::train::{train, Init, Situation, TrainConfig, Watermark};
use crate::watermark::{embedding_loss, flatten_target};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    FineTune,
    Prune,
    Overwrite,
    PostHoc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PruneOrder {
    /// Smallest magnitudes first (ordinary magnitude pruning).
    Ascending,
    /// Largest magnitudes first.
    Descending,
    Random,
}

impl PruneOrder {
    pub const ALL: [PruneOrder; 3] = [
        PruneOrder::Ascending,
        PruneOrder::Random,
        PruneOrder::Descending,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PruneOrder::Ascending => "ascending",
            PruneOrder::Descending => "descending",
            PruneOrder::Random => "random",
        }
    }
}

impl FromStr for PruneOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ascending" => Ok(PruneOrder::Ascending),
            "descending" => Ok(PruneOrder::Descending),
            "random" => Ok(PruneOrder::Random),
            other => Err(Error::config(format!("unknown prune order {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneSpec {
    /// Fraction α of the target layer's weights to zero.
    pub rate: f64,
    pub order: PruneOrder,
    /// Only used by the random order.
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub alpha: f64,
    pub order: PruneOrder,
    #[serde(rename = "E_R")]
    pub embedding_loss: f64,
    #[serde(rename = "BER")]
    pub ber: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub attack: AttackKind,
    pub layer: usize,
    /// Embedding loss of the watermark under attack, before and after.
    #[serde(rename = "E_R")]
    pub embedding_loss_before: f64,
    #[serde(rename = "E'_R")]
    pub embedding_loss_after: f64,
    pub ber_before: f64,
    pub ber_after: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_error_after: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub curve: Vec<SweepPoint>,
    /// `½‖w − w0‖²` of the filter-mean vector (post-hoc embedding).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// BER of the second watermark (overwrite).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_watermark_ber: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl AttackReport {
    fn baseline(attack: AttackKind, model: &HostModel, wm: &Watermark) -> Result<Self> {
        let loss = wm.embedding_loss(model)?;
        let ber = wm.detect(model)?.ber.expect("detect sets a reference");
        Ok(AttackReport {
            attack,
            layer: wm.layer,
            embedding_loss_before: loss,
            embedding_loss_after: loss,
            ber_before: ber,
            ber_after: ber,
            test_error_after: None,
            curve: Vec::new(),
            distance: None,
            lambda: None,
            new_watermark_ber: None,
            warnings: Vec::new(),
        })
    }

    fn record_after(&mut self, model: &HostModel, wm: &Watermark) -> Result<()> {
        self.embedding_loss_after = wm.embedding_loss(model)?;
        self.ber_after = wm.detect(model)?.ber.expect("detect sets a reference");
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        let scalars = [
            self.embedding_loss_before,
            self.embedding_loss_after,
            self.ber_before,
            self.ber_after,
        ];
        scalars.iter().all(|v| v.is_finite())
            && self.test_error_after.is_none_or(f64::is_finite)
            && self.distance.is_none_or(f64::is_finite)
            && self
                .curve
                .iter()
                .all(|p| p.embedding_loss.is_finite() && p.ber.is_finite())
    }
}

fn test_error(model: &HostModel, test: Option<&Dataset>) -> Result<Option<f64>> {
    match test {
        Some(t) => {
            let labels = t
                .labels()
                .ok_or_else(|| Error::config("test data must carry class labels"))?;
            Ok(Some(error_rate(model, &t.inputs, labels)?))
        }
        None => Ok(None),
    }
}

/// Continues training without the regularizer and reports how much of the
/// watermark survives. `config.situation` must be `None`.
pub fn attack_finetune(
    model: &HostModel,
    wm: &Watermark,
    train_data: &Dataset,
    test: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<AttackReport> {
    if config.situation != Situation::None {
        return Err(Error::config(
            "a fine-tuning attack trains without the embedding regularizer",
        ));
    }
    let mut report = AttackReport::baseline(AttackKind::FineTune, model, wm)?;
    let tuned = train(
        Init::Pretrained(model.clone()),
        train_data,
        test,
        config,
        None,
    )?;
    report.record_after(&tuned.model, wm)?;
    report.test_error_after = match tuned.final_test_error() {
        Some(e) => Some(e),
        None => test_error(&tuned.model, test)?,
    };
    Ok(report)
}

/// Returns a copy with `round(α·P)` of the layer's `P` weights set to zero.
/// Magnitude ties are broken by ascending flat index.
pub fn prune_layer(model: &HostModel, layer: usize, spec: &PruneSpec) -> Result<HostModel> {
    if !(0.0..=1.0).contains(&spec.rate) {
        return Err(Error::config(format!(
            "pruning rate {} is outside [0, 1]",
            spec.rate
        )));
    }
    let mut pruned = model.clone();
    let weight = pruned.conv_weight_mut(layer)?;
    let total = weight.len();
    let count = (libm::round(spec.rate * total as f64) as usize).min(total);
    let data = weight.data_mut();
    let mut order: Vec<usize> = (0..total).collect();
    match spec.order {
        PruneOrder::Ascending => order.sort_by(|&a, &b| data[a].abs().total_cmp(&data[b].abs())),
        PruneOrder::Descending => order.sort_by(|&a, &b| data[b].abs().total_cmp(&data[a].abs())),
        PruneOrder::Random => order.shuffle(&mut ChaCha20Rng::seed_from_u64(spec.seed)),
    }
    for &i in &order[..count] {
        data[i] = 0.0;
    }
    Ok(pruned)
}

/// Prunes a copy at a single rate and re-extracts.
pub fn attack_prune(
    model: &HostModel,
    wm: &Watermark,
    spec: &PruneSpec,
    test: Option<&Dataset>,
) -> Result<AttackReport> {
    let mut report = AttackReport::baseline(AttackKind::Prune, model, wm)?;
    let pruned = prune_layer(model, wm.layer, spec)?;
    report.record_after(&pruned, wm)?;
    report.test_error_after = test_error(&pruned, test)?;
    report.curve.push(SweepPoint {
        alpha: spec.rate,
        order: spec.order,
        embedding_loss: report.embedding_loss_after,
        ber: report.ber_after,
    });
    Ok(report)
}

/// Pruning curves over an ascending α grid for each order. The headline
/// "after" values are those of the last α in the first order.
pub fn prune_sweep(
    model: &HostModel,
    wm: &Watermark,
    alphas: &[f64],
    orders: &[PruneOrder],
    seed: u64,
) -> Result<AttackReport> {
    if alphas.is_empty() || orders.is_empty() {
        return Err(Error::config(
            "a pruning sweep needs at least one rate and one order",
        ));
    }
    if alphas.iter().any(|a| a.is_nan()) || alphas.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::config(
            "pruning rates must be listed in ascending order",
        ));
    }
    let mut report = AttackReport::baseline(AttackKind::Prune, model, wm)?;
    for &order in orders {
        for &alpha in alphas {
            let pruned = prune_layer(
                model,
                wm.layer,
                &PruneSpec {
                    rate: alpha,
                    order,
                    seed,
                },
            )?;
            let values = flatten_target(pruned.conv_weight(wm.layer)?)?.values;
            let loss = embedding_loss(&wm.key, &wm.message, &values)?.0;
            let ber = wm.detect(&pruned)?.ber.expect("detect sets a reference");
            report.curve.push(SweepPoint {
                alpha,
                order,
                embedding_loss: loss,
                ber,
            });
        }
    }
    let last = report.curve[alphas.len() - 1];
    report.embedding_loss_after = last.embedding_loss;
    report.ber_after = last.ber;
    Ok(report)
}

/// Embeds `replacement` by fine-tune-to-embed and reports the damage to
/// `original`. `config.situation` is forced to fine-tune-to-embed.
pub fn attack_overwrite(
    model: &HostModel,
    original: &Watermark,
    replacement: &Watermark,
    train_data: &Dataset,
    test: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<AttackReport> {
    let mut report = AttackReport::baseline(AttackKind::Overwrite, model, original)?;
    if replacement.key.seed() == original.key.seed()
        && replacement.key.kind() == original.key.kind()
    {
        report.warnings.push(format!(
            "new key reuses seed {} of the original key",
            original.key.seed()
        ));
    }
    let config = TrainConfig {
        situation: Situation::FineTuneToEmbed,
        ..config.clone()
    };
    let out = train(
        Init::Pretrained(model.clone()),
        train_data,
        test,
        &config,
        Some(replacement),
    )?;
    report.record_after(&out.model, original)?;
    report.test_error_after = out.final_test_error();
    report.lambda = Some(config.lambda);
    report.new_watermark_ber = out.detection.and_then(|d| d.ber);
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PostHocConfig {
    pub lambda: f64,
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for PostHocConfig {
    fn default() -> Self {
        PostHocConfig {
            lambda: 1.0,
            steps: 1000,
            learning_rate: 0.01,
        }
    }
}

/// Embeds without the task loss by gradient descent on
/// `½‖w − w0‖² + λ·E_R(w)` over the target layer's weight, all other
/// layers frozen. Returns the modified copy and its report.
pub fn embed_posthoc(
    model: &HostModel,
    wm: &Watermark,
    config: &PostHocConfig,
    test: Option<&Dataset>,
) -> Result<(HostModel, AttackReport)> {
    if !(config.lambda >= 0.0 && config.lambda.is_finite()) {
        return Err(Error::config("post-hoc lambda must be nonnegative"));
    }
    if !(config.learning_rate > 0.0 && config.learning_rate.is_finite()) {
        return Err(Error::config("post-hoc learning rate must be positive"));
    }
    let mut report = AttackReport::baseline(AttackKind::PostHoc, model, wm)?;
    let mut edited = model.clone();
    let origin = flatten_target(model.conv_weight(wm.layer)?)?.values;
    for _ in 0..config.steps {
        let weight = edited.conv_weight_mut(wm.layer)?;
        let target = flatten_target(weight)?;
        let (_, grad) = embedding_loss(&wm.key, &wm.message, &target.values)?;
        let scale = config.learning_rate / target.filters as f64;
        for (((chunk, g), w), w0) in weight
            .data_mut()
            .chunks_mut(target.filters)
            .zip(grad)
            .zip(&target.values)
            .zip(&origin)
        {
            let step = scale * ((w - w0) + config.lambda * g);
            chunk.iter_mut().for_each(|v| *v -= step);
        }
        if !weight.is_finite() {
            return Err(Error::NonFinite {
                layer: Some(wm.layer),
                what: "post-hoc weight",
            });
        }
    }
    let values = flatten_target(edited.conv_weight(wm.layer)?)?.values;
    let distance = 0.5
        * values
            .iter()
            .zip(&origin)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    report.record_after(&edited, wm)?;
    report.distance = Some(distance);
    report.lambda = Some(config.lambda);
    report.test_error_after = test_error(&edited, test)?;
    if !report.is_finite() {
        return Err(Error::NonFinite {
            layer: Some(wm.layer),
            what: "post-hoc loss",
        });
    }
    Ok((edited, report))
}
