use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::Params;
use crate::model::{Gradients, HostModel};

/// Multiplies the base learning rate by `factor` from `epoch` onwards.
/// Drops compose multiplicatively.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrDrop {
    pub epoch: usize,
    pub factor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    #[serde(default = "default_true")]
    pub nesterov: bool,
    #[serde(default)]
    pub schedule: Vec<LrDrop>,
}

fn default_true() -> bool {
    true
}

impl Default for SgdConfig {
    /// lr 0.1, momentum 0.9, weight decay 5e-4, Nesterov, no schedule.
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 5.0e-4,
            nesterov: true,
            schedule: Vec::new(),
        }
    }
}

impl SgdConfig {
    /// Single drop by 0.2 at 60% of `epochs`.
    pub fn with_default_schedule(mut self, epochs: usize) -> Self {
        self.schedule = vec![LrDrop {
            epoch: (epochs * 3) / 5,
            factor: 0.2,
        }];
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay must be nonnegative"));
        }
        for drop in &self.schedule {
            if !(drop.factor > 0.0 && drop.factor.is_finite()) {
                return Err(Error::config(format!(
                    "schedule factor at epoch {} must be positive",
                    drop.epoch
                )));
            }
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.schedule
            .iter()
            .filter(|d| epoch >= d.epoch)
            .fold(self.learning_rate, |lr, d| lr * d.factor)
    }
}

/// One SGD update of a flat parameter slice.
///
/// `g ← g + wd·w`, `v ← μ·v + g`, then `w ← w − η·(g + μ·v)` with Nesterov
/// or `w ← w − η·v` without.
pub fn sgd_update(
    weights: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    nesterov: bool,
) {
    for ((w, &g), v) in weights.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        let g = if weight_decay != 0.0 {
            g + weight_decay * *w
        } else {
            g
        };
        if momentum == 0.0 {
            *w -= lr * g;
            continue;
        }
        *v = momentum * *v + g;
        let step = if nesterov { g + momentum * *v } else { *v };
        *w -= lr * step;
    }
}

/// SGD with momentum state for one model.
#[derive(Clone, Debug)]
pub struct Sgd {
    config: SgdConfig,
    velocity: Vec<Option<Params>>,
    decay_exempt: Vec<usize>,
}

impl Sgd {
    pub fn new(config: SgdConfig, model: &HostModel) -> Result<Self> {
        config.validate()?;
        let velocity = model
            .layers()
            .iter()
            .map(|l| l.params().map(Params::zeros_like))
            .collect();
        Ok(Sgd {
            config,
            velocity,
            decay_exempt: Vec::new(),
        })
    }

    /// Layers whose weight is excluded from weight decay.
    pub fn exempt_from_decay(mut self, layers: &[usize]) -> Self {
        self.decay_exempt = layers.to_vec();
        self
    }

    pub fn config(&self) -> &SgdConfig {
        &self.config
    }

    pub fn velocity(&self) -> &[Option<Params>] {
        &self.velocity
    }

    /// Applies one update at learning rate `lr`. Weight decay touches the
    /// weights only, never the biases.
    pub fn step(&mut self, model: &mut HostModel, grads: &Gradients, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config(
                "learning rate after scheduling must be positive",
            ));
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite {
                layer: None,
                what: "gradient",
            });
        }
        if grads.layers.len() != self.velocity.len() {
            return Err(Error::input("gradients do not match the optimizer state"));
        }
        let SgdConfig {
            momentum,
            weight_decay,
            nesterov,
            ..
        } = self.config;
        for (id, (g, v)) in grads
            .layers
            .iter()
            .zip(self.velocity.iter_mut())
            .enumerate()
        {
            let (Some(g), Some(v)) = (g, v) else { continue };
            let p = model
                .layer_mut(id)
                .and_then(|l| l.params_mut())
                .ok_or_else(|| Error::input(format!("layer {id} has no parameters")))?;
            if p.weight.shape() != g.weight.shape() || p.bias.shape() != g.bias.shape() {
                return Err(Error::input(format!(
                    "gradient shape mismatch in layer {id}"
                )));
            }
            let wd = if self.decay_exempt.contains(&id) {
                0.0
            } else {
                weight_decay
            };
            sgd_update(
                p.weight.data_mut(),
                g.weight.data(),
                v.weight.data_mut(),
                lr,
                momentum,
                wd,
                nesterov,
            );
            sgd_update(
                p.bias.data_mut(),
                g.bias.data(),
                v.bias.data_mut(),
                lr,
                momentum,
                0.0,
                nesterov,
            );
        }
        Ok(())
    }
}
