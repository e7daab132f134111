//! Training objective `E = E0 + λ·E_R`, with the embedding loss optionally
//! attached to one conv layer.

use alloc::format;

use crate::error::{Error, Result};
use crate::model::{backward, forward, Gradients, HostModel, Targets};
use crate::tensor::Tensor;
use crate::watermark::{embedding_loss, flatten_target, Message, WatermarkKey};

/// Embedding loss bound to a specific conv layer.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRegularizer {
    layer: usize,
    key: WatermarkKey,
    message: Message,
    strength: f64,
}

impl EmbeddingRegularizer {
    pub fn new(
        model: &HostModel,
        layer: usize,
        key: WatermarkKey,
        message: Message,
        strength: f64,
    ) -> Result<Self> {
        if !(strength >= 0.0 && strength.is_finite()) {
            return Err(Error::config(format!(
                "regularizer strength must be nonnegative, got {strength}"
            )));
        }
        let weight = model.conv_weight(layer)?;
        let shape = weight.shape();
        let target_len = shape[0] * shape[1] * shape[2];
        if target_len != key.target_len() {
            return Err(Error::config(format!(
                "key was made for M = {} but layer {layer} has M = {target_len}",
                key.target_len()
            )));
        }
        if message.len() != key.bits() {
            return Err(Error::config(format!(
                "message has {} bits but the key embeds {}",
                message.len(),
                key.bits()
            )));
        }
        Ok(EmbeddingRegularizer {
            layer,
            key,
            message,
            strength,
        })
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn key(&self) -> &WatermarkKey {
        &self.key
    }

    pub fn message(&self) -> &Message {
        &self.message
    }

    pub fn strength(&self) -> f64 {
        self.strength
    }

    /// `E_R` of the model's current target layer.
    pub fn loss(&self, model: &HostModel) -> Result<f64> {
        let target = flatten_target(model.conv_weight(self.layer)?)?;
        Ok(embedding_loss(&self.key, &self.message, &target.values)?.0)
    }

    /// `E_R` and `∂E_R/∂W`; every filter receives `(1/L)·∂E_R/∂w`.
    pub fn loss_and_weight_grad(&self, model: &HostModel) -> Result<(f64, Tensor)> {
        let weight = model.conv_weight(self.layer)?;
        let target = flatten_target(weight)?;
        let (loss, grad_w) = embedding_loss(&self.key, &self.message, &target.values)?;
        let filters = target.filters;
        let scale = 1.0 / filters as f64;
        let mut grad = Tensor::zeros(weight.shape());
        for (chunk, g) in grad.data_mut().chunks_mut(filters).zip(grad_w) {
            chunk.fill(g * scale);
        }
        Ok((loss, grad))
    }
}

/// Loss terms and gradient of one objective evaluation.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub task_loss: f64,
    pub embedding_loss: Option<f64>,
    pub total: f64,
    pub grads: Gradients,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Objective {
    regularizer: Option<EmbeddingRegularizer>,
}

impl Objective {
    /// Cross-entropy only.
    pub fn plain() -> Self {
        Objective { regularizer: None }
    }

    /// Cross-entropy plus `λ·E_R` on conv layer `layer`.
    pub fn attach(
        model: &HostModel,
        layer: usize,
        key: WatermarkKey,
        message: Message,
        strength: f64,
    ) -> Result<Self> {
        Ok(Objective {
            regularizer: Some(EmbeddingRegularizer::new(
                model, layer, key, message, strength,
            )?),
        })
    }

    pub fn regularizer(&self) -> Option<&EmbeddingRegularizer> {
        self.regularizer.as_ref()
    }

    /// Whether the regularizer changes the gradient at all (`λ > 0`).
    pub fn is_embedding(&self) -> bool {
        self.regularizer.as_ref().is_some_and(|r| r.strength > 0.0)
    }

    pub fn loss(&self, model: &HostModel, inputs: &Tensor, targets: &Targets) -> Result<f64> {
        let task = forward(model, inputs, targets)?.loss();
        Ok(match &self.regularizer {
            Some(r) if r.strength > 0.0 => task + r.strength * r.loss(model)?,
            _ => task,
        })
    }

    pub fn evaluate(
        &self,
        model: &HostModel,
        inputs: &Tensor,
        targets: &Targets,
    ) -> Result<Evaluation> {
        let pass = forward(model, inputs, targets)?;
        let mut grads = backward(model, &pass, targets)?;
        let task_loss = pass.loss();
        let mut total = task_loss;
        let mut embedding = None;
        if let Some(r) = &self.regularizer {
            if r.strength > 0.0 {
                let (er, dw) = r.loss_and_weight_grad(model)?;
                let g = grads.layer_mut(r.layer).expect("conv layer has gradients");
                for (a, b) in g.weight.data_mut().iter_mut().zip(dw.data()) {
                    *a += r.strength * b;
                }
                total += r.strength * er;
                embedding = Some(er);
            } else {
                embedding = Some(r.loss(model)?);
            }
        }
        if !total.is_finite() {
            return Err(Error::NonFinite {
                layer: None,
                what: "objective",
            });
        }
        Ok(Evaluation {
            task_loss,
            embedding_loss: embedding,
            total,
            grads,
        })
    }
}
