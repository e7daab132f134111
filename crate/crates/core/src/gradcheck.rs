//! Central finite-difference check of analytic gradients.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::layer::LayerSpec;
use crate::model::{forward, Gradients, HostModel, Targets};
use crate::objective::Objective;
use crate::tensor::Tensor;

/// Location of a single scalar parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamIndex {
    pub layer: usize,
    pub bias: bool,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<ParamIndex>,
    pub checked: usize,
    /// Components skipped because a perturbation flipped a ReLU gate, where
    /// central differences are not meaningful.
    pub skipped_kinks: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Denominator floor for the relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn relu_gates(model: &HostModel, inputs: &Tensor, targets: &Targets) -> Result<Vec<bool>> {
    let pass = forward(model, inputs, targets)?;
    let mut gates = Vec::new();
    for (k, layer) in model.layers().iter().enumerate() {
        if matches!(layer.spec(), LayerSpec::Relu) {
            gates.extend(pass.activations()[k].data().iter().map(|&v| v > 0.0));
        }
    }
    Ok(gates)
}

/// Central differences of the full objective for every parameter, plus a
/// mask of components whose perturbation crossed a ReLU kink.
pub fn numeric_gradients(
    model: &HostModel,
    objective: &Objective,
    inputs: &Tensor,
    targets: &Targets,
    step: f64,
) -> Result<(Gradients, Vec<Vec<bool>>)> {
    let base_gates = relu_gates(model, inputs, targets)?;
    let mut probe = model.clone();
    let mut numeric = model.zero_gradients();
    let mut kinks = Vec::new();
    for layer in 0..model.layers().len() {
        let Some(params) = model.layers()[layer].params() else {
            kinks.push(Vec::new());
            continue;
        };
        let mut layer_kinks = Vec::with_capacity(params.weight.len() + params.bias.len());
        for bias in [false, true] {
            let len = if bias {
                params.bias.len()
            } else {
                params.weight.len()
            };
            for index in 0..len {
                let mut eval = |delta: f64| -> Result<(f64, bool)> {
                    let slot = slot_mut(&mut probe, ParamIndex { layer, bias, index });
                    let original = *slot;
                    *slot = original + delta;
                    let loss = objective.loss(&probe, inputs, targets);
                    let gates = relu_gates(&probe, inputs, targets);
                    *slot_mut(&mut probe, ParamIndex { layer, bias, index }) = original;
                    Ok((loss?, gates? != base_gates))
                };
                let (plus, kink_p) = eval(step)?;
                let (minus, kink_m) = eval(-step)?;
                let g = (plus - minus) / (2.0 * step);
                let slot = numeric.layer_mut(layer).expect("parameterized layer");
                if bias {
                    slot.bias.data_mut()[index] = g;
                } else {
                    slot.weight.data_mut()[index] = g;
                }
                layer_kinks.push(kink_p || kink_m);
            }
        }
        kinks.push(layer_kinks);
    }
    Ok((numeric, kinks))
}

fn slot_mut(model: &mut HostModel, at: ParamIndex) -> &mut f64 {
    let p = model
        .layer_mut(at.layer)
        .and_then(|l| l.params_mut())
        .expect("parameterized layer");
    if at.bias {
        &mut p.bias.data_mut()[at.index]
    } else {
        &mut p.weight.data_mut()[at.index]
    }
}

/// Compares analytic against numeric gradients, ignoring kink components.
pub fn compare_gradients(
    analytic: &Gradients,
    numeric: &Gradients,
    kinks: &[Vec<bool>],
    tolerance: f64,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped_kinks: 0,
        tolerance,
        passed: true,
    };
    for (layer, (a, n)) in analytic.layers.iter().zip(&numeric.layers).enumerate() {
        let (Some(a), Some(n)) = (a, n) else { continue };
        let weights = a
            .weight
            .data()
            .iter()
            .zip(n.weight.data())
            .map(|p| (false, p));
        let biases = a.bias.data().iter().zip(n.bias.data()).map(|p| (true, p));
        for (flat, (bias, (&ga, &gn))) in weights.chain(biases).enumerate() {
            if kinks
                .get(layer)
                .and_then(|k| k.get(flat))
                .copied()
                .unwrap_or(false)
            {
                report.skipped_kinks += 1;
                continue;
            }
            report.checked += 1;
            let rel = relative_error(ga, gn);
            // A NaN error is kept once seen so the check cannot pass.
            if !report.max_rel_error.is_nan() && (rel.is_nan() || rel > report.max_rel_error) {
                report.max_rel_error = rel;
                let index = if bias { flat - a.weight.len() } else { flat };
                report.worst = Some(ParamIndex { layer, bias, index });
            }
        }
    }
    report.passed = report.max_rel_error <= tolerance;
    report
}

/// Checks the objective's analytic gradient (including any attached
/// embedding regularizer) against central differences.
pub fn grad_check(
    model: &HostModel,
    objective: &Objective,
    inputs: &Tensor,
    targets: &Targets,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let analytic = objective.evaluate(model, inputs, targets)?.grads;
    let (numeric, kinks) = numeric_gradients(model, objective, inputs, targets, step)?;
    Ok(compare_gradients(&analytic, &numeric, &kinks, tolerance))
}
