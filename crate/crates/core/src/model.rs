use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::layer::{self, FeatureShape, Layer, LayerSpec, Params};
use crate::tensor::Tensor;

/// A sequential host network. At most one conv layer is designated as the
/// watermark target.
#[derive(Clone, Debug, PartialEq)]
pub struct HostModel {
    input: FeatureShape,
    layers: Vec<Layer>,
    embed_layer: Option<usize>,
    seed: u64,
}

impl HostModel {
    /// Builds the layer stack and draws He-scaled (fan-in) normal weights
    /// from `seed`. Biases start at zero.
    pub fn new(input: FeatureShape, specs: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        Self::validate(input, &specs)?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let layers = specs
            .into_iter()
            .map(|spec| {
                let params = spec.param_shape().map(|(wshape, bias_len, fan_in)| {
                    let normal = Normal::new(0.0, libm::sqrt(2.0 / fan_in as f64))
                        .expect("fan-in is positive");
                    let count: usize = wshape.iter().product();
                    let data = (0..count).map(|_| normal.sample(&mut rng)).collect();
                    Params {
                        weight: Tensor::from_vec(wshape, data).expect("length matches shape"),
                        bias: Tensor::zeros(&[bias_len]),
                    }
                });
                Layer { spec, params }
            })
            .collect();
        Ok(HostModel {
            input,
            layers,
            embed_layer: None,
            seed,
        })
    }

    /// Reassembles a model from explicit parameter tensors, in layer order.
    pub fn from_parts(
        input: FeatureShape,
        specs: Vec<LayerSpec>,
        mut params: Vec<Params>,
        embed_layer: Option<usize>,
        seed: u64,
    ) -> Result<Self> {
        Self::validate(input, &specs)?;
        let expected = specs.iter().filter(|s| s.has_params()).count();
        if params.len() != expected {
            return Err(Error::input(format!(
                "expected {expected} parameter sets, got {}",
                params.len()
            )));
        }
        params.reverse();
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            let params = match spec.param_shape() {
                Some((wshape, bias_len, _)) => {
                    let p = params.pop().expect("counted above");
                    if p.weight.shape() != wshape.as_slice() || p.bias.shape() != [bias_len] {
                        return Err(Error::input(format!(
                            "parameter shapes {:?}/{:?} do not fit {spec:?}",
                            p.weight.shape(),
                            p.bias.shape()
                        )));
                    }
                    Some(p)
                }
                None => None,
            };
            layers.push(Layer { spec, params });
        }
        let model = HostModel {
            input,
            layers,
            embed_layer: None,
            seed,
        };
        match embed_layer {
            Some(id) => model.with_embed_layer(id),
            None => Ok(model),
        }
    }

    fn validate(input: FeatureShape, specs: &[LayerSpec]) -> Result<()> {
        if specs.is_empty() {
            return Err(Error::config("a host needs at least one layer"));
        }
        let mut shape = input;
        for (i, spec) in specs.iter().enumerate() {
            if matches!(spec, LayerSpec::SoftmaxOutput) && i + 1 != specs.len() {
                return Err(Error::config("softmax output must be the last layer"));
            }
            shape = spec
                .output_shape(shape)
                .map_err(|e| Error::config(format!("layer {i}: {e}")))?;
        }
        if !matches!(specs.last(), Some(LayerSpec::SoftmaxOutput)) {
            return Err(Error::config("the last layer must be a softmax output"));
        }
        Ok(())
    }

    pub fn with_embed_layer(mut self, id: usize) -> Result<Self> {
        self.conv_weight(id)?;
        self.embed_layer = Some(id);
        Ok(self)
    }

    pub fn input_shape(&self) -> FeatureShape {
        self.input
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer_mut(&mut self, id: usize) -> Option<&mut Layer> {
        self.layers.get_mut(id)
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn embed_layer(&self) -> Option<usize> {
        self.embed_layer
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn classes(&self) -> usize {
        self.output_shape().len()
    }

    pub fn output_shape(&self) -> FeatureShape {
        self.layer_shapes().last().copied().unwrap_or(self.input)
    }

    /// Input shape of every layer followed by the final output shape.
    pub fn layer_shapes(&self) -> Vec<FeatureShape> {
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        let mut shape = self.input;
        shapes.push(shape);
        for l in &self.layers {
            shape = l
                .spec
                .output_shape(shape)
                .expect("validated at construction");
            shapes.push(shape);
        }
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.params.as_ref())
            .map(|p| p.weight.len() + p.bias.len())
            .sum()
    }

    /// Parameter sets in layer order.
    pub fn params(&self) -> impl Iterator<Item = &Params> {
        self.layers.iter().filter_map(|l| l.params.as_ref())
    }

    pub fn conv_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l.spec, LayerSpec::Conv2d { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    /// The 4-D `(S, S, D, L)` weight of conv layer `id`.
    pub fn conv_weight(&self, id: usize) -> Result<&Tensor> {
        match self.layers.get(id) {
            Some(Layer {
                spec: LayerSpec::Conv2d { .. },
                params: Some(p),
            }) => Ok(&p.weight),
            Some(_) => Err(Error::config(format!("layer {id} is not a conv2d layer"))),
            None => Err(Error::config(format!("layer {id} does not exist"))),
        }
    }

    pub fn conv_weight_mut(&mut self, id: usize) -> Result<&mut Tensor> {
        match self.layers.get_mut(id) {
            Some(Layer {
                spec: LayerSpec::Conv2d { .. },
                params: Some(p),
            }) => Ok(&mut p.weight),
            Some(_) => Err(Error::config(format!("layer {id} is not a conv2d layer"))),
            None => Err(Error::config(format!("layer {id} does not exist"))),
        }
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            layers: self
                .layers
                .iter()
                .map(|l| l.params.as_ref().map(Params::zeros_like))
                .collect(),
        }
    }
}

/// Class labels or per-sample target distributions (soft targets).
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Soft(Tensor),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Soft(t) => t.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, indices: &[usize]) -> Targets {
        match self {
            Targets::Classes(c) => Targets::Classes(indices.iter().map(|&i| c[i]).collect()),
            Targets::Soft(t) => Targets::Soft(t.select_rows(indices)),
        }
    }

    fn validate(&self, classes: usize) -> Result<()> {
        match self {
            Targets::Classes(c) => {
                if let Some(bad) = c.iter().find(|&&v| v >= classes) {
                    return Err(Error::input(format!(
                        "label {bad} is out of range for {classes} classes"
                    )));
                }
            }
            Targets::Soft(t) => {
                if t.rank() != 2 || t.shape()[1] != classes {
                    return Err(Error::input(format!(
                        "soft targets of shape {:?} do not match {classes} classes",
                        t.shape()
                    )));
                }
                if !t.is_finite() {
                    return Err(Error::NonFinite {
                        layer: None,
                        what: "soft target",
                    });
                }
            }
        }
        Ok(())
    }

    fn fingerprint(&self) -> u64 {
        let mut h = Fnv::default();
        match self {
            Targets::Classes(c) => {
                h.write(0);
                c.iter().for_each(|&v| h.write(v as u64));
            }
            Targets::Soft(t) => {
                h.write(1);
                t.data().iter().for_each(|v| h.write(v.to_bits()));
            }
        }
        h.0
    }

    fn target_value(&self, row: usize, class: usize, classes: usize) -> f64 {
        match self {
            Targets::Classes(c) => (c[row] == class) as u8 as f64,
            Targets::Soft(t) => t.data()[row * classes + class],
        }
    }
}

struct Fnv(u64);

impl Default for Fnv {
    fn default() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv {
    fn write(&mut self, v: u64) {
        for b in v.to_le_bytes() {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }
}

/// Gradient buffers aligned with the model's layers (`None` for
/// parameter-free layers).
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Option<Params>>,
}

impl Gradients {
    pub fn layer(&self, id: usize) -> Option<&Params> {
        self.layers.get(id).and_then(|p| p.as_ref())
    }

    pub fn layer_mut(&mut self, id: usize) -> Option<&mut Params> {
        self.layers.get_mut(id).and_then(|p| p.as_mut())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().flatten().all(Params::is_finite)
    }
}

/// Activations of one forward pass: index 0 is the input batch and index
/// `k + 1` the output of layer `k` (the last one holds class probabilities).
#[derive(Clone, Debug)]
pub struct ForwardPass {
    activations: Vec<Tensor>,
    loss: f64,
    fingerprint: u64,
}

impl ForwardPass {
    pub fn activations(&self) -> &[Tensor] {
        &self.activations
    }

    /// Mean softmax cross-entropy over the batch.
    pub fn loss(&self) -> f64 {
        self.loss
    }

    pub fn probabilities(&self) -> &Tensor {
        self.activations
            .last()
            .expect("at least the input is stored")
    }

    pub fn batch_len(&self) -> usize {
        self.activations[0].rows()
    }
}

fn check_batch(model: &HostModel, inputs: &Tensor) -> Result<()> {
    let want = model.input.batch_shape(inputs.rows());
    if inputs.shape() != want.as_slice() || inputs.rows() == 0 {
        return Err(Error::input(format!(
            "batch shape {:?} does not match model input {:?}",
            inputs.shape(),
            model.input.dims()
        )));
    }
    Ok(())
}

fn run_layers(model: &HostModel, inputs: &Tensor) -> Result<Vec<Tensor>> {
    check_batch(model, inputs)?;
    let shapes = model.layer_shapes();
    let mut acts = Vec::with_capacity(model.layers.len() + 1);
    acts.push(inputs.clone());
    for (k, layer) in model.layers.iter().enumerate() {
        let out = layer::forward_layer(layer, &acts[k], shapes[k])?;
        if !out.is_finite() {
            return Err(Error::NonFinite {
                layer: Some(k),
                what: "activation",
            });
        }
        acts.push(out);
    }
    Ok(acts)
}

/// Class probabilities for a batch.
pub fn predict(model: &HostModel, inputs: &Tensor) -> Result<Tensor> {
    Ok(run_layers(model, inputs)?.pop().expect("non-empty"))
}

/// Runs the network and the mean softmax cross-entropy against `targets`.
pub fn forward(model: &HostModel, inputs: &Tensor, targets: &Targets) -> Result<ForwardPass> {
    if targets.len() != inputs.rows() {
        return Err(Error::input(format!(
            "{} targets supplied for a batch of {}",
            targets.len(),
            inputs.rows()
        )));
    }
    let classes = model.classes();
    targets.validate(classes)?;
    let activations = run_layers(model, inputs)?;
    // Loss from the logits through log-sum-exp rather than log(probability).
    let logits = &activations[activations.len() - 2];
    let n = inputs.rows();
    let mut total = 0.0;
    for (row, z) in logits.data().chunks(classes).enumerate() {
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + libm::log(z.iter().map(|&v| libm::exp(v - max)).sum::<f64>());
        for (c, &zc) in z.iter().enumerate() {
            let t = targets.target_value(row, c, classes);
            if t != 0.0 {
                total -= t * (zc - lse);
            }
        }
    }
    let loss = total / n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            layer: Some(model.layers.len() - 1),
            what: "loss",
        });
    }
    Ok(ForwardPass {
        activations,
        loss,
        fingerprint: targets.fingerprint(),
    })
}

/// Gradients of the mean cross-entropy with respect to every parameter.
pub fn backward(model: &HostModel, pass: &ForwardPass, targets: &Targets) -> Result<Gradients> {
    if targets.len() != pass.batch_len()
        || targets.fingerprint() != pass.fingerprint
        || pass.activations.len() != model.layers.len() + 1
    {
        return Err(Error::StaleActivations);
    }
    let classes = model.classes();
    let n = pass.batch_len();
    let probs = pass.probabilities().data();
    let mut grad: Vec<f64> = probs
        .iter()
        .enumerate()
        .map(|(i, &p)| (p - targets.target_value(i / classes, i % classes, classes)) / n as f64)
        .collect();
    let shapes = model.layer_shapes();
    let mut grads = model.zero_gradients();
    // Skip the softmax layer: `grad` already is dLoss/dlogits.
    for k in (0..model.layers.len() - 1).rev() {
        let need_input = k > 0;
        match layer::backward_layer(
            &model.layers[k],
            &pass.activations[k],
            shapes[k],
            &grad,
            grads.layers[k].as_mut(),
            need_input,
        ) {
            Some(g) => grad = g,
            None => break,
        }
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite {
            layer: None,
            what: "gradient",
        });
    }
    Ok(grads)
}

/// Fraction of misclassified samples, evaluated in chunks of `chunk` rows.
pub fn error_rate(model: &HostModel, inputs: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.len() != inputs.rows() || labels.is_empty() {
        return Err(Error::input("error rate needs one label per input row"));
    }
    let classes = model.classes();
    let mut wrong = 0usize;
    let chunk = 256;
    let mut start = 0;
    while start < labels.len() {
        let end = (start + chunk).min(labels.len());
        let idx: Vec<usize> = (start..end).collect();
        let probs = predict(model, &inputs.select_rows(&idx))?;
        for (row, p) in probs.data().chunks(classes).enumerate() {
            if argmax(p) != labels[start + row] {
                wrong += 1;
            }
        }
        start = end;
    }
    Ok(wrong as f64 / labels.len() as f64)
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn dense_identity(width: usize) -> HostModel {
        let mut weight = vec![0.0; width * width];
        for i in 0..width {
            weight[i * width + i] = 1.0;
        }
        HostModel::from_parts(
            FeatureShape::Flat { features: width },
            vec![
                LayerSpec::Dense {
                    inputs: width,
                    outputs: width,
                },
                LayerSpec::SoftmaxOutput,
            ],
            vec![Params {
                weight: Tensor::from_vec(vec![width, width], weight).unwrap(),
                bias: Tensor::zeros(&[width]),
            }],
            None,
            0,
        )
        .unwrap()
    }

    #[test]
    fn identity_dense_passes_input_through_as_logits() {
        let model = dense_identity(3);
        let x = Tensor::from_vec(vec![2, 3], vec![0.5, -1.0, 2.0, 3.0, 0.0, -0.25]).unwrap();
        let pass = forward(&model, &x, &Targets::Classes(vec![0, 1])).unwrap();
        assert_eq!(pass.activations()[1].data(), x.data());
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let model = dense_identity(2);
        let x = Tensor::from_vec(vec![3, 2], vec![0.7; 6]).unwrap();
        for label in 0..2 {
            let pass = forward(&model, &x, &Targets::Classes(vec![label; 3])).unwrap();
            assert!((pass.loss() - core::f64::consts::LN_2).abs() < 1e-15);
        }
        let model = dense_identity(5);
        let x = Tensor::zeros(&[1, 5]);
        let pass = forward(&model, &x, &Targets::Classes(vec![3])).unwrap();
        assert!((pass.loss() - libm::log(5.0)).abs() < 1e-15);
    }

    #[test]
    fn zero_input_gives_zero_weight_gradient_but_bias_gradient() {
        let model = dense_identity(3);
        let x = Tensor::zeros(&[4, 3]);
        let t = Targets::Classes(vec![0, 1, 2, 0]);
        let pass = forward(&model, &x, &t).unwrap();
        let g = backward(&model, &pass, &t).unwrap();
        let p = g.layer(0).unwrap();
        assert!(p.weight.data().iter().all(|&v| v == 0.0));
        assert!(p.bias.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn stale_targets_are_rejected() {
        let model = dense_identity(3);
        let x = Tensor::zeros(&[2, 3]);
        let pass = forward(&model, &x, &Targets::Classes(vec![0, 1])).unwrap();
        assert_eq!(
            backward(&model, &pass, &Targets::Classes(vec![1, 1])).unwrap_err(),
            Error::StaleActivations
        );
        assert_eq!(
            backward(&model, &pass, &Targets::Classes(vec![0, 1, 2])).unwrap_err(),
            Error::StaleActivations
        );
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let model = dense_identity(3);
        let x = Tensor::zeros(&[2, 4]);
        let err = forward(&model, &x, &Targets::Classes(vec![0, 1])).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
        let err = forward(
            &model,
            &Tensor::zeros(&[2, 3]),
            &Targets::Classes(vec![0, 7]),
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn overflowing_activation_names_the_layer() {
        let mut model = dense_identity(2);
        model
            .layer_mut(0)
            .unwrap()
            .params_mut()
            .unwrap()
            .weight
            .data_mut()[0] = f64::MAX;
        let x = Tensor::from_vec(vec![1, 2], vec![10.0, 0.0]).unwrap();
        let err = forward(&model, &x, &Targets::Classes(vec![0])).unwrap_err();
        assert_eq!(
            err,
            Error::NonFinite {
                layer: Some(0),
                what: "activation"
            }
        );
    }

    #[test]
    fn repeated_batch_has_identical_mean_gradient() {
        let model = HostModel::new(
            FeatureShape::Image {
                height: 4,
                width: 4,
                channels: 2,
            },
            vec![
                LayerSpec::Conv2d {
                    size: 3,
                    depth: 2,
                    filters: 3,
                },
                LayerSpec::Relu,
                LayerSpec::AvgPool { size: 2 },
                LayerSpec::Dense {
                    inputs: 12,
                    outputs: 3,
                },
                LayerSpec::SoftmaxOutput,
            ],
            5,
        )
        .unwrap();
        let data: Vec<f64> = (0..2 * 32).map(|i| libm::sin(i as f64)).collect();
        let x = Tensor::from_vec(vec![2, 4, 4, 2], data.clone()).unwrap();
        let t = Targets::Classes(vec![2, 0]);
        let g1 = backward(&model, &forward(&model, &x, &t).unwrap(), &t).unwrap();
        let mut doubled = data.clone();
        doubled.extend_from_slice(&data);
        let x2 = Tensor::from_vec(vec![4, 4, 4, 2], doubled).unwrap();
        let t2 = Targets::Classes(vec![2, 0, 2, 0]);
        let g2 = backward(&model, &forward(&model, &x2, &t2).unwrap(), &t2).unwrap();
        for (a, b) in g1.layers.iter().flatten().zip(g2.layers.iter().flatten()) {
            for (u, v) in a.weight.data().iter().zip(b.weight.data()) {
                assert!((u - v).abs() <= 1e-14 * (1.0 + u.abs()));
            }
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let build = |seed| {
            HostModel::new(
                FeatureShape::Flat { features: 4 },
                vec![
                    LayerSpec::Dense {
                        inputs: 4,
                        outputs: 3,
                    },
                    LayerSpec::SoftmaxOutput,
                ],
                seed,
            )
            .unwrap()
        };
        assert_eq!(build(9), build(9));
        assert_ne!(build(9), build(10));
    }
}
