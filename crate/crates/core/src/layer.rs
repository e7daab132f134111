use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::Tensor;

/// Per-sample feature layout flowing between layers. Images are stored
/// height-major, then width, then channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FeatureShape {
    Image {
        height: usize,
        width: usize,
        channels: usize,
    },
    Flat {
        features: usize,
    },
}

impl FeatureShape {
    pub fn len(&self) -> usize {
        match *self {
            FeatureShape::Image {
                height,
                width,
                channels,
            } => height * width * channels,
            FeatureShape::Flat { features } => features,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            FeatureShape::Image {
                height,
                width,
                channels,
            } => vec![height, width, channels],
            FeatureShape::Flat { features } => vec![features],
        }
    }

    /// Tensor shape of a batch of `n` samples.
    pub fn batch_shape(&self, n: usize) -> Vec<usize> {
        let mut shape = vec![n];
        shape.extend(self.dims());
        shape
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    /// `size`×`size` filters over `depth` input channels, `filters` outputs,
    /// stride 1 with "same" zero padding.
    Conv2d {
        size: usize,
        depth: usize,
        filters: usize,
    },
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Relu,
    /// Non-overlapping average pooling with window and stride `size`.
    AvgPool {
        size: usize,
    },
    /// Terminal softmax; paired with cross-entropy in the loss.
    SoftmaxOutput,
}

impl LayerSpec {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. })
    }

    /// Output shape for a given input shape, or a description of the mismatch.
    pub fn output_shape(&self, input: FeatureShape) -> Result<FeatureShape> {
        match (*self, input) {
            (
                LayerSpec::Conv2d {
                    size,
                    depth,
                    filters,
                },
                FeatureShape::Image {
                    height,
                    width,
                    channels,
                },
            ) => {
                if size == 0 || size % 2 == 0 {
                    return Err(Error::config(format!(
                        "conv2d filter size {size} must be odd"
                    )));
                }
                if filters == 0 {
                    return Err(Error::config("conv2d needs at least one filter"));
                }
                if channels != depth {
                    return Err(Error::config(format!(
                        "conv2d expects depth {depth} but receives {channels} channels"
                    )));
                }
                Ok(FeatureShape::Image {
                    height,
                    width,
                    channels: filters,
                })
            }
            (LayerSpec::Conv2d { .. }, FeatureShape::Flat { .. }) => {
                Err(Error::config("conv2d requires an image-shaped input"))
            }
            (LayerSpec::Dense { inputs, outputs }, shape) => {
                if shape.len() != inputs || outputs == 0 {
                    return Err(Error::config(format!(
                        "dense expects {inputs} inputs but receives {}",
                        shape.len()
                    )));
                }
                Ok(FeatureShape::Flat { features: outputs })
            }
            (LayerSpec::Relu, shape) => Ok(shape),
            (
                LayerSpec::AvgPool { size },
                FeatureShape::Image {
                    height,
                    width,
                    channels,
                },
            ) => {
                if size == 0 || height % size != 0 || width % size != 0 {
                    return Err(Error::config(format!(
                        "avgpool window {size} does not tile a {height}x{width} map"
                    )));
                }
                Ok(FeatureShape::Image {
                    height: height / size,
                    width: width / size,
                    channels,
                })
            }
            (LayerSpec::AvgPool { .. }, FeatureShape::Flat { .. }) => {
                Err(Error::config("avgpool requires an image-shaped input"))
            }
            (LayerSpec::SoftmaxOutput, FeatureShape::Flat { features }) if features >= 2 => {
                Ok(input)
            }
            (LayerSpec::SoftmaxOutput, _) => Err(Error::config(
                "softmax output needs a flat input with at least two classes",
            )),
        }
    }

    /// `(weight shape, bias length, fan-in)` for parameterized layers.
    pub fn param_shape(&self) -> Option<(Vec<usize>, usize, usize)> {
        match *self {
            LayerSpec::Conv2d {
                size,
                depth,
                filters,
            } => Some((
                vec![size, size, depth, filters],
                filters,
                size * size * depth,
            )),
            LayerSpec::Dense { inputs, outputs } => Some((vec![inputs, outputs], outputs, inputs)),
            _ => None,
        }
    }
}

/// Weight and bias of one layer. Also used for gradients and velocity buffers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Params {
    pub fn zeros_like(other: &Params) -> Params {
        Params {
            weight: Tensor::zeros(other.weight.shape()),
            bias: Tensor::zeros(other.bias.shape()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weight.is_finite() && self.bias.is_finite()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub(crate) spec: LayerSpec,
    pub(crate) params: Option<Params>,
}

impl Layer {
    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn params(&self) -> Option<&Params> {
        self.params.as_ref()
    }

    pub fn params_mut(&mut self) -> Option<&mut Params> {
        self.params.as_mut()
    }
}

/// Unfolds a batch of NHWC images into patch rows: one row per output pixel,
/// columns ordered (filter row, filter column, channel) to match the
/// `(S, S, D, L)` weight layout viewed as an `(S·S·D) × L` matrix.
fn im2col(x: &[f64], n: usize, h: usize, w: usize, d: usize, s: usize) -> Vec<f64> {
    let m = s * s * d;
    let pad = (s / 2) as isize;
    let mut cols = vec![0.0; n * h * w * m];
    for b in 0..n {
        let img = &x[b * h * w * d..(b + 1) * h * w * d];
        for y in 0..h {
            for xx in 0..w {
                let row = &mut cols[((b * h + y) * w + xx) * m..((b * h + y) * w + xx + 1) * m];
                for i in 0..s {
                    let sy = y as isize + i as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for j in 0..s {
                        let sx = xx as isize + j as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = (sy as usize * w + sx as usize) * d;
                        let dst = (i * s + j) * d;
                        row[dst..dst + d].copy_from_slice(&img[src..src + d]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], n: usize, h: usize, w: usize, d: usize, s: usize) -> Vec<f64> {
    let m = s * s * d;
    let pad = (s / 2) as isize;
    let mut x = vec![0.0; n * h * w * d];
    for b in 0..n {
        let img = &mut x[b * h * w * d..(b + 1) * h * w * d];
        for y in 0..h {
            for xx in 0..w {
                let row = &cols[((b * h + y) * w + xx) * m..((b * h + y) * w + xx + 1) * m];
                for i in 0..s {
                    let sy = y as isize + i as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for j in 0..s {
                        let sx = xx as isize + j as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let dst = (sy as usize * w + sx as usize) * d;
                        let src = (i * s + j) * d;
                        for (acc, v) in img[dst..dst + d].iter_mut().zip(&row[src..src + d]) {
                            *acc += v;
                        }
                    }
                }
            }
        }
    }
    x
}

pub(crate) fn softmax_rows(logits: &[f64], classes: usize) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for (z, p) in logits.chunks(classes).zip(out.chunks_mut(classes)) {
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (pi, &zi) in p.iter_mut().zip(z) {
            *pi = libm::exp(zi - max);
            total += *pi;
        }
        for pi in p.iter_mut() {
            *pi /= total;
        }
    }
    out
}

/// Forward pass of one layer over a batch. `input` has shape `[n, ..in_shape]`.
pub(crate) fn forward_layer(
    layer: &Layer,
    input: &Tensor,
    in_shape: FeatureShape,
) -> Result<Tensor> {
    let n = input.rows();
    let out_shape = layer.spec.output_shape(in_shape)?;
    let x = input.data();
    let data = match (layer.spec, in_shape) {
        (
            LayerSpec::Conv2d {
                size,
                depth,
                filters,
            },
            FeatureShape::Image { height, width, .. },
        ) => {
            let params = layer
                .params
                .as_ref()
                .expect("conv layer carries parameters");
            let cols = im2col(x, n, height, width, depth, size);
            let rows = n * height * width;
            let mut out = vec![0.0; rows * filters];
            for row in out.chunks_mut(filters) {
                row.copy_from_slice(params.bias.data());
            }
            linalg::gemm_acc(
                &cols,
                params.weight.data(),
                &mut out,
                rows,
                size * size * depth,
                filters,
            );
            out
        }
        (LayerSpec::Dense { inputs, outputs }, _) => {
            let params = layer
                .params
                .as_ref()
                .expect("dense layer carries parameters");
            let mut out = vec![0.0; n * outputs];
            for row in out.chunks_mut(outputs) {
                row.copy_from_slice(params.bias.data());
            }
            linalg::gemm_acc(x, params.weight.data(), &mut out, n, inputs, outputs);
            out
        }
        (LayerSpec::Relu, _) => x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
        (
            LayerSpec::AvgPool { size },
            FeatureShape::Image {
                height,
                width,
                channels,
            },
        ) => {
            let (oh, ow) = (height / size, width / size);
            let scale = 1.0 / (size * size) as f64;
            let mut out = vec![0.0; n * oh * ow * channels];
            for b in 0..n {
                for y in 0..height {
                    for xx in 0..width {
                        let src = ((b * height + y) * width + xx) * channels;
                        let dst = ((b * oh + y / size) * ow + xx / size) * channels;
                        for c in 0..channels {
                            out[dst + c] += x[src + c] * scale;
                        }
                    }
                }
            }
            out
        }
        (LayerSpec::SoftmaxOutput, FeatureShape::Flat { features }) => softmax_rows(x, features),
        _ => unreachable!("shape compatibility checked by output_shape"),
    };
    Tensor::from_vec(out_shape.batch_shape(n), data)
}

/// Backpropagates `grad_out` through one layer. Returns the input gradient
/// (when `need_input_grad`) and accumulates parameter gradients into `grads`.
/// The softmax output layer is handled by the loss and must not reach here.
pub(crate) fn backward_layer(
    layer: &Layer,
    input: &Tensor,
    in_shape: FeatureShape,
    grad_out: &[f64],
    grads: Option<&mut Params>,
    need_input_grad: bool,
) -> Option<Vec<f64>> {
    let n = input.rows();
    let x = input.data();
    match (layer.spec, in_shape) {
        (
            LayerSpec::Conv2d {
                size,
                depth,
                filters,
            },
            FeatureShape::Image { height, width, .. },
        ) => {
            let params = layer
                .params
                .as_ref()
                .expect("conv layer carries parameters");
            let grads = grads.expect("conv layer receives a gradient buffer");
            let m = size * size * depth;
            let rows = n * height * width;
            let cols = im2col(x, n, height, width, depth, size);
            linalg::gemm_tn_acc(&cols, grad_out, grads.weight.data_mut(), rows, m, filters);
            let bias = grads.bias.data_mut();
            for row in grad_out.chunks(filters) {
                for (b, g) in bias.iter_mut().zip(row) {
                    *b += g;
                }
            }
            if !need_input_grad {
                return None;
            }
            let mut dcols = vec![0.0; rows * m];
            linalg::gemm_nt(grad_out, params.weight.data(), &mut dcols, rows, filters, m);
            Some(col2im(&dcols, n, height, width, depth, size))
        }
        (LayerSpec::Dense { inputs, outputs }, _) => {
            let params = layer
                .params
                .as_ref()
                .expect("dense layer carries parameters");
            let grads = grads.expect("dense layer receives a gradient buffer");
            linalg::gemm_tn_acc(x, grad_out, grads.weight.data_mut(), n, inputs, outputs);
            let bias = grads.bias.data_mut();
            for row in grad_out.chunks(outputs) {
                for (b, g) in bias.iter_mut().zip(row) {
                    *b += g;
                }
            }
            if !need_input_grad {
                return None;
            }
            let mut dx = vec![0.0; n * inputs];
            linalg::gemm_nt(grad_out, params.weight.data(), &mut dx, n, outputs, inputs);
            Some(dx)
        }
        (LayerSpec::Relu, _) => {
            if !need_input_grad {
                return None;
            }
            Some(
                x.iter()
                    .zip(grad_out)
                    .map(|(&xi, &g)| if xi > 0.0 { g } else { 0.0 })
                    .collect(),
            )
        }
        (
            LayerSpec::AvgPool { size },
            FeatureShape::Image {
                height,
                width,
                channels,
            },
        ) => {
            if !need_input_grad {
                return None;
            }
            let (oh, ow) = (height / size, width / size);
            let scale = 1.0 / (size * size) as f64;
            let mut dx = vec![0.0; x.len()];
            for b in 0..n {
                for y in 0..height {
                    for xx in 0..width {
                        let dst = ((b * height + y) * width + xx) * channels;
                        let src = ((b * oh + y / size) * ow + xx / size) * channels;
                        for c in 0..channels {
                            dx[dst + c] = grad_out[src + c] * scale;
                        }
                    }
                }
            }
            Some(dx)
        }
        _ => unreachable!("softmax output is folded into the loss gradient"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_chain_rejects_mismatches() {
        let img = FeatureShape::Image {
            height: 4,
            width: 4,
            channels: 3,
        };
        assert!(LayerSpec::Conv2d {
            size: 3,
            depth: 2,
            filters: 4
        }
        .output_shape(img)
        .is_err());
        assert!(LayerSpec::Conv2d {
            size: 2,
            depth: 3,
            filters: 4
        }
        .output_shape(img)
        .is_err());
        assert!(LayerSpec::AvgPool { size: 3 }.output_shape(img).is_err());
        assert_eq!(
            LayerSpec::AvgPool { size: 2 }.output_shape(img).unwrap(),
            FeatureShape::Image {
                height: 2,
                width: 2,
                channels: 3
            }
        );
        assert_eq!(
            LayerSpec::Dense {
                inputs: 48,
                outputs: 5
            }
            .output_shape(img)
            .unwrap(),
            FeatureShape::Flat { features: 5 }
        );
        assert!(LayerSpec::SoftmaxOutput
            .output_shape(FeatureShape::Flat { features: 1 })
            .is_err());
    }

    #[test]
    fn conv_matches_direct_summation() {
        let (h, w, d, l, s) = (4, 5, 2, 3, 3);
        let x: Vec<f64> = (0..h * w * d).map(|i| libm::sin(i as f64 * 0.7)).collect();
        let weight: Vec<f64> = (0..s * s * d * l)
            .map(|i| libm::cos(i as f64 * 0.3))
            .collect();
        let layer = Layer {
            spec: LayerSpec::Conv2d {
                size: s,
                depth: d,
                filters: l,
            },
            params: Some(Params {
                weight: Tensor::from_vec(vec![s, s, d, l], weight.clone()).unwrap(),
                bias: Tensor::from_vec(vec![l], vec![0.1, -0.2, 0.3]).unwrap(),
            }),
        };
        let input = Tensor::from_vec(vec![1, h, w, d], x.clone()).unwrap();
        let out = forward_layer(
            &layer,
            &input,
            FeatureShape::Image {
                height: h,
                width: w,
                channels: d,
            },
        )
        .unwrap();
        let bias = [0.1, -0.2, 0.3];
        for y in 0..h {
            for xx in 0..w {
                for f in 0..l {
                    let mut acc = bias[f];
                    for i in 0..s {
                        for j in 0..s {
                            let (sy, sx) =
                                (y as isize + i as isize - 1, xx as isize + j as isize - 1);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            for k in 0..d {
                                acc += x[(sy as usize * w + sx as usize) * d + k]
                                    * weight[((i * s + j) * d + k) * l + f];
                            }
                        }
                    }
                    let got = out.data()[(y * w + xx) * l + f];
                    assert!((got - acc).abs() < 1e-12, "({y},{xx},{f}) {got} vs {acc}");
                }
            }
        }
    }
}
