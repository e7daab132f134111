//! In-memory datasets: seeded Gaussian class blobs, teacher-labelled
//! distillation sets and CIFAR-10 binary records.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::FeatureShape;
use crate::model::{predict, HostModel, Targets};
use crate::stats::normal_cdf;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub targets: Targets,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(inputs: Tensor, targets: Targets, classes: usize, split: Split) -> Result<Self> {
        if inputs.rows() != targets.len() {
            return Err(Error::input(format!(
                "{} inputs but {} targets",
                inputs.rows(),
                targets.len()
            )));
        }
        match &targets {
            Targets::Classes(c) => {
                if let Some(bad) = c.iter().find(|&&v| v >= classes) {
                    return Err(Error::input(format!("class index {bad} >= {classes}")));
                }
            }
            Targets::Soft(t) => {
                if t.rank() != 2 || t.shape()[1] != classes {
                    return Err(Error::input("soft targets must be N x classes"));
                }
            }
        }
        Ok(Dataset {
            inputs,
            targets,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Classes(c) => Some(c),
            Targets::Soft(_) => None,
        }
    }

    pub fn feature_shape(&self) -> FeatureShape {
        let dims = &self.inputs.shape()[1..];
        match dims {
            [h, w, c] => FeatureShape::Image {
                height: *h,
                width: *w,
                channels: *c,
            },
            _ => FeatureShape::Flat {
                features: dims.iter().product(),
            },
        }
    }
}

/// Gaussian class blobs with unit noise. Class means sit on a scaled simplex
/// of orthonormal directions, so every pair of means is exactly
/// `separation` apart.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub classes: usize,
    pub shape: FeatureShape,
    pub separation: f64,
    means: Vec<Vec<f64>>,
}

/// Side of the square patches on which image class templates are constant.
pub const TEMPLATE_BLOCK: usize = 2;

/// Pairwise mean distance used when none is given.
pub const DEFAULT_SEPARATION: f64 = 5.0;

impl SyntheticTask {
    pub fn new(classes: usize, shape: FeatureShape, separation: f64, seed: u64) -> Result<Self> {
        let dims = shape.len();
        if classes < 2 {
            return Err(Error::config("synthetic data needs at least two classes"));
        }
        // Images get templates that are constant on TEMPLATE_BLOCK-sized
        // spatial patches, so the class signal survives local pooling.
        let (coarse_len, upsample): (usize, Box<dyn Fn(usize) -> usize>) = match shape {
            FeatureShape::Image {
                height,
                width,
                channels,
            } => {
                let (ch, cw) = (
                    height.div_ceil(TEMPLATE_BLOCK),
                    width.div_ceil(TEMPLATE_BLOCK),
                );
                let map = move |i: usize| {
                    let (k, pix) = (i % channels, i / channels);
                    let (r, c) = (pix / width / TEMPLATE_BLOCK, pix % width / TEMPLATE_BLOCK);
                    (r * cw + c) * channels + k
                };
                (ch * cw * channels, Box::new(map))
            }
            FeatureShape::Flat { .. } => (dims, Box::new(|i| i)),
        };
        if classes > coarse_len {
            return Err(Error::config(format!(
                "{classes} classes do not fit in {dims} dimensions"
            )));
        }
        if !(separation >= 0.0 && separation.is_finite()) {
            return Err(Error::config("separation must be a nonnegative number"));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(0x6d65_616e);
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(classes);
        while basis.len() < classes {
            let coarse: Vec<f64> = (0..coarse_len)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let mut v: Vec<f64> = (0..dims).map(|i| coarse[upsample(i)]).collect();
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
            let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
            if norm > 1e-8 {
                v.iter_mut().for_each(|x| *x /= norm);
                basis.push(v);
            }
        }
        let scale = separation / core::f64::consts::SQRT_2;
        let means = basis
            .into_iter()
            .map(|b| b.into_iter().map(|x| x * scale).collect())
            .collect();
        Ok(SyntheticTask {
            classes,
            shape,
            separation,
            means,
        })
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    /// Error of the Bayes classifier between any two classes, `Φ(−sep/2)`.
    pub fn pairwise_bayes_error(&self) -> f64 {
        normal_cdf(-self.separation / 2.0)
    }

    /// Union bound on the multi-class Bayes error.
    pub fn bayes_error_bound(&self) -> f64 {
        ((self.classes - 1) as f64 * self.pairwise_bayes_error()).min(1.0)
    }

    /// `count` balanced samples; sample `i` has class `i mod C`.
    pub fn sample(&self, count: usize, seed: u64, split: Split) -> Result<Dataset> {
        let dims = self.shape.len();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(match split {
            Split::Train => 0x7472,
            Split::Test => 0x7465,
        });
        let mut data = Vec::with_capacity(count * dims);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let c = i % self.classes;
            labels.push(c);
            for &m in &self.means[c] {
                let noise: f64 = StandardNormal.sample(&mut rng);
                data.push(m + noise);
            }
        }
        let inputs = Tensor::from_vec(self.shape.batch_shape(count), data)?;
        Dataset::new(inputs, Targets::Classes(labels), self.classes, split)
    }
}

/// Draws `count` samples from the task seeded by `seed`.
pub fn make_synthetic(
    classes: usize,
    shape: FeatureShape,
    count: usize,
    seed: u64,
) -> Result<Dataset> {
    SyntheticTask::new(classes, shape, DEFAULT_SEPARATION, seed)?.sample(count, seed, Split::Train)
}

/// Labels `inputs` with the teacher's softmax outputs (temperature 1).
/// Takes inputs only, so ground-truth labels never reach the student.
pub fn distill_dataset(teacher: &HostModel, inputs: &Tensor) -> Result<Dataset> {
    let mut probs = Vec::with_capacity(inputs.rows() * teacher.classes());
    let chunk = 256;
    let mut start = 0;
    while start < inputs.rows() {
        let end = (start + chunk).min(inputs.rows());
        let idx: Vec<usize> = (start..end).collect();
        probs.extend_from_slice(predict(teacher, &inputs.select_rows(&idx))?.data());
        start = end;
    }
    let soft = Tensor::from_vec(vec![inputs.rows(), teacher.classes()], probs)?;
    Dataset::new(
        inputs.clone(),
        Targets::Soft(soft),
        teacher.classes(),
        Split::Train,
    )
}

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = CIFAR_SIDE * CIFAR_SIDE * 3;
/// One label byte followed by 1024 red, 1024 green and 1024 blue bytes.
pub const CIFAR_RECORD: usize = 1 + CIFAR_PIXELS;
pub const CIFAR_CLASSES: usize = 10;

/// Borrowed CIFAR-10 record.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CifarRecord<'a> {
    pub label: u8,
    pub pixels: &'a [u8],
}

/// Splits a CIFAR-10 binary batch into records. `base_offset` is added to
/// offsets reported in errors (useful when the buffer is part of a file set).
pub fn parse_cifar_batch(bytes: &[u8], base_offset: usize) -> Result<Vec<CifarRecord<'_>>> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
        return Err(Error::Ingest {
            offset: base_offset + whole,
            reason: format!("truncated record: {} trailing bytes", bytes.len() - whole),
        });
    }
    bytes
        .chunks_exact(CIFAR_RECORD)
        .enumerate()
        .map(|(i, rec)| {
            if rec[0] as usize >= CIFAR_CLASSES {
                return Err(Error::Ingest {
                    offset: base_offset + i * CIFAR_RECORD,
                    reason: format!("label byte {} is not a CIFAR-10 class", rec[0]),
                });
            }
            Ok(CifarRecord {
                label: rec[0],
                pixels: &rec[1..],
            })
        })
        .collect()
}

/// Seeded class-balanced subset of `labels`, returned in ascending index
/// order. Class `c` receives `count / classes` items, plus one for the first
/// `count % classes` classes. Requests covering every item return all indices.
pub fn stratified_indices(
    labels: &[usize],
    classes: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if count >= labels.len() {
        return Ok((0..labels.len()).collect());
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &c) in labels.iter().enumerate() {
        by_class
            .get_mut(c)
            .ok_or_else(|| Error::input(format!("label {c} out of range")))?
            .push(i);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(count);
    for (c, members) in by_class.iter_mut().enumerate() {
        let quota = count / classes + usize::from(c < count % classes);
        if members.len() < quota {
            return Err(Error::input(format!(
                "class {c} has {} samples but {quota} were requested",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        chosen.extend_from_slice(&members[..quota]);
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// Converts records to an `N×32×32×3` tensor scaled to `[0, 1]`.
pub fn cifar_tensor(records: &[CifarRecord<'_>]) -> Result<(Tensor, Vec<usize>)> {
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut data = Vec::with_capacity(records.len() * CIFAR_PIXELS);
    for r in records {
        for p in 0..plane {
            for c in 0..3 {
                data.push(r.pixels[c * plane + p] as f64 / 255.0);
            }
        }
    }
    let labels = records.iter().map(|r| r.label as usize).collect();
    Ok((
        Tensor::from_vec(vec![records.len(), CIFAR_SIDE, CIFAR_SIDE, 3], data)?,
        labels,
    ))
}

/// Per-channel means of an NHWC tensor.
pub fn channel_means(images: &Tensor) -> Vec<f64> {
    let channels = *images.shape().last().unwrap_or(&1);
    let mut sums = vec![0.0; channels];
    for px in images.data().chunks(channels) {
        sums.iter_mut().zip(px).for_each(|(s, v)| *s += v);
    }
    let count = (images.len() / channels).max(1) as f64;
    sums.into_iter().map(|s| s / count).collect()
}

pub fn subtract_channel_means(images: &mut Tensor, means: &[f64]) {
    let channels = means.len();
    for px in images.data_mut().chunks_mut(channels) {
        px.iter_mut().zip(means).for_each(|(v, m)| *v -= m);
    }
}

/// Human-readable class histogram, mostly for diagnostics.
pub fn class_counts(labels: &[usize], classes: usize) -> Vec<usize> {
    let mut counts = vec![0; classes];
    for &c in labels {
        if c < classes {
            counts[c] += 1;
        }
    }
    counts
}

pub fn describe(d: &Dataset) -> String {
    format!(
        "{} samples, {} classes, input {:?}",
        d.len(),
        d.classes,
        &d.inputs.shape()[1..]
    )
}
