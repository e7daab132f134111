//! Desk-scale host presets.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::{FeatureShape, LayerSpec};
use crate::model::HostModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HostPreset {
    /// Two dense layers; no conv layer, so nothing to watermark.
    ToyMlp,
    /// Two 3×3 conv blocks (16 channels), 2×2 average pool, dense head.
    /// The second conv layer (M = 144) is the default target.
    SmallCnn,
    /// Width-1 analog of a wide residual stack without the shortcuts: a stem
    /// conv and three groups of two 3×3 convs at 16/32/64 channels, pooling
    /// between groups, global pooling and a dense head. The second conv of
    /// each group is a candidate target (M = 144, 288, 576).
    MiniWide,
}

impl HostPreset {
    pub fn name(self) -> &'static str {
        match self {
            HostPreset::ToyMlp => "toy-mlp",
            HostPreset::SmallCnn => "small-cnn",
            HostPreset::MiniWide => "mini-wide",
        }
    }

    /// Layer ids of the conv layers a watermark may target, preferred first.
    pub fn target_layers(self) -> Vec<usize> {
        match self {
            HostPreset::ToyMlp => Vec::new(),
            HostPreset::SmallCnn => vec![SMALL_CNN_TARGET],
            HostPreset::MiniWide => MINI_WIDE_GROUPS.to_vec(),
        }
    }

    pub fn default_target(self) -> Option<usize> {
        self.target_layers().first().copied()
    }

    pub fn layers(self, input: FeatureShape, classes: usize) -> Result<Vec<LayerSpec>> {
        if classes < 2 {
            return Err(Error::config("a host needs at least two classes"));
        }
        match self {
            HostPreset::ToyMlp => Ok(vec![
                LayerSpec::Dense {
                    inputs: input.len(),
                    outputs: 32,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    inputs: 32,
                    outputs: classes,
                },
                LayerSpec::SoftmaxOutput,
            ]),
            HostPreset::SmallCnn => {
                let FeatureShape::Image {
                    height,
                    width,
                    channels,
                } = input
                else {
                    return Err(Error::config("small-cnn needs image input"));
                };
                if height % 2 != 0 || width % 2 != 0 {
                    return Err(Error::config(format!(
                        "small-cnn needs even image sides, got {height}x{width}"
                    )));
                }
                Ok(vec![
                    LayerSpec::Conv2d {
                        size: 3,
                        depth: channels,
                        filters: 16,
                    },
                    LayerSpec::Relu,
                    LayerSpec::Conv2d {
                        size: 3,
                        depth: 16,
                        filters: 16,
                    },
                    LayerSpec::Relu,
                    LayerSpec::AvgPool { size: 2 },
                    LayerSpec::Dense {
                        inputs: (height / 2) * (width / 2) * 16,
                        outputs: classes,
                    },
                    LayerSpec::SoftmaxOutput,
                ])
            }
            HostPreset::MiniWide => {
                let FeatureShape::Image {
                    height,
                    width,
                    channels,
                } = input
                else {
                    return Err(Error::config("mini-wide needs image input"));
                };
                if height != width || height % 4 != 0 {
                    return Err(Error::config(format!(
                        "mini-wide needs square images with sides divisible by 4, got {height}x{width}"
                    )));
                }
                Ok(vec![
                    LayerSpec::Conv2d {
                        size: 3,
                        depth: channels,
                        filters: 16,
                    },
                    LayerSpec::Relu,
                    LayerSpec::Conv2d {
                        size: 3,
                        depth: 16,
                        filters: 16,
                    },
                    LayerSpec::Relu,
                    LayerSpec::Conv2d {
                        size: 3,
                        depth: 16,
                        filters: 16,
                    },
                    LayerSpec::Relu,
                    LayerSpec::AvgPool { size: 2 },
                    LayerSpec::Conv2d {
                        size: 3,
                        depth: 16,
                        filters: 32,
                    },
                    LayerSpec::Relu,
                    LayerSpec::Conv2d {
                        size: 3,
                        depth: 32,
                        filters: 32,
                    },
                    LayerSpec::Relu,
                    LayerSpec::AvgPool { size: 2 },
                    LayerSpec::Conv2d {
                        size: 3,
                        depth: 32,
                        filters: 64,
                    },
                    LayerSpec::Relu,
                    LayerSpec::Conv2d {
                        size: 3,
                        depth: 64,
                        filters: 64,
                    },
                    LayerSpec::Relu,
                    LayerSpec::AvgPool { size: height / 4 },
                    LayerSpec::Dense {
                        inputs: 64,
                        outputs: classes,
                    },
                    LayerSpec::SoftmaxOutput,
                ])
            }
        }
    }
}

const SMALL_CNN_TARGET: usize = 2;
const MINI_WIDE_GROUPS: [usize; 3] = [4, 9, 14];

impl FromStr for HostPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy-mlp" => Ok(HostPreset::ToyMlp),
            "small-cnn" => Ok(HostPreset::SmallCnn),
            "mini-wide" => Ok(HostPreset::MiniWide),
            other => Err(Error::config(format!("unknown host preset {other:?}"))),
        }
    }
}

/// Builds a preset with He-initialized weights and its default target layer.
pub fn build_host(
    preset: HostPreset,
    input: FeatureShape,
    classes: usize,
    seed: u64,
) -> Result<HostModel> {
    let model = HostModel::new(input, preset.layers(input, classes)?, seed)?;
    match preset.default_target() {
        Some(id) => model.with_embed_layer(id),
        None => Ok(model),
    }
}
