//! A 1D fully-convolutional classifier (conv -> batch norm -> ReLU blocks,
//! global average pooling, linear head) with hand-written backpropagation and
//! class activation maps.

mod cam;
mod kernels;
mod network;
mod train;

use std::fs;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Label, Split, TimeSeries};
use crate::error::{Error, Result};
use crate::metrics::ClassificationMetrics;
use crate::{par, seed};

pub use cam::{compute_cam, normalize_cam, AttributionMask, AttributionModel};
pub use network::{FeatureMaps, Gradients, PredictionResult};
pub use train::{train, train_on, TrainConfig, TrainOutcome};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlockSpec {
    pub out_channels: usize,
    pub kernel_size: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FcnConfig {
    pub in_channels: usize,
    pub conv_blocks: Vec<ConvBlockSpec>,
    pub use_batch_norm: bool,
    pub num_classes: usize,
    pub seed: u64,
}

impl FcnConfig {
    /// Scaled-down FCN: channels 16/32/16, kernels 7/5/3.
    pub fn small(in_channels: usize, seed: u64) -> Self {
        FcnConfig {
            in_channels,
            conv_blocks: [(16, 7), (32, 5), (16, 3)]
                .into_iter()
                .map(|(out_channels, kernel_size)| ConvBlockSpec {
                    out_channels,
                    kernel_size,
                })
                .collect(),
            use_batch_norm: true,
            num_classes: 2,
            seed,
        }
    }

    /// Full-width FCN: channels 128/256/128, kernels 7/5/3.
    pub fn full(in_channels: usize, seed: u64) -> Self {
        let mut cfg = Self::small(in_channels, seed);
        for (block, width) in cfg.conv_blocks.iter_mut().zip([128, 256, 128]) {
            block.out_channels = width;
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::InvalidConfig("in_channels must be positive".into()));
        }
        if self.conv_blocks.is_empty() {
            return Err(Error::InvalidConfig("at least one conv block is required".into()));
        }
        for (i, b) in self.conv_blocks.iter().enumerate() {
            if b.kernel_size % 2 == 0 {
                return Err(Error::InvalidConfig(format!(
                    "block {i}: kernel size {} is even; same padding needs an odd kernel",
                    b.kernel_size
                )));
            }
            if b.out_channels == 0 {
                return Err(Error::InvalidConfig(format!("block {i}: zero output channels")));
            }
        }
        if self.num_classes != 2 {
            return Err(Error::InvalidConfig(format!(
                "num_classes must be 2, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }

    pub fn last_channels(&self) -> usize {
        self.conv_blocks.last().map_or(0, |b| b.out_channels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    /// `[out][in][k]`, flattened.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub bn: Option<BatchNorm>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FcnModel {
    pub config: FcnConfig,
    pub blocks: Vec<ConvBlock>,
    /// `[class][last_channels]`, flattened.
    pub head_weight: Vec<f64>,
    pub head_bias: Vec<f64>,
}

#[derive(Serialize)]
struct CheckpointRef<'a> {
    format_version: u32,
    #[serde(flatten)]
    model: &'a FcnModel,
}

#[derive(Deserialize)]
struct CheckpointOwned {
    format_version: u32,
    #[serde(flatten)]
    model: FcnModel,
}

impl FcnModel {
    /// He-initialized model, deterministic in `cfg.seed`.
    pub fn init(cfg: &FcnConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seed::stream(cfg.seed, "fcn-init");
        let mut cin = cfg.in_channels;
        let mut blocks = Vec::with_capacity(cfg.conv_blocks.len());
        for spec in &cfg.conv_blocks {
            let (cout, k) = (spec.out_channels, spec.kernel_size);
            let dist = Normal::new(0.0, (2.0 / (cin * k) as f64).sqrt()).expect("finite std");
            let weight = (0..cout * cin * k).map(|_| dist.sample(&mut rng)).collect();
            blocks.push(ConvBlock {
                in_channels: cin,
                out_channels: cout,
                kernel_size: k,
                weight,
                bias: vec![0.0; cout],
                bn: cfg.use_batch_norm.then(|| BatchNorm {
                    gamma: vec![1.0; cout],
                    beta: vec![0.0; cout],
                    running_mean: vec![0.0; cout],
                    running_var: vec![1.0; cout],
                }),
            });
            cin = cout;
        }
        let dist = Normal::new(0.0, (1.0 / cin as f64).sqrt()).expect("finite std");
        let head_weight = (0..cfg.num_classes * cin).map(|_| dist.sample(&mut rng)).collect();
        Ok(FcnModel {
            config: cfg.clone(),
            blocks,
            head_weight,
            head_bias: vec![0.0; cfg.num_classes],
        })
    }

    pub fn in_channels(&self) -> usize {
        self.config.in_channels
    }

    pub fn last_channels(&self) -> usize {
        self.config.last_channels()
    }

    /// Head weights of `class` over the last feature channels.
    pub fn class_weights(&self, class: usize) -> &[f64] {
        let c = self.last_channels();
        &self.head_weight[class * c..(class + 1) * c]
    }

    /// Trainable tensors in a fixed order, matching [`Gradients::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.weight);
            out.push(&mut b.bias);
            if let Some(bn) = &mut b.bn {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for b in &self.blocks {
            out.push(&b.weight);
            out.push(&b.bias);
            if let Some(bn) = &b.bn {
                out.push(&bn.gamma);
                out.push(&bn.beta);
            }
        }
        out.push(&self.head_weight);
        out.push(&self.head_bias);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn check_input(&self, x: &TimeSeries) -> Result<()> {
        if x.channels() != self.in_channels() {
            return Err(Error::Mismatch {
                what: "input channels",
                expected: self.in_channels(),
                found: x.channels(),
            });
        }
        Ok(())
    }

    /// Inference-mode forward pass (batch norm uses running statistics).
    pub fn forward(&self, x: &TimeSeries) -> Result<(FeatureMaps, PredictionResult)> {
        self.check_input(x)?;
        Ok(network::infer(self, &x.flat(), x.len()))
    }

    pub fn predict(&self, x: &TimeSeries) -> Result<PredictionResult> {
        self.forward(x).map(|(_, p)| p)
    }

    /// Predictions for many instances, in input order.
    pub fn predict_many(&self, xs: &[&TimeSeries]) -> Result<Vec<PredictionResult>> {
        par::map_slice(xs, |x| self.predict(x)).into_iter().collect()
    }

    pub fn evaluate(&self, ds: &Dataset, split: Split) -> Result<ClassificationMetrics> {
        let xs: Vec<&TimeSeries> = ds.split(split).collect();
        if xs.is_empty() {
            return Err(Error::InvalidDataset(format!("{split:?} split is empty")));
        }
        let preds = self.predict_many(&xs)?;
        Ok(ClassificationMetrics::from_pairs(
            xs.iter().zip(&preds).map(|(x, p)| (x.label, p.predicted)),
        ))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&CheckpointRef {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model: self,
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: CheckpointOwned = serde_json::from_str(text)?;
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported checkpoint format version {}",
                ck.format_version
            )));
        }
        ck.model.validate_shapes()?;
        Ok(ck.model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    fn validate_shapes(&self) -> Result<()> {
        self.config.validate()?;
        let mut cin = self.config.in_channels;
        if self.blocks.len() != self.config.conv_blocks.len() {
            return Err(Error::InvalidConfig("block count differs from config".into()));
        }
        for (b, spec) in self.blocks.iter().zip(&self.config.conv_blocks) {
            let cout = spec.out_channels;
            let ok = b.in_channels == cin
                && b.out_channels == cout
                && b.kernel_size == spec.kernel_size
                && b.weight.len() == cout * cin * spec.kernel_size
                && b.bias.len() == cout
                && b.bn.is_some() == self.config.use_batch_norm
                && b.bn.as_ref().is_none_or(|bn| {
                    [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var]
                        .iter()
                        .all(|v| v.len() == cout)
                });
            if !ok {
                return Err(Error::InvalidConfig("parameter shapes inconsistent with config".into()));
            }
            cin = cout;
        }
        if self.head_weight.len() != self.config.num_classes * cin
            || self.head_bias.len() != self.config.num_classes
        {
            return Err(Error::InvalidConfig("head shape inconsistent with config".into()));
        }
        if !self.is_finite() {
            return Err(Error::InvalidConfig("non-finite parameter".into()));
        }
        Ok(())
    }
}

impl Label {
    pub(crate) fn from_logits(logits: &[f64]) -> Self {
        Label::from_index(usize::from(logits[1] > logits[0]))
    }
}
