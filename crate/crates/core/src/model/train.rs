use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::network::{loss_and_gradients, Gradients};
use super::{FcnModel, BN_MOMENTUM};
use crate::data::{Dataset, Split, TimeSeries};
use crate::error::{Error, Result};
use crate::seed;

/// Mini-batch SGD with a per-epoch multiplicative learning-rate decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    #[serde(default = "default_decay")]
    pub lr_decay: f64,
    /// Keep batch-norm running statistics fixed. Batches are still
    /// normalized with their own statistics.
    #[serde(default)]
    pub freeze_bn_stats: bool,
}

fn default_decay() -> f64 {
    1.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            learning_rate: 0.05,
            seed: 0,
            lr_decay: 0.95,
            freeze_bn_stats: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return Err(Error::InvalidConfig("lr_decay must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: FcnModel,
    /// Mean per-instance training loss of each epoch.
    pub loss_trace: Vec<f64>,
}

/// Trains on the train split of `ds`.
pub fn train(model: &FcnModel, ds: &Dataset, tc: &TrainConfig) -> Result<TrainOutcome> {
    let xs: Vec<&TimeSeries> = ds.split(Split::Train).collect();
    train_on(model, &xs, tc)
}

/// Trains on an explicit instance list.
pub fn train_on(model: &FcnModel, xs: &[&TimeSeries], tc: &TrainConfig) -> Result<TrainOutcome> {
    tc.validate()?;
    if xs.is_empty() {
        return Err(Error::InvalidDataset("no training instances".into()));
    }
    let has = |l| xs.iter().any(|x| x.label == l);
    if !has(crate::data::Label::Normal) || !has(crate::data::Label::Anomaly) {
        return Err(Error::InvalidDataset("training data must contain both classes".into()));
    }
    for x in xs {
        model.check_input(x)?;
    }
    let n = xs[0].len();
    if let Some(x) = xs.iter().find(|x| x.len() != n) {
        return Err(Error::instance(&x.id, "sequence length differs from the first training instance"));
    }

    let flats: Vec<Vec<f64>> = xs.iter().map(|x| x.flat()).collect();
    let labels: Vec<usize> = xs.iter().map(|x| x.label.index()).collect();
    let mut model = model.clone();
    let mut rng = seed::stream(tc.seed, "train-shuffle");
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut trace = Vec::with_capacity(tc.epochs);
    let mut lr = tc.learning_rate;

    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (bi, chunk) in order.chunks(tc.batch_size).enumerate() {
            let batch: Vec<(&[f64], usize)> =
                chunk.iter().map(|&i| (flats[i].as_slice(), labels[i])).collect();
            let pass = loss_and_gradients(&model, &batch, n);
            if !pass.loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            epoch_loss += pass.loss * chunk.len() as f64;
            apply_sgd(&mut model, &pass.gradients, lr);
            if tc.freeze_bn_stats {
                continue;
            }
            for (block, moments) in model.blocks.iter_mut().zip(pass.moments) {
                if let (Some(bn), Some((mean, var))) = (&mut block.bn, moments) {
                    for c in 0..mean.len() {
                        bn.running_mean[c] = BN_MOMENTUM * bn.running_mean[c] + (1.0 - BN_MOMENTUM) * mean[c];
                        bn.running_var[c] = BN_MOMENTUM * bn.running_var[c] + (1.0 - BN_MOMENTUM) * var[c];
                    }
                }
            }
        }
        trace.push(epoch_loss / xs.len() as f64);
        lr *= tc.lr_decay;
    }
    if !model.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch: tc.epochs - 1,
            batch: 0,
        });
    }
    Ok(TrainOutcome {
        model,
        loss_trace: trace,
    })
}

fn apply_sgd(model: &mut FcnModel, grads: &Gradients, lr: f64) {
    if lr == 0.0 {
        return;
    }
    for (p, g) in model.tensors_mut().into_iter().zip(grads.tensors()) {
        for (pv, gv) in p.iter_mut().zip(g) {
            *pv -= lr * gv;
        }
    }
}

impl FcnModel {
    /// Mean cross-entropy of `xs` and its gradient, batch norm in training
    /// mode. Exposed for gradient checking.
    pub fn batch_gradients(&self, xs: &[&TimeSeries]) -> Result<(f64, Gradients)> {
        let n = xs.first().map_or(0, |x| x.len());
        for x in xs {
            self.check_input(x)?;
            if x.len() != n {
                return Err(Error::instance(&x.id, "batch sequences must share a length"));
            }
        }
        let flats: Vec<Vec<f64>> = xs.iter().map(|x| x.flat()).collect();
        let batch: Vec<(&[f64], usize)> = flats
            .iter()
            .zip(xs)
            .map(|(f, x)| (f.as_slice(), x.label.index()))
            .collect();
        let pass = loss_and_gradients(self, &batch, n);
        Ok((pass.loss, pass.gradients))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Label, TimeSeries};
    use crate::model::FcnConfig;

    fn constant(id: usize, value: f64, label: Label, n: usize) -> TimeSeries {
        TimeSeries {
            id: format!("c{id}"),
            label,
            split: Split::Train,
            values: vec![vec![value; n]],
            truth_mask: None,
        }
    }

    fn toy() -> Dataset {
        let instances = (0..16)
            .map(|i| {
                if i % 2 == 0 {
                    constant(i, 0.0, Label::Normal, 24)
                } else {
                    constant(i, 1.0, Label::Anomaly, 24)
                }
            })
            .collect();
        Dataset {
            name: "toy".into(),
            instances,
        }
    }

    fn small_cfg() -> FcnConfig {
        let mut cfg = FcnConfig::small(1, 3);
        for b in &mut cfg.conv_blocks {
            b.out_channels = 4;
        }
        cfg
    }

    #[test]
    fn separable_toy_reaches_full_accuracy_with_falling_loss() {
        let ds = toy();
        let model = FcnModel::init(&small_cfg()).unwrap();
        let tc = TrainConfig {
            epochs: 20,
            batch_size: 16,
            learning_rate: 0.1,
            seed: 1,
            lr_decay: 1.0,
            freeze_bn_stats: false,
        };
        let out = train(&model, &ds, &tc).unwrap();
        let m = out.model.evaluate(&ds, Split::Train).unwrap();
        assert_eq!(m.accuracy, 1.0, "trace {:?}", out.loss_trace);
        for w in out.loss_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-6, "loss rose: {:?}", out.loss_trace);
        }
    }

    #[test]
    fn zero_learning_rate_leaves_weights() {
        let ds = toy();
        let model = FcnModel::init(&small_cfg()).unwrap();
        let tc = TrainConfig {
            epochs: 3,
            batch_size: 64,
            learning_rate: 0.0,
            seed: 1,
            lr_decay: 1.0,
            freeze_bn_stats: false,
        };
        let out = train(&model, &ds, &tc).unwrap();
        assert_eq!(out.model.tensors(), model.tensors());
        assert!(out.loss_trace.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn training_is_deterministic() {
        let ds = toy();
        let model = FcnModel::init(&small_cfg()).unwrap();
        let tc = TrainConfig {
            epochs: 3,
            batch_size: 5,
            ..TrainConfig::default()
        };
        let a = train(&model, &ds, &tc).unwrap();
        let b = train(&model, &ds, &tc).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.loss_trace, b.loss_trace);
    }

    #[test]
    fn frozen_statistics_stay_put() {
        let ds = toy();
        let model = FcnModel::init(&small_cfg()).unwrap();
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 4,
            freeze_bn_stats: true,
            ..TrainConfig::default()
        };
        let out = train(&model, &ds, &tc).unwrap();
        for (a, b) in out.model.blocks.iter().zip(&model.blocks) {
            let (a, b) = (a.bn.as_ref().unwrap(), b.bn.as_ref().unwrap());
            assert_eq!((&a.running_mean, &a.running_var), (&b.running_mean, &b.running_var));
            assert_ne!(a.gamma, b.gamma);
        }
    }

    #[test]
    fn single_class_rejected() {
        let mut ds = toy();
        ds.instances.retain(|s| s.label == Label::Normal);
        let model = FcnModel::init(&small_cfg()).unwrap();
        assert!(train(&model, &ds, &TrainConfig::default()).is_err());
    }

    #[test]
    fn diverging_training_reports_epoch_and_batch() {
        let ds = toy();
        let model = FcnModel::init(&small_cfg()).unwrap();
        let tc = TrainConfig {
            epochs: 50,
            batch_size: 4,
            learning_rate: 1e300,
            seed: 0,
            lr_decay: 1.0,
            freeze_bn_stats: false,
        };
        match train(&model, &ds, &tc) {
            Err(Error::NonFiniteLoss { .. }) => {}
            Ok(out) => panic!("expected divergence, got trace {:?}", out.loss_trace),
            Err(e) => panic!("unexpected error {e}"),
        }
    }
}
