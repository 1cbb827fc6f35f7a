//! Forward and backward passes.

use serde::{Deserialize, Serialize};

use super::kernels::{conv_backward, conv_forward, ConvShape};
use super::{BatchNorm, ConvBlock, FcnModel, BN_EPS};
use crate::data::Label;
use crate::par;

/// Post-ReLU activations of the last conv block, `channels x len`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMaps {
    pub channels: usize,
    pub len: usize,
    pub values: Vec<f64>,
}

impl FeatureMaps {
    pub fn row(&self, c: usize) -> &[f64] {
        &self.values[c * self.len..(c + 1) * self.len]
    }

    /// Per-channel temporal mean.
    pub fn gap(&self) -> Vec<f64> {
        (0..self.channels)
            .map(|c| self.row(c).iter().sum::<f64>() / self.len as f64)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionResult {
    pub predicted: Label,
    /// Softmax probability of the predicted class.
    pub confidence: f64,
    pub logits: Vec<f64>,
}

impl PredictionResult {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let p = softmax(&logits);
        let predicted = Label::from_logits(&logits);
        PredictionResult {
            predicted,
            confidence: p[predicted.index()],
            logits,
        }
    }

    pub fn probabilities(&self) -> Vec<f64> {
        softmax(&self.logits)
    }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn shape(block: &ConvBlock, n: usize) -> ConvShape {
    ConvShape {
        cin: block.in_channels,
        cout: block.out_channels,
        k: block.kernel_size,
        n,
    }
}

fn head(model: &FcnModel, gap: &[f64]) -> Vec<f64> {
    let c = model.last_channels();
    (0..model.config.num_classes)
        .map(|k| {
            model.head_weight[k * c..(k + 1) * c]
                .iter()
                .zip(gap)
                .map(|(w, g)| w * g)
                .sum::<f64>()
                + model.head_bias[k]
        })
        .collect()
}

pub(crate) fn infer(model: &FcnModel, x: &[f64], n: usize) -> (FeatureMaps, PredictionResult) {
    let mut input = x.to_vec();
    for block in &model.blocks {
        let mut z = vec![0.0; block.out_channels * n];
        conv_forward(&shape(block, n), &input, &block.weight, &block.bias, &mut z);
        for c in 0..block.out_channels {
            let row = &mut z[c * n..(c + 1) * n];
            if let Some(bn) = &block.bn {
                let scale = bn.gamma[c] / (bn.running_var[c] + BN_EPS).sqrt();
                let shift = bn.beta[c] - bn.running_mean[c] * scale;
                row.iter_mut().for_each(|v| *v = (*v * scale + shift).max(0.0));
            } else {
                row.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        input = z;
    }
    let maps = FeatureMaps {
        channels: model.last_channels(),
        len: n,
        values: input,
    };
    let logits = head(model, &maps.gap());
    (maps, PredictionResult::from_logits(logits))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockGradients {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Gradients of the mean batch cross-entropy, shaped like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub blocks: Vec<BlockGradients>,
    pub head_weight: Vec<f64>,
    pub head_bias: Vec<f64>,
}

impl Gradients {
    fn zeros_like(model: &FcnModel) -> Self {
        Gradients {
            blocks: model
                .blocks
                .iter()
                .map(|b| {
                    let bn = if b.bn.is_some() { b.out_channels } else { 0 };
                    BlockGradients {
                        weight: vec![0.0; b.weight.len()],
                        bias: vec![0.0; b.out_channels],
                        gamma: vec![0.0; bn],
                        beta: vec![0.0; bn],
                    }
                })
                .collect(),
            head_weight: vec![0.0; model.head_weight.len()],
            head_bias: vec![0.0; model.head_bias.len()],
        }
    }

    /// Same order as [`FcnModel::tensors_mut`].
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for b in &self.blocks {
            out.push(&b.weight);
            out.push(&b.bias);
            if !b.gamma.is_empty() {
                out.push(&b.gamma);
                out.push(&b.beta);
            }
        }
        out.push(&self.head_weight);
        out.push(&self.head_bias);
        out
    }
}

/// Batch-norm statistics observed on one training batch, per block.
pub(crate) type BatchMoments = Vec<Option<(Vec<f64>, Vec<f64>)>>;

pub(crate) struct BatchPass {
    pub loss: f64,
    pub gradients: Gradients,
    pub moments: BatchMoments,
}

/// Normalizes `z` in place with `mean`/`var`, applies the affine map and
/// ReLU, and records the block's activations.
#[allow(clippy::too_many_arguments)]
fn normalize_affine(
    z: &mut Vec<Vec<f64>>,
    acts: &mut Vec<Vec<Vec<f64>>>,
    normed: &mut Vec<Vec<Vec<f64>>>,
    inv_stds: &mut Vec<Vec<f64>>,
    bn: &BatchNorm,
    mean: &[f64],
    var: &[f64],
    n: usize,
) {
    let cout = mean.len();
    let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    par::for_each_mut(z, |_, zi| {
        for c in 0..cout {
            zi[c * n..(c + 1) * n]
                .iter_mut()
                .for_each(|v| *v = (*v - mean[c]) * inv[c]);
        }
    });
    let a = par::map_slice(z, |xh| {
        let mut a = xh.clone();
        for c in 0..cout {
            a[c * n..(c + 1) * n]
                .iter_mut()
                .for_each(|v| *v = (bn.gamma[c] * *v + bn.beta[c]).max(0.0));
        }
        a
    });
    acts.push(a);
    normed.push(std::mem::take(z));
    inv_stds.push(inv);
}

/// Training-mode pass: batch-norm uses batch statistics.
///
/// `batch` holds `(flattened input, class index)` pairs sharing length `n`.
/// Every cross-instance reduction runs in batch order, so results do not
/// depend on the thread count.
pub(crate) fn loss_and_gradients(model: &FcnModel, batch: &[(&[f64], usize)], n: usize) -> BatchPass {
    let bsz = batch.len();
    let m = (bsz * n) as f64;
    let nblocks = model.blocks.len();

    // Forward. `acts[b][i]` is block b's post-ReLU output for instance i;
    // `normed[b][i]` the normalized pre-affine values when batch norm is on.
    let mut acts: Vec<Vec<Vec<f64>>> = Vec::with_capacity(nblocks);
    let mut normed: Vec<Vec<Vec<f64>>> = Vec::with_capacity(nblocks);
    let mut inv_stds: Vec<Vec<f64>> = Vec::with_capacity(nblocks);
    let mut moments: BatchMoments = Vec::with_capacity(nblocks);

    for (bi, block) in model.blocks.iter().enumerate() {
        let s = shape(block, n);
        let inputs: Vec<&[f64]> = if bi == 0 {
            batch.iter().map(|(x, _)| *x).collect()
        } else {
            acts[bi - 1].iter().map(Vec::as_slice).collect()
        };
        let mut z: Vec<Vec<f64>> = par::map_slice(&inputs, |x| {
            let mut z = vec![0.0; block.out_channels * n];
            conv_forward(&s, x, &block.weight, &block.bias, &mut z);
            z
        });
        let cout = block.out_channels;
        match &block.bn {
            Some(bn) => {
                let mut mean = vec![0.0; cout];
                let mut var = vec![0.0; cout];
                for zi in &z {
                    for c in 0..cout {
                        mean[c] += zi[c * n..(c + 1) * n].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m);
                for zi in &z {
                    for c in 0..cout {
                        var[c] += zi[c * n..(c + 1) * n].iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= m);
                normalize_affine(&mut z, &mut acts, &mut normed, &mut inv_stds, bn, &mean, &var, n);
                moments.push(Some((mean, var)));
            }
            None => {
                par::for_each_mut(&mut z, |_, zi| zi.iter_mut().for_each(|v| *v = v.max(0.0)));
                acts.push(z);
                normed.push(Vec::new());
                inv_stds.push(Vec::new());
                moments.push(None);
            }
        }
    }

    // Head and loss.
    let last = model.last_channels();
    let classes = model.config.num_classes;
    let mut grads = Gradients::zeros_like(model);
    let mut loss = 0.0;
    let mut d_act: Vec<Vec<f64>> = Vec::with_capacity(bsz);
    for (i, (_, y)) in batch.iter().enumerate() {
        let a = &acts[nblocks - 1][i];
        let gap: Vec<f64> = (0..last)
            .map(|c| a[c * n..(c + 1) * n].iter().sum::<f64>() / n as f64)
            .collect();
        let logits = head(model, &gap);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        loss += lse - logits[*y];
        let p: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
        let mut dgap = vec![0.0; last];
        for k in 0..classes {
            let dl = (p[k] - f64::from(u8::from(k == *y))) / bsz as f64;
            grads.head_bias[k] += dl;
            for c in 0..last {
                grads.head_weight[k * last + c] += dl * gap[c];
                dgap[c] += dl * model.head_weight[k * last + c];
            }
        }
        let mut da = vec![0.0; last * n];
        for c in 0..last {
            da[c * n..(c + 1) * n].fill(dgap[c] / n as f64);
        }
        d_act.push(da);
    }
    loss /= bsz as f64;

    // Backward through the conv blocks.
    for bi in (0..nblocks).rev() {
        let block = &model.blocks[bi];
        let cout = block.out_channels;
        let s = shape(block, n);
        par::for_each_mut(&mut d_act, |i, g| {
            for (gv, av) in g.iter_mut().zip(&acts[bi][i]) {
                if *av <= 0.0 {
                    *gv = 0.0;
                }
            }
        });
        let mut dz = d_act;
        if let Some(bn) = &block.bn {
            let partial = par::map_indices(bsz, |i| {
                let (g, xh) = (&dz[i], &normed[bi][i]);
                (0..cout)
                    .map(|c| {
                        let r = c * n..(c + 1) * n;
                        let sg: f64 = g[r.clone()].iter().sum();
                        let sgx: f64 = g[r.clone()].iter().zip(&xh[r]).map(|(a, b)| a * b).sum();
                        (sg, sgx)
                    })
                    .collect::<Vec<_>>()
            });
            let bg = &mut grads.blocks[bi];
            for part in &partial {
                for (c, (sg, sgx)) in part.iter().enumerate() {
                    bg.beta[c] += sg;
                    bg.gamma[c] += sgx;
                }
            }
            let (dbeta, dgamma) = (bg.beta.clone(), bg.gamma.clone());
            let inv = &inv_stds[bi];
            par::for_each_mut(&mut dz, |i, g| {
                let xh = &normed[bi][i];
                for c in 0..cout {
                    let k = bn.gamma[c] * inv[c] / m;
                    for t in c * n..(c + 1) * n {
                        g[t] = k * (m * g[t] - dbeta[c] - xh[t] * dgamma[c]);
                    }
                }
            });
        }

        let need_dx = bi > 0;
        let per_instance = par::map_indices(bsz, |i| {
            let x: &[f64] = if bi == 0 { batch[i].0 } else { &acts[bi - 1][i] };
            let mut dw = vec![0.0; block.weight.len()];
            let mut db = vec![0.0; cout];
            let mut dx = if need_dx { vec![0.0; block.in_channels * n] } else { Vec::new() };
            conv_backward(
                &s,
                x,
                &block.weight,
                &dz[i],
                &mut dw,
                &mut db,
                need_dx.then_some(dx.as_mut_slice()),
            );
            (dw, db, dx)
        });
        let bg = &mut grads.blocks[bi];
        let mut next = Vec::with_capacity(if need_dx { bsz } else { 0 });
        for (dw, db, dx) in per_instance {
            bg.weight.iter_mut().zip(&dw).for_each(|(a, b)| *a += b);
            bg.bias.iter_mut().zip(&db).for_each(|(a, b)| *a += b);
            if need_dx {
                next.push(dx);
            }
        }
        d_act = next;
    }

    BatchPass {
        loss,
        gradients: grads,
        moments,
    }
}
