//! Noise-mask augmentation guided by attribution masks, fine-tuning on the
//! perturbed train split, and the comparison strategies.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{ChannelStats, Dataset, Split, TimeSeries};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_test, Evaluation};
use crate::model::{train_on, AttributionMask, FcnModel, TrainConfig};
use crate::seed;
use crate::spuriousness::{select_enhancement_sets, EnhancementSets};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnhancementConfig {
    /// Noise std as a multiple of each channel's train-split std.
    pub noise_scale: f64,
    pub finetune: TrainConfig,
    pub tau_s: f64,
    pub tau_c: f64,
    pub seed: u64,
    /// Keep the originals and add perturbed copies instead of replacing them.
    #[serde(default)]
    pub append: bool,
}

impl EnhancementConfig {
    /// Fine-tuning defaults derived from the original training run: 20
    /// epochs at a tenth of its learning rate, batch-norm statistics frozen.
    pub fn from_training(original: &TrainConfig, seed_value: u64) -> Self {
        EnhancementConfig {
            noise_scale: 0.5,
            finetune: TrainConfig {
                epochs: 20,
                learning_rate: 0.1 * original.learning_rate,
                seed: seed::derive(seed_value, "finetune"),
                freeze_bn_stats: true,
                ..original.clone()
            },
            tau_s: 0.7,
            tau_c: 0.3,
            seed: seed_value,
            append: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_scale > 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::InvalidConfig(format!("noise_scale must be positive, got {}", self.noise_scale)));
        }
        if !(0.0 <= self.tau_c && self.tau_c < self.tau_s && self.tau_s <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "thresholds need 0 <= tau_c < tau_s <= 1, got tau_c = {}, tau_s = {}",
                self.tau_c, self.tau_s
            )));
        }
        self.finetune.validate()
    }
}

impl Default for EnhancementConfig {
    fn default() -> Self {
        Self::from_training(&TrainConfig::default(), 0)
    }
}

/// Per-channel Gaussian noise levels.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    pub std: Vec<f64>,
}

impl NoiseModel {
    pub fn from_train(ds: &Dataset, noise_scale: f64) -> Self {
        NoiseModel {
            std: ChannelStats::from_train(ds).std.iter().map(|s| s * noise_scale).collect(),
        }
    }

    /// `x + w(t) * z` with `z ~ N(0, std_c^2)`. A draw is taken for every
    /// point so the stream does not depend on the weights; points with zero
    /// weight are copied untouched.
    fn perturb(&self, x: &TimeSeries, weight: impl Fn(usize) -> f64, rng: &mut seed::Rng) -> Result<TimeSeries> {
        if self.std.len() != x.channels() {
            return Err(Error::Mismatch {
                what: "noise channels",
                expected: x.channels(),
                found: self.std.len(),
            });
        }
        let mut out = x.clone();
        for (row, &sd) in out.values.iter_mut().zip(&self.std) {
            for (t, v) in row.iter_mut().enumerate() {
                let z: f64 = StandardNormal.sample(rng);
                let w = weight(t);
                if w != 0.0 {
                    *v += w * sd * z;
                }
            }
        }
        Ok(out)
    }
}

fn check_mask(x: &TimeSeries, m: &AttributionMask) -> Result<()> {
    if m.len() != x.len() {
        return Err(Error::Mismatch {
            what: "attribution mask length",
            expected: x.len(),
            found: m.len(),
        });
    }
    Ok(())
}

/// Noise where the model attends: `T + m * z`.
pub fn corrupt_spurious(x: &TimeSeries, m: &AttributionMask, noise: &NoiseModel, rng: &mut seed::Rng) -> Result<TimeSeries> {
    check_mask(x, m)?;
    noise.perturb(x, |t| m.weights[t], rng)
}

/// Noise where the model does not attend: `T + (1 - m) * z`.
pub fn enhance_correct(x: &TimeSeries, m: &AttributionMask, noise: &NoiseModel, rng: &mut seed::Rng) -> Result<TimeSeries> {
    check_mask(x, m)?;
    noise.perturb(x, |t| 1.0 - m.weights[t], rng)
}

/// Full-sequence noise.
pub fn jitter(x: &TimeSeries, noise: &NoiseModel, rng: &mut seed::Rng) -> Result<TimeSeries> {
    noise.perturb(x, |_| 1.0, rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnhancementReport {
    pub strategy: String,
    pub spurious_count: usize,
    pub correct_count: usize,
    pub perturbed_ids: Vec<String>,
    /// Set when nothing qualified and the model was returned unchanged.
    pub skipped: bool,
    pub config: EnhancementConfig,
    pub before: Evaluation,
    pub after: Evaluation,
    pub loss_trace: Vec<f64>,
}

/// A perturbed replacement for one train instance.
type Replacement = Box<dyn Fn(&TimeSeries, &mut seed::Rng) -> Result<TimeSeries>>;

/// Fine-tunes on the train split with the listed instances perturbed, in
/// train order, each drawing from one shared noise stream.
fn finetune_with(
    model: &FcnModel,
    ds: &Dataset,
    replacements: &BTreeMap<String, Replacement>,
    cfg: &EnhancementConfig,
    stream: &str,
) -> Result<(FcnModel, Vec<String>, Vec<f64>)> {
    let mut rng = seed::stream(cfg.seed, stream);
    let mut set: Vec<TimeSeries> = Vec::new();
    let mut appended: Vec<TimeSeries> = Vec::new();
    let mut ids = Vec::new();
    for x in ds.split(Split::Train) {
        match replacements.get(&x.id) {
            Some(f) => {
                let mut y = f(x, &mut rng)?;
                ids.push(x.id.clone());
                if cfg.append {
                    set.push(x.clone());
                    y.id = format!("{}#aug", x.id);
                    appended.push(y);
                } else {
                    set.push(y);
                }
            }
            None => set.push(x.clone()),
        }
    }
    for id in replacements.keys() {
        match ds.get(id) {
            Some(x) if x.split == Split::Train => {}
            _ => return Err(Error::UnknownInstance(id.clone())),
        }
    }
    let refs: Vec<&TimeSeries> = set.iter().chain(&appended).collect();
    let out = train_on(model, &refs, &cfg.finetune)?;
    Ok((out.model, ids, out.loss_trace))
}

fn report(
    strategy: &str,
    sets: (usize, usize),
    ids: Vec<String>,
    cfg: &EnhancementConfig,
    before: Evaluation,
    after: Evaluation,
    loss_trace: Vec<f64>,
) -> EnhancementReport {
    EnhancementReport {
        strategy: strategy.to_string(),
        spurious_count: sets.0,
        correct_count: sets.1,
        skipped: ids.is_empty(),
        perturbed_ids: ids,
        config: cfg.clone(),
        before,
        after,
        loss_trace,
    }
}

fn mask_for<'a>(masks: &'a BTreeMap<String, AttributionMask>, id: &str) -> Result<&'a AttributionMask> {
    masks.get(id).ok_or_else(|| Error::instance(id, "no attribution mask"))
}

fn masked_replacements(
    sets: &EnhancementSets,
    masks: &BTreeMap<String, AttributionMask>,
    noise: &NoiseModel,
) -> Result<BTreeMap<String, Replacement>> {
    let mut out: BTreeMap<String, Replacement> = BTreeMap::new();
    for (ids, spurious) in [(&sets.spurious, true), (&sets.correct, false)] {
        for id in ids {
            let m = mask_for(masks, id)?.clone();
            let noise = noise.clone();
            out.insert(
                id.clone(),
                Box::new(move |x, rng| {
                    if spurious {
                        corrupt_spurious(x, &m, &noise, rng)
                    } else {
                        enhance_correct(x, &m, &noise, rng)
                    }
                }),
            );
        }
    }
    Ok(out)
}

/// Perturbs the selected train instances according to their attribution
/// masks and fine-tunes on the result.
///
/// Instances scoring at least `tau_s` get noise where the model attends;
/// those at most `tau_c` get noise everywhere else. With nothing selected
/// the input model is returned as is and the report is marked skipped.
pub fn enhance_model(
    model: &FcnModel,
    ds: &Dataset,
    masks: &BTreeMap<String, AttributionMask>,
    instance_scores: &BTreeMap<String, f64>,
    cfg: &EnhancementConfig,
) -> Result<(FcnModel, EnhancementReport)> {
    enhance_named("full-loop", model, ds, masks, instance_scores, cfg)
}

fn enhance_named(
    strategy: &str,
    model: &FcnModel,
    ds: &Dataset,
    masks: &BTreeMap<String, AttributionMask>,
    instance_scores: &BTreeMap<String, f64>,
    cfg: &EnhancementConfig,
) -> Result<(FcnModel, EnhancementReport)> {
    cfg.validate()?;
    let sets = select_enhancement_sets(instance_scores, cfg.tau_s, cfg.tau_c)?;
    let before = evaluate_test(model, ds)?;
    let counts = (sets.spurious.len(), sets.correct.len());
    if sets.is_empty() {
        let after = before.clone();
        return Ok((model.clone(), report(strategy, counts, Vec::new(), cfg, before, after, Vec::new())));
    }
    let noise = NoiseModel::from_train(ds, cfg.noise_scale);
    let repl = masked_replacements(&sets, masks, &noise)?;
    let (tuned, ids, trace) = finetune_with(model, ds, &repl, cfg, "enhance-noise")?;
    let after = evaluate_test(&tuned, ds)?;
    Ok((tuned, report(strategy, counts, ids, cfg, before, after, trace)))
}

/// Same selection rule as [`enhance_model`] but scores come from cluster
/// scores alone, so instance-level overrides have no effect.
pub fn baseline_cluster_mask(
    model: &FcnModel,
    ds: &Dataset,
    masks: &BTreeMap<String, AttributionMask>,
    cluster_only_scores: &BTreeMap<String, f64>,
    cfg: &EnhancementConfig,
) -> Result<(FcnModel, EnhancementReport)> {
    enhance_named("cluster-mask", model, ds, masks, cluster_only_scores, cfg)
}

/// Jitters `gamma` uniformly chosen train instances over the whole sequence
/// and fine-tunes.
pub fn baseline_random_aug(
    model: &FcnModel,
    ds: &Dataset,
    gamma: usize,
    cfg: &EnhancementConfig,
) -> Result<(FcnModel, EnhancementReport)> {
    cfg.validate()?;
    let chosen = random_aug_selection(ds, gamma, cfg.seed)?;
    let before = evaluate_test(model, ds)?;
    if chosen.is_empty() {
        let after = before.clone();
        return Ok((model.clone(), report("random-aug", (0, 0), Vec::new(), cfg, before, after, Vec::new())));
    }
    let noise = NoiseModel::from_train(ds, cfg.noise_scale);
    let mut repl: BTreeMap<String, Replacement> = BTreeMap::new();
    for id in chosen {
        let noise = noise.clone();
        repl.insert(id, Box::new(move |x, rng| jitter(x, &noise, rng)));
    }
    let (tuned, ids, trace) = finetune_with(model, ds, &repl, cfg, "random-aug-noise")?;
    let after = evaluate_test(&tuned, ds)?;
    Ok((tuned, report("random-aug", (0, 0), ids, cfg, before, after, trace)))
}

/// The train ids jittered by [`baseline_random_aug`].
pub fn random_aug_selection(ds: &Dataset, gamma: usize, seed_value: u64) -> Result<BTreeSet<String>> {
    let train: Vec<&TimeSeries> = ds.split(Split::Train).collect();
    if gamma > train.len() {
        return Err(Error::InvalidConfig(format!(
            "gamma = {gamma} exceeds the {} train instances",
            train.len()
        )));
    }
    let mut rng = seed::stream(seed_value, "random-aug-pick");
    Ok(index::sample(&mut rng, train.len(), gamma)
        .into_iter()
        .map(|i| train[i].id.clone())
        .collect())
}

/// Binary mask with `count` uniformly placed ones.
pub fn random_binary_mask(len: usize, count: usize, rng: &mut seed::Rng) -> Vec<f64> {
    let mut m = vec![0.0; len];
    for i in index::sample(rng, len, count.min(len)) {
        m[i] = 1.0;
    }
    m
}

/// Perturbs the same instances [`enhance_model`] would, but at uniformly
/// random positions: as many as the rounded mass of the mask that method
/// would have applied (`m` for spurious instances, `1 - m` for correct ones).
pub fn baseline_random_mask(
    model: &FcnModel,
    ds: &Dataset,
    masks: &BTreeMap<String, AttributionMask>,
    proposed: &EnhancementSets,
    cfg: &EnhancementConfig,
) -> Result<(FcnModel, EnhancementReport)> {
    cfg.validate()?;
    let before = evaluate_test(model, ds)?;
    let counts = (proposed.spurious.len(), proposed.correct.len());
    if proposed.is_empty() {
        let after = before.clone();
        return Ok((model.clone(), report("random-mask", counts, Vec::new(), cfg, before, after, Vec::new())));
    }
    let noise = NoiseModel::from_train(ds, cfg.noise_scale);
    let mut pos_rng = seed::stream(cfg.seed, "random-mask-positions");
    let mut repl: BTreeMap<String, Replacement> = BTreeMap::new();
    for (ids, spurious) in [(&proposed.spurious, true), (&proposed.correct, false)] {
        for id in ids {
            let m = mask_for(masks, id)?;
            let mass = if spurious { m.mass() } else { m.len() as f64 - m.mass() };
            let random = AttributionMask::new(id.clone(), random_binary_mask(m.len(), mass.round() as usize, &mut pos_rng))?;
            let noise = noise.clone();
            repl.insert(id.clone(), Box::new(move |x, rng| corrupt_spurious(x, &random, &noise, rng)));
        }
    }
    let (tuned, ids, trace) = finetune_with(model, ds, &repl, cfg, "random-mask-noise")?;
    let after = evaluate_test(&tuned, ds)?;
    Ok((tuned, report("random-mask", counts, ids, cfg, before, after, trace)))
}
