//! Seeded synthetic datasets.
//!
//! Both generators keep the leading [`ANOMALY_FREE_PREFIX_FRACTION`] of every
//! sequence free of ground-truth anomalies, so a spurious artifact can later be
//! placed there without touching any truth mask.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::{Dataset, Label, Split, TimeSeries};
use crate::error::{Error, Result};
use crate::seed::{self, Rng};

pub const ANOMALY_FREE_PREFIX_FRACTION: f64 = 0.125;

const TRAIN_FRACTION: f64 = 0.7;

/// Sample layout of the STEVE-like generator: four cycles of adsorption
/// followed by desorption.
#[derive(Debug, Clone, Copy)]
pub struct SteveLayout;

impl SteveLayout {
    pub const CYCLES: usize = 4;
    pub const HALF_CYCLE: usize = 100;
    pub const CYCLE: usize = 2 * Self::HALF_CYCLE;
    pub const LEN: usize = Self::CYCLES * Self::CYCLE;

    /// Sample range of cycle `c` (0-based).
    pub fn cycle(c: usize) -> std::ops::Range<usize> {
        c * Self::CYCLE..(c + 1) * Self::CYCLE
    }
}

/// Label assignment plus stratified train/test tags, shuffled by `rng`.
fn assign_labels(n_instances: usize, anomaly_ratio: f64, rng: &mut Rng) -> Vec<(Label, Split)> {
    let n_anomaly = (n_instances as f64 * anomaly_ratio).round() as usize;
    let n_anomaly = n_anomaly.clamp(1, n_instances - 1);
    let mut out = Vec::with_capacity(n_instances);
    for (label, count) in [
        (Label::Normal, n_instances - n_anomaly),
        (Label::Anomaly, n_anomaly),
    ] {
        let n_train = ((count as f64 * TRAIN_FRACTION).round() as usize).clamp(1, count);
        out.extend((0..count).map(|i| (label, if i < n_train { Split::Train } else { Split::Test })));
    }
    out.shuffle(rng);
    out
}

fn check_common(n_instances: usize, anomaly_ratio: f64) -> Result<()> {
    if n_instances < 10 {
        return Err(Error::InvalidConfig(format!(
            "n_instances must be at least 10, got {n_instances}"
        )));
    }
    if !(anomaly_ratio > 0.0 && anomaly_ratio < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "anomaly_ratio must lie in (0, 1), got {anomaly_ratio}"
        )));
    }
    Ok(())
}

/// Three-channel CO2-scrubber-like cycles (bed temperature, CO2
/// concentration, flow rate). Anomalies are a leak starting at a random point
/// of the third cycle.
pub fn generate_steve_like(n_instances: usize, seed: u64, anomaly_ratio: f64) -> Result<Dataset> {
    check_common(n_instances, anomaly_ratio)?;
    let mut rng = seed::stream(seed, "steve-like");
    let plan = assign_labels(n_instances, anomaly_ratio, &mut rng);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let n = SteveLayout::LEN;
    let h = SteveLayout::HALF_CYCLE as f64;

    let instances = plan
        .into_iter()
        .enumerate()
        .map(|(i, (label, split))| {
            let temp_gain = rng.random_range(7.0..9.0);
            let heat_gain = rng.random_range(55.0..65.0);
            let tau = rng.random_range(15.0..25.0);
            let breakthrough = rng.random_range(0.6..0.8) * h;
            let flow = rng.random_range(0.95..1.05);
            let mut temp = vec![0.0; n];
            let mut co2 = vec![0.0; n];
            let mut rate = vec![0.0; n];
            for t in 0..n {
                let phase = (t % SteveLayout::CYCLE) as f64;
                if phase < h {
                    temp[t] = 20.0 + temp_gain * (1.0 - (-phase / tau).exp());
                    co2[t] = 0.2 + 2.0 / (1.0 + (-(phase - breakthrough) / 6.0).exp());
                    rate[t] = flow;
                } else {
                    let p = phase - h;
                    temp[t] = 20.0 + temp_gain + heat_gain * (1.0 - (-p / tau).exp());
                    co2[t] = 0.2 + 4.0 * (-p / (tau * 0.8)).exp();
                    rate[t] = 0.2 * flow;
                }
                temp[t] += 0.3 * noise.sample(&mut rng);
                co2[t] += 0.03 * noise.sample(&mut rng);
                rate[t] += 0.01 * noise.sample(&mut rng);
            }

            let mask = if label == Label::Anomaly {
                let cycle = SteveLayout::cycle(2);
                let start = rng.random_range(cycle.start..cycle.end - 20);
                let len = rng.random_range(20..=80).min(cycle.end - start);
                let severity = rng.random_range(0.2..0.4);
                for (k, t) in (start..start + len).enumerate() {
                    let ramp = ((k + 1) as f64 / 5.0).min(1.0);
                    rate[t] -= severity * ramp * rate[t].abs().max(0.2);
                    co2[t] += 0.8 * severity * ramp * 2.0;
                    temp[t] -= 10.0 * severity * ramp;
                }
                (0..n).map(|t| (start..start + len).contains(&t)).collect()
            } else {
                vec![false; n]
            };

            TimeSeries {
                id: format!("s{i:04}"),
                label,
                split,
                values: vec![temp, co2, rate],
                truth_mask: Some(mask),
            }
        })
        .collect();

    Ok(Dataset {
        name: "steve-like".into(),
        instances,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnivariateAnomaly {
    Point,
    Level,
    Shape,
}

/// One-channel seasonal sequences with point, level and shape anomalies.
pub fn generate_univariate(
    n_instances: usize,
    length: usize,
    seed: u64,
    anomaly_ratio: f64,
) -> Result<Dataset> {
    check_common(n_instances, anomaly_ratio)?;
    if length < 100 {
        return Err(Error::InvalidConfig(format!(
            "length must be at least 100, got {length}"
        )));
    }
    let mut rng = seed::stream(seed, "univariate");
    let plan = assign_labels(n_instances, anomaly_ratio, &mut rng);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let prefix = (length as f64 * ANOMALY_FREE_PREFIX_FRACTION).ceil() as usize;

    let instances = plan
        .into_iter()
        .enumerate()
        .map(|(i, (label, split))| {
            let level = rng.random_range(-0.5..0.5);
            let (a1, p1, ph1) = (
                rng.random_range(0.6..1.0),
                rng.random_range(60.0..140.0),
                rng.random_range(0.0..2.0 * PI),
            );
            let (a2, p2, ph2) = (
                rng.random_range(0.1..0.3),
                rng.random_range(15.0..35.0),
                rng.random_range(0.0..2.0 * PI),
            );
            let mut ar = 0.0;
            let mut x: Vec<f64> = (0..length)
                .map(|t| {
                    let t = t as f64;
                    ar = 0.5 * ar + 0.08 * noise.sample(&mut rng);
                    level + a1 * (2.0 * PI * t / p1 + ph1).sin() + a2 * (2.0 * PI * t / p2 + ph2).sin() + ar
                })
                .collect();

            let mask = if label == Label::Anomaly {
                let kind = match rng.random_range(0..3) {
                    0 => UnivariateAnomaly::Point,
                    1 => UnivariateAnomaly::Level,
                    _ => UnivariateAnomaly::Shape,
                };
                let width = match kind {
                    UnivariateAnomaly::Point => rng.random_range(4..=12),
                    _ => rng.random_range(40..=120),
                }
                .min(length - prefix);
                let start = rng.random_range(prefix..=length - width);
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                match kind {
                    UnivariateAnomaly::Point => {
                        let amp = rng.random_range(1.5..2.5);
                        for v in &mut x[start..start + width] {
                            let s = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                            *v += s * amp * rng.random_range(0.7..1.0);
                        }
                    }
                    UnivariateAnomaly::Level => {
                        let amp = rng.random_range(0.8..1.5);
                        for v in &mut x[start..start + width] {
                            *v += sign * amp;
                        }
                    }
                    UnivariateAnomaly::Shape => {
                        let amp = rng.random_range(0.5..1.0);
                        let period = rng.random_range(6.0..12.0);
                        for (k, v) in x[start..start + width].iter_mut().enumerate() {
                            *v += amp * (2.0 * PI * k as f64 / period).sin();
                        }
                    }
                }
                (0..length).map(|t| t >= start && t < start + width).collect()
            } else {
                vec![false; length]
            };

            TimeSeries {
                id: format!("u{i:04}"),
                label,
                split,
                values: vec![x],
                truth_mask: Some(mask),
            }
        })
        .collect();

    Ok(Dataset {
        name: "univariate-synthetic".into(),
        instances,
    })
}
