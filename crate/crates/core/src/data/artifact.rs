//! Controlled spurious shortcuts: a fixed-position artifact stamped onto a
//! fraction of the anomalous training sequences only.

use std::f64::consts::PI;
use std::ops::Range;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Dataset, Label, Split};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArtifactShape {
    Offset,
    Spike,
    SineBurst,
}

impl ArtifactShape {
    /// Artifact value at offset `k` of a window of length `len`, unit amplitude.
    fn unit(self, k: usize, len: usize) -> f64 {
        match self {
            ArtifactShape::Offset => 1.0,
            ArtifactShape::Spike => {
                let half = len as f64 / 2.0;
                let centre = (len as f64 - 1.0) / 2.0;
                (1.0 - (k as f64 - centre).abs() / half).max(0.0)
            }
            ArtifactShape::SineBurst => (2.0 * PI * k as f64 / 10.0).sin(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpuriousSpec {
    pub window: Range<usize>,
    pub shape: ArtifactShape,
    pub amplitude: f64,
    /// Fraction of anomalous training instances that receive the artifact.
    pub train_correlation: f64,
}

impl SpuriousSpec {
    fn validate(&self, ds: &Dataset) -> Result<()> {
        if !(0.0..=1.0).contains(&self.train_correlation) {
            return Err(Error::InvalidConfig(format!(
                "train_correlation must lie in [0, 1], got {}",
                self.train_correlation
            )));
        }
        if self.window.is_empty() || self.window.end > ds.series_len() {
            return Err(Error::InvalidConfig(format!(
                "artifact window {:?} is empty or exceeds sequence length {}",
                self.window,
                ds.series_len()
            )));
        }
        for s in &ds.instances {
            if let Some(mask) = &s.truth_mask {
                if mask[self.window.clone()].iter().any(|&b| b) {
                    return Err(Error::instance(
                        &s.id,
                        format!("artifact window {:?} overlaps the ground-truth anomaly", self.window),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Indices of the instances that receive the artifact under `spec` and `seed`.
pub fn artifact_carriers(ds: &Dataset, spec: &SpuriousSpec, seed: u64) -> Vec<usize> {
    let mut candidates: Vec<usize> = ds
        .instances
        .iter()
        .enumerate()
        .filter(|(_, s)| s.split == Split::Train && s.label == Label::Anomaly)
        .map(|(i, _)| i)
        .collect();
    let count = (candidates.len() as f64 * spec.train_correlation).round() as usize;
    candidates.shuffle(&mut seed::stream(seed, "artifact"));
    candidates.truncate(count);
    candidates.sort_unstable();
    candidates
}

pub fn inject_spurious_artifact(ds: &Dataset, spec: &SpuriousSpec, seed: u64) -> Result<Dataset> {
    spec.validate(ds)?;
    let mut out = ds.clone();
    let len = spec.window.len();
    for i in artifact_carriers(ds, spec, seed) {
        for row in &mut out.instances[i].values {
            for (k, t) in spec.window.clone().enumerate() {
                row[t] += spec.amplitude * spec.shape.unit(k, len);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_univariate;

    fn spec(corr: f64) -> SpuriousSpec {
        SpuriousSpec {
            window: 2..22,
            shape: ArtifactShape::SineBurst,
            amplitude: 1.5,
            train_correlation: corr,
        }
    }

    fn modified(a: &Dataset, b: &Dataset) -> Vec<usize> {
        (0..a.instances.len())
            .filter(|&i| a.instances[i].values != b.instances[i].values)
            .collect()
    }

    #[test]
    fn full_correlation_hits_every_train_anomaly_and_no_test_instance() {
        let ds = generate_univariate(100, 400, 1, 0.4).unwrap();
        let out = inject_spurious_artifact(&ds, &spec(1.0), 3).unwrap();
        for i in modified(&ds, &out) {
            let s = &ds.instances[i];
            assert_eq!((s.split, s.label), (Split::Train, Label::Anomaly));
        }
        let train_anomalies = ds
            .split(Split::Train)
            .filter(|s| s.label == Label::Anomaly)
            .count();
        assert_eq!(modified(&ds, &out).len(), train_anomalies);
        for (a, b) in ds.instances.iter().zip(&out.instances) {
            assert_eq!(a.truth_mask, b.truth_mask);
        }
    }

    #[test]
    fn zero_correlation_is_identity() {
        let ds = generate_univariate(60, 200, 2, 0.4).unwrap();
        assert_eq!(inject_spurious_artifact(&ds, &spec(0.0), 3).unwrap(), ds);
    }

    #[test]
    fn ninety_percent_of_two_hundred() {
        // 1000 instances at 40% anomalies, 70% of them in train: 280 train
        // anomalies; select a dataset with exactly 200 by trimming.
        let mut ds = generate_univariate(1000, 200, 4, 0.4).unwrap();
        let mut kept = 0;
        ds.instances.retain(|s| {
            if s.split == Split::Train && s.label == Label::Anomaly {
                kept += 1;
                kept <= 200
            } else {
                true
            }
        });
        let out = inject_spurious_artifact(&ds, &spec(0.9), 8).unwrap();
        assert_eq!(modified(&ds, &out).len(), 180);
    }

    #[test]
    fn overlapping_window_names_instance() {
        let ds = generate_univariate(60, 200, 2, 0.4).unwrap();
        let bad = SpuriousSpec {
            window: 0..200,
            ..spec(1.0)
        };
        let err = inject_spurious_artifact(&ds, &bad, 1).unwrap_err();
        assert!(matches!(err, Error::InvalidInstance { .. }), "{err}");
    }
}
