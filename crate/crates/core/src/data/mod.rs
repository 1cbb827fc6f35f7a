//! Labeled time series, datasets and their validation.

mod artifact;
mod io;
mod stats;
mod synth;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use artifact::{artifact_carriers, inject_spurious_artifact, ArtifactShape, SpuriousSpec};
pub use io::{load_dataset, read_dataset, save_dataset, write_dataset, DatasetHeader};
pub use stats::ChannelStats;
pub use synth::{generate_steve_like, generate_univariate, SteveLayout, ANOMALY_FREE_PREFIX_FRACTION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Anomaly,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Normal => 0,
            Label::Anomaly => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Label::Normal
        } else {
            Label::Anomaly
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// A labeled multichannel sequence. `values` holds `d` rows of `n` samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub id: String,
    pub label: Label,
    pub split: Split,
    pub values: Vec<Vec<f64>>,
    pub truth_mask: Option<Vec<bool>>,
}

impl TimeSeries {
    pub fn channels(&self) -> usize {
        self.values.len()
    }

    pub fn len(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of ground-truth anomalous time points.
    pub fn truth_count(&self) -> usize {
        self.truth_mask
            .as_ref()
            .map_or(0, |m| m.iter().filter(|&&b| b).count())
    }

    /// Values flattened channel-major (`d * n`), the layout the model consumes.
    pub fn flat(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.channels();
        if d == 0 {
            return Err(Error::instance(&self.id, "no channels"));
        }
        let n = self.len();
        if n == 0 {
            return Err(Error::instance(&self.id, "empty sequence"));
        }
        if let Some(c) = self.values.iter().position(|row| row.len() != n) {
            return Err(Error::instance(
                &self.id,
                format!("channel {c} has length {} but channel 0 has {n}", self.values[c].len()),
            ));
        }
        if self.values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::instance(&self.id, "non-finite value"));
        }
        if let Some(mask) = &self.truth_mask {
            if mask.len() != n {
                return Err(Error::instance(
                    &self.id,
                    format!("truth_mask length {} != sequence length {n}", mask.len()),
                ));
            }
            let any = mask.iter().any(|&b| b);
            match self.label {
                Label::Normal if any => {
                    return Err(Error::instance(&self.id, "normal instance with anomalous truth points"))
                }
                Label::Anomaly if !any => {
                    return Err(Error::instance(&self.id, "anomaly instance with empty truth_mask"))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub instances: Vec<TimeSeries>,
}

impl Dataset {
    pub fn channels(&self) -> usize {
        self.instances.first().map_or(0, TimeSeries::channels)
    }

    pub fn series_len(&self) -> usize {
        self.instances.first().map_or(0, TimeSeries::len)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &TimeSeries> + '_ {
        self.instances.iter().filter(move |s| s.split == split)
    }

    pub fn get(&self, id: &str) -> Option<&TimeSeries> {
        self.instances.iter().find(|s| s.id == id)
    }

    /// Checks every per-instance and cross-instance invariant.
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::with_capacity(self.instances.len());
        let (d, n) = (self.channels(), self.series_len());
        for s in &self.instances {
            s.validate()?;
            if s.channels() != d {
                return Err(Error::instance(
                    &s.id,
                    format!("has {} channels, dataset has {d}", s.channels()),
                ));
            }
            if s.len() != n {
                return Err(Error::instance(
                    &s.id,
                    format!("has length {}, dataset sequences have length {n}", s.len()),
                ));
            }
            if !ids.insert(s.id.as_str()) {
                return Err(Error::instance(&s.id, "duplicate id"));
            }
        }
        let has = |label| self.split(Split::Train).any(|s| s.label == label);
        if !has(Label::Normal) || !has(Label::Anomaly) {
            return Err(Error::InvalidDataset(
                "train split must contain both normal and anomaly instances".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn series(id: &str, label: Label, split: Split, values: Vec<Vec<f64>>) -> TimeSeries {
        let n = values[0].len();
        let truth_mask = match label {
            Label::Normal => Some(vec![false; n]),
            Label::Anomaly => Some((0..n).map(|t| t == n / 2).collect()),
        };
        TimeSeries {
            id: id.into(),
            label,
            split,
            values,
            truth_mask,
        }
    }

    pub fn tiny() -> Dataset {
        Dataset {
            name: "tiny".into(),
            instances: vec![
                series("a", Label::Normal, Split::Train, vec![vec![0.0, 1.0, 2.0]]),
                series("b", Label::Anomaly, Split::Train, vec![vec![1.0, 5.0, 2.0]]),
            ],
        }
    }
}
