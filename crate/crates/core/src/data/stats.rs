use serde::{Deserialize, Serialize};

use super::{Dataset, Split};

/// Per-channel mean and standard deviation of the train split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn from_train(ds: &Dataset) -> Self {
        let d = ds.channels();
        let mut mean = vec![0.0; d];
        let mut sq = vec![0.0; d];
        let mut count = 0usize;
        for s in ds.split(Split::Train) {
            count += s.len();
            for (c, row) in s.values.iter().enumerate() {
                mean[c] += row.iter().sum::<f64>();
            }
        }
        let count = count.max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= count);
        for s in ds.split(Split::Train) {
            for (c, row) in s.values.iter().enumerate() {
                sq[c] += row.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
            }
        }
        let std = sq
            .into_iter()
            .map(|v| {
                let s = (v / count).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        ChannelStats { mean, std }
    }

    /// Z-scores every channel of every instance with these statistics.
    pub fn normalize(&self, ds: &Dataset) -> Dataset {
        let mut out = ds.clone();
        for s in &mut out.instances {
            for (c, row) in s.values.iter_mut().enumerate() {
                for v in row.iter_mut() {
                    *v = (*v - self.mean[c]) / self.std[c];
                }
            }
        }
        out
    }
}
