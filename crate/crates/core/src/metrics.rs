//! Classification metrics and relevance accuracy of attribution masks.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};

/// Accuracy, precision, recall and F1 with `anomaly` as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `confusion[actual][predicted]`, index 0 = normal, 1 = anomaly.
    pub confusion: [[usize; 2]; 2],
}

impl ClassificationMetrics {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (Label, Label)>) -> Self {
        let mut confusion = [[0usize; 2]; 2];
        for (actual, predicted) in pairs {
            confusion[actual.index()][predicted.index()] += 1;
        }
        Self::from_confusion(confusion)
    }

    pub fn from_confusion(confusion: [[usize; 2]; 2]) -> Self {
        let [[tn, fp], [fn_, tp]] = confusion;
        let total = tn + fp + fn_ + tp;
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        ClassificationMetrics {
            accuracy: ratio(tp + tn, total),
            precision,
            recall,
            f1,
            confusion,
        }
    }
}

/// Number of top-ranked points compared against a ground truth of `truth`
/// points at tolerance `m_percent`: `floor((1 + M/100) * |G|)`, capped at `n`.
pub fn top_k_size(truth: usize, m_percent: f64, n: usize) -> usize {
    // (100 + M) * |G| is exact for integral M, so the floor is exact too.
    let k = ((100.0 + m_percent) * truth as f64 / 100.0).floor();
    (k.max(0.0) as usize).min(n)
}

/// Indices of the `k` largest mask values; ties go to the lower index.
pub fn top_k_indices(mask: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..mask.len()).collect();
    let order = |a: &usize, b: &usize| mask[*b].total_cmp(&mask[*a]).then(a.cmp(b));
    if k < idx.len() && k > 0 {
        idx.select_nth_unstable_by(k - 1, order);
    }
    idx.truncate(k);
    idx
}

/// Fraction of ground-truth anomalous points among the mask's top
/// `floor((1 + M/100) * |G|)` points.
pub fn relevance_accuracy(mask: &[f64], truth: &[bool], m_percent: f64) -> Result<f64> {
    if mask.len() != truth.len() {
        return Err(Error::Mismatch {
            what: "mask length vs truth length",
            expected: truth.len(),
            found: mask.len(),
        });
    }
    let g = truth.iter().filter(|&&b| b).count();
    if g == 0 {
        return Err(Error::EmptyGroundTruth);
    }
    let k = top_k_size(g, m_percent, mask.len());
    let hits = top_k_indices(mask, k).into_iter().filter(|&t| truth[t]).count();
    Ok(hits as f64 / g as f64)
}

pub const DEFAULT_RA_LEVELS: [f64; 4] = [20.0, 25.0, 30.0, 35.0];

/// Mean relevance accuracy per tolerance level, plus per-instance values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceReport {
    pub levels: Vec<f64>,
    /// Mean RA at each entry of `levels`.
    pub mean: Vec<f64>,
    /// Instance id -> RA at each entry of `levels`.
    pub per_instance: BTreeMap<String, Vec<f64>>,
}

impl RelevanceReport {
    /// Builds a report from `(id, mask, truth)` triples. Instances without
    /// ground-truth points are skipped.
    pub fn from_masks<'a>(
        items: impl IntoIterator<Item = (&'a str, &'a [f64], &'a [bool])>,
        levels: &[f64],
    ) -> Result<Self> {
        let mut per_instance = BTreeMap::new();
        for (id, mask, truth) in items {
            if !truth.iter().any(|&b| b) {
                continue;
            }
            let ra = levels
                .iter()
                .map(|&m| relevance_accuracy(mask, truth, m))
                .collect::<Result<Vec<_>>>()?;
            per_instance.insert(id.to_string(), ra);
        }
        if per_instance.is_empty() {
            return Err(Error::NoQualifyingInstances);
        }
        let count = per_instance.len() as f64;
        let mean = (0..levels.len())
            .map(|j| per_instance.values().map(|v| v[j]).sum::<f64>() / count)
            .collect();
        Ok(RelevanceReport {
            levels: levels.to_vec(),
            mean,
            per_instance,
        })
    }

    pub fn mean_at(&self, m_percent: f64) -> Option<f64> {
        self.levels
            .iter()
            .position(|&l| l == m_percent)
            .map(|i| self.mean[i])
    }
}
