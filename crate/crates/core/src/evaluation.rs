//! Classification and attribution quality of a model on one split.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split, TimeSeries};
use crate::error::Result;
use crate::metrics::{ClassificationMetrics, RelevanceReport, DEFAULT_RA_LEVELS};
use crate::model::FcnModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub classification: ClassificationMetrics,
    /// Relevance accuracy over instances with ground-truth anomaly points.
    pub relevance: RelevanceReport,
}

impl Evaluation {
    pub fn f1(&self) -> f64 {
        self.classification.f1
    }

    /// Mean RA at `m_percent`, or NaN when that level was not computed.
    pub fn ra(&self, m_percent: f64) -> f64 {
        self.relevance.mean_at(m_percent).unwrap_or(f64::NAN)
    }
}

pub fn evaluate_split(model: &FcnModel, ds: &Dataset, split: Split, levels: &[f64]) -> Result<Evaluation> {
    let xs: Vec<&TimeSeries> = ds.split(split).collect();
    let explained = model.explain_many(&xs)?;
    let classification = ClassificationMetrics::from_pairs(xs.iter().zip(&explained).map(|(x, (_, p))| (x.label, p.predicted)));
    let relevance = RelevanceReport::from_masks(
        xs.iter().zip(&explained).filter_map(|(x, (m, _))| {
            x.truth_mask
                .as_deref()
                .map(|t| (x.id.as_str(), m.weights.as_slice(), t))
        }),
        levels,
    )?;
    Ok(Evaluation {
        classification,
        relevance,
    })
}

/// Test-split evaluation at the default RA levels.
pub fn evaluate_test(model: &FcnModel, ds: &Dataset) -> Result<Evaluation> {
    evaluate_split(model, ds, Split::Test, &DEFAULT_RA_LEVELS)
}
