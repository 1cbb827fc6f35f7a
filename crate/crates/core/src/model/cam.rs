use serde::{Deserialize, Serialize};

use super::network::{FeatureMaps, PredictionResult};
use super::FcnModel;
use crate::data::TimeSeries;
use crate::error::{Error, Result};

/// Per-timestep importance in `[0, 1]` for one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMask {
    pub instance_id: String,
    pub weights: Vec<f64>,
}

impl AttributionMask {
    pub fn new(instance_id: impl Into<String>, weights: Vec<f64>) -> Result<Self> {
        let mask = AttributionMask {
            instance_id: instance_id.into(),
            weights,
        };
        mask.validate()?;
        Ok(mask)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::instance(&self.instance_id, "attribution outside [0, 1]"));
        }
        Ok(())
    }

    /// Sum of weights.
    pub fn mass(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// What a classifier must expose for class activation maps: full-resolution
/// last-layer feature maps and the linear head that consumes their averages.
pub trait AttributionModel: Sync {
    fn forward(&self, x: &TimeSeries) -> Result<(FeatureMaps, PredictionResult)>;
    fn class_weights(&self, class: usize) -> &[f64];
}

impl AttributionModel for FcnModel {
    fn forward(&self, x: &TimeSeries) -> Result<(FeatureMaps, PredictionResult)> {
        FcnModel::forward(self, x)
    }

    fn class_weights(&self, class: usize) -> &[f64] {
        FcnModel::class_weights(self, class)
    }
}

/// Min-max normalizes a raw activation map to `[0, 1]`; constant maps become
/// 0.5 everywhere.
pub fn normalize_cam(raw: &[f64]) -> Vec<f64> {
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > f64::EPSILON * hi.abs().max(lo.abs()).max(1.0)) {
        return vec![0.5; raw.len()];
    }
    raw.iter().map(|v| ((v - lo) / span).clamp(0.0, 1.0)).collect()
}

/// Class activation map for the predicted class, plus the prediction itself.
pub fn compute_cam<M: AttributionModel + ?Sized>(
    model: &M,
    x: &TimeSeries,
) -> Result<(AttributionMask, PredictionResult)> {
    let (maps, pred) = model.forward(x)?;
    let w = model.class_weights(pred.predicted.index());
    let mut raw = vec![0.0; maps.len];
    for (c, &wc) in w.iter().enumerate() {
        for (r, v) in raw.iter_mut().zip(maps.row(c)) {
            *r += wc * v;
        }
    }
    Ok((
        AttributionMask {
            instance_id: x.id.clone(),
            weights: normalize_cam(&raw),
        },
        pred,
    ))
}

impl FcnModel {
    /// CAM and prediction for every instance, in input order.
    pub fn explain_many(&self, xs: &[&TimeSeries]) -> Result<Vec<(AttributionMask, PredictionResult)>> {
        crate::par::map_slice(xs, |x| compute_cam(self, x))
            .into_iter()
            .collect()
    }
}
