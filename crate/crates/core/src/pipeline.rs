//! The analysis stage: model outputs, the anomaly-related subset, distance
//! matrices, embedding and clusters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::clustering::{
    choose_k_elbow, embed_2d, kmeans, summarize_clusters, ClusterInputs, ClusterReport, SummaryMode,
};
use crate::data::{Dataset, Label, Split, TimeSeries};
use crate::error::{Error, Result};
use crate::model::{AttributionMask, FcnModel, PredictionResult};
use crate::oracle::{oracle_label_instance, OracleConfig};
use crate::similarity::{combine, cosine_matrix, dtw_matrix, DistanceMatrix};
use crate::spuriousness::Verdict;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub alpha: f64,
    pub k_max: usize,
    /// Skip the elbow rule and use this many clusters.
    #[serde(default)]
    pub k: Option<usize>,
    /// Sakoe-Chiba half-width for DTW; `None` is unconstrained.
    #[serde(default)]
    pub dtw_window: Option<usize>,
    #[serde(default)]
    pub summary: SummaryMode,
    pub seed: u64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            alpha: 0.5,
            k_max: 10,
            k: None,
            dtw_window: None,
            summary: SummaryMode::Mean,
            seed: 0,
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if self.k_max < 3 && self.k.is_none() {
            return Err(Error::InvalidConfig(format!("k_max must be at least 3, got {}", self.k_max)));
        }
        if self.k == Some(0) {
            return Err(Error::InvalidConfig("k must be positive".into()));
        }
        Ok(())
    }
}

/// Train instances labeled or predicted anomalous, in dataset order.
pub fn anomaly_related<'a>(ds: &'a Dataset, predictions: &BTreeMap<String, PredictionResult>) -> Vec<&'a TimeSeries> {
    ds.split(Split::Train)
        .filter(|x| x.label == Label::Anomaly || predictions.get(&x.id).is_some_and(|p| p.predicted == Label::Anomaly))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub config: AnalysisConfig,
    /// Model outputs for every train instance.
    pub predictions: BTreeMap<String, PredictionResult>,
    /// Attribution masks for every train instance.
    pub masks: BTreeMap<String, AttributionMask>,
    pub dtw: DistanceMatrix,
    pub cosine: DistanceMatrix,
    pub aggregated: DistanceMatrix,
    pub report: ClusterReport,
}

impl Analysis {
    /// Ids of the clustered instances, in matrix order.
    pub fn clustered_ids(&self) -> &[String] {
        &self.aggregated.ids
    }

    /// Reruns embedding and clustering at another `alpha`, reusing the
    /// distance matrices.
    pub fn with_alpha(&self, ds: &Dataset, alpha: f64) -> Result<Analysis> {
        let config = AnalysisConfig {
            alpha,
            ..self.config.clone()
        };
        cluster_stage(ds, config, self.predictions.clone(), self.masks.clone(), self.dtw.clone(), self.cosine.clone())
    }

    /// Oracle verdict of every clustered instance.
    pub fn oracle_verdicts(&self, ds: &Dataset, cfg: &OracleConfig) -> Result<BTreeMap<String, Verdict>> {
        self.clustered_ids()
            .iter()
            .map(|id| {
                let x = ds.get(id).ok_or_else(|| Error::UnknownInstance(id.clone()))?;
                let v = oracle_label_instance(&self.masks[id].weights, x.truth_mask.as_deref(), cfg)?;
                Ok((id.clone(), v))
            })
            .collect()
    }
}

/// Explains every train instance and builds the analysis. A DTW matrix
/// computed earlier for the same instances can be passed in to skip the
/// most expensive step.
pub fn analyze(model: &FcnModel, ds: &Dataset, config: &AnalysisConfig, cached_dtw: Option<DistanceMatrix>) -> Result<Analysis> {
    config.validate()?;
    let train: Vec<&TimeSeries> = ds.split(Split::Train).collect();
    let explained = model.explain_many(&train)?;
    let mut predictions = BTreeMap::new();
    let mut masks = BTreeMap::new();
    for (x, (m, p)) in train.iter().zip(explained) {
        predictions.insert(x.id.clone(), p);
        masks.insert(x.id.clone(), m);
    }
    let scope = anomaly_related(ds, &predictions);
    if scope.is_empty() {
        return Err(Error::InvalidDataset("no anomaly-related train instances to cluster".into()));
    }
    let ids: Vec<String> = scope.iter().map(|x| x.id.clone()).collect();
    let dtw = match cached_dtw {
        Some(d) if d.ids == ids => d,
        Some(_) => return Err(Error::InvalidConfig("cached DTW matrix covers different instances".into())),
        None => dtw_matrix(&scope, config.dtw_window)?,
    };
    let scoped_masks: Vec<AttributionMask> = ids.iter().map(|id| masks[id].clone()).collect();
    let cosine = cosine_matrix(&scoped_masks)?;
    cluster_stage(ds, config.clone(), predictions, masks, dtw, cosine)
}

fn cluster_stage(
    ds: &Dataset,
    config: AnalysisConfig,
    predictions: BTreeMap<String, PredictionResult>,
    masks: BTreeMap<String, AttributionMask>,
    dtw: DistanceMatrix,
    cosine: DistanceMatrix,
) -> Result<Analysis> {
    config.validate()?;
    let aggregated = combine(&dtw, &cosine, config.alpha)?;
    let embedding = embed_2d(&aggregated)?;
    let (k, elbow_sse) = match config.k {
        Some(k) => (k.min(embedding.points.len()), Vec::new()),
        None => {
            let choice = choose_k_elbow(&embedding, config.k_max.min(embedding.points.len()), config.seed)?;
            (choice.k, choice.sse)
        }
    };
    let km = kmeans(&embedding.points, k, config.seed)?;
    let instances: Vec<&TimeSeries> = aggregated
        .ids
        .iter()
        .map(|id| ds.get(id).ok_or_else(|| Error::UnknownInstance(id.clone())))
        .collect::<Result<_>>()?;
    let scoped_masks: Vec<AttributionMask> = aggregated.ids.iter().map(|id| masks[id].clone()).collect();
    let scoped_preds: Vec<PredictionResult> = aggregated.ids.iter().map(|id| predictions[id].clone()).collect();
    let clusters = summarize_clusters(
        &ClusterInputs {
            instances: &instances,
            masks: &scoped_masks,
            predictions: &scoped_preds,
            embedding: &embedding,
            assignment: &km.assignment,
        },
        config.summary,
        Some(&aggregated),
    )?;
    let report = ClusterReport {
        alpha: config.alpha,
        embedding,
        assignment: km.assignment,
        elbow_sse,
        clusters,
    };
    Ok(Analysis {
        config,
        predictions,
        masks,
        dtw,
        cosine,
        aggregated,
        report,
    })
}
