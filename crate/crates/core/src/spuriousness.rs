//! Annotation state, cluster adjacency, spuriousness propagation and
//! enhancement-set selection.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clustering::ClusterReport;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Correct,
    Spurious,
}

impl Verdict {
    pub fn score(self) -> f64 {
        match self {
            Verdict::Correct => 0.0,
            Verdict::Spurious => 1.0,
        }
    }
}

/// Cluster labels and per-instance overrides. Serializes to the annotation
/// file format `{"clusters": {"<id>": "correct"}, "instances": {...}}`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationState {
    #[serde(default)]
    pub clusters: BTreeMap<usize, Verdict>,
    #[serde(default)]
    pub instances: BTreeMap<String, Verdict>,
}

impl AnnotationState {
    pub fn label_cluster(&mut self, cluster: usize, verdict: Verdict) {
        self.clusters.insert(cluster, verdict);
    }

    pub fn override_instance(&mut self, id: impl Into<String>, verdict: Verdict) {
        self.instances.insert(id.into(), verdict);
    }

    pub fn has_cluster_labels(&self) -> bool {
        !self.clusters.is_empty()
    }

    /// Checks every label refers to a cluster or clustered instance.
    pub fn validate(&self, report: &ClusterReport) -> Result<()> {
        if let Some(&c) = self.clusters.keys().find(|&&c| c >= report.k()) {
            return Err(Error::UnknownCluster(c));
        }
        if let Some(id) = self.instances.keys().find(|id| report.cluster_of(id).is_none()) {
            return Err(Error::UnknownInstance(id.clone()));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Symmetric cluster-similarity matrix with zero diagonal, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adjacency {
    pub k: usize,
    pub sigma: f64,
    pub weights: Vec<f64>,
}

impl Adjacency {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.k + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.k..(i + 1) * self.k]
    }

    pub fn neighbour_count(&self, i: usize) -> usize {
        self.row(i).iter().filter(|w| **w > 0.0).count()
    }
}

pub const MAX_NEIGHBOURS: usize = 5;

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let h = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[h] } else { 0.5 * (v[h - 1] + v[h]) })
}

/// Gaussian similarity between 2-D cluster centroids, bandwidth set to the
/// median nonzero centroid distance, kept only on edges where either end
/// lists the other among its `min(5, K-1)` nearest neighbours.
pub fn build_adjacency(centroids: &[[f64; 2]]) -> Adjacency {
    let k = centroids.len();
    let dist = |i: usize, j: usize| {
        let (a, b) = (centroids[i], centroids[j]);
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
    };
    let nonzero: Vec<f64> = (0..k)
        .flat_map(|i| ((i + 1)..k).map(move |j| (i, j)))
        .map(|(i, j)| dist(i, j))
        .filter(|d| *d > 0.0)
        .collect();
    let sigma = median(nonzero).unwrap_or(1.0);
    let kn = MAX_NEIGHBOURS.min(k.saturating_sub(1));
    let mut keep = vec![false; k * k];
    for i in 0..k {
        let mut others: Vec<usize> = (0..k).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| dist(i, a).total_cmp(&dist(i, b)).then(a.cmp(&b)));
        for &j in others.iter().take(kn) {
            keep[i * k + j] = true;
            keep[j * k + i] = true;
        }
    }
    let weights = (0..k * k)
        .map(|idx| {
            if keep[idx] {
                let d = dist(idx / k, idx % k);
                (-(d * d) / (sigma * sigma)).exp()
            } else {
                0.0
            }
        })
        .collect();
    Adjacency { k, sigma, weights }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropagationConfig {
    pub max_iter: usize,
    pub tolerance: f64,
    /// Starting score of unlabeled clusters.
    pub initial: f64,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        PropagationConfig {
            max_iter: 100,
            tolerance: 1e-6,
            initial: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpuriousnessState {
    /// Score per cluster id.
    pub scores: Vec<f64>,
    /// Whether a labeled cluster lies in the same connected component.
    pub reached: Vec<bool>,
    pub converged: bool,
    pub iterations: usize,
    pub adjacency: Adjacency,
}

/// Label propagation with labeled clusters clamped to 0 (correct) or
/// 1 (spurious) and unlabeled ones updated to the weighted mean of their
/// neighbours.
pub fn propagate(ann: &AnnotationState, adj: &Adjacency) -> Result<SpuriousnessState> {
    propagate_with(ann, adj, &PropagationConfig::default(), None, |_| {})
}

/// Propagation starting from `start` instead of the uniform initial score;
/// labeled clusters are still clamped.
pub fn propagate_from(
    ann: &AnnotationState,
    adj: &Adjacency,
    cfg: &PropagationConfig,
    start: &[f64],
) -> Result<SpuriousnessState> {
    if start.len() != adj.k {
        return Err(Error::Mismatch {
            what: "starting scores",
            expected: adj.k,
            found: start.len(),
        });
    }
    propagate_with(ann, adj, cfg, Some(start), |_| {})
}

/// Like [`propagate`], also returning the score vector after every sweep
/// (the first entry is the initialization).
pub fn propagate_traced(
    ann: &AnnotationState,
    adj: &Adjacency,
    cfg: &PropagationConfig,
) -> Result<(SpuriousnessState, Vec<Vec<f64>>)> {
    let mut trace = Vec::new();
    let state = propagate_with(ann, adj, cfg, None, |s| trace.push(s.to_vec()))?;
    Ok((state, trace))
}

fn propagate_with(
    ann: &AnnotationState,
    adj: &Adjacency,
    cfg: &PropagationConfig,
    start: Option<&[f64]>,
    mut observe: impl FnMut(&[f64]),
) -> Result<SpuriousnessState> {
    let k = adj.k;
    if !ann.has_cluster_labels() {
        return Err(Error::NoLabeledClusters);
    }
    if let Some(&c) = ann.clusters.keys().find(|&&c| c >= k) {
        return Err(Error::UnknownCluster(c));
    }
    let mut scores = start.map_or_else(|| vec![cfg.initial; k], <[f64]>::to_vec);
    let mut fixed = vec![false; k];
    for (&c, v) in &ann.clusters {
        scores[c] = v.score();
        fixed[c] = true;
    }
    observe(&scores);
    let free: Vec<usize> = (0..k).filter(|&i| !fixed[i]).collect();
    let (mut converged, mut iterations) = (free.is_empty(), 0);
    while !converged && iterations < cfg.max_iter {
        iterations += 1;
        let mut next = scores.clone();
        let mut delta: f64 = 0.0;
        for &i in &free {
            let row = adj.row(i);
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                let weighted: f64 = row.iter().zip(&scores).map(|(w, s)| w * s).sum();
                next[i] = (weighted / total).clamp(0.0, 1.0);
                delta = delta.max((next[i] - scores[i]).abs());
            }
        }
        scores = next;
        observe(&scores);
        converged = delta < cfg.tolerance;
    }

    let mut reached = fixed.clone();
    let mut queue: VecDeque<usize> = (0..k).filter(|&i| fixed[i]).collect();
    while let Some(i) = queue.pop_front() {
        for j in 0..k {
            if !reached[j] && adj.get(i, j) > 0.0 {
                reached[j] = true;
                queue.push_back(j);
            }
        }
    }
    Ok(SpuriousnessState {
        scores,
        reached,
        converged,
        iterations,
        adjacency: adj.clone(),
    })
}

/// Per-instance score: the cluster's propagated score, replaced by 0 or 1
/// where the instance has an override.
pub fn resolve_instance_scores(
    state: &SpuriousnessState,
    ann: &AnnotationState,
    report: &ClusterReport,
) -> Result<BTreeMap<String, f64>> {
    let mut scores = cluster_only_scores(state, report)?;
    for (id, v) in &ann.instances {
        match scores.get_mut(id) {
            Some(s) => *s = v.score(),
            None => return Err(Error::UnknownInstance(id.clone())),
        }
    }
    Ok(scores)
}

/// Per-instance score from cluster scores alone, ignoring overrides.
pub fn cluster_only_scores(state: &SpuriousnessState, report: &ClusterReport) -> Result<BTreeMap<String, f64>> {
    if state.scores.len() != report.k() {
        return Err(Error::Mismatch {
            what: "cluster scores",
            expected: report.k(),
            found: state.scores.len(),
        });
    }
    Ok(report
        .embedding
        .ids
        .iter()
        .zip(&report.assignment)
        .map(|(id, &c)| (id.clone(), state.scores[c]))
        .collect())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnhancementSets {
    /// Instances to corrupt where the model attends (score >= tau_s).
    pub spurious: BTreeSet<String>,
    /// Instances to reinforce where the model attends (score <= tau_c).
    pub correct: BTreeSet<String>,
}

impl EnhancementSets {
    pub fn is_empty(&self) -> bool {
        self.spurious.is_empty() && self.correct.is_empty()
    }

    pub fn len(&self) -> usize {
        self.spurious.len() + self.correct.len()
    }
}

pub fn select_enhancement_sets(scores: &BTreeMap<String, f64>, tau_s: f64, tau_c: f64) -> Result<EnhancementSets> {
    if !(0.0 <= tau_c && tau_c < tau_s && tau_s <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "thresholds need 0 <= tau_c < tau_s <= 1, got tau_c = {tau_c}, tau_s = {tau_s}"
        )));
    }
    let mut sets = EnhancementSets::default();
    for (id, &s) in scores {
        if s >= tau_s {
            sets.spurious.insert(id.clone());
        } else if s <= tau_c {
            sets.correct.insert(id.clone());
        }
    }
    Ok(sets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::Embedding2D;
    use proptest::prelude::*;

    fn path3() -> Adjacency {
        Adjacency {
            k: 3,
            sigma: 1.0,
            weights: vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0],
        }
    }

    fn labels(pairs: &[(usize, Verdict)]) -> AnnotationState {
        let mut a = AnnotationState::default();
        for &(c, v) in pairs {
            a.label_cluster(c, v);
        }
        a
    }

    #[test]
    fn path_midpoint_is_half() {
        let s = propagate(&labels(&[(0, Verdict::Correct), (2, Verdict::Spurious)]), &path3()).unwrap();
        assert_eq!(s.scores[0], 0.0);
        assert_eq!(s.scores[2], 1.0);
        assert!((s.scores[1] - 0.5).abs() < 1e-6);
        assert!(s.converged);
    }

    #[test]
    fn all_labeled_takes_no_sweeps() {
        let ann = labels(&[(0, Verdict::Correct), (1, Verdict::Spurious), (2, Verdict::Correct)]);
        let s = propagate(&ann, &path3()).unwrap();
        assert_eq!(s.scores, vec![0.0, 1.0, 0.0]);
        assert_eq!(s.iterations, 0);
    }

    #[test]
    fn single_label_floods_connected_graph() {
        let adj = build_adjacency(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.5], [3.0, 3.0]]);
        let s = propagate(&labels(&[(1, Verdict::Spurious)]), &adj).unwrap();
        assert!(s.scores.iter().all(|v| (v - 1.0).abs() < 1e-6), "{:?}", s.scores);
    }

    #[test]
    fn unlabeled_component_stays_at_half() {
        let adj = Adjacency {
            k: 4,
            sigma: 1.0,
            weights: vec![
                0.0, 1.0, 0.0, 0.0, //
                1.0, 0.0, 0.0, 0.0, //
                0.0, 0.0, 0.0, 1.0, //
                0.0, 0.0, 1.0, 0.0,
            ],
        };
        let s = propagate(&labels(&[(0, Verdict::Spurious)]), &adj).unwrap();
        assert_eq!(s.scores, vec![1.0, 1.0, 0.5, 0.5]);
        assert_eq!(s.reached, vec![true, true, false, false]);
    }

    #[test]
    fn propagation_needs_a_label() {
        assert!(matches!(
            propagate(&AnnotationState::default(), &path3()),
            Err(Error::NoLabeledClusters)
        ));
        assert!(matches!(
            propagate(&labels(&[(7, Verdict::Correct)]), &path3()),
            Err(Error::UnknownCluster(7))
        ));
    }

    #[test]
    fn adjacency_shapes() {
        let two = build_adjacency(&[[0.0, 0.0], [1.0, 1.0]]);
        assert!(two.get(0, 1) > 0.0 && two.get(0, 1) == two.get(1, 0));
        assert_eq!((two.get(0, 0), two.get(1, 1)), (0.0, 0.0));
        let same = build_adjacency(&[[1.0, 1.0], [1.0, 1.0], [1.0, 1.0]]);
        assert_eq!(same.sigma, 1.0);
        assert_eq!(same.get(0, 2), 1.0);
    }

    fn report(ids: &[&str], assignment: &[usize], k: usize) -> ClusterReport {
        ClusterReport {
            alpha: 0.5,
            embedding: Embedding2D {
                ids: ids.iter().map(|s| s.to_string()).collect(),
                points: vec![[0.0, 0.0]; ids.len()],
            },
            assignment: assignment.to_vec(),
            elbow_sse: Vec::new(),
            clusters: (0..k)
                .map(|c| crate::clustering::BehaviorCluster {
                    cluster_id: c,
                    member_ids: Vec::new(),
                    centroid_2d: [0.0, 0.0],
                    summary_sequence: Vec::new(),
                    summary_attribution: Vec::new(),
                    accuracy: 1.0,
                    mean_confidence: 1.0,
                })
                .collect(),
        }
    }

    #[test]
    fn overrides_replace_inherited_scores() {
        let r = report(&["a", "b", "c"], &[0, 0, 1], 2);
        let mut ann = labels(&[(0, Verdict::Spurious), (1, Verdict::Correct)]);
        let adj = build_adjacency(&[[0.0, 0.0], [1.0, 0.0]]);
        let state = propagate(&ann, &adj).unwrap();
        let plain = resolve_instance_scores(&state, &ann, &r).unwrap();
        assert_eq!(plain, cluster_only_scores(&state, &r).unwrap());
        ann.override_instance("a", Verdict::Correct);
        let s = resolve_instance_scores(&state, &ann, &r).unwrap();
        assert_eq!((s["a"], s["b"], s["c"]), (0.0, 1.0, 0.0));
        ann.override_instance("zzz", Verdict::Correct);
        assert!(matches!(resolve_instance_scores(&state, &ann, &r), Err(Error::UnknownInstance(_))));
        assert!(ann.validate(&r).is_err());
    }

    #[test]
    fn selection_thresholds() {
        let scores: BTreeMap<String, f64> = [("a", 0.9), ("b", 0.5), ("c", 0.1)]
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect();
        let sets = select_enhancement_sets(&scores, 0.7, 0.3).unwrap();
        assert_eq!(sets.spurious.iter().collect::<Vec<_>>(), vec!["a"]);
        assert_eq!(sets.correct.iter().collect::<Vec<_>>(), vec!["c"]);
        let half: BTreeMap<String, f64> = scores.keys().map(|k| (k.clone(), 0.5)).collect();
        assert!(select_enhancement_sets(&half, 0.7, 0.3).unwrap().is_empty());
        assert!(select_enhancement_sets(&scores, 0.3, 0.7).is_err());
    }

    #[test]
    fn annotation_file_format() {
        let mut ann = labels(&[(3, Verdict::Spurious)]);
        ann.override_instance("u0001", Verdict::Correct);
        let text = serde_json::to_string(&ann).unwrap();
        assert_eq!(text, r#"{"clusters":{"3":"spurious"},"instances":{"u0001":"correct"}}"#);
        let back: AnnotationState = serde_json::from_str(r#"{"clusters":{"3":"spurious"}}"#).unwrap();
        assert_eq!(back.clusters, ann.clusters);
    }

    fn layout() -> impl Strategy<Value = Vec<[f64; 2]>> {
        prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0).prop_map(|(x, y)| [x, y]), 2..16)
    }

    proptest! {
        #[test]
        fn adjacency_is_symmetric_and_sparse(pts in layout()) {
            let a = build_adjacency(&pts);
            let kn = MAX_NEIGHBOURS.min(a.k - 1);
            for i in 0..a.k {
                prop_assert_eq!(a.get(i, i), 0.0);
                prop_assert!(a.neighbour_count(i) >= kn.min(1));
                for j in 0..a.k {
                    prop_assert_eq!(a.get(i, j), a.get(j, i));
                    prop_assert!((0.0..=1.0).contains(&a.get(i, j)));
                }
                // A node keeps its own k_n picks plus nodes that picked it.
                if a.k <= 2 * kn + 1 {
                    prop_assert!(a.neighbour_count(i) <= 2 * kn);
                }
            }
        }

        #[test]
        fn labels_are_clamped_and_scores_bounded(
            pts in layout(),
            raw in prop::collection::vec((0usize..16, any::<bool>()), 1..5),
        ) {
            let adj = build_adjacency(&pts);
            let mut ann = AnnotationState::default();
            for (c, s) in raw {
                ann.label_cluster(c % adj.k, if s { Verdict::Spurious } else { Verdict::Correct });
            }
            let (state, trace) = propagate_traced(&ann, &adj, &PropagationConfig::default()).unwrap();
            for sweep in &trace {
                for (&c, v) in &ann.clusters {
                    prop_assert_eq!(sweep[c], v.score());
                }
                prop_assert!(sweep.iter().all(|s| (0.0..=1.0).contains(s)));
            }
            // Restarting from the fixpoint moves nothing beyond tolerance.
            if state.converged {
                let again = propagate_from(&ann, &adj, &PropagationConfig::default(), &state.scores).unwrap();
                prop_assert!(again.iterations <= 1);
                for (a, b) in again.scores.iter().zip(&state.scores) {
                    prop_assert!((a - b).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn flipping_a_label_to_spurious_never_lowers_scores(
            pts in layout(),
            target in 0usize..16,
            other in 0usize..16,
        ) {
            let adj = build_adjacency(&pts);
            let (t, o) = (target % adj.k, other % adj.k);
            prop_assume!(t != o);
            let mut low = AnnotationState::default();
            low.label_cluster(o, Verdict::Spurious);
            low.label_cluster(t, Verdict::Correct);
            let mut high = low.clone();
            high.label_cluster(t, Verdict::Spurious);
            let (a, b) = (propagate(&low, &adj).unwrap(), propagate(&high, &adj).unwrap());
            for i in 0..adj.k {
                prop_assert!(b.scores[i] >= a.scores[i] - 1e-9);
            }
        }

        #[test]
        fn selection_is_disjoint(scores in prop::collection::vec(0.0f64..=1.0, 0..40)) {
            let m: BTreeMap<String, f64> = scores.iter().enumerate().map(|(i, s)| (i.to_string(), *s)).collect();
            let sets = select_enhancement_sets(&m, 0.7, 0.3).unwrap();
            prop_assert!(sets.spurious.is_disjoint(&sets.correct));
            prop_assert!(sets.len() <= m.len());
        }
    }
}
