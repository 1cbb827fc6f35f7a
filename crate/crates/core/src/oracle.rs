//! Ground-truth annotator that stands in for a human: judges attribution
//! masks by their overlap with the true anomaly and works through clusters
//! under an action budget.

use std::collections::BTreeMap;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::clustering::ClusterReport;
use crate::error::{Error, Result};
use crate::metrics::relevance_accuracy;
use crate::seed;
use crate::spuriousness::{
    build_adjacency, propagate, resolve_instance_scores, AnnotationState, SpuriousnessState, Verdict,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    /// Tolerance level for the relevance test, in percent.
    pub overlap_m: f64,
    /// Minimum relevance accuracy for an instance to count as correct.
    pub correct_threshold: f64,
    /// A cluster is correct when more than this fraction of members is.
    pub cluster_vote: f64,
    /// Cluster annotations allowed.
    pub budget: usize,
    /// Instance overrides allowed after the cluster pass.
    #[serde(default)]
    pub instance_budget: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            overlap_m: 20.0,
            correct_threshold: 0.5,
            cluster_vote: 0.5,
            budget: 15,
            instance_budget: 0,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("correct_threshold", self.correct_threshold), ("cluster_vote", self.cluster_vote)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.overlap_m >= 0.0) {
            return Err(Error::InvalidConfig(format!("overlap_m must be non-negative, got {}", self.overlap_m)));
        }
        Ok(())
    }
}

/// Correct iff the mask's relevance accuracy reaches the threshold. An
/// instance with no true anomaly points (a false alarm) has nothing the
/// model could rightly attend to and is judged spurious.
pub fn oracle_label_instance(mask: &[f64], truth: Option<&[bool]>, cfg: &OracleConfig) -> Result<Verdict> {
    match truth {
        Some(t) if t.iter().any(|&b| b) => {
            let ra = relevance_accuracy(mask, t, cfg.overlap_m)?;
            Ok(if ra >= cfg.correct_threshold {
                Verdict::Correct
            } else {
                Verdict::Spurious
            })
        }
        _ => Ok(Verdict::Spurious),
    }
}

/// Fraction of member verdicts that are correct.
pub fn correct_fraction<'a>(members: impl IntoIterator<Item = &'a Verdict>) -> f64 {
    let (mut total, mut good) = (0usize, 0usize);
    for v in members {
        total += 1;
        good += usize::from(*v == Verdict::Correct);
    }
    if total == 0 {
        0.0
    } else {
        good as f64 / total as f64
    }
}

/// Majority vote; a tie is judged spurious.
pub fn oracle_label_cluster<'a>(members: impl IntoIterator<Item = &'a Verdict>, cfg: &OracleConfig) -> Verdict {
    if correct_fraction(members) > cfg.cluster_vote {
        Verdict::Correct
    } else {
        Verdict::Spurious
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "target", rename_all = "lowercase")]
pub enum Target {
    Cluster { id: usize },
    Instance { id: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleAction {
    /// Position in the session, starting at 0.
    pub step: usize,
    #[serde(flatten)]
    pub target: Target,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSession {
    pub annotations: AnnotationState,
    pub log: Vec<OracleAction>,
    pub state: SpuriousnessState,
    /// Times propagation ran; once per cluster action.
    pub propagations: usize,
}

fn cluster_verdicts(
    report: &ClusterReport,
    verdicts: &BTreeMap<String, Verdict>,
    cfg: &OracleConfig,
) -> Result<Vec<(Verdict, f64)>> {
    report
        .clusters
        .iter()
        .map(|c| {
            let members = c
                .member_ids
                .iter()
                .map(|id| verdicts.get(id).ok_or_else(|| Error::UnknownInstance(id.clone())))
                .collect::<Result<Vec<_>>>()?;
            Ok((oracle_label_cluster(members.iter().copied(), cfg), correct_fraction(members)))
        })
        .collect()
}

/// Annotates clusters under `cfg.budget`, then overrides up to
/// `cfg.instance_budget` instances whose resolved score contradicts their
/// own verdict.
///
/// The first actions label the cluster with the highest correct fraction
/// among correct ones and the lowest among spurious ones. Each later action
/// labels the unlabeled cluster with the highest propagated spuriousness.
/// Propagation reruns after every cluster action.
pub fn run_oracle_session(
    report: &ClusterReport,
    verdicts: &BTreeMap<String, Verdict>,
    cfg: &OracleConfig,
) -> Result<OracleSession> {
    cfg.validate()?;
    let k = report.k();
    if k == 0 {
        return Err(Error::InvalidConfig("no clusters to annotate".into()));
    }
    if cfg.budget == 0 {
        return Err(Error::NoLabeledClusters);
    }
    let votes = cluster_verdicts(report, verdicts, cfg)?;
    let centroids: Vec<[f64; 2]> = report.clusters.iter().map(|c| c.centroid_2d).collect();
    let adjacency = build_adjacency(&centroids);

    let mut ann = AnnotationState::default();
    let mut log = Vec::new();
    let mut state: Option<SpuriousnessState> = None;
    let mut propagations = 0;
    let mut act = |c: usize, ann: &mut AnnotationState, log: &mut Vec<OracleAction>| -> Result<SpuriousnessState> {
        ann.label_cluster(c, votes[c].0);
        log.push(OracleAction {
            step: log.len(),
            target: Target::Cluster { id: c },
            verdict: votes[c].0,
        });
        propagations += 1;
        propagate(ann, &adjacency)
    };

    let pick = |want: Verdict, better: fn(f64, f64) -> bool| {
        (0..k)
            .filter(|&c| votes[c].0 == want)
            .fold(None, |best: Option<usize>, c| match best {
                Some(b) if !better(votes[c].1, votes[b].1) => Some(b),
                _ => Some(c),
            })
    };
    let seeds = [
        pick(Verdict::Correct, |a, b| a > b),
        pick(Verdict::Spurious, |a, b| a < b),
    ];
    for c in seeds.into_iter().flatten() {
        if log.len() < cfg.budget {
            state = Some(act(c, &mut ann, &mut log)?);
        }
    }
    while log.len() < cfg.budget && ann.clusters.len() < k {
        let scores = &state.as_ref().expect("seeded").scores;
        let next = (0..k)
            .filter(|c| !ann.clusters.contains_key(c))
            .fold(None, |best: Option<usize>, c| match best {
                Some(b) if scores[c] <= scores[b] => Some(b),
                _ => Some(c),
            })
            .expect("an unlabeled cluster remains");
        state = Some(act(next, &mut ann, &mut log)?);
    }
    let state = state.expect("budget allows at least one action");

    if cfg.instance_budget > 0 {
        let resolved = resolve_instance_scores(&state, &ann, report)?;
        let mut candidates: Vec<(f64, &String, Verdict)> = resolved
            .iter()
            .filter_map(|(id, &s)| {
                let v = *verdicts.get(id)?;
                let gap = (s - v.score()).abs();
                (gap >= 0.5).then_some((gap, id, v))
            })
            .collect();
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        for (_, id, v) in candidates.into_iter().take(cfg.instance_budget) {
            ann.override_instance(id.clone(), v);
            log.push(OracleAction {
                step: log.len(),
                target: Target::Instance { id: id.clone() },
                verdict: v,
            });
        }
    }

    Ok(OracleSession {
        annotations: ann,
        log,
        state,
        propagations,
    })
}

/// Labels `budget` uniformly chosen clustered instances individually.
pub fn random_instance_annotation(
    report: &ClusterReport,
    verdicts: &BTreeMap<String, Verdict>,
    budget: usize,
    seed_value: u64,
) -> Result<AnnotationState> {
    let ids = &report.embedding.ids;
    let mut rng = seed::stream(seed_value, "random-instance-annotation");
    let mut ann = AnnotationState::default();
    for i in index::sample(&mut rng, ids.len(), budget.min(ids.len())) {
        let v = *verdicts.get(&ids[i]).ok_or_else(|| Error::UnknownInstance(ids[i].clone()))?;
        ann.override_instance(ids[i].clone(), v);
    }
    Ok(ann)
}

/// Number of clustered instances that receive a resolved score: members of
/// clusters connected to a labeled cluster, plus individually labeled ones.
pub fn covered_instances(report: &ClusterReport, ann: &AnnotationState, state: Option<&SpuriousnessState>) -> usize {
    report
        .embedding
        .ids
        .iter()
        .zip(&report.assignment)
        .filter(|(id, &c)| ann.instances.contains_key(*id) || state.is_some_and(|s| s.reached[c]))
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::{BehaviorCluster, Embedding2D};

    #[test]
    fn instance_rule() {
        let cfg = OracleConfig::default();
        let truth = [false, false, true, true, false, false, false, false, false, false];
        let hit = [0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let miss = [1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(oracle_label_instance(&hit, Some(&truth), &cfg).unwrap(), Verdict::Correct);
        assert_eq!(oracle_label_instance(&miss, Some(&truth), &cfg).unwrap(), Verdict::Spurious);
        // k = floor(1.2 * 2) = 2 top points; one of them true gives RA = 0.5.
        let half = [0.0, 0.0, 1.0, 0.0, 0.0, 0.9, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(oracle_label_instance(&half, Some(&truth), &cfg).unwrap(), Verdict::Correct);
        assert_eq!(oracle_label_instance(&hit, None, &cfg).unwrap(), Verdict::Spurious);
    }

    #[test]
    fn cluster_vote() {
        use Verdict::*;
        let cfg = OracleConfig::default();
        assert_eq!(oracle_label_cluster(&[Correct, Correct], &cfg), Correct);
        assert_eq!(oracle_label_cluster(&[Correct, Spurious], &cfg), Spurious);
        assert_eq!(oracle_label_cluster(&[Correct, Correct, Spurious], &cfg), Correct);
    }

    /// `k` clusters on a line, three members each; cluster `c`'s members are
    /// spurious when `spurious(c, member)`.
    fn line(k: usize, spurious: impl Fn(usize, usize) -> bool) -> (ClusterReport, BTreeMap<String, Verdict>) {
        let mut ids = Vec::new();
        let mut assignment = Vec::new();
        let mut verdicts = BTreeMap::new();
        let mut clusters = Vec::new();
        for c in 0..k {
            let mut members = Vec::new();
            for m in 0..3 {
                let id = format!("c{c}m{m}");
                let v = if spurious(c, m) { Verdict::Spurious } else { Verdict::Correct };
                verdicts.insert(id.clone(), v);
                ids.push(id.clone());
                assignment.push(c);
                members.push(id);
            }
            clusters.push(BehaviorCluster {
                cluster_id: c,
                member_ids: members,
                centroid_2d: [c as f64, 0.0],
                summary_sequence: Vec::new(),
                summary_attribution: Vec::new(),
                accuracy: 1.0,
                mean_confidence: 1.0,
            });
        }
        let report = ClusterReport {
            alpha: 0.5,
            embedding: Embedding2D {
                points: vec![[0.0, 0.0]; ids.len()],
                ids,
            },
            assignment,
            elbow_sse: Vec::new(),
            clusters,
        };
        (report, verdicts)
    }

    #[test]
    fn budget_limits_cluster_labels() {
        let (report, verdicts) = line(6, |c, m| c >= 3 && m > 0);
        let cfg = OracleConfig {
            budget: 2,
            ..Default::default()
        };
        let s = run_oracle_session(&report, &verdicts, &cfg).unwrap();
        assert_eq!(s.annotations.clusters.len(), 2);
        assert_eq!(s.log.len(), 2);
        assert_eq!(s.propagations, s.log.len());
        // Seeds: the most-correct (cluster 0) and most-spurious (cluster 3).
        assert_eq!(s.annotations.clusters[&0], Verdict::Correct);
        assert_eq!(s.annotations.clusters[&3], Verdict::Spurious);
    }

    #[test]
    fn large_budget_labels_everything_in_rank_order() {
        let (report, verdicts) = line(6, |c, m| c >= 3 && m > 0);
        let s = run_oracle_session(&report, &verdicts, &OracleConfig::default()).unwrap();
        assert_eq!(s.annotations.clusters.len(), 6);
        assert_eq!(s.log.len(), 6);
        assert_eq!(s.propagations, 6);
        for (c, v) in &s.annotations.clusters {
            assert_eq!(*v, if *c >= 3 { Verdict::Spurious } else { Verdict::Correct });
        }
        // After the seeds, the next pick lies on the spurious side.
        assert!(matches!(s.log[2].target, Target::Cluster { id: 4 | 5 }));
        assert_eq!(covered_instances(&report, &s.annotations, Some(&s.state)), 18);
    }

    #[test]
    fn instance_overrides_fix_dissenting_members() {
        let (report, verdicts) = line(4, |c, m| c >= 2 && m > 0);
        let cfg = OracleConfig {
            instance_budget: 10,
            ..Default::default()
        };
        let s = run_oracle_session(&report, &verdicts, &cfg).unwrap();
        // Members m0 of clusters 2 and 3 are correct inside spurious clusters.
        let over: Vec<&String> = s.annotations.instances.keys().collect();
        assert_eq!(over, vec!["c2m0", "c3m0"]);
        assert!(s.log.len() <= cfg.budget + cfg.instance_budget);
    }

    #[test]
    fn random_annotation_covers_budget_only() {
        let (report, verdicts) = line(10, |c, _| c % 2 == 0);
        let ann = random_instance_annotation(&report, &verdicts, 15, 3).unwrap();
        assert_eq!(covered_instances(&report, &ann, None), 15);
        assert_eq!(ann, random_instance_annotation(&report, &verdicts, 15, 3).unwrap());
    }
}
