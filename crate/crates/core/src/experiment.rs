//! Seeded de-biasing experiment: a synthetic fixture with a planted
//! shortcut, oracle annotation, and the comparison of enhancement methods.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::data::{
    artifact_carriers, generate_univariate, inject_spurious_artifact, ArtifactShape, ChannelStats, Dataset,
    SpuriousSpec,
};
use crate::enhancement::{
    baseline_cluster_mask, baseline_random_aug, baseline_random_mask, enhance_model, EnhancementConfig,
};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_test, Evaluation};
use crate::metrics::DEFAULT_RA_LEVELS;
use crate::model::{train, FcnConfig, FcnModel, TrainConfig};
use crate::oracle::{covered_instances, random_instance_annotation, run_oracle_session, OracleConfig};
use crate::pipeline::{analyze, Analysis, AnalysisConfig};
use crate::seed;
use crate::spuriousness::{cluster_only_scores, resolve_instance_scores, select_enhancement_sets};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub n_instances: usize,
    pub length: usize,
    pub anomaly_ratio: f64,
    pub artifact: SpuriousSpec,
    pub train: TrainConfig,
    pub analysis: AnalysisConfig,
    pub oracle: OracleConfig,
    pub noise_scale: f64,
    pub finetune_epochs: usize,
    pub finetune_lr_factor: f64,
    pub alphas: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n_instances: 1000,
            length: 800,
            anomaly_ratio: 0.4,
            artifact: SpuriousSpec {
                window: 10..90,
                shape: ArtifactShape::SineBurst,
                amplitude: 1.5,
                train_correlation: 0.9,
            },
            train: TrainConfig {
                learning_rate: 0.4,
                ..TrainConfig::default()
            },
            analysis: AnalysisConfig {
                k: Some(10),
                dtw_window: Some(40),
                ..AnalysisConfig::default()
            },
            oracle: OracleConfig {
                instance_budget: 30,
                ..OracleConfig::default()
            },
            noise_scale: 1.5,
            finetune_epochs: 5,
            finetune_lr_factor: 0.25,
            alphas: vec![0.0, 0.5, 1.0],
        }
    }
}

impl ExperimentConfig {
    /// Enhancement settings for one seed.
    pub fn enhancement(&self, seed_value: u64) -> EnhancementConfig {
        let mut cfg = EnhancementConfig::from_training(&self.train, seed_value);
        cfg.noise_scale = self.noise_scale;
        cfg.finetune.epochs = self.finetune_epochs;
        cfg.finetune.learning_rate = self.finetune_lr_factor * self.train.learning_rate;
        cfg
    }
}

/// Normalized biased dataset and the model trained on it.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub seed: u64,
    pub dataset: Dataset,
    pub stats: ChannelStats,
    pub model: FcnModel,
    pub loss_trace: Vec<f64>,
    /// Ids of the train instances carrying the artifact.
    pub carriers: Vec<String>,
}

/// A normalized dataset with the artifact planted, before training.
#[derive(Debug, Clone)]
pub struct BiasedData {
    pub dataset: Dataset,
    pub stats: ChannelStats,
    /// Ids of the train instances carrying the artifact.
    pub carriers: Vec<String>,
}

/// Generates, plants the artifact and normalizes with train statistics.
pub fn biased_dataset(cfg: &ExperimentConfig, seed_value: u64) -> Result<BiasedData> {
    let raw = generate_univariate(cfg.n_instances, cfg.length, seed_value, cfg.anomaly_ratio)?;
    let artifact_seed = seed::derive(seed_value, "artifact");
    let biased = inject_spurious_artifact(&raw, &cfg.artifact, artifact_seed)?;
    let carriers = artifact_carriers(&raw, &cfg.artifact, artifact_seed)
        .into_iter()
        .map(|i| raw.instances[i].id.clone())
        .collect();
    let stats = ChannelStats::from_train(&biased);
    Ok(BiasedData {
        dataset: stats.normalize(&biased),
        stats,
        carriers,
    })
}

/// [`biased_dataset`] plus the model trained on it.
pub fn build_fixture(cfg: &ExperimentConfig, seed_value: u64) -> Result<Fixture> {
    let data = biased_dataset(cfg, seed_value)?;
    let model = FcnModel::init(&FcnConfig::small(data.dataset.channels(), seed::derive(seed_value, "model")))?;
    let tc = TrainConfig {
        seed: seed::derive(seed_value, "train"),
        ..cfg.train.clone()
    };
    let out = train(&model, &data.dataset, &tc)?;
    Ok(Fixture {
        seed: seed_value,
        dataset: data.dataset,
        stats: data.stats,
        model: out.model,
        loss_trace: out.loss_trace,
        carriers: data.carriers,
    })
}

/// Evidence that the trained model leans on the artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasCheck {
    /// Mean RA(M=30) on test anomalies.
    pub test_ra30: f64,
    /// Mean mask value inside and outside the artifact window, over carriers.
    pub mask_inside: f64,
    pub mask_outside: f64,
}

impl BiasCheck {
    pub fn concentrated(&self) -> bool {
        self.mask_inside > self.mask_outside
    }
}

pub fn bias_check(fixture: &Fixture, analysis: &Analysis, window: &std::ops::Range<usize>) -> Result<BiasCheck> {
    let before = evaluate_test(&fixture.model, &fixture.dataset)?;
    let (mut inside, mut outside, mut n_in, mut n_out) = (0.0, 0.0, 0usize, 0usize);
    for id in &fixture.carriers {
        let m = analysis.masks.get(id).ok_or_else(|| Error::UnknownInstance(id.clone()))?;
        for (t, w) in m.weights.iter().enumerate() {
            if window.contains(&t) {
                inside += w;
                n_in += 1;
            } else {
                outside += w;
                n_out += 1;
            }
        }
    }
    Ok(BiasCheck {
        test_ra30: before.ra(30.0),
        mask_inside: inside / n_in.max(1) as f64,
        mask_outside: outside / n_out.max(1) as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Baseline,
    RandomAug,
    RandomMask,
    ClusterMask,
    FullLoop,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Baseline,
        Method::RandomAug,
        Method::RandomMask,
        Method::ClusterMask,
        Method::FullLoop,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::RandomAug => "random-aug",
            Method::RandomMask => "random-mask",
            Method::ClusterMask => "cluster-mask",
            Method::FullLoop => "full-loop",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One table row: four classification metrics and RA at the four levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// RA at M = 20, 25, 30, 35.
    pub ra: [f64; 4],
}

impl Scores {
    pub fn from_evaluation(e: &Evaluation) -> Self {
        let c = &e.classification;
        Scores {
            accuracy: c.accuracy,
            precision: c.precision,
            recall: c.recall,
            f1: c.f1,
            ra: DEFAULT_RA_LEVELS.map(|m| e.ra(m)),
        }
    }

    pub fn ra30(&self) -> f64 {
        self.ra[2]
    }

    fn cells(&self) -> [f64; 8] {
        let [a, b, c, d] = self.ra;
        [self.accuracy, self.precision, self.recall, self.f1, a, b, c, d]
    }

    fn mean(rows: &[Scores]) -> Scores {
        let n = rows.len() as f64;
        let avg = |f: &dyn Fn(&Scores) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Scores {
            accuracy: avg(&|s| s.accuracy),
            precision: avg(&|s| s.precision),
            recall: avg(&|s| s.recall),
            f1: avg(&|s| s.f1),
            ra: [0, 1, 2, 3].map(|j| avg(&|s| s.ra[j])),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaRow {
    pub alpha: f64,
    pub k: usize,
    pub scores: Scores,
}

/// Everything measured for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub bias: BiasCheck,
    pub clustered: usize,
    pub k: usize,
    pub cluster_actions: usize,
    pub instance_actions: usize,
    /// Clustered instances with a resolved score after the oracle session.
    pub covered: usize,
    /// Instances labeled by the per-instance random baseline at the same budget.
    pub random_covered: usize,
    pub gamma: usize,
    pub methods: BTreeMap<Method, Scores>,
    /// Cluster-level-only annotation at each alpha; empty unless requested.
    pub alpha_sweep: Vec<AlphaRow>,
}

/// Runs the fixture, analysis, oracle session and all five methods for one
/// seed; with `sweep` also the alpha ablation.
pub fn run_seed(cfg: &ExperimentConfig, seed_value: u64, sweep: bool) -> Result<SeedRun> {
    let fixture = build_fixture(cfg, seed_value)?;
    run_on_fixture(cfg, &fixture, sweep)
}

pub fn run_on_fixture(cfg: &ExperimentConfig, fixture: &Fixture, sweep: bool) -> Result<SeedRun> {
    let ds = &fixture.dataset;
    let model = &fixture.model;
    let acfg = AnalysisConfig {
        seed: seed::derive(fixture.seed, "analysis"),
        ..cfg.analysis.clone()
    };
    let analysis = analyze(model, ds, &acfg, None)?;
    let bias = bias_check(fixture, &analysis, &cfg.artifact.window)?;
    let verdicts = analysis.oracle_verdicts(ds, &cfg.oracle)?;
    let report = &analysis.report;
    let session = run_oracle_session(report, &verdicts, &cfg.oracle)?;
    let ecfg = cfg.enhancement(fixture.seed);

    let mut methods = BTreeMap::new();
    methods.insert(Method::Baseline, Scores::from_evaluation(&evaluate_test(model, ds)?));

    let full_scores = resolve_instance_scores(&session.state, &session.annotations, report)?;
    let (_, full) = enhance_model(model, ds, &analysis.masks, &full_scores, &ecfg)?;
    methods.insert(Method::FullLoop, Scores::from_evaluation(&full.after));

    let cluster_scores = cluster_only_scores(&session.state, report)?;
    let (_, cm) = baseline_cluster_mask(model, ds, &analysis.masks, &cluster_scores, &ecfg)?;
    methods.insert(Method::ClusterMask, Scores::from_evaluation(&cm.after));

    let proposed = select_enhancement_sets(&full_scores, ecfg.tau_s, ecfg.tau_c)?;
    let (_, rm) = baseline_random_mask(model, ds, &analysis.masks, &proposed, &ecfg)?;
    methods.insert(Method::RandomMask, Scores::from_evaluation(&rm.after));

    let gamma = proposed.len();
    let (_, ra) = baseline_random_aug(model, ds, gamma, &ecfg)?;
    methods.insert(Method::RandomAug, Scores::from_evaluation(&ra.after));

    let cluster_actions = session.annotations.clusters.len();
    let random = random_instance_annotation(report, &verdicts, cfg.oracle.budget, seed::derive(fixture.seed, "coverage"))?;

    let alpha_sweep = if sweep {
        let base = (analysis.config.alpha, cm.after.clone());
        alpha_sweep(model, ds, &analysis, &cfg.oracle, &ecfg, &cfg.alphas, Some(base))?
    } else {
        Vec::new()
    };

    Ok(SeedRun {
        seed: fixture.seed,
        bias,
        clustered: analysis.clustered_ids().len(),
        k: report.k(),
        cluster_actions,
        instance_actions: session.annotations.instances.len(),
        covered: covered_instances(report, &session.annotations, Some(&session.state)),
        random_covered: covered_instances(report, &random, None),
        gamma,
        methods,
        alpha_sweep,
    })
}

/// Reclusters `base` at each alpha, annotates clusters only (no instance
/// overrides) with the oracle and fine-tunes with the cluster-level scores.
/// `known` supplies an already computed result for one alpha.
pub fn alpha_sweep(
    model: &FcnModel,
    ds: &Dataset,
    base: &Analysis,
    oracle: &OracleConfig,
    ecfg: &EnhancementConfig,
    alphas: &[f64],
    known: Option<(f64, Evaluation)>,
) -> Result<Vec<AlphaRow>> {
    let cluster_oracle = OracleConfig {
        instance_budget: 0,
        ..oracle.clone()
    };
    let verdicts = base.oracle_verdicts(ds, &cluster_oracle)?;
    alphas
        .iter()
        .map(|&alpha| {
            let a = if alpha == base.config.alpha {
                base.clone()
            } else {
                base.with_alpha(ds, alpha)?
            };
            let after = match &known {
                Some((k, e)) if *k == alpha => e.clone(),
                _ => {
                    let s = run_oracle_session(&a.report, &verdicts, &cluster_oracle)?;
                    let scores = cluster_only_scores(&s.state, &a.report)?;
                    baseline_cluster_mask(model, ds, &a.masks, &scores, ecfg)?.1.after
                }
            };
            Ok(AlphaRow {
                alpha,
                k: a.report.k(),
                scores: Scores::from_evaluation(&after),
            })
        })
        .collect()
}

/// Per-seed runs plus their means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareTable {
    pub config: ExperimentConfig,
    pub runs: Vec<SeedRun>,
}

pub fn compare(cfg: &ExperimentConfig, seeds: &[u64], sweep: bool) -> Result<CompareTable> {
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("at least one seed is required".into()));
    }
    let runs = seeds
        .iter()
        .map(|&s| run_seed(cfg, s, sweep))
        .collect::<Result<_>>()?;
    Ok(CompareTable {
        config: cfg.clone(),
        runs,
    })
}

const HEADER: [&str; 8] = ["acc", "prec", "rec", "f1", "ra@20", "ra@25", "ra@30", "ra@35"];

fn push_row(out: &mut String, label: &str, s: &Scores) {
    let _ = write!(out, "{label:<14}");
    for v in s.cells() {
        let _ = write!(out, " {v:>7.4}");
    }
    out.push('\n');
}

fn push_header(out: &mut String, first: &str) {
    let _ = write!(out, "{first:<14}");
    for h in HEADER {
        let _ = write!(out, " {h:>7}");
    }
    out.push('\n');
}

impl CompareTable {
    /// Method scores averaged over seeds, in [`Method::ALL`] order.
    pub fn mean_rows(&self) -> Vec<(Method, Scores)> {
        Method::ALL
            .iter()
            .map(|&m| {
                let rows: Vec<Scores> = self.runs.iter().map(|r| r.methods[&m]).collect();
                (m, Scores::mean(&rows))
            })
            .collect()
    }

    /// Alpha rows averaged over seeds.
    pub fn mean_alpha_rows(&self) -> Vec<AlphaRow> {
        let Some(first) = self.runs.first() else {
            return Vec::new();
        };
        (0..first.alpha_sweep.len())
            .map(|j| {
                let rows: Vec<Scores> = self.runs.iter().map(|r| r.alpha_sweep[j].scores).collect();
                AlphaRow {
                    alpha: first.alpha_sweep[j].alpha,
                    k: first.alpha_sweep[j].k,
                    scores: Scores::mean(&rows),
                }
            })
            .collect()
    }

    /// Aligned text table of the seed means.
    pub fn to_text(&self) -> String {
        let seeds: Vec<String> = self.runs.iter().map(|r| r.seed.to_string()).collect();
        let mut out = format!("methods (mean over seeds {})\n", seeds.join(", "));
        push_header(&mut out, "method");
        for (m, s) in self.mean_rows() {
            push_row(&mut out, m.name(), &s);
        }
        let alpha = self.mean_alpha_rows();
        if !alpha.is_empty() {
            out.push_str("\nalpha sweep, cluster-level annotation only\n");
            push_header(&mut out, "alpha");
            for row in alpha {
                push_row(&mut out, &format!("{:.2}", row.alpha), &row.scores);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Label, Split};

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            n_instances: 60,
            length: 120,
            artifact: SpuriousSpec {
                window: 2..12,
                shape: ArtifactShape::SineBurst,
                amplitude: 2.0,
                train_correlation: 0.9,
            },
            train: TrainConfig {
                epochs: 3,
                ..TrainConfig::default()
            },
            analysis: AnalysisConfig {
                dtw_window: Some(10),
                k_max: 5,
                ..AnalysisConfig::default()
            },
            finetune_epochs: 2,
            alphas: vec![0.0, 0.5, 1.0],
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn compare_has_every_method_and_is_deterministic() {
        let cfg = tiny();
        let a = compare(&cfg, &[4], true).unwrap();
        let b = compare(&cfg, &[4], true).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_text(), b.to_text());
        let run = &a.runs[0];
        assert_eq!(run.methods.len(), 5);
        assert_eq!(run.alpha_sweep.len(), 3);
        assert!(run.cluster_actions <= cfg.oracle.budget);
        assert_eq!(run.random_covered, cfg.oracle.budget.min(run.clustered));
        let text = a.to_text();
        assert_eq!(text.lines().filter(|l| l.starts_with("full-loop")).count(), 1);
        assert_eq!(text.lines().nth(1).unwrap().split_whitespace().count(), 9);
    }

    #[test]
    fn carriers_are_train_anomalies() {
        let cfg = tiny();
        let f = build_fixture(&cfg, 2).unwrap();
        assert!(!f.carriers.is_empty());
        for id in &f.carriers {
            let x = f.dataset.get(id).unwrap();
            assert_eq!((x.split, x.label), (Split::Train, Label::Anomaly));
        }
    }
}
