//! On-disk sessions. Each session is a directory of versioned JSON
//! artifacts, a binary distance cache and an append-only journal; every
//! mutation rewrites the affected files before returning.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use spurscope::clustering::ClusterReport;
use spurscope::data::{load_dataset, save_dataset, ChannelStats, Dataset, Label, Split};
use spurscope::enhancement::{enhance_model, EnhancementConfig, EnhancementReport};
use spurscope::evaluation::{evaluate_test, Evaluation};
use spurscope::experiment::{alpha_sweep, AlphaRow};
use spurscope::model::{train, AttributionMask, FcnConfig, FcnModel, PredictionResult, TrainConfig};
use spurscope::oracle::{run_oracle_session, OracleConfig, OracleSession, Target};
use spurscope::pipeline::{analyze, Analysis, AnalysisConfig};
use spurscope::similarity::{combine, cosine_matrix, dtw_matrix, DistanceMatrix};
use spurscope::spuriousness::{propagate, resolve_instance_scores, AnnotationState, SpuriousnessState, Verdict};

/// Version of every persisted artifact and HTTP payload.
pub const SCHEMA_VERSION: u32 = 1;

const META: &str = "session.json";
const DATASET: &str = "dataset.jsonl";
const STATS: &str = "stats.json";
const MODEL: &str = "model.json";
const INITIAL_MODEL: &str = "model-v0.json";
const ALPHA_SWEEP: &str = "alpha-sweep.json";
const ANALYSIS: &str = "analysis.json";
const DTW_CACHE: &str = "dtw.bin";
const COSINE_CACHE: &str = "cosine.bin";
const ANNOTATIONS: &str = "annotations.json";
const SPURIOUSNESS: &str = "spuriousness.json";
const METRICS: &str = "metrics.json";
const JOB: &str = "job.json";
const JOURNAL: &str = "journal.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error("{0}")]
    Invalid(String),
    #[error("{0} not found")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("missing {what}; run `{step}` first")]
    Missing { what: &'static str, step: &'static str },
    #[error(transparent)]
    Core(#[from] spurscope::Error),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl SessionError {
    /// Whether the caller's input (rather than the environment) is at fault.
    pub fn is_validation(&self) -> bool {
        match self {
            SessionError::Invalid(_) | SessionError::NotFound(_) | SessionError::Conflict(_) | SessionError::Missing { .. } => true,
            SessionError::Io { .. } | SessionError::Json { .. } => false,
            SessionError::Core(e) => e.is_validation(),
        }
    }
}

pub type Result<T> = std::result::Result<T, SessionError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SessionError + '_ {
    move |source| SessionError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes through a temporary file so a crash never leaves a torn artifact.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|source| SessionError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|source| SessionError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn read_optional<T: DeserializeOwned>(path: &Path) -> Result<Option<T>> {
    if path.exists() {
        read_json(path).map(Some)
    } else {
        Ok(None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Idle,
    Analyzing,
    Retraining,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub schema_version: u32,
    pub session_id: String,
    pub seed: u64,
    pub status: JobStatus,
    /// 0 for the initial model, incremented by every completed retrain.
    pub model_version: u32,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub analysis: Option<AnalysisConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsEntry {
    pub stage: String,
    pub model_version: u32,
    pub evaluation: Evaluation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: u64,
    pub kind: String,
    pub status: JobState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<EnhancementReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Analysis fields stored as JSON; the distance matrices live in binary
/// caches and the aggregated matrix is recomputed on load.
#[derive(Serialize, Deserialize)]
struct StoredAnalysis {
    config: AnalysisConfig,
    predictions: BTreeMap<String, PredictionResult>,
    masks: BTreeMap<String, AttributionMask>,
    report: ClusterReport,
}

/// Optional overrides applied on top of the session's default
/// enhancement settings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrainRequest {
    pub noise_scale: Option<f64>,
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub tau_s: Option<f64>,
    pub tau_c: Option<f64>,
    pub seed: Option<u64>,
    pub append: Option<bool>,
}

/// Everything a retrain needs, detached from the session so it can run
/// without holding it.
pub struct RetrainJob {
    pub job_id: u64,
    model: FcnModel,
    dataset: Dataset,
    masks: BTreeMap<String, AttributionMask>,
    scores: BTreeMap<String, f64>,
    pub config: EnhancementConfig,
}

impl RetrainJob {
    pub fn run(&self) -> Result<(FcnModel, EnhancementReport)> {
        Ok(enhance_model(&self.model, &self.dataset, &self.masks, &self.scores, &self.config)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SortKey {
    Accuracy,
    Confidence,
    Spuriousness,
}

impl std::str::FromStr for SortKey {
    type Err = SessionError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy" => Ok(SortKey::Accuracy),
            "confidence" => Ok(SortKey::Confidence),
            "spuriousness" => Ok(SortKey::Spuriousness),
            other => Err(SessionError::Invalid(format!(
                "unknown sort key `{other}`; expected accuracy, confidence or spuriousness"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterView {
    pub cluster_id: usize,
    pub size: usize,
    pub member_ids: Vec<String>,
    pub centroid_2d: [f64; 2],
    pub summary_sequence: Vec<Vec<f64>>,
    pub summary_attribution: Vec<f64>,
    pub accuracy: f64,
    pub mean_confidence: f64,
    /// Propagated score; null until a cluster has been annotated.
    pub spuriousness: Option<f64>,
    pub annotation: Option<Verdict>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClustersView {
    pub session_id: String,
    pub model_version: u32,
    pub alpha: f64,
    pub k: usize,
    pub sort: SortKey,
    pub clusters: Vec<ClusterView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingView {
    pub session_id: String,
    pub ids: Vec<String>,
    pub points: Vec<[f64; 2]>,
    pub assignment: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceView {
    pub id: String,
    pub label: Label,
    pub split: Split,
    pub values: Vec<Vec<f64>>,
    pub truth_mask: Option<Vec<bool>>,
    pub attribution: Vec<f64>,
    pub predicted: Label,
    pub confidence: f64,
    /// Resolved spuriousness; null until a cluster has been annotated.
    pub score: Option<f64>,
    pub annotation: Option<Verdict>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstancesView {
    pub session_id: String,
    pub cluster_id: usize,
    pub instances: Vec<InstanceView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationView {
    pub annotations: AnnotationState,
    /// Per-cluster scores; null until a cluster has been annotated.
    pub cluster_scores: Option<Vec<f64>>,
    pub instance_scores: Option<BTreeMap<String, f64>>,
    pub converged: Option<bool>,
    pub iterations: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub status: JobStatus,
    pub model_version: u32,
    pub instances: usize,
    pub clustered: Option<usize>,
    pub k: Option<usize>,
    pub annotated: bool,
}

pub struct Session {
    dir: PathBuf,
    pub meta: SessionMeta,
    pub dataset: Option<Dataset>,
    pub stats: Option<ChannelStats>,
    pub model: Option<FcnModel>,
    pub analysis: Option<Analysis>,
    pub annotations: AnnotationState,
    pub state: Option<SpuriousnessState>,
    pub metrics: Vec<MetricsEntry>,
    pub job: Option<JobRecord>,
    journal_seq: u64,
}

/// Session ids become directory names, so they are restricted.
pub fn validate_session_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id.len() <= 64
        && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
    if ok {
        Ok(())
    } else {
        Err(SessionError::Invalid(format!(
            "session id `{id}` must be 1-64 characters of [A-Za-z0-9_-]"
        )))
    }
}

impl Session {
    /// Creates a new session directory, or fails if it already holds one.
    pub fn create(dir: impl Into<PathBuf>, session_id: &str, seed: u64) -> Result<Self> {
        validate_session_id(session_id)?;
        let dir = dir.into();
        if dir.join(META).exists() {
            return Err(SessionError::Conflict(format!("session `{session_id}` already exists")));
        }
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let mut s = Session {
            dir,
            meta: SessionMeta {
                schema_version: SCHEMA_VERSION,
                session_id: session_id.to_string(),
                seed,
                status: JobStatus::Idle,
                model_version: 0,
                train: None,
                analysis: None,
            },
            dataset: None,
            stats: None,
            model: None,
            analysis: None,
            annotations: AnnotationState::default(),
            state: None,
            metrics: Vec::new(),
            job: None,
            journal_seq: 0,
        };
        s.save_meta()?;
        s.journal("created", json!({ "seed": seed }))?;
        Ok(s)
    }

    /// Opens an existing session, or creates one named after the directory.
    pub fn open_or_create(dir: impl Into<PathBuf>, seed: u64) -> Result<Self> {
        let dir = dir.into();
        if dir.join(META).exists() {
            return Self::open(dir);
        }
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .map(|n| n.chars().filter(|c| c.is_ascii_alphanumeric() || *c == '-' || *c == '_').collect::<String>())
            .filter(|n| !n.is_empty())
            .unwrap_or_else(|| "session".into());
        Self::create(dir, &name, seed)
    }

    /// Loads every artifact present in `dir`.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        let meta_path = dir.join(META);
        if !meta_path.exists() {
            return Err(SessionError::NotFound(format!("session at {}", dir.display())));
        }
        let meta: SessionMeta = read_json(&meta_path)?;
        if meta.schema_version != SCHEMA_VERSION {
            return Err(SessionError::Invalid(format!(
                "session schema version {} is not supported (expected {SCHEMA_VERSION})",
                meta.schema_version
            )));
        }
        let dataset = if dir.join(DATASET).exists() {
            Some(load_dataset(dir.join(DATASET))?)
        } else {
            None
        };
        let model = if dir.join(MODEL).exists() {
            Some(FcnModel::load(dir.join(MODEL))?)
        } else {
            None
        };
        let analysis = match read_optional::<StoredAnalysis>(&dir.join(ANALYSIS))? {
            Some(stored) => {
                // The distance caches are derived data; rebuild any that is
                // missing or does not match the stored analysis.
                let ids = &stored.report.embedding.ids;
                let cache = |name: &str, build: &dyn Fn() -> Result<DistanceMatrix>| -> Result<DistanceMatrix> {
                    let path = dir.join(name);
                    if let Ok(bytes) = fs::read(&path) {
                        if let Ok(m) = DistanceMatrix::from_bytes(&bytes) {
                            if &m.ids == ids {
                                return Ok(m);
                            }
                        }
                    }
                    let m = build()?;
                    write_atomic(&path, &m.to_bytes())?;
                    Ok(m)
                };
                let dtw = cache(DTW_CACHE, &|| {
                    let ds = dataset.as_ref().ok_or_else(|| SessionError::Invalid("analysis without a dataset".into()))?;
                    let series = ids
                        .iter()
                        .map(|id| ds.get(id).ok_or_else(|| SessionError::Invalid(format!("analysis names unknown instance {id}"))))
                        .collect::<Result<Vec<_>>>()?;
                    Ok(dtw_matrix(&series, stored.config.dtw_window)?)
                })?;
                let cosine = cache(COSINE_CACHE, &|| {
                    let masks = ids
                        .iter()
                        .map(|id| {
                            stored.masks.get(id).cloned().ok_or_else(|| SessionError::Invalid(format!("no mask for {id}")))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Ok(cosine_matrix(&masks)?)
                })?;
                let aggregated = combine(&dtw, &cosine, stored.config.alpha)?;
                Some(Analysis {
                    config: stored.config,
                    predictions: stored.predictions,
                    masks: stored.masks,
                    dtw,
                    cosine,
                    aggregated,
                    report: stored.report,
                })
            }
            None => None,
        };
        let journal_seq = match fs::read_to_string(dir.join(JOURNAL)) {
            Ok(text) => text.lines().filter(|l| !l.trim().is_empty()).count() as u64,
            Err(_) => 0,
        };
        let mut s = Session {
            stats: read_optional(&dir.join(STATS))?,
            annotations: read_optional(&dir.join(ANNOTATIONS))?.unwrap_or_default(),
            state: read_optional(&dir.join(SPURIOUSNESS))?,
            metrics: read_optional(&dir.join(METRICS))?.unwrap_or_default(),
            job: read_optional(&dir.join(JOB))?,
            dir,
            meta,
            dataset,
            model,
            analysis,
            journal_seq,
        };
        // A job cannot survive a restart; record it as interrupted.
        if s.job.as_ref().is_some_and(|j| j.status == JobState::Running) || s.meta.status != JobStatus::Idle {
            if let Some(job) = &mut s.job {
                if job.status == JobState::Running {
                    job.status = JobState::Failed;
                    job.error = Some("interrupted by a restart".into());
                }
            }
            s.meta.status = if s.meta.status == JobStatus::Idle {
                JobStatus::Idle
            } else {
                JobStatus::Failed
            };
            s.save_meta()?;
            if let Some(job) = &s.job {
                write_json(&s.dir.join(JOB), job)?;
            }
        }
        Ok(s)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn id(&self) -> &str {
        &self.meta.session_id
    }

    fn save_meta(&self) -> Result<()> {
        write_json(&self.dir.join(META), &self.meta)
    }

    /// Appends one line to the journal.
    fn journal(&mut self, event: &str, detail: serde_json::Value) -> Result<()> {
        let path = self.dir.join(JOURNAL);
        let line = json!({ "seq": self.journal_seq, "event": event, "detail": detail });
        let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(io_err(&path))?;
        writeln!(f, "{line}").map_err(io_err(&path))?;
        self.journal_seq += 1;
        Ok(())
    }

    pub fn dataset(&self) -> Result<&Dataset> {
        self.dataset.as_ref().ok_or(SessionError::Missing {
            what: "dataset",
            step: "gen-data",
        })
    }

    pub fn model(&self) -> Result<&FcnModel> {
        self.model.as_ref().ok_or(SessionError::Missing {
            what: "model checkpoint",
            step: "train",
        })
    }

    pub fn analysis(&self) -> Result<&Analysis> {
        self.analysis.as_ref().ok_or(SessionError::Missing {
            what: "cluster analysis",
            step: "analyze",
        })
    }

    fn ensure_idle(&self) -> Result<()> {
        match self.meta.status {
            JobStatus::Analyzing | JobStatus::Retraining => {
                Err(SessionError::Conflict("a job is already running for this session".into()))
            }
            JobStatus::Idle | JobStatus::Failed => Ok(()),
        }
    }

    /// Stores `raw` z-scored with its own train-split statistics.
    pub fn set_dataset(&mut self, raw: &Dataset) -> Result<()> {
        self.ensure_idle()?;
        raw.validate()?;
        let stats = ChannelStats::from_train(raw);
        let ds = stats.normalize(raw);
        save_dataset(&ds, self.dir.join(DATASET))?;
        write_json(&self.dir.join(STATS), &stats)?;
        self.journal(
            "dataset",
            json!({ "name": ds.name, "instances": ds.instances.len(), "channels": ds.channels(), "length": ds.series_len() }),
        )?;
        self.dataset = Some(ds);
        self.stats = Some(stats);
        self.clear_model_state()
    }

    fn clear_model_state(&mut self) -> Result<()> {
        for name in [MODEL, INITIAL_MODEL, ALPHA_SWEEP, ANALYSIS, DTW_CACHE, COSINE_CACHE, ANNOTATIONS, SPURIOUSNESS, METRICS, JOB] {
            let path = self.dir.join(name);
            if path.exists() {
                fs::remove_file(&path).map_err(io_err(&path))?;
            }
        }
        self.model = None;
        self.analysis = None;
        self.annotations = AnnotationState::default();
        self.state = None;
        self.metrics.clear();
        self.job = None;
        self.meta.model_version = 0;
        self.meta.analysis = None;
        self.meta.status = JobStatus::Idle;
        self.save_meta()
    }

    /// Trains a fresh model on the stored dataset.
    pub fn train(&mut self, cfg: &FcnConfig, tc: &TrainConfig) -> Result<Vec<f64>> {
        self.ensure_idle()?;
        let ds = self.dataset()?;
        if cfg.in_channels != ds.channels() {
            return Err(SessionError::Invalid(format!(
                "model expects {} channels but the dataset has {}",
                cfg.in_channels,
                ds.channels()
            )));
        }
        let out = train(&FcnModel::init(cfg)?, ds, tc)?;
        self.meta.train = Some(tc.clone());
        self.install_initial_model(out.model)?;
        self.journal("trained", json!({ "config": cfg, "train": tc, "loss_trace": out.loss_trace }))?;
        Ok(out.loss_trace)
    }

    /// Uses an existing checkpoint as the initial model.
    pub fn load_model(&mut self, model: FcnModel) -> Result<()> {
        self.ensure_idle()?;
        let ds = self.dataset()?;
        if model.in_channels() != ds.channels() {
            return Err(SessionError::Invalid(format!(
                "checkpoint expects {} channels but the dataset has {}",
                model.in_channels(),
                ds.channels()
            )));
        }
        self.install_initial_model(model)?;
        self.journal("model-loaded", json!({}))
    }

    fn install_initial_model(&mut self, model: FcnModel) -> Result<()> {
        let evaluation = evaluate_test(&model, self.dataset()?)?;
        self.clear_model_state()?;
        model.save(self.dir.join(MODEL))?;
        model.save(self.dir.join(INITIAL_MODEL))?;
        self.model = Some(model);
        self.metrics = vec![MetricsEntry {
            stage: "initial".into(),
            model_version: 0,
            evaluation,
        }];
        write_json(&self.dir.join(METRICS), &self.metrics)
    }

    /// Explains, embeds and clusters; discards existing annotations. The
    /// DTW matrix is reused when the clustered instances and band match.
    pub fn analyze(&mut self, cfg: &AnalysisConfig) -> Result<&Analysis> {
        self.ensure_idle()?;
        let model = self.model()?;
        let ds = self.dataset()?;
        let cached = self
            .analysis
            .as_ref()
            .filter(|a| a.config.dtw_window == cfg.dtw_window)
            .map(|a| a.dtw.clone());
        let analysis = match analyze(model, ds, cfg, cached) {
            Err(spurscope::Error::InvalidConfig(msg)) if msg.contains("cached DTW") => analyze(model, ds, cfg, None)?,
            other => other?,
        };
        let stored = StoredAnalysis {
            config: analysis.config.clone(),
            predictions: analysis.predictions.clone(),
            masks: analysis.masks.clone(),
            report: analysis.report.clone(),
        };
        write_atomic(&self.dir.join(DTW_CACHE), &analysis.dtw.to_bytes())?;
        write_atomic(&self.dir.join(COSINE_CACHE), &analysis.cosine.to_bytes())?;
        write_json(&self.dir.join(ANALYSIS), &stored)?;
        self.annotations = AnnotationState::default();
        self.state = None;
        for name in [ANNOTATIONS, SPURIOUSNESS] {
            let path = self.dir.join(name);
            if path.exists() {
                fs::remove_file(&path).map_err(io_err(&path))?;
            }
        }
        self.meta.analysis = Some(cfg.clone());
        self.save_meta()?;
        self.journal(
            "analyzed",
            json!({
                "config": cfg,
                "clustered": analysis.clustered_ids().len(),
                "k": analysis.report.k(),
            }),
        )?;
        Ok(self.analysis.insert(analysis))
    }

    fn save_annotations(&self) -> Result<()> {
        write_json(&self.dir.join(ANNOTATIONS), &self.annotations)?;
        match &self.state {
            Some(s) => write_json(&self.dir.join(SPURIOUSNESS), s),
            None => Ok(()),
        }
    }

    /// Records one annotation and re-propagates.
    pub fn annotate(&mut self, target: &Target, verdict: Verdict) -> Result<AnnotationView> {
        self.ensure_idle()?;
        let report = &self.analysis()?.report;
        match target {
            Target::Cluster { id } => {
                if *id >= report.k() {
                    return Err(SessionError::NotFound(format!("cluster {id}")));
                }
            }
            Target::Instance { id } => {
                if report.cluster_of(id).is_none() {
                    return Err(SessionError::NotFound(format!("clustered instance `{id}`")));
                }
            }
        }
        let mut next = self.annotations.clone();
        match target {
            Target::Cluster { id } => next.label_cluster(*id, verdict),
            Target::Instance { id } => next.override_instance(id.clone(), verdict),
        }
        let state = self.propagated(&next)?;
        self.annotations = next;
        self.state = state;
        self.save_annotations()?;
        self.journal("annotated", json!({ "target": target, "label": verdict }))?;
        self.annotation_view()
    }

    fn propagated(&self, ann: &AnnotationState) -> Result<Option<SpuriousnessState>> {
        if !ann.has_cluster_labels() {
            return Ok(None);
        }
        let adjacency = match &self.state {
            Some(s) => s.adjacency.clone(),
            None => {
                let centroids: Vec<[f64; 2]> = self.analysis()?.report.clusters.iter().map(|c| c.centroid_2d).collect();
                spurscope::spuriousness::build_adjacency(&centroids)
            }
        };
        Ok(Some(propagate(ann, &adjacency)?))
    }

    /// Replaces the annotations with a simulated annotator's session.
    pub fn oracle_annotate(&mut self, cfg: &OracleConfig) -> Result<OracleSession> {
        self.ensure_idle()?;
        let ds = self.dataset()?;
        let analysis = self.analysis()?;
        let verdicts = analysis.oracle_verdicts(ds, cfg)?;
        let session = run_oracle_session(&analysis.report, &verdicts, cfg)?;
        self.annotations = session.annotations.clone();
        self.state = Some(session.state.clone());
        self.save_annotations()?;
        self.journal("oracle-annotated", json!({ "config": cfg, "log": session.log }))?;
        Ok(session)
    }

    /// Replaces the annotations with a file's content.
    pub fn import_annotations(&mut self, ann: AnnotationState) -> Result<AnnotationView> {
        self.ensure_idle()?;
        ann.validate(&self.analysis()?.report)?;
        self.state = self.propagated(&ann)?;
        self.annotations = ann;
        self.save_annotations()?;
        self.journal("annotations-imported", json!({ "annotations": self.annotations }))?;
        self.annotation_view()
    }

    /// Resolved per-instance scores: propagated where a cluster is labeled,
    /// otherwise only the overridden instances.
    pub fn instance_scores(&self) -> Result<BTreeMap<String, f64>> {
        let report = &self.analysis()?.report;
        match &self.state {
            Some(s) => Ok(resolve_instance_scores(s, &self.annotations, report)?),
            None => Ok(self.annotations.instances.iter().map(|(id, v)| (id.clone(), v.score())).collect()),
        }
    }

    pub fn annotation_view(&self) -> Result<AnnotationView> {
        let scored = self.state.is_some();
        Ok(AnnotationView {
            annotations: self.annotations.clone(),
            cluster_scores: self.state.as_ref().map(|s| s.scores.clone()),
            instance_scores: if scored { Some(self.instance_scores()?) } else { None },
            converged: self.state.as_ref().map(|s| s.converged),
            iterations: self.state.as_ref().map(|s| s.iterations),
        })
    }

    /// Enhancement settings for this session with `req` applied.
    pub fn retrain_config(&self, req: &RetrainRequest) -> Result<EnhancementConfig> {
        let base = self.meta.train.clone().unwrap_or_default();
        let seed = req.seed.unwrap_or(self.meta.seed);
        let mut cfg = EnhancementConfig::from_training(&base, seed);
        if let Some(v) = req.noise_scale {
            cfg.noise_scale = v;
        }
        if let Some(v) = req.epochs {
            cfg.finetune.epochs = v;
        }
        if let Some(v) = req.learning_rate {
            cfg.finetune.learning_rate = v;
        }
        if let Some(v) = req.tau_s {
            cfg.tau_s = v;
        }
        if let Some(v) = req.tau_c {
            cfg.tau_c = v;
        }
        if let Some(v) = req.append {
            cfg.append = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Validates a retrain request and marks the session busy. The caller
    /// runs the job and reports back through [`Session::finish_retrain`].
    pub fn begin_retrain(&mut self, req: &RetrainRequest) -> Result<RetrainJob> {
        self.ensure_idle()?;
        let analysis = self.analysis()?;
        if self.annotations.clusters.is_empty() && self.annotations.instances.is_empty() {
            return Err(SessionError::Conflict("annotate at least one cluster or instance before retraining".into()));
        }
        let config = self.retrain_config(req)?;
        let job = RetrainJob {
            job_id: self.job.as_ref().map_or(1, |j| j.job_id + 1),
            model: self.model()?.clone(),
            dataset: self.dataset()?.clone(),
            masks: analysis.masks.clone(),
            scores: self.instance_scores()?,
            config,
        };
        self.meta.status = JobStatus::Retraining;
        self.save_meta()?;
        let record = JobRecord {
            job_id: job.job_id,
            kind: "retrain".into(),
            status: JobState::Running,
            report: None,
            error: None,
        };
        write_json(&self.dir.join(JOB), &record)?;
        self.job = Some(record);
        self.journal("retrain-started", json!({ "job_id": job.job_id, "config": job.config }))?;
        Ok(job)
    }

    /// Commits a finished job: swaps the model and appends metrics on
    /// success, records the error otherwise.
    pub fn finish_retrain(&mut self, job_id: u64, outcome: Result<(FcnModel, EnhancementReport)>) -> Result<()> {
        let mut record = JobRecord {
            job_id,
            kind: "retrain".into(),
            status: JobState::Done,
            report: None,
            error: None,
        };
        match outcome {
            Ok((model, report)) => {
                self.meta.model_version += 1;
                let v = self.meta.model_version;
                model.save(self.dir.join(MODEL))?;
                model.save(self.dir.join(format!("model-v{v}.json")))?;
                write_json(&self.dir.join(format!("enhancement-v{v}.json")), &report)?;
                self.metrics.push(MetricsEntry {
                    stage: format!("retrain-{v}"),
                    model_version: v,
                    evaluation: report.after.clone(),
                });
                write_json(&self.dir.join(METRICS), &self.metrics)?;
                self.model = Some(model);
                self.meta.status = JobStatus::Idle;
                self.journal(
                    "retrain-finished",
                    json!({
                        "job_id": job_id,
                        "model_version": v,
                        "spurious": report.spurious_count,
                        "correct": report.correct_count,
                        "skipped": report.skipped,
                    }),
                )?;
                record.report = Some(report);
            }
            Err(e) => {
                record.status = JobState::Failed;
                record.error = Some(e.to_string());
                self.meta.status = JobStatus::Failed;
                self.journal("retrain-failed", json!({ "job_id": job_id, "error": e.to_string() }))?;
            }
        }
        self.save_meta()?;
        write_json(&self.dir.join(JOB), &record)?;
        self.job = Some(record);
        Ok(())
    }

    /// Runs a retrain to completion in the calling thread.
    pub fn retrain(&mut self, req: &RetrainRequest) -> Result<EnhancementReport> {
        let job = self.begin_retrain(req)?;
        let outcome = job.run();
        let failed = outcome.as_ref().err().map(ToString::to_string);
        self.finish_retrain(job.job_id, outcome)?;
        match failed {
            Some(msg) => Err(SessionError::Invalid(msg)),
            None => Ok(self.job.as_ref().and_then(|j| j.report.clone()).expect("report of a finished job")),
        }
    }

    /// Changes the root seed that later stages derive their streams from.
    pub fn set_seed(&mut self, seed: u64) -> Result<()> {
        self.ensure_idle()?;
        self.meta.seed = seed;
        self.save_meta()?;
        self.journal("seed", json!({ "seed": seed }))
    }

    /// The model as it was before any retrain.
    pub fn initial_model(&self) -> Result<FcnModel> {
        let path = self.dir.join(INITIAL_MODEL);
        if !path.exists() {
            return Err(SessionError::Missing {
                what: "model checkpoint",
                step: "train",
            });
        }
        Ok(FcnModel::load(path)?)
    }

    /// Reruns the analysis of the initial model at each alpha with
    /// cluster-level oracle annotation only, fine-tunes with the resulting
    /// scores and stores the rows.
    pub fn alpha_sweep(&mut self, alphas: &[f64], oracle: &OracleConfig) -> Result<Vec<AlphaRow>> {
        self.ensure_idle()?;
        let base_cfg = self.meta.analysis.clone().ok_or(SessionError::Missing {
            what: "cluster analysis",
            step: "analyze",
        })?;
        let model = self.initial_model()?;
        let ds = self.dataset()?;
        let cached = self.analysis.as_ref().map(|a| a.dtw.clone());
        let base = match analyze(&model, ds, &base_cfg, cached) {
            Err(spurscope::Error::InvalidConfig(msg)) if msg.contains("cached DTW") => analyze(&model, ds, &base_cfg, None)?,
            other => other?,
        };
        let ecfg = self.retrain_config(&RetrainRequest::default())?;
        let rows = alpha_sweep(&model, ds, &base, oracle, &ecfg, alphas, None)?;
        write_json(&self.dir.join(ALPHA_SWEEP), &rows)?;
        self.journal("alpha-sweep", json!({ "alphas": alphas, "oracle": oracle }))?;
        Ok(rows)
    }

    pub fn summary(&self) -> SessionSummary {
        SessionSummary {
            session_id: self.meta.session_id.clone(),
            status: self.meta.status,
            model_version: self.meta.model_version,
            instances: self.dataset.as_ref().map_or(0, |d| d.instances.len()),
            clustered: self.analysis.as_ref().map(|a| a.clustered_ids().len()),
            k: self.analysis.as_ref().map(|a| a.report.k()),
            annotated: !self.annotations.clusters.is_empty() || !self.annotations.instances.is_empty(),
        }
    }

    /// Clusters sorted by `sort`: accuracy and confidence ascending,
    /// spuriousness descending, ties by cluster id.
    pub fn clusters_view(&self, sort: SortKey) -> Result<ClustersView> {
        let analysis = self.analysis()?;
        if sort == SortKey::Spuriousness && self.state.is_none() {
            return Err(SessionError::Conflict(
                "spuriousness is unavailable until a cluster has been annotated".into(),
            ));
        }
        let mut clusters: Vec<ClusterView> = analysis
            .report
            .clusters
            .iter()
            .map(|c| ClusterView {
                cluster_id: c.cluster_id,
                size: c.member_ids.len(),
                member_ids: c.member_ids.clone(),
                centroid_2d: c.centroid_2d,
                summary_sequence: c.summary_sequence.clone(),
                summary_attribution: c.summary_attribution.clone(),
                accuracy: c.accuracy,
                mean_confidence: c.mean_confidence,
                spuriousness: self.state.as_ref().map(|s| s.scores[c.cluster_id]),
                annotation: self.annotations.clusters.get(&c.cluster_id).copied(),
            })
            .collect();
        clusters.sort_by(|a, b| {
            let key = match sort {
                SortKey::Accuracy => a.accuracy.total_cmp(&b.accuracy),
                SortKey::Confidence => a.mean_confidence.total_cmp(&b.mean_confidence),
                SortKey::Spuriousness => b.spuriousness.unwrap_or(0.0).total_cmp(&a.spuriousness.unwrap_or(0.0)),
            };
            key.then(a.cluster_id.cmp(&b.cluster_id))
        });
        Ok(ClustersView {
            session_id: self.meta.session_id.clone(),
            model_version: self.meta.model_version,
            alpha: analysis.config.alpha,
            k: analysis.report.k(),
            sort,
            clusters,
        })
    }

    pub fn embedding_view(&self) -> Result<EmbeddingView> {
        let report = &self.analysis()?.report;
        Ok(EmbeddingView {
            session_id: self.meta.session_id.clone(),
            ids: report.embedding.ids.clone(),
            points: report.embedding.points.clone(),
            assignment: report.assignment.clone(),
        })
    }

    pub fn instances_view(&self, cluster_id: usize) -> Result<InstancesView> {
        let analysis = self.analysis()?;
        let ds = self.dataset()?;
        let cluster = analysis
            .report
            .clusters
            .get(cluster_id)
            .ok_or_else(|| SessionError::NotFound(format!("cluster {cluster_id}")))?;
        let scores = if self.state.is_some() {
            Some(self.instance_scores()?)
        } else {
            None
        };
        let instances = cluster
            .member_ids
            .iter()
            .map(|id| {
                let x = ds.get(id).ok_or_else(|| spurscope::Error::UnknownInstance(id.clone()))?;
                let p = &analysis.predictions[id];
                Ok(InstanceView {
                    id: id.clone(),
                    label: x.label,
                    split: x.split,
                    values: x.values.clone(),
                    truth_mask: x.truth_mask.clone(),
                    attribution: analysis.masks[id].weights.clone(),
                    predicted: p.predicted,
                    confidence: p.confidence,
                    score: scores.as_ref().and_then(|s| s.get(id).copied()),
                    annotation: self.annotations.instances.get(id).copied(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(InstancesView {
            session_id: self.meta.session_id.clone(),
            cluster_id,
            instances,
        })
    }
}
