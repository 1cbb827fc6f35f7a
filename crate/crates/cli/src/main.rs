//! `spurscope`: headless driver for the annotation workbench.
//!
//! Every stage reads and writes one session directory. Exit status is 0 on
//! success, 1 for invalid input and 2 for runtime failures.

use std::fmt::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use spurscope::data::{generate_steve_like, generate_univariate, inject_spurious_artifact, save_dataset, load_dataset};
use spurscope::evaluation::Evaluation;
use spurscope::experiment::{compare, AlphaRow, CompareTable, ExperimentConfig, Scores};
use spurscope::model::{FcnConfig, FcnModel};
use spurscope::oracle::{OracleConfig, Target};
use spurscope::pipeline::AnalysisConfig;
use spurscope::seed;
use spurscope::spuriousness::{AnnotationState, Verdict};
use spurscope_service::session::{MetricsEntry, RetrainRequest, Session, SessionError};
use spurscope_service::AppState;

#[derive(Debug, Parser)]
#[command(name = "spurscope", version, about = "Find and fix spurious attention in time-series anomaly classifiers")]
struct Cli {
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct SessionArg {
    /// Session directory.
    #[arg(long, short, env = "SPURSCOPE_SESSION", default_value = "session")]
    session: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DataKind {
    Univariate,
    Steve,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Width {
    Small,
    Full,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LabelArg {
    Correct,
    Spurious,
}

impl From<LabelArg> for Verdict {
    fn from(l: LabelArg) -> Self {
        match l {
            LabelArg::Correct => Verdict::Correct,
            LabelArg::Spurious => Verdict::Spurious,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset into the session.
    GenData {
        #[command(flatten)]
        session: SessionArg,
        #[arg(long, value_enum, default_value = "univariate")]
        kind: DataKind,
        #[arg(long, default_value_t = 1000)]
        instances: usize,
        /// Sequence length (univariate only).
        #[arg(long, default_value_t = 800)]
        length: usize,
        #[arg(long, default_value_t = 0.4)]
        anomaly_ratio: f64,
        /// Plant the experiment's spurious artifact on train anomalies.
        #[arg(long)]
        artifact: bool,
        #[arg(long, env = "SPURSCOPE_SEED", default_value_t = 0)]
        seed: u64,
        /// Also write the raw dataset to this JSONL file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the initial model, or install an existing checkpoint.
    Train {
        #[command(flatten)]
        session: SessionArg,
        /// Import this raw JSONL dataset first.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Use this checkpoint instead of training.
        #[arg(long, conflicts_with_all = ["epochs", "learning_rate", "batch_size", "width"])]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long, value_enum)]
        width: Option<Width>,
    },
    /// Explain, embed and cluster the anomaly-related train instances.
    Analyze {
        #[command(flatten)]
        session: SessionArg,
        /// Weight of the DTW distance against the attribution distance.
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        /// Fixed cluster count; the elbow rule picks one when absent.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = 10)]
        k_max: usize,
        /// Sakoe-Chiba half-width; unconstrained DTW when absent.
        #[arg(long)]
        dtw_window: Option<usize>,
    },
    /// Record annotations from the simulated annotator, a file or the command line.
    Annotate {
        #[command(flatten)]
        session: SessionArg,
        /// Let the ground-truth oracle annotate.
        #[arg(long, group = "source")]
        oracle: bool,
        /// Replace the annotations with this JSON file.
        #[arg(long, group = "source")]
        file: Option<PathBuf>,
        #[arg(long, group = "source", requires = "label")]
        cluster: Option<usize>,
        #[arg(long, group = "source", requires = "label")]
        instance: Option<String>,
        #[arg(long, value_enum)]
        label: Option<LabelArg>,
        /// Cluster actions allowed to the oracle.
        #[arg(long, default_value_t = 15)]
        budget: usize,
        /// Instance overrides allowed to the oracle after the cluster pass.
        #[arg(long, default_value_t = 0)]
        instance_budget: usize,
    },
    /// Fine-tune on the noise-masked train split.
    Retrain {
        #[command(flatten)]
        session: SessionArg,
        #[arg(long)]
        noise_scale: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        tau_s: Option<f64>,
        #[arg(long)]
        tau_c: Option<f64>,
        /// Keep the originals and add the perturbed copies.
        #[arg(long)]
        append: bool,
    },
    /// Run the seeded de-biasing experiment for every method.
    Compare {
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        /// Experiment configuration as JSON; the built-in fixture otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also run the alpha ablation.
        #[arg(long)]
        alpha_sweep: bool,
        /// Directory for compare.json and compare.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the session's metrics history, or run the alpha ablation.
    Report {
        #[command(flatten)]
        session: SessionArg,
        #[arg(long)]
        alpha_sweep: bool,
        #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,1")]
        alphas: Vec<f64>,
        #[arg(long, default_value_t = 15)]
        budget: usize,
    },
    /// Serve the HTTP API over a directory of sessions.
    Serve {
        #[arg(long, env = "SPURSCOPE_ADDR", default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[arg(long, env = "SPURSCOPE_ROOT", default_value = "sessions")]
        root: PathBuf,
    },
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<SessionError> for Failure {
    fn from(e: SessionError) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl From<spurscope::Error> for Failure {
    fn from(e: spurscope::Error) -> Self {
        SessionError::from(e).into()
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn emit<T: Serialize>(json: bool, value: &T, text: impl FnOnce() -> String) {
    if json {
        println!("{}", serde_json::to_string_pretty(value).expect("serializable output"));
    } else {
        print!("{}", text());
    }
}

fn write_file(path: &Path, contents: &str) -> Outcome {
    std::fs::write(path, contents).map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn open(session: &SessionArg) -> Result<Session, Failure> {
    Ok(Session::open(&session.session)?)
}

fn run(cli: Cli) -> Outcome {
    let json = cli.json;
    match cli.command {
        Command::GenData {
            session,
            kind,
            instances,
            length,
            anomaly_ratio,
            artifact,
            seed: root,
            out,
        } => {
            let mut raw = match kind {
                DataKind::Univariate => generate_univariate(instances, length, root, anomaly_ratio)?,
                DataKind::Steve => generate_steve_like(instances, root, anomaly_ratio)?,
            };
            if artifact {
                let spec = ExperimentConfig::default().artifact;
                raw = inject_spurious_artifact(&raw, &spec, seed::derive(root, "artifact"))?;
            }
            if let Some(path) = &out {
                save_dataset(&raw, path)?;
            }
            let mut s = Session::open_or_create(&session.session, root)?;
            s.set_seed(root)?;
            s.set_dataset(&raw)?;
            let summary = s.summary();
            emit(json, &summary, || {
                format!(
                    "dataset: {} instances, {} channel(s), length {} -> {}\n",
                    raw.instances.len(),
                    raw.channels(),
                    raw.series_len(),
                    s.dir().display()
                )
            });
        }
        Command::Train {
            session,
            dataset,
            checkpoint,
            epochs,
            learning_rate,
            batch_size,
            width,
        } => {
            let mut s = match &dataset {
                Some(_) => Session::open_or_create(&session.session, 0)?,
                None => open(&session)?,
            };
            if let Some(path) = &dataset {
                s.set_dataset(&load_dataset(path)?)?;
            }
            match &checkpoint {
                Some(path) => s.load_model(FcnModel::load(path)?)?,
                None => {
                    let root = s.meta.seed;
                    let channels = s.dataset()?.channels();
                    let model_seed = seed::derive(root, "model");
                    let cfg = match width.unwrap_or(Width::Small) {
                        Width::Small => FcnConfig::small(channels, model_seed),
                        Width::Full => FcnConfig::full(channels, model_seed),
                    };
                    let mut tc = ExperimentConfig::default().train;
                    tc.seed = seed::derive(root, "train");
                    if let Some(v) = epochs {
                        tc.epochs = v;
                    }
                    if let Some(v) = learning_rate {
                        tc.learning_rate = v;
                    }
                    if let Some(v) = batch_size {
                        tc.batch_size = v;
                    }
                    s.train(&cfg, &tc)?;
                }
            }
            let entry = &s.metrics[0];
            emit(json, entry, || format_metrics(std::slice::from_ref(entry)));
        }
        Command::Analyze {
            session,
            alpha,
            k,
            k_max,
            dtw_window,
        } => {
            let mut s = open(&session)?;
            let cfg = AnalysisConfig {
                alpha,
                k,
                k_max,
                dtw_window,
                seed: seed::derive(s.meta.seed, "analysis"),
                ..AnalysisConfig::default()
            };
            cfg.validate()?;
            let analysis = s.analyze(&cfg)?;
            let report = &analysis.report;
            let mut text = format!(
                "{} clustered instances in {} clusters (alpha {alpha})\ncluster   size  accuracy  confidence\n",
                analysis.clustered_ids().len(),
                report.k()
            );
            for c in &report.clusters {
                let _ = writeln!(
                    text,
                    "{:>7} {:>6} {:>9.4} {:>11.4}",
                    c.cluster_id,
                    c.member_ids.len(),
                    c.accuracy,
                    c.mean_confidence
                );
            }
            emit(json, &s.summary(), || text);
        }
        Command::Annotate {
            session,
            oracle,
            file,
            cluster,
            instance,
            label,
            budget,
            instance_budget,
        } => {
            let mut s = open(&session)?;
            if oracle {
                let cfg = OracleConfig {
                    budget,
                    instance_budget,
                    ..OracleConfig::default()
                };
                let run = s.oracle_annotate(&cfg)?;
                emit(json, &run, || {
                    format!(
                        "oracle: {} cluster labels, {} instance overrides, {} propagations\n",
                        run.annotations.clusters.len(),
                        run.annotations.instances.len(),
                        run.propagations
                    )
                });
                return Ok(());
            }
            let view = match (&file, cluster, instance, label) {
                (Some(path), ..) => s.import_annotations(AnnotationState::load(path)?)?,
                (None, Some(id), None, Some(l)) => s.annotate(&Target::Cluster { id }, l.into())?,
                (None, None, Some(id), Some(l)) => s.annotate(&Target::Instance { id }, l.into())?,
                _ => {
                    return Err(Failure::Validation(
                        "choose one of --oracle, --file, --cluster or --instance (the latter two with --label)".into(),
                    ))
                }
            };
            emit(json, &view, || {
                let mut text = format!(
                    "{} cluster labels, {} instance overrides\n",
                    view.annotations.clusters.len(),
                    view.annotations.instances.len()
                );
                if let Some(scores) = &view.cluster_scores {
                    for (c, v) in scores.iter().enumerate() {
                        let _ = writeln!(text, "cluster {c:>3}  spuriousness {v:.4}");
                    }
                }
                text
            });
        }
        Command::Retrain {
            session,
            noise_scale,
            epochs,
            learning_rate,
            tau_s,
            tau_c,
            append,
        } => {
            let mut s = open(&session)?;
            let req = RetrainRequest {
                noise_scale,
                epochs,
                learning_rate,
                tau_s,
                tau_c,
                seed: None,
                append: append.then_some(true),
            };
            let report = s.retrain(&req)?;
            emit(json, &report, || {
                let rows = [("before", &report.before), ("after", &report.after)];
                let mut text = format!(
                    "perturbed {} spurious and {} correct instances{}\n",
                    report.spurious_count,
                    report.correct_count,
                    if report.skipped { " (nothing qualified; model unchanged)" } else { "" }
                );
                text.push_str(&evaluation_table("stage", rows.iter().map(|(n, e)| (n.to_string(), *e))));
                text
            });
        }
        Command::Compare {
            seeds,
            config,
            alpha_sweep,
            out,
        } => {
            let cfg = match &config {
                Some(path) => {
                    let text = std::fs::read_to_string(path)
                        .map_err(|e| Failure::Validation(format!("cannot read {}: {e}", path.display())))?;
                    serde_json::from_str(&text)
                        .map_err(|e| Failure::Validation(format!("{}: {e}", path.display())))?
                }
                None => ExperimentConfig::default(),
            };
            let table = compare(&cfg, &seeds, alpha_sweep)?;
            if let Some(dir) = &out {
                std::fs::create_dir_all(dir)
                    .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", dir.display())))?;
                let body = serde_json::to_string_pretty(&table).expect("serializable table");
                write_file(&dir.join("compare.json"), &(body + "\n"))?;
                write_file(&dir.join("compare.txt"), &compare_text(&table))?;
            }
            emit(json, &table, || compare_text(&table));
        }
        Command::Report {
            session,
            alpha_sweep,
            alphas,
            budget,
        } => {
            let mut s = open(&session)?;
            if alpha_sweep {
                let oracle = OracleConfig {
                    budget,
                    ..OracleConfig::default()
                };
                let rows = s.alpha_sweep(&alphas, &oracle)?;
                emit(json, &rows, || alpha_text(&rows));
            } else {
                emit(json, &s.metrics, || format_metrics(&s.metrics));
            }
        }
        Command::Serve { addr, root } => {
            let state = Arc::new(AppState::open(&root)?);
            let rt = tokio::runtime::Runtime::new().map_err(|e| Failure::Runtime(e.to_string()))?;
            eprintln!("serving {} on http://{addr}", root.display());
            rt.block_on(spurscope_service::serve(state, addr))
                .map_err(|e| Failure::Runtime(format!("server: {e}")))?;
        }
    }
    Ok(())
}

const COLUMNS: [&str; 8] = ["acc", "prec", "rec", "f1", "ra@20", "ra@25", "ra@30", "ra@35"];

fn table_header(first: &str) -> String {
    let mut out = format!("{first:<14}");
    for c in COLUMNS {
        let _ = write!(out, " {c:>7}");
    }
    out.push('\n');
    out
}

fn table_row(label: &str, s: &Scores) -> String {
    let [a, b, c, d] = s.ra;
    let mut out = format!("{label:<14}");
    for v in [s.accuracy, s.precision, s.recall, s.f1, a, b, c, d] {
        let _ = write!(out, " {v:>7.4}");
    }
    out.push('\n');
    out
}

fn evaluation_table<'a>(first: &str, rows: impl Iterator<Item = (String, &'a Evaluation)>) -> String {
    let mut out = table_header(first);
    for (label, e) in rows {
        out.push_str(&table_row(&label, &Scores::from_evaluation(e)));
    }
    out
}

fn format_metrics(entries: &[MetricsEntry]) -> String {
    evaluation_table("stage", entries.iter().map(|m| (m.stage.clone(), &m.evaluation)))
}

fn alpha_text(rows: &[AlphaRow]) -> String {
    let mut out = String::from("alpha sweep, cluster-level annotation only\n");
    out.push_str(&table_header("alpha"));
    for r in rows {
        out.push_str(&table_row(&format!("{:.2} (k={})", r.alpha, r.k), &r.scores));
    }
    out
}

fn compare_text(table: &CompareTable) -> String {
    let mut out = table.to_text();
    out.push_str("\nper seed\n");
    for run in &table.runs {
        let _ = writeln!(
            out,
            "seed {}: bias ra@30 {:.4}, mask mass inside/outside artifact {:.3}/{:.3}, k {}, \
             cluster actions {}, instance actions {}, covered {}/{} (random {})",
            run.seed,
            run.bias.test_ra30,
            run.bias.mask_inside,
            run.bias.mask_outside,
            run.k,
            run.cluster_actions,
            run.instance_actions,
            run.covered,
            run.clustered,
            run.random_covered
        );
    }
    out
}
