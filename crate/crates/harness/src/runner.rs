//! Batch execution of a manifest: per-sample reasoning runs with bounded
//! concurrency, persisted results and transcripts, and resume.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufReader, BufWriter, Write};
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use r2kg_core::gateway::{
    AgentClient, AgentRole, CallCounters, ChatBackend, RemoteBackend, RoleTally, Sampling, ScriptedBackend,
};
use r2kg_core::orchestrator::{self, AbstainReason, Mode, ReasoningResult, RunConfig, RunStats, Task, Verdict};
use r2kg_core::server::write_transcript;
use r2kg_core::{KnowledgeGraph, PromptSet};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{self, DatasetSample, IngestError, LineError, TaskKind};
use crate::manifest::{load_scripts, BackendSpec, Gates, Manifest, ManifestError, ScriptBook, ScriptLine};
use crate::report;

pub const GOLD_FILE: &str = "gold.jsonl";
pub const RESULTS_FILE: &str = "results.jsonl";
pub const RUN_FILE: &str = "run.json";
pub const TRANSCRIPT_DIR: &str = "transcripts";

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("loading graph {path}: {message}")]
    Graph { path: String, message: String },
    #[error("prompts: {0}")]
    Prompts(String),
    #[error("run configuration: {0}")]
    Config(String),
    #[error("{role} backend: {message}")]
    Backend { role: &'static str, message: String },
    #[error("output directory {path} holds a different run ({field} differs); use a fresh directory")]
    RunMismatch { path: String, field: String },
    #[error("output directory {0} is not empty and holds no run")]
    NotARunDir(String),
    #[error("{path}: {message}")]
    Corrupt { path: String, message: String },
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error(transparent)]
    Report(#[from] report::ReportError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictTag {
    Answered,
    Abstained,
}

/// One line of `results.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub id: String,
    pub verdict: VerdictTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<AbstainReason>,
    pub iterations: u32,
    pub operator_calls: u32,
    pub supervisor_calls: u32,
    /// Relative to the run directory.
    pub transcript_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ResultRecord {
    fn from_result(id: &str, transcript_path: String, result: &ReasoningResult) -> Self {
        let (verdict, labels, reason) = match &result.verdict {
            Verdict::Answered(labels) => (VerdictTag::Answered, Some(labels.clone()), None),
            Verdict::Abstained(reason) => (VerdictTag::Abstained, None, Some(*reason)),
        };
        Self {
            id: id.to_string(),
            verdict,
            labels,
            reason,
            iterations: result.stats.iterations,
            operator_calls: result.stats.operator_calls,
            supervisor_calls: result.stats.supervisor_calls,
            transcript_path,
            error: result.error.clone(),
        }
    }

    pub fn prediction(&self) -> Option<Vec<String>> {
        match self.verdict {
            VerdictTag::Answered => Some(self.labels.clone().unwrap_or_default()),
            VerdictTag::Abstained => None,
        }
    }
}

/// One line of `gold.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldRecord {
    pub id: String,
    pub labels: Vec<String>,
    pub kind: TaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
}

/// Identity of a run, stored in `run.json` and checked on resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub adapter: String,
    pub dataset: String,
    pub graph: String,
    pub graph_format: String,
    pub mode: Mode,
    pub limit: u32,
    pub trials: u32,
    pub strategy: Option<String>,
    pub seed: u64,
    pub operator_model: String,
    pub supervisor_model: Option<String>,
    pub operator_sampling: Sampling,
    pub supervisor_sampling: Option<Sampling>,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gates: Option<Gates>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub samples: usize,
    /// Samples already recorded before this invocation.
    pub resumed: usize,
    pub executed: usize,
    /// Dataset lines skipped as malformed.
    pub bad_lines: Vec<(usize, String)>,
    /// Topic entities dropped because the graph does not contain them.
    pub unresolved_entities: usize,
    pub warnings: Vec<String>,
    pub operator: RoleTally,
    pub supervisor: RoleTally,
}

enum BackendSource {
    Scripted { book: ScriptBook, role: AgentRole },
    Remote(Arc<RemoteBackend>),
}

impl BackendSource {
    fn build(spec: &BackendSpec, role: AgentRole) -> Result<Self, RunError> {
        let role_name = role_name(role);
        match spec {
            BackendSpec::Scripted { script, .. } => Ok(BackendSource::Scripted { book: load_scripts(script)?, role }),
            BackendSpec::Openai { endpoint, .. } => RemoteBackend::from_env(endpoint.clone())
                .map(|b| BackendSource::Remote(Arc::new(b)))
                .map_err(|e| RunError::Backend { role: role_name, message: e.to_string() }),
        }
    }

    fn check_covers(&self, ids: &[&str]) -> Result<(), RunError> {
        if let BackendSource::Scripted { book, role } = self {
            if let Some(missing) = ids.iter().find(|id| !book.contains_key(**id)) {
                return Err(RunError::Backend {
                    role: role_name(*role),
                    message: format!("script file has no entry for sample {missing:?}"),
                });
            }
        }
        Ok(())
    }

    fn for_sample(&self, id: &str) -> Arc<dyn ChatBackend> {
        match self {
            BackendSource::Scripted { book, role } => {
                let script = book.get(id).cloned().unwrap_or_default();
                let lines = match role {
                    AgentRole::Operator => script.operator,
                    AgentRole::Supervisor => script.supervisor,
                };
                Arc::new(ScriptedBackend::new(lines.into_iter().map(ScriptLine::into_entry).collect()))
            }
            BackendSource::Remote(b) => Arc::clone(b) as Arc<dyn ChatBackend>,
        }
    }
}

fn role_name(role: AgentRole) -> &'static str {
    match role {
        AgentRole::Operator => "operator",
        AgentRole::Supervisor => "supervisor",
    }
}

/// File name for a sample's transcript; ids are reduced to a safe alphabet.
pub fn transcript_file_name(id: &str) -> String {
    let safe: String =
        id.chars().map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' }).collect();
    format!("{TRANSCRIPT_DIR}/{safe}.jsonl")
}

/// Everything validated up front, before any backend call.
struct Prepared {
    samples: Vec<DatasetSample>,
    bad_lines: Vec<LineError>,
    graph: KnowledgeGraph,
    prompts: PromptSet,
    cfg: RunConfig,
    max_tokens: u32,
    operator: BackendSource,
    supervisor: Option<BackendSource>,
    info: RunInfo,
}

fn prepare(manifest: &Manifest) -> Result<Prepared, RunError> {
    let prompts = match &manifest.run.prompts_dir {
        Some(dir) => PromptSet::load_dir(dir).map_err(|e| RunError::Prompts(e.to_string()))?,
        None => PromptSet::builtin(),
    };
    let cfg = manifest.run_config();
    cfg.validate(&prompts).map_err(|e| RunError::Config(e.to_string()))?;

    let graph_path = &manifest.graph.path;
    let file = File::open(graph_path).map_err(io_err(graph_path))?;
    let graph = KnowledgeGraph::load(BufReader::new(file), manifest.graph.format)
        .map_err(|e| RunError::Graph { path: graph_path.display().to_string(), message: e.to_string() })?;

    let ingested = dataset::ingest(manifest.dataset.adapter, &manifest.dataset.path)?;
    let mut names = HashSet::new();
    for s in &ingested.samples {
        if !names.insert(transcript_file_name(&s.id)) {
            return Err(RunError::Config(format!(
                "sample id {:?} collides with another id after file-name sanitizing",
                s.id
            )));
        }
    }
    let ids: Vec<&str> = ingested.samples.iter().map(|s| s.id.as_str()).collect();

    let operator = BackendSource::build(&manifest.operator, AgentRole::Operator)?;
    operator.check_covers(&ids)?;
    let supervisor = match (&manifest.supervisor, cfg.mode) {
        (Some(spec), Mode::Dual) => {
            let source = BackendSource::build(spec, AgentRole::Supervisor)?;
            source.check_covers(&ids)?;
            Some(source)
        }
        _ => None,
    };

    let info = RunInfo {
        adapter: manifest.dataset.adapter.to_string(),
        dataset: manifest.dataset.path.display().to_string(),
        graph: graph_path.display().to_string(),
        graph_format: manifest.graph.format.as_str().to_string(),
        mode: cfg.mode,
        limit: cfg.limit,
        trials: cfg.trials,
        strategy: cfg.strategy.map(|s| serde_json::to_value(s).unwrap().as_str().unwrap_or_default().to_string()),
        seed: cfg.seed,
        operator_model: manifest.operator.model().to_string(),
        supervisor_model: manifest.supervisor.as_ref().map(|s| s.model().to_string()),
        operator_sampling: manifest.operator.sampling(),
        supervisor_sampling: manifest.supervisor.as_ref().map(BackendSpec::sampling),
        max_tokens: manifest.max_tokens(),
        gates: manifest.gates.clone(),
    };

    Ok(Prepared {
        samples: ingested.samples,
        bad_lines: ingested.errors,
        graph,
        prompts,
        cfg,
        max_tokens: manifest.max_tokens(),
        operator,
        supervisor,
        info,
    })
}

/// Prepares the output directory and returns the ids already recorded.
/// A torn final line left by an interrupted run is dropped.
fn open_run_dir(dir: &Path, info: &RunInfo) -> Result<Vec<ResultRecord>, RunError> {
    fs::create_dir_all(dir.join(TRANSCRIPT_DIR)).map_err(io_err(dir))?;
    let run_file = dir.join(RUN_FILE);
    if run_file.exists() {
        let text = fs::read_to_string(&run_file).map_err(io_err(&run_file))?;
        let previous: RunInfo = serde_json::from_str(&text)
            .map_err(|e| RunError::Corrupt { path: run_file.display().to_string(), message: e.to_string() })?;
        if let Some(field) = first_difference(&previous, info) {
            return Err(RunError::RunMismatch { path: dir.display().to_string(), field });
        }
    } else {
        let has_content =
            fs::read_dir(dir).map_err(io_err(dir))?.filter_map(Result::ok).any(|e| e.file_name() != TRANSCRIPT_DIR);
        if has_content {
            return Err(RunError::NotARunDir(dir.display().to_string()));
        }
    }
    let mut text = serde_json::to_string_pretty(info).expect("run info serializes");
    text.push('\n');
    fs::write(&run_file, text).map_err(io_err(&run_file))?;

    let results = dir.join(RESULTS_FILE);
    if !results.exists() {
        return Ok(Vec::new());
    }
    let raw = fs::read_to_string(&results).map_err(io_err(&results))?;
    let mut records = Vec::new();
    let mut kept = 0;
    let lines: Vec<&str> = raw.split_inclusive('\n').collect();
    for (i, line) in lines.iter().enumerate() {
        let complete = line.ends_with('\n');
        match serde_json::from_str::<ResultRecord>(line.trim_end()) {
            Ok(r) if complete => {
                records.push(r);
                kept += line.len();
            }
            _ if i + 1 == lines.len() => break,
            Ok(_) | Err(_) => {
                return Err(RunError::Corrupt {
                    path: results.display().to_string(),
                    message: format!("line {} is not a result record", i + 1),
                })
            }
        }
    }
    if kept < raw.len() {
        let f = OpenOptions::new().write(true).open(&results).map_err(io_err(&results))?;
        f.set_len(kept as u64).map_err(io_err(&results))?;
    }
    Ok(records)
}

fn first_difference(a: &RunInfo, b: &RunInfo) -> Option<String> {
    let (va, vb) = (serde_json::to_value(a).ok()?, serde_json::to_value(b).ok()?);
    let (a, b) = (va.as_object()?, vb.as_object()?);
    let keys: BTreeSet<&String> = a.keys().chain(b.keys()).filter(|k| *k != "gates").collect();
    let first = keys.into_iter().find(|k| a.get(*k) != b.get(*k)).cloned();
    first
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), RunError> {
    let tmp = path.with_extension("jsonl.tmp");
    {
        let mut out = BufWriter::new(File::create(&tmp).map_err(io_err(&tmp))?);
        for row in rows {
            serde_json::to_writer(&mut out, row).expect("records serialize");
            out.write_all(b"\n").map_err(io_err(&tmp))?;
        }
        out.flush().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

struct SampleOutcome {
    record: ResultRecord,
    transcript: Vec<r2kg_core::ChatEntry>,
}

fn run_sample(
    sample: &DatasetSample,
    prep: &Prepared,
    counters: &Arc<CallCounters>,
    model_ids: (&str, &str),
) -> SampleOutcome {
    let transcript_path = transcript_file_name(&sample.id);
    let topic: Vec<String> = sample.topic_entities.iter().filter(|e| prep.graph.contains_entity(e)).cloned().collect();
    if topic.is_empty() {
        let result = ReasoningResult {
            verdict: Verdict::Abstained(AbstainReason::HardFailure),
            transcript: Vec::new(),
            stats: RunStats::default(),
            trial_inputs: Vec::new(),
            error: Some("none of the topic entities occurs in the graph".into()),
        };
        return SampleOutcome {
            record: ResultRecord::from_result(&sample.id, transcript_path, &result),
            transcript: Vec::new(),
        };
    }
    let task = Task::new(sample.query.clone(), topic);
    let operator = AgentClient::new(prep.operator.for_sample(&sample.id), AgentRole::Operator, model_ids.0)
        .with_sampling(prep.info.operator_sampling)
        .with_max_tokens(prep.max_tokens)
        .with_counters(Arc::clone(counters));
    let supervisor = match &prep.supervisor {
        Some(source) => AgentClient::new(source.for_sample(&sample.id), AgentRole::Supervisor, model_ids.1)
            .with_sampling(prep.info.supervisor_sampling.unwrap_or_default())
            .with_max_tokens(prep.max_tokens)
            .with_counters(Arc::clone(counters)),
        None => operator.as_role(AgentRole::Supervisor),
    };
    let outcome = panic::catch_unwind(AssertUnwindSafe(|| {
        orchestrator::run(&task, &prep.graph, &operator, &supervisor, &prep.prompts, &prep.cfg)
    }));
    let result = outcome.unwrap_or_else(|payload| {
        let message = payload
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "unknown panic".into());
        ReasoningResult {
            verdict: Verdict::Abstained(AbstainReason::HardFailure),
            transcript: Vec::new(),
            stats: RunStats::default(),
            trial_inputs: Vec::new(),
            error: Some(format!("panic: {message}")),
        }
    });
    SampleOutcome {
        record: ResultRecord::from_result(&sample.id, transcript_path, &result),
        transcript: result.transcript,
    }
}

/// Executes every pending sample of the manifest and writes the run
/// directory: `gold.jsonl`, `results.jsonl`, `transcripts/`, reports and
/// call statistics. Manifest, graph, dataset and backend problems are
/// reported before any model call.
pub fn run_experiment(manifest: &Manifest) -> Result<RunSummary, RunError> {
    let prep = prepare(manifest)?;
    let dir = manifest.output_dir.clone();
    let previous = open_run_dir(&dir, &prep.info)?;

    let gold: Vec<GoldRecord> = prep
        .samples
        .iter()
        .map(|s| GoldRecord { id: s.id.clone(), labels: s.gold.clone(), kind: s.kind, group: s.group.clone() })
        .collect();
    write_jsonl(&dir.join(GOLD_FILE), &gold)?;

    let done: HashSet<String> = previous.iter().map(|r| r.id.clone()).collect();
    let known: HashSet<&str> = prep.samples.iter().map(|s| s.id.as_str()).collect();
    if let Some(stray) = previous.iter().find(|r| !known.contains(r.id.as_str())) {
        return Err(RunError::Corrupt {
            path: dir.join(RESULTS_FILE).display().to_string(),
            message: format!("recorded sample {:?} is not in the dataset", stray.id),
        });
    }
    let pending: Vec<&DatasetSample> = prep.samples.iter().filter(|s| !done.contains(&s.id)).collect();

    let mut warnings = Vec::new();
    let mut unresolved = 0;
    for s in &prep.samples {
        for e in s.topic_entities.iter().filter(|e| !prep.graph.contains_entity(e)) {
            unresolved += 1;
            warnings.push(format!("sample {}: topic entity {e:?} not in graph, skipped", s.id));
        }
    }

    let counters = Arc::new(CallCounters::default());
    let results_path = dir.join(RESULTS_FILE);
    let sink =
        Mutex::new(OpenOptions::new().create(true).append(true).open(&results_path).map_err(io_err(&results_path))?);
    let next = AtomicUsize::new(0);
    let failure: Mutex<Option<RunError>> = Mutex::new(None);
    let supervisor_model = manifest.supervisor.as_ref().map(|s| s.model()).unwrap_or(manifest.operator.model());
    let models = (manifest.operator.model(), supervisor_model);
    let width = manifest.concurrency.min(pending.len()).max(1);

    thread::scope(|scope| {
        for _ in 0..width {
            scope.spawn(|| loop {
                if failure.lock().unwrap().is_some() {
                    return;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(sample) = pending.get(i) else { return };
                let outcome = run_sample(sample, &prep, &counters, models);
                if let Err(e) = persist(&dir, &sink, &outcome) {
                    failure.lock().unwrap().get_or_insert(e);
                    return;
                }
            });
        }
    });
    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }
    drop(sink);

    let mut by_id: HashMap<String, ResultRecord> = crate::jsonl::read_jsonl::<ResultRecord>(&results_path)
        .map_err(io_err(&results_path))?
        .into_iter()
        .map(|r| (r.id.clone(), r))
        .collect();
    let ordered: Vec<ResultRecord> = prep.samples.iter().filter_map(|s| by_id.remove(&s.id)).collect();
    write_jsonl(&results_path, &ordered)?;

    report::write_outputs(&dir)?;

    Ok(RunSummary {
        run_dir: dir,
        samples: prep.samples.len(),
        resumed: previous.len(),
        executed: pending.len(),
        bad_lines: prep.bad_lines.into_iter().map(|e| (e.line, e.message)).collect(),
        unresolved_entities: unresolved,
        warnings,
        operator: counters.tally(AgentRole::Operator),
        supervisor: counters.tally(AgentRole::Supervisor),
    })
}

/// Transcript first, then the result line; a result line is the commit
/// marker for a sample.
fn persist(dir: &Path, sink: &Mutex<File>, outcome: &SampleOutcome) -> Result<(), RunError> {
    let path = dir.join(&outcome.record.transcript_path);
    let mut buf = Vec::new();
    write_transcript(&outcome.transcript, &mut buf).map_err(io_err(&path))?;
    fs::write(&path, buf).map_err(io_err(&path))?;
    let mut line = serde_json::to_string(&outcome.record).expect("records serialize");
    line.push('\n');
    let results = dir.join(RESULTS_FILE);
    let mut file = sink.lock().unwrap();
    file.write_all(line.as_bytes()).map_err(io_err(&results))?;
    file.flush().map_err(io_err(&results))
}
