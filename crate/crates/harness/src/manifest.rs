//! Experiment manifests: one TOML file describing dataset, graph, run
//! configuration and backends. Relative paths resolve against the
//! manifest's own directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use r2kg_core::gateway::{Sampling, ScriptEntry};
use r2kg_core::orchestrator::{Mode, RunConfig, Strategy, DEFAULT_DUAL_LIMIT, DEFAULT_TRIALS, DEFAULT_TRIAL_LIMIT};
use r2kg_core::GraphFormat;
use serde::Deserialize;
use thiserror::Error;

use crate::dataset::Adapter;

pub const DEFAULT_CONCURRENCY: usize = 4;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing manifest {path}: {source}")]
    Toml { path: String, source: Box<toml::de::Error> },
    #[error("parsing script file {path}: {source}")]
    Script { path: String, source: serde_json::Error },
    #[error("invalid manifest: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub adapter: Adapter,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSection {
    pub path: PathBuf,
    pub format: GraphFormat,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub mode: Mode,
    pub limit: Option<u32>,
    pub trials: Option<u32>,
    pub strategy: Option<Strategy>,
    /// `[[top_p, temperature], ...]` for sampling variation.
    pub sampling: Option<Vec<[f64; 2]>>,
    #[serde(default)]
    pub few_shot_block: usize,
    pub max_tokens: Option<u32>,
    /// Directory overriding the built-in prompt templates.
    pub prompts_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendSpec {
    /// Canned per-sample responses from a JSON script file.
    Scripted {
        script: PathBuf,
        #[serde(default = "scripted_model")]
        model: String,
        top_p: Option<f64>,
        temperature: Option<f64>,
    },
    /// OpenAI-compatible chat completions endpoint; key from the environment.
    Openai { endpoint: String, model: String, top_p: Option<f64>, temperature: Option<f64> },
}

fn scripted_model() -> String {
    "scripted".into()
}

impl BackendSpec {
    pub fn model(&self) -> &str {
        match self {
            BackendSpec::Scripted { model, .. } | BackendSpec::Openai { model, .. } => model,
        }
    }

    /// Role sampling; unset fields keep the defaults.
    pub fn sampling(&self) -> Sampling {
        let (top_p, temperature) = match self {
            BackendSpec::Scripted { top_p, temperature, .. } | BackendSpec::Openai { top_p, temperature, .. } => {
                (top_p, temperature)
            }
        };
        let base = Sampling::default();
        Sampling::new(top_p.unwrap_or(base.top_p), temperature.unwrap_or(base.temperature))
    }
}

/// Minimum values the report must reach; any miss fails `report`.
#[derive(Debug, Clone, Default, PartialEq, Deserialize, serde::Serialize)]
#[serde(deny_unknown_fields)]
pub struct Gates {
    pub coverage: Option<f64>,
    pub micro_f1: Option<f64>,
    pub samplewise_f1: Option<f64>,
    pub hit_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    output_dir: PathBuf,
    concurrency: Option<usize>,
    #[serde(default)]
    seed: u64,
    dataset: DatasetSection,
    graph: GraphSection,
    run: RunSection,
    operator: BackendSpec,
    supervisor: Option<BackendSpec>,
    gates: Option<Gates>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub source: PathBuf,
    pub output_dir: PathBuf,
    pub concurrency: usize,
    pub seed: u64,
    pub dataset: DatasetSection,
    pub graph: GraphSection,
    pub run: RunSection,
    pub operator: BackendSpec,
    pub supervisor: Option<BackendSpec>,
    pub gates: Option<Gates>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let text = fs::read_to_string(path)
            .map_err(|source| ManifestError::Io { path: path.display().to_string(), source })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, path, &base)
    }

    pub fn parse(text: &str, source: &Path, base: &Path) -> Result<Self, ManifestError> {
        let raw: RawManifest = toml::from_str(text)
            .map_err(|e| ManifestError::Toml { path: source.display().to_string(), source: Box::new(e) })?;
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let fix_backend = |b: BackendSpec| match b {
            BackendSpec::Scripted { script, model, top_p, temperature } => {
                BackendSpec::Scripted { script: resolve(&script), model, top_p, temperature }
            }
            other => other,
        };
        let manifest = Manifest {
            source: source.to_path_buf(),
            output_dir: resolve(&raw.output_dir),
            concurrency: raw.concurrency.unwrap_or(DEFAULT_CONCURRENCY),
            seed: raw.seed,
            dataset: DatasetSection { path: resolve(&raw.dataset.path), ..raw.dataset },
            graph: GraphSection { path: resolve(&raw.graph.path), ..raw.graph },
            run: RunSection { prompts_dir: raw.run.prompts_dir.as_deref().map(resolve), ..raw.run },
            operator: fix_backend(raw.operator),
            supervisor: raw.supervisor.map(fix_backend),
            gates: raw.gates,
        };
        manifest.check()?;
        Ok(manifest)
    }

    fn check(&self) -> Result<(), ManifestError> {
        let invalid = |m: String| Err(ManifestError::Invalid(m));
        if self.concurrency == 0 {
            return invalid("concurrency must be at least 1".into());
        }
        if let Some(required) = self.dataset.adapter.required_graph_format() {
            if self.graph.format != required {
                return invalid(format!(
                    "adapter {} needs a {} graph, got {}",
                    self.dataset.adapter,
                    required.as_str(),
                    self.graph.format.as_str()
                ));
            }
        }
        if self.run.mode == Mode::Dual && self.supervisor.is_none() {
            return invalid("dual mode needs a [supervisor] backend".into());
        }
        if self.run.mode == Mode::Dual && (self.run.strategy.is_some() || self.run.trials.is_some()) {
            return invalid("strategy and trials only apply to single_sc mode".into());
        }
        for (role, spec) in [("operator", Some(&self.operator)), ("supervisor", self.supervisor.as_ref())] {
            let Some(s) = spec.map(BackendSpec::sampling) else { continue };
            if !(s.top_p > 0.0 && s.top_p <= 1.0) || s.temperature.is_nan() || s.temperature < 0.0 {
                return invalid(format!(
                    "{role} sampling out of range: top_p {}, temperature {}",
                    s.top_p, s.temperature
                ));
            }
        }
        if let Some(gates) = &self.gates {
            for (name, v) in [
                ("coverage", gates.coverage),
                ("micro_f1", gates.micro_f1),
                ("samplewise_f1", gates.samplewise_f1),
                ("hit_rate", gates.hit_rate),
            ] {
                if v.is_some_and(|v| !(0.0..=1.0).contains(&v)) {
                    return invalid(format!("gate {name} must lie in [0, 1]"));
                }
            }
        }
        Ok(())
    }

    pub fn run_config(&self) -> RunConfig {
        let mut cfg = match self.run.mode {
            Mode::Dual => RunConfig::dual(self.run.limit.unwrap_or(DEFAULT_DUAL_LIMIT)),
            Mode::SingleSc => RunConfig::single_sc(
                self.run.limit.unwrap_or(DEFAULT_TRIAL_LIMIT),
                self.run.trials.unwrap_or(DEFAULT_TRIALS),
                self.run.strategy.unwrap_or(Strategy::MultiPrompt),
            ),
        };
        if self.run.mode == Mode::SingleSc && self.run.strategy.is_none() {
            cfg.strategy = None;
        }
        if let Some(pairs) = &self.run.sampling {
            cfg.sampling = pairs.iter().map(|[p, t]| Sampling::new(*p, *t)).collect();
        }
        cfg.few_shot_block = self.run.few_shot_block;
        cfg.seed = self.seed;
        cfg
    }

    pub fn max_tokens(&self) -> u32 {
        self.run.max_tokens.unwrap_or_else(|| self.dataset.adapter.default_max_tokens())
    }
}

/// Script file layout: `{sample_id: {operator: [...], supervisor: [...]}}`.
/// Entries are either bare response strings or `{expect, response}` objects.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleScript {
    #[serde(default)]
    pub operator: Vec<ScriptLine>,
    #[serde(default)]
    pub supervisor: Vec<ScriptLine>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum ScriptLine {
    Bare(String),
    Entry(ScriptEntry),
}

impl ScriptLine {
    pub fn into_entry(self) -> ScriptEntry {
        match self {
            ScriptLine::Bare(s) => ScriptEntry::any(s),
            ScriptLine::Entry(e) => e,
        }
    }
}

pub type ScriptBook = BTreeMap<String, SampleScript>;

pub fn load_scripts(path: &Path) -> Result<ScriptBook, ManifestError> {
    let text =
        fs::read_to_string(path).map_err(|source| ManifestError::Io { path: path.display().to_string(), source })?;
    serde_json::from_str(&text).map_err(|source| ManifestError::Script { path: path.display().to_string(), source })
}
