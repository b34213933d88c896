//! Dataset adapters. Each adapter turns one benchmark-style file into
//! normalized [`DatasetSample`]s; benchmarks themselves are not bundled.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use r2kg_core::GraphFormat;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Boolean,
    SingleLabel,
    MultiLabel,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Boolean => "boolean",
            TaskKind::SingleLabel => "single_label",
            TaskKind::MultiLabel => "multi_label",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSample {
    pub id: String,
    pub query: String,
    pub topic_entities: Vec<String>,
    pub gold: Vec<String>,
    pub kind: TaskKind,
    /// Optional breakdown key (question type, reasoning type).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Adapter {
    GenericJsonl,
    FactkgStyle,
    MetaqaStyle,
    CronStyle,
}

impl Adapter {
    pub fn as_str(self) -> &'static str {
        match self {
            Adapter::GenericJsonl => "generic-jsonl",
            Adapter::FactkgStyle => "factkg-style",
            Adapter::MetaqaStyle => "metaqa-style",
            Adapter::CronStyle => "cron-style",
        }
    }

    /// Graph format the adapter's questions are posed against, if fixed.
    pub fn required_graph_format(self) -> Option<GraphFormat> {
        match self {
            Adapter::CronStyle => Some(GraphFormat::QuintupleTsv),
            _ => None,
        }
    }

    /// Default completion budget: short for temporal and claim datasets,
    /// long for multi-hop QA.
    pub fn default_max_tokens(self) -> u32 {
        match self {
            Adapter::FactkgStyle | Adapter::CronStyle => r2kg_core::gateway::MAX_TOKENS_SHORT,
            Adapter::GenericJsonl | Adapter::MetaqaStyle => r2kg_core::gateway::MAX_TOKENS_LONG,
        }
    }
}

impl fmt::Display for Adapter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Adapter {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "generic-jsonl" => Ok(Adapter::GenericJsonl),
            "factkg-style" => Ok(Adapter::FactkgStyle),
            "metaqa-style" => Ok(Adapter::MetaqaStyle),
            "cron-style" => Ok(Adapter::CronStyle),
            other => Err(format!(
                "unknown dataset adapter {other:?} (expected generic-jsonl, factkg-style, metaqa-style or cron-style)"
            )),
        }
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{bad} of {total} lines are malformed (more than 10%); first: line {first_line}: {first_message}")]
    TooManyBadLines { bad: usize, total: usize, first_line: usize, first_message: String },
    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IngestReport {
    pub samples: Vec<DatasetSample>,
    /// Malformed lines that were skipped.
    pub errors: Vec<LineError>,
}

/// Share of malformed lines above which ingestion aborts.
pub const MAX_BAD_FRACTION: f64 = 0.10;

pub fn ingest(adapter: Adapter, path: &Path) -> Result<IngestReport, IngestError> {
    let text =
        fs::read_to_string(path).map_err(|source| IngestError::Io { path: path.display().to_string(), source })?;
    ingest_str(adapter, &text)
}

pub fn ingest_str(adapter: Adapter, text: &str) -> Result<IngestReport, IngestError> {
    let mut samples: Vec<DatasetSample> = Vec::new();
    let mut errors = Vec::new();
    let mut total = 0;
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() || (adapter == Adapter::MetaqaStyle && line.starts_with('#')) {
            continue;
        }
        total += 1;
        let parsed = match adapter {
            Adapter::GenericJsonl => parse_generic(line),
            Adapter::FactkgStyle => parse_factkg(line, line_no),
            Adapter::MetaqaStyle => parse_metaqa(line, line_no),
            Adapter::CronStyle => parse_cron(line, line_no),
        }
        .and_then(validate);
        match parsed {
            Ok(sample) => samples.push(sample),
            Err(message) => errors.push(LineError { line: line_no, message }),
        }
    }
    if total > 0 && errors.len() as f64 > MAX_BAD_FRACTION * total as f64 {
        let first = &errors[0];
        return Err(IngestError::TooManyBadLines {
            bad: errors.len(),
            total,
            first_line: first.line,
            first_message: first.message.clone(),
        });
    }
    let mut ids = std::collections::HashSet::new();
    for s in &samples {
        if !ids.insert(s.id.as_str()) {
            return Err(IngestError::DuplicateId(s.id.clone()));
        }
    }
    Ok(IngestReport { samples, errors })
}

fn validate(mut sample: DatasetSample) -> Result<DatasetSample, String> {
    if sample.id.trim().is_empty() {
        return Err("id is empty".into());
    }
    if sample.query.trim().is_empty() {
        return Err("question is empty".into());
    }
    sample.topic_entities.retain(|e| !e.trim().is_empty());
    if sample.topic_entities.is_empty() {
        return Err("no topic entities".into());
    }
    sample.gold.retain(|l| !l.trim().is_empty());
    if sample.gold.is_empty() {
        return Err("no gold labels".into());
    }
    if sample.kind == TaskKind::Boolean {
        sample.gold = sample.gold.iter().map(|l| boolean_label(l)).collect::<Result<_, _>>()?;
    }
    if sample.kind == TaskKind::SingleLabel && sample.gold.len() != 1 {
        return Err(format!("single_label sample has {} gold labels", sample.gold.len()));
    }
    Ok(sample)
}

fn boolean_label(raw: &str) -> Result<String, String> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "true" | "supported" => Ok("True".into()),
        "false" | "refuted" => Ok("False".into()),
        other => Err(format!("boolean gold label must be True or False, got {other:?}")),
    }
}

fn parse_json(line: &str) -> Result<Value, String> {
    serde_json::from_str(line).map_err(|e| format!("invalid JSON: {e}"))
}

fn string_field(v: &Value, key: &str) -> Result<String, String> {
    match v.get(key) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(Value::Number(n)) => Ok(n.to_string()),
        Some(_) => Err(format!("field {key:?} must be a string")),
        None => Err(format!("missing field {key:?}")),
    }
}

fn optional_id(v: &Value, fallback: String) -> Result<String, String> {
    match v.get("id") {
        None | Some(Value::Null) => Ok(fallback),
        Some(_) => string_field(v, "id"),
    }
}

/// Accepts a list of strings/bools/numbers or a single scalar.
fn label_list(v: &Value, key: &str) -> Result<Vec<String>, String> {
    let scalar = |x: &Value| -> Result<String, String> {
        match x {
            Value::String(s) => Ok(s.clone()),
            Value::Bool(b) => Ok(if *b { "True".into() } else { "False".into() }),
            Value::Number(n) => Ok(n.to_string()),
            _ => Err(format!("field {key:?} holds a non-scalar label")),
        }
    };
    match v.get(key) {
        Some(Value::Array(items)) => items.iter().map(scalar).collect(),
        Some(other) => Ok(vec![scalar(other)?]),
        None => Err(format!("missing field {key:?}")),
    }
}

fn optional_group(v: &Value, key: &str) -> Option<String> {
    match v.get(key) {
        Some(Value::String(s)) => Some(s.clone()),
        Some(Value::Array(items)) => items.first().and_then(Value::as_str).map(String::from),
        _ => None,
    }
}

/// `{id, question, entities, labels, kind, group?}`
fn parse_generic(line: &str) -> Result<DatasetSample, String> {
    let v = parse_json(line)?;
    let kind: TaskKind = serde_json::from_value(v.get("kind").cloned().ok_or("missing field \"kind\"")?)
        .map_err(|_| "field \"kind\" must be boolean, single_label or multi_label".to_string())?;
    Ok(DatasetSample {
        id: string_field(&v, "id")?,
        query: string_field(&v, "question")?,
        topic_entities: label_list(&v, "entities")?,
        gold: label_list(&v, "labels")?,
        kind,
        group: optional_group(&v, "group"),
    })
}

/// `{id?, claim, entities, label, types?}` with a boolean label.
fn parse_factkg(line: &str, line_no: usize) -> Result<DatasetSample, String> {
    let v = parse_json(line)?;
    Ok(DatasetSample {
        id: optional_id(&v, format!("factkg-{line_no}"))?,
        query: string_field(&v, "claim")?,
        topic_entities: label_list(&v, "entities")?,
        gold: label_list(&v, "label")?,
        kind: TaskKind::Boolean,
        group: optional_group(&v, "types"),
    })
}

/// `question with [Topic Entity]<TAB>answer1|answer2`
fn parse_metaqa(line: &str, line_no: usize) -> Result<DatasetSample, String> {
    let (question, answers) = line.split_once('\t').ok_or("expected question<TAB>answers")?;
    let mut topic_entities = Vec::new();
    let mut rest = question;
    while let Some(open) = rest.find('[') {
        let close = rest[open..].find(']').ok_or("unclosed [ in question")? + open;
        topic_entities.push(rest[open + 1..close].trim().to_string());
        rest = &rest[close + 1..];
    }
    if topic_entities.is_empty() {
        return Err("question has no [bracketed] topic entity".into());
    }
    Ok(DatasetSample {
        id: format!("metaqa-{line_no}"),
        query: question.trim().to_string(),
        topic_entities,
        gold: answers.split('|').map(|a| a.trim().to_string()).collect(),
        kind: TaskKind::MultiLabel,
        group: None,
    })
}

/// `{id?, question, entities, answers, type?}` posed against a quintuple graph.
fn parse_cron(line: &str, line_no: usize) -> Result<DatasetSample, String> {
    let v = parse_json(line)?;
    let gold = label_list(&v, "answers")?;
    let kind = if gold.len() == 1 { TaskKind::SingleLabel } else { TaskKind::MultiLabel };
    Ok(DatasetSample {
        id: optional_id(&v, format!("cron-{line_no}"))?,
        query: string_field(&v, "question")?,
        topic_entities: label_list(&v, "entities")?,
        gold,
        kind,
        group: optional_group(&v, "type"),
    })
}
