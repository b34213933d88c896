//! In-memory knowledge-graph snapshot.
//!
//! A [`KnowledgeGraph`] is built once from a TSV dump and never mutated
//! afterwards, so it can be shared by reference across any number of
//! reasoning sessions. Relations can be traversed backwards by prefixing
//! them with [`INVERSE_MARKER`]; the inverse view is computed at query time
//! and never stored.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::str::FromStr;

use indexmap::IndexSet;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

/// Prefix marking a relation traversed from tail to head.
pub const INVERSE_MARKER: char = '~';

/// Canonical form of an entity or relation name: NFC, surrounding whitespace
/// removed. Matching is case-sensitive.
pub fn normalize_name(raw: &str) -> String {
    raw.trim().nfc().collect()
}

/// Splits `~rel` into `(rel, true)` and `rel` into `(rel, false)`.
pub fn split_inverse(relation: &str) -> (&str, bool) {
    match relation.strip_prefix(INVERSE_MARKER) {
        Some(rest) => (rest, true),
        None => (relation, false),
    }
}

/// Validity interval of a temporal fact, in years.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: i64,
    pub end: i64,
}

/// A stored edge: a triple, or a quintuple when `span` is present.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Fact {
    pub head: String,
    pub relation: String,
    pub tail: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span: Option<Span>,
}

impl Fact {
    /// Builds a triple, normalizing and validating every field.
    pub fn triple(head: &str, relation: &str, tail: &str) -> Result<Self, FactError> {
        Self::build(head, relation, tail, None)
    }

    /// Builds a quintuple; `start` must not exceed `end`.
    pub fn quintuple(head: &str, relation: &str, tail: &str, start: i64, end: i64) -> Result<Self, FactError> {
        Self::build(head, relation, tail, Some(Span { start, end }))
    }

    fn build(head: &str, relation: &str, tail: &str, span: Option<Span>) -> Result<Self, FactError> {
        let head = normalize_name(head);
        let relation = normalize_name(relation);
        let tail = normalize_name(tail);
        if head.is_empty() {
            return Err(FactError::EmptyField("head"));
        }
        if relation.is_empty() {
            return Err(FactError::EmptyField("relation"));
        }
        if tail.is_empty() {
            return Err(FactError::EmptyField("tail"));
        }
        if relation.starts_with(INVERSE_MARKER) {
            return Err(FactError::InverseRelation(relation));
        }
        if let Some(span) = span {
            if span.start > span.end {
                return Err(FactError::InvertedSpan(span.start, span.end));
            }
        }
        Ok(Self { head, relation, tail, span })
    }

    /// The fact as seen from its head.
    pub fn forward(&self) -> FactView {
        FactView { head: self.head.clone(), relation: self.relation.clone(), tail: self.tail.clone(), span: self.span }
    }

    /// The fact as seen from its tail: `(tail, ~relation, head)`.
    pub fn inverse(&self) -> FactView {
        FactView {
            head: self.tail.clone(),
            relation: format!("{INVERSE_MARKER}{}", self.relation),
            tail: self.head.clone(),
            span: self.span,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FactError {
    #[error("{0} is empty")]
    EmptyField(&'static str),
    #[error("stored relation {0:?} must not carry the inverse marker")]
    InverseRelation(String),
    #[error("start year {0} is after end year {1}")]
    InvertedSpan(i64, i64),
}

/// A fact oriented from the entity it was explored from. `relation` carries
/// the `~` prefix when the stored edge was traversed backwards.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FactView {
    pub head: String,
    pub relation: String,
    pub tail: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub span: Option<Span>,
}

impl fmt::Display for FactView {
    /// Bracketed tuple: `[head, relation, tail]` or `[head, relation, tail, start, end]`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}", self.head, self.relation, self.tail)?;
        if let Some(span) = self.span {
            write!(f, ", {}, {}", span.start, span.end)?;
        }
        f.write_str("]")
    }
}

/// On-disk layout of a graph dump.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraphFormat {
    TripleTsv,
    QuintupleTsv,
}

impl GraphFormat {
    pub fn columns(self) -> usize {
        match self {
            GraphFormat::TripleTsv => 3,
            GraphFormat::QuintupleTsv => 5,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GraphFormat::TripleTsv => "triple-tsv",
            GraphFormat::QuintupleTsv => "quintuple-tsv",
        }
    }
}

impl fmt::Display for GraphFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GraphFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "triple-tsv" => Ok(GraphFormat::TripleTsv),
            "quintuple-tsv" => Ok(GraphFormat::QuintupleTsv),
            other => Err(format!("unknown graph format {other:?} (expected triple-tsv or quintuple-tsv)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("i/o error reading graph: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: input is not valid UTF-8")]
    Utf8 { line: usize },
    #[error("line {line}: expected {expected} tab-separated columns, found {found}")]
    ColumnCount { line: usize, expected: usize, found: usize },
    #[error("line {line}: {column} field {value:?} is not an integer year")]
    BadTime { line: usize, column: &'static str, value: String },
    #[error("line {line}: {source}")]
    BadFact { line: usize, source: FactError },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KgError {
    #[error("ExploreKG needs at least one relation")]
    EmptyRelations,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum Direction {
    Forward,
    Inverse,
}

/// Immutable, indexed fact set.
#[derive(Debug, Clone, Default)]
pub struct KnowledgeGraph {
    facts: IndexSet<Fact>,
    fwd_index: BTreeMap<String, BTreeSet<String>>,
    rev_index: BTreeMap<String, BTreeSet<String>>,
    pair_index: BTreeMap<(String, String, Direction), Vec<usize>>,
}

impl KnowledgeGraph {
    /// Builds a graph from facts, collapsing duplicates and keeping first
    /// occurrence order.
    pub fn from_facts<I: IntoIterator<Item = Fact>>(facts: I) -> Self {
        let facts: IndexSet<Fact> = facts.into_iter().collect();
        let mut graph = Self { facts, ..Self::default() };
        graph.build_indexes();
        graph
    }

    fn build_indexes(&mut self) {
        for (idx, fact) in self.facts.iter().enumerate() {
            self.fwd_index.entry(fact.head.clone()).or_default().insert(fact.relation.clone());
            self.rev_index.entry(fact.tail.clone()).or_default().insert(fact.relation.clone());
            self.pair_index
                .entry((fact.head.clone(), fact.relation.clone(), Direction::Forward))
                .or_default()
                .push(idx);
            self.pair_index
                .entry((fact.tail.clone(), fact.relation.clone(), Direction::Inverse))
                .or_default()
                .push(idx);
        }
    }

    /// Parses a TSV dump. Blank lines and lines starting with `#` are skipped.
    pub fn load<R: Read>(source: R, format: GraphFormat) -> Result<Self, LoadError> {
        let mut reader = BufReader::new(source);
        let mut facts = Vec::new();
        let mut buf = Vec::new();
        let mut line_no = 0;
        loop {
            buf.clear();
            if reader.read_until(b'\n', &mut buf)? == 0 {
                break;
            }
            line_no += 1;
            let line = std::str::from_utf8(&buf).map_err(|_| LoadError::Utf8 { line: line_no })?;
            let line = line.trim_end_matches(['\n', '\r']);
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            facts.push(parse_line(line, line_no, format)?);
        }
        Ok(Self::from_facts(facts))
    }

    /// Writes the graph in the given format. Quintuples cannot be written as
    /// triple-tsv and vice versa; mismatched facts are written with whatever
    /// columns they carry.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for fact in &self.facts {
            match fact.span {
                Some(span) => {
                    writeln!(out, "{}\t{}\t{}\t{}\t{}", fact.head, fact.relation, fact.tail, span.start, span.end)?
                }
                None => writeln!(out, "{}\t{}\t{}", fact.head, fact.relation, fact.tail)?,
            }
        }
        Ok(())
    }

    pub fn facts(&self) -> impl Iterator<Item = &Fact> {
        self.facts.iter()
    }

    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }

    pub fn contains_entity(&self, entity: &str) -> bool {
        let entity = normalize_name(entity);
        self.fwd_index.contains_key(&entity) || self.rev_index.contains_key(&entity)
    }

    /// Number of distinct entities (heads and tails).
    pub fn entity_count(&self) -> usize {
        self.fwd_index.keys().chain(self.rev_index.keys()).collect::<BTreeSet<_>>().len()
    }

    /// Number of distinct stored relation names.
    pub fn relation_count(&self) -> usize {
        self.facts.iter().map(|f| &f.relation).collect::<BTreeSet<_>>().len()
    }

    /// Every relation touching `entity`: outbound names as stored, inbound
    /// names with the `~` prefix. Sorted; unknown entities yield an empty set.
    pub fn get_relations(&self, entity: &str) -> BTreeSet<String> {
        let entity = normalize_name(entity);
        let mut out = BTreeSet::new();
        if let Some(rels) = self.fwd_index.get(&entity) {
            out.extend(rels.iter().cloned());
        }
        if let Some(rels) = self.rev_index.get(&entity) {
            out.extend(rels.iter().map(|r| format!("{INVERSE_MARKER}{r}")));
        }
        out
    }

    /// All facts reached from `entity` through `relations`. Plain relations
    /// follow stored direction; `~r` follows `r` backwards and renders the
    /// result oriented from `entity`. Output follows the order of
    /// `relations`, then load order, without duplicates.
    pub fn explore<S: AsRef<str>>(&self, entity: &str, relations: &[S]) -> Result<Vec<FactView>, KgError> {
        if relations.is_empty() {
            return Err(KgError::EmptyRelations);
        }
        let entity = normalize_name(entity);
        let mut out: IndexSet<FactView> = IndexSet::new();
        for relation in relations {
            let relation = normalize_name(relation.as_ref());
            let (name, inverse) = split_inverse(&relation);
            let direction = if inverse { Direction::Inverse } else { Direction::Forward };
            let key = (entity.clone(), name.to_string(), direction);
            let Some(indices) = self.pair_index.get(&key) else {
                continue;
            };
            for &idx in indices {
                let fact = &self.facts[idx];
                out.insert(if inverse { fact.inverse() } else { fact.forward() });
            }
        }
        Ok(out.into_iter().collect())
    }
}

fn parse_line(line: &str, line_no: usize, format: GraphFormat) -> Result<Fact, LoadError> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != format.columns() {
        return Err(LoadError::ColumnCount { line: line_no, expected: format.columns(), found: fields.len() });
    }
    let bad_fact = |source| LoadError::BadFact { line: line_no, source };
    match format {
        GraphFormat::TripleTsv => Fact::triple(fields[0], fields[1], fields[2]).map_err(bad_fact),
        GraphFormat::QuintupleTsv => {
            let year = |column: &'static str, raw: &str| {
                raw.trim().parse::<i64>().map_err(|_| LoadError::BadTime {
                    line: line_no,
                    column,
                    value: raw.to_string(),
                })
            };
            let start = year("start", fields[3])?;
            let end = year("end", fields[4])?;
            Fact::quintuple(fields[0], fields[1], fields[2], start, end).map_err(bad_fact)
        }
    }
}
