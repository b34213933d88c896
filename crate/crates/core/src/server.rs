//! The Server: executes Operator calls against the graph and keeps the
//! per-query session state.

use std::io::{BufRead, Write};

use indexmap::{IndexMap, IndexSet};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::{normalize_name, FactView, KnowledgeGraph};
use crate::protocol::{
    parse_operator_turn, render_format_error, render_server_reply, ActionResult, AgentAction, ParseFailure,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Operator,
    Server,
    Supervisor,
    /// Gateway or harness failure notes; only ever the last entry.
    Error,
}

/// One chat-log line, also the JSONL transcript record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatEntry {
    pub role: Role,
    pub text: String,
    /// Iteration the entry belongs to (1-based for turns).
    pub iteration: u32,
    /// Self-consistency trial number, when the run had several.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trial: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SessionError {
    #[error("a session needs at least one topic entity")]
    NoTopicEntities,
    #[error("topic entity is empty")]
    EmptyTopicEntity,
    #[error("iteration limit must be at least 1")]
    ZeroLimit,
    #[error("iteration budget exhausted ({limit} turns)")]
    BudgetExhausted { limit: u32 },
}

/// State of one reasoning task.
#[derive(Debug, Clone)]
pub struct SessionState {
    query: String,
    topic_entities: Vec<String>,
    seen_entities: IndexSet<String>,
    relation_stack: IndexMap<String, IndexSet<String>>,
    fact_stack: IndexSet<FactView>,
    chat_log: Vec<ChatEntry>,
    iteration: u32,
    limit: u32,
}

/// Evidence handed to the Supervisor: explored facts and relations, in the
/// order they were discovered.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Evidence {
    pub facts: Vec<FactView>,
    pub relations: Vec<(String, Vec<String>)>,
}

/// Result of one Operator turn.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TurnOutcome {
    pub reply: String,
    pub verification_requested: bool,
    pub actions: Vec<AgentAction>,
}

impl SessionState {
    pub fn new<S: AsRef<str>>(query: &str, topic_entities: &[S], limit: u32) -> Result<Self, SessionError> {
        if topic_entities.is_empty() {
            return Err(SessionError::NoTopicEntities);
        }
        if limit == 0 {
            return Err(SessionError::ZeroLimit);
        }
        let topics: Vec<String> = topic_entities.iter().map(|e| normalize_name(e.as_ref())).collect();
        if topics.iter().any(String::is_empty) {
            return Err(SessionError::EmptyTopicEntity);
        }
        Ok(Self {
            query: query.to_string(),
            seen_entities: topics.iter().cloned().collect(),
            topic_entities: topics,
            relation_stack: IndexMap::new(),
            fact_stack: IndexSet::new(),
            chat_log: Vec::new(),
            iteration: 0,
            limit,
        })
    }

    pub fn query(&self) -> &str {
        &self.query
    }

    pub fn topic_entities(&self) -> &[String] {
        &self.topic_entities
    }

    pub fn seen_entities(&self) -> impl Iterator<Item = &str> {
        self.seen_entities.iter().map(String::as_str)
    }

    pub fn is_seen(&self, entity: &str) -> bool {
        self.seen_entities.contains(&normalize_name(entity))
    }

    pub fn chat_log(&self) -> &[ChatEntry] {
        &self.chat_log
    }

    pub fn iteration(&self) -> u32 {
        self.iteration
    }

    pub fn limit(&self) -> u32 {
        self.limit
    }

    pub fn budget_left(&self) -> bool {
        self.iteration < self.limit
    }

    pub fn fact_count(&self) -> usize {
        self.fact_stack.len()
    }

    pub fn relation_entry_count(&self) -> usize {
        self.relation_stack.len()
    }

    /// Parses the Operator's text and executes it as one turn.
    pub fn apply_turn(&mut self, graph: &KnowledgeGraph, operator_text: &str) -> Result<TurnOutcome, SessionError> {
        let parsed = parse_operator_turn(operator_text);
        self.apply_actions(graph, operator_text, parsed)
    }

    /// Executes one Operator turn. Graph calls run first, in order;
    /// Verification only raises the flag. A parse failure still consumes
    /// the turn and produces a FORMAT ERROR reply.
    pub fn apply_actions(
        &mut self,
        graph: &KnowledgeGraph,
        operator_text: &str,
        parsed: Result<Vec<AgentAction>, ParseFailure>,
    ) -> Result<TurnOutcome, SessionError> {
        if !self.budget_left() {
            return Err(SessionError::BudgetExhausted { limit: self.limit });
        }
        self.iteration += 1;
        self.push(Role::Operator, operator_text);

        let actions = match parsed {
            Ok(actions) => actions,
            Err(failure) => {
                let reply = render_format_error(&failure);
                self.push(Role::Server, &reply);
                return Ok(TurnOutcome { reply, verification_requested: false, actions: Vec::new() });
            }
        };

        let mut results = Vec::with_capacity(actions.len());
        let mut verification_requested = false;
        for action in &actions {
            let result = match action {
                AgentAction::GetRelation { entity } => self.get_relation(graph, entity),
                AgentAction::ExploreKG { entity, relations } => self.explore(graph, entity, relations),
                AgentAction::Verification => {
                    verification_requested = true;
                    ActionResult::VerificationRequested
                }
            };
            results.push((action.clone(), result));
        }
        let reply = render_server_reply(&results);
        self.push(Role::Server, &reply);
        Ok(TurnOutcome { reply, verification_requested, actions })
    }

    fn get_relation(&mut self, graph: &KnowledgeGraph, entity: &str) -> ActionResult {
        let entity = normalize_name(entity);
        if !graph.contains_entity(&entity) {
            return ActionResult::Error(format!("unknown entity \"{entity}\""));
        }
        let relations: Vec<String> = graph.get_relations(&entity).into_iter().collect();
        self.relation_stack.entry(entity).or_default().extend(relations.iter().cloned());
        ActionResult::Relations(relations)
    }

    fn explore(&mut self, graph: &KnowledgeGraph, entity: &str, relations: &[String]) -> ActionResult {
        let entity = normalize_name(entity);
        if !graph.contains_entity(&entity) {
            return ActionResult::Error(format!("unknown entity \"{entity}\""));
        }
        match graph.explore(&entity, relations) {
            Ok(facts) => {
                for fact in &facts {
                    self.seen_entities.insert(fact.tail.clone());
                    self.fact_stack.insert(fact.clone());
                }
                ActionResult::Facts(facts)
            }
            Err(err) => ActionResult::Error(err.to_string()),
        }
    }

    /// Records a Supervisor message against the current iteration.
    pub fn record_supervisor(&mut self, text: &str) {
        self.push(Role::Supervisor, text);
    }

    /// Records a terminal failure note.
    pub fn record_error(&mut self, text: &str) {
        self.push(Role::Error, text);
    }

    fn push(&mut self, role: Role, text: &str) {
        self.chat_log.push(ChatEntry { role, text: text.to_string(), iteration: self.iteration, trial: None });
    }

    /// Copies of the explored facts and relations.
    pub fn snapshot_evidence(&self) -> Evidence {
        Evidence {
            facts: self.fact_stack.iter().cloned().collect(),
            relations: self
                .relation_stack
                .iter()
                .map(|(e, rels)| (e.clone(), rels.iter().cloned().collect()))
                .collect(),
        }
    }

    pub fn into_transcript(self) -> Vec<ChatEntry> {
        self.chat_log
    }
}

/// Writes a transcript as JSONL, one entry per line.
pub fn write_transcript<W: Write>(entries: &[ChatEntry], mut out: W) -> std::io::Result<()> {
    for entry in entries {
        serde_json::to_writer(&mut out, entry)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a JSONL transcript.
pub fn read_transcript<R: BufRead>(input: R) -> std::io::Result<Vec<ChatEntry>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(std::io::Error::other)?);
    }
    Ok(out)
}

/// Human-readable rendering of a transcript.
pub fn render_transcript(entries: &[ChatEntry]) -> String {
    let mut out = String::new();
    for entry in entries {
        let role = match entry.role {
            Role::Operator => "OPERATOR",
            Role::Server => "SERVER",
            Role::Supervisor => "SUPERVISOR",
            Role::Error => "ERROR",
        };
        let trial = entry.trial.map(|t| format!("trial {t} ")).unwrap_or_default();
        out.push_str(&format!("--- [{trial}{}] {role}\n{}\n", entry.iteration, entry.text.trim_end()));
    }
    out
}
