//! Prompt templates and message assembly.
//!
//! Templates are plain text with `{{slot}}` placeholders. A prompt set can be
//! loaded from a directory; files missing there fall back to the built-in
//! defaults, so adapting to a new dataset only needs a new `fewshot/` folder.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::gateway::ChatMessage;
use crate::server::{ChatEntry, Evidence, Role, SessionState};

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template {template}: unresolved slot {{{{{slot}}}}}")]
    UnresolvedSlot { template: String, slot: String },
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("prompt set needs at least {needed} few-shot examples, found {found}")]
    TooFewExamples { needed: usize, found: usize },
}

/// Examples per few-shot block.
pub const EXAMPLES_PER_BLOCK: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    pub operator: String,
    pub helper_functions: String,
    pub operator_query: String,
    /// Pool of worked examples; blocks are windows of [`EXAMPLES_PER_BLOCK`].
    pub few_shot_pool: Vec<String>,
    pub supervisor: String,
    pub supervisor_few_shot: String,
    pub supervisor_evidence: String,
    pub single_answer: String,
    pub paraphrase: String,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl PromptSet {
    pub fn builtin() -> Self {
        Self {
            operator: include_str!("../prompts/operator.txt").to_string(),
            helper_functions: include_str!("../prompts/helper_functions.txt").to_string(),
            operator_query: include_str!("../prompts/operator_query.txt").to_string(),
            few_shot_pool: vec![
                include_str!("../prompts/fewshot/01_movies.txt").to_string(),
                include_str!("../prompts/fewshot/02_claims.txt").to_string(),
                include_str!("../prompts/fewshot/03_temporal.txt").to_string(),
                include_str!("../prompts/fewshot/04_parallel.txt").to_string(),
            ],
            supervisor: include_str!("../prompts/supervisor.txt").to_string(),
            supervisor_few_shot: include_str!("../prompts/supervisor_fewshot.txt").to_string(),
            supervisor_evidence: include_str!("../prompts/supervisor_evidence.txt").to_string(),
            single_answer: include_str!("../prompts/single_answer.txt").to_string(),
            paraphrase: include_str!("../prompts/paraphrase.txt").to_string(),
        }
    }

    /// Overlays the files found in `dir` on the built-in set. A `fewshot/`
    /// subdirectory replaces the whole example pool (files sorted by name).
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut set = Self::builtin();
        let read = |name: &str, slot: &mut String| -> Result<(), PromptError> {
            let path = dir.join(name);
            if path.is_file() {
                *slot = fs::read_to_string(&path)
                    .map_err(|source| PromptError::Io { path: path.display().to_string(), source })?;
            }
            Ok(())
        };
        read("operator.txt", &mut set.operator)?;
        read("helper_functions.txt", &mut set.helper_functions)?;
        read("operator_query.txt", &mut set.operator_query)?;
        read("supervisor.txt", &mut set.supervisor)?;
        read("supervisor_fewshot.txt", &mut set.supervisor_few_shot)?;
        read("supervisor_evidence.txt", &mut set.supervisor_evidence)?;
        read("single_answer.txt", &mut set.single_answer)?;
        read("paraphrase.txt", &mut set.paraphrase)?;

        let few_dir = dir.join("fewshot");
        if few_dir.is_dir() {
            let io_err = |source| PromptError::Io { path: few_dir.display().to_string(), source };
            let mut paths: Vec<_> = fs::read_dir(&few_dir)
                .map_err(io_err)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            paths.sort();
            set.few_shot_pool = paths
                .iter()
                .map(|p| {
                    fs::read_to_string(p).map_err(|source| PromptError::Io { path: p.display().to_string(), source })
                })
                .collect::<Result<_, _>>()?;
        }
        if set.few_shot_pool.len() < EXAMPLES_PER_BLOCK {
            return Err(PromptError::TooFewExamples { needed: EXAMPLES_PER_BLOCK, found: set.few_shot_pool.len() });
        }
        Ok(set)
    }

    /// Number of distinct few-shot blocks this set can produce.
    pub fn few_shot_block_count(&self) -> usize {
        if self.few_shot_pool.len() < EXAMPLES_PER_BLOCK {
            0
        } else if self.few_shot_pool.len() == EXAMPLES_PER_BLOCK {
            1
        } else {
            self.few_shot_pool.len()
        }
    }

    /// Block `index`: a cyclic window of examples starting at `index`.
    pub fn few_shot_block(&self, index: usize) -> String {
        let n = self.few_shot_pool.len();
        if n == 0 {
            return String::new();
        }
        (0..EXAMPLES_PER_BLOCK.min(n))
            .map(|k| self.few_shot_pool[(index + k) % n].trim_end())
            .collect::<Vec<_>>()
            .join("\n\n---\n\n")
    }
}

/// Replaces every `{{slot}}` with its value. Values are not re-scanned.
pub fn render(template_name: &str, template: &str, slots: &[(&str, &str)]) -> Result<String, PromptError> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let Some(end) = after.find("}}") else {
            out.push_str(&rest[start..]);
            rest = "";
            break;
        };
        let name = after[..end].trim();
        match slots.iter().find(|(slot, _)| *slot == name) {
            Some((_, value)) => out.push_str(value),
            None => return Err(PromptError::UnresolvedSlot { template: template_name.into(), slot: name.into() }),
        }
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    Ok(out)
}

fn join_entities(entities: &[String]) -> String {
    entities.join(", ")
}

/// Renders G_k one fact per line.
pub fn render_triples(evidence: &Evidence) -> String {
    if evidence.facts.is_empty() {
        return "(none)".into();
    }
    evidence.facts.iter().map(ToString::to_string).collect::<Vec<_>>().join("\n")
}

/// Renders R_k as `entity: rel, rel` lines.
pub fn render_relations(evidence: &Evidence) -> String {
    if evidence.relations.is_empty() {
        return "(none)".into();
    }
    evidence
        .relations
        .iter()
        .map(|(entity, rels)| format!("{entity}: {}", rels.join(", ")))
        .collect::<Vec<_>>()
        .join("\n")
}

/// System prompt for the Operator with the given few-shot block.
pub fn operator_system(prompts: &PromptSet, few_shot: &str) -> Result<String, PromptError> {
    render(
        "operator",
        &prompts.operator,
        &[("helper_functions", prompts.helper_functions.trim_end()), ("few_shot", few_shot)],
    )
}

/// Full message list for the next Operator turn: system prompt, the query,
/// then the chat log mapped onto assistant/user turns.
pub fn operator_messages(
    prompts: &PromptSet,
    few_shot: &str,
    query: &str,
    session: &SessionState,
) -> Result<Vec<ChatMessage>, PromptError> {
    let mut messages = vec![ChatMessage::system(operator_system(prompts, few_shot)?)];
    let opening = render(
        "operator_query",
        &prompts.operator_query,
        &[("query", query), ("topic_entities", &join_entities(session.topic_entities()))],
    )?;
    messages.push(ChatMessage::user(opening.trim_end()));
    append_chat_log(&mut messages, session.chat_log());
    Ok(messages)
}

fn append_chat_log(messages: &mut Vec<ChatMessage>, log: &[ChatEntry]) {
    for entry in log {
        let (is_user, text) = match entry.role {
            Role::Operator => (false, entry.text.clone()),
            Role::Server => (true, entry.text.clone()),
            Role::Supervisor => (true, format!("Supervisor:\n{}", entry.text)),
            Role::Error => continue,
        };
        match messages.last_mut() {
            Some(last) if is_user && last.role == crate::gateway::ChatRole::User => {
                last.content.push_str("\n\n");
                last.content.push_str(&text);
            }
            _ if is_user => messages.push(ChatMessage::user(text)),
            _ => messages.push(ChatMessage::assistant(text)),
        }
    }
}

/// Supervisor prompt over a snapshot of the session's evidence.
pub fn supervisor_messages(
    prompts: &PromptSet,
    query: &str,
    topic_entities: &[String],
    evidence: &Evidence,
) -> Result<Vec<ChatMessage>, PromptError> {
    let system = render("supervisor", &prompts.supervisor, &[("few_shot", prompts.supervisor_few_shot.trim_end())])?;
    let user = render(
        "supervisor_evidence",
        &prompts.supervisor_evidence,
        &[
            ("query", query),
            ("topic_entities", &join_entities(topic_entities)),
            ("triples", &render_triples(evidence)),
            ("relations", &render_relations(evidence)),
        ],
    )?;
    Ok(vec![ChatMessage::system(system), ChatMessage::user(user.trim_end())])
}

/// Single-agent answer request: the Operator's own conversation followed by
/// the answer-generation instruction.
pub fn single_answer_messages(
    prompts: &PromptSet,
    few_shot: &str,
    query: &str,
    session: &SessionState,
) -> Result<Vec<ChatMessage>, PromptError> {
    let evidence = session.snapshot_evidence();
    let mut messages = operator_messages(prompts, few_shot, query, session)?;
    let instruction = render(
        "single_answer",
        &prompts.single_answer,
        &[("query", query), ("triples", &render_triples(&evidence)), ("relations", &render_relations(&evidence))],
    )?;
    match messages.last_mut() {
        Some(last) if last.role == crate::gateway::ChatRole::User => {
            last.content.push_str("\n\n");
            last.content.push_str(instruction.trim_end());
        }
        _ => messages.push(ChatMessage::user(instruction.trim_end())),
    }
    Ok(messages)
}

/// Request for `count` paraphrases of `query`.
pub fn paraphrase_messages(prompts: &PromptSet, query: &str, count: usize) -> Result<Vec<ChatMessage>, PromptError> {
    let system = render("paraphrase", &prompts.paraphrase, &[("count", &count.to_string())])?;
    Ok(vec![ChatMessage::system(system.trim_end()), ChatMessage::user(query)])
}

/// Extracts paraphrases from a numbered or bulleted list, one per line.
/// Blank lines are skipped and repeats removed.
pub fn parse_paraphrases(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for line in text.lines() {
        let mut line = line.trim();
        let digits = line.chars().take_while(char::is_ascii_digit).count();
        if digits > 0 {
            let rest = &line[digits..];
            if let Some(stripped) = rest.strip_prefix(['.', ')', ':']) {
                line = stripped.trim();
            }
        } else if let Some(stripped) = line.strip_prefix(['-', '*']) {
            line = stripped.trim();
        }
        let line = line.trim_matches('"').trim();
        if !line.is_empty() && !out.iter().any(|p| p == line) {
            out.push(line.to_string());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ChatRole;
    use crate::kg::{GraphFormat, KnowledgeGraph};

    #[test]
    fn render_fills_slots_once() {
        let got = render("t", "a {{x}} b {{ y }} c", &[("x", "{{y}}"), ("y", "2")]).unwrap();
        assert_eq!(got, "a {{y}} b 2 c");
    }

    #[test]
    fn render_rejects_unknown_slot() {
        let err = render("t", "hello {{who}}", &[]).unwrap_err();
        assert_eq!(err.to_string(), "template t: unresolved slot {{who}}");
    }

    #[test]
    fn builtin_templates_render() {
        let p = PromptSet::builtin();
        let system = operator_system(&p, &p.few_shot_block(0)).unwrap();
        assert!(system.contains("GetRelation(entity)"));
        assert!(system.contains("The Vanishing American"));
        assert!(!system.contains("{{"));
        assert_eq!(p.few_shot_block_count(), 4);
    }

    #[test]
    fn few_shot_blocks_are_distinct_windows() {
        let p = PromptSet::builtin();
        let blocks: std::collections::BTreeSet<String> = (0..4).map(|i| p.few_shot_block(i)).collect();
        assert_eq!(blocks.len(), 4);
        assert_eq!(p.few_shot_block(0).matches("\n---\n").count(), 2);
    }

    #[test]
    fn operator_messages_map_chat_log() {
        let g = KnowledgeGraph::load("a\tr\tb\n".as_bytes(), GraphFormat::TripleTsv).unwrap();
        let p = PromptSet::builtin();
        let mut s = SessionState::new("what does a r?", &["a"], 5).unwrap();
        s.apply_turn(&g, "Verification()").unwrap();
        s.record_supervisor("FEEDBACK: try GetRelation(a)");
        s.apply_turn(&g, "GetRelation(a)").unwrap();
        let msgs = operator_messages(&p, "EX", "what does a r?", &s).unwrap();
        let roles: Vec<ChatRole> = msgs.iter().map(|m| m.role).collect();
        assert_eq!(
            roles,
            vec![
                ChatRole::System,
                ChatRole::User,
                ChatRole::Assistant,
                ChatRole::User,
                ChatRole::Assistant,
                ChatRole::User
            ]
        );
        assert_eq!(msgs[1].content, "Question: what does a r?\nTopic entities: a");
        assert!(msgs[3].content.contains("Verification():"));
        assert!(msgs[3].content.ends_with("Supervisor:\nFEEDBACK: try GetRelation(a)"));
        assert_eq!(msgs[5].content, "Relations(a): r");
    }

    #[test]
    fn supervisor_prompt_carries_facts_and_relations() {
        let g = KnowledgeGraph::load("a\tr\tb\n".as_bytes(), GraphFormat::TripleTsv).unwrap();
        let mut s = SessionState::new("q?", &["a"], 5).unwrap();
        s.apply_turn(&g, "GetRelation(a)\nExploreKG(a, [r])").unwrap();
        let msgs =
            supervisor_messages(&PromptSet::builtin(), "q?", s.topic_entities(), &s.snapshot_evidence()).unwrap();
        assert!(msgs[1].content.contains("Triples collected so far:\n[a, r, b]"));
        assert!(msgs[1].content.contains("Relations of each explored entity:\na: r"));
        assert!(msgs[0].content.contains("ANSWER: label1 | label2"));
    }

    #[test]
    fn paraphrase_list_parsing() {
        let got = parse_paraphrases("1. First one?\n2) Second one?\n\n- Third one?\n3. First one?\n\"Fourth\"");
        assert_eq!(got, vec!["First one?", "Second one?", "Third one?", "Fourth"]);
    }

    #[test]
    fn load_dir_overrides_few_shot_pool() {
        let dir = std::env::temp_dir().join(format!("r2kg-prompts-{}", std::process::id()));
        let few = dir.join("fewshot");
        std::fs::create_dir_all(&few).unwrap();
        for (i, name) in ["b.txt", "a.txt", "c.txt"].iter().enumerate() {
            std::fs::write(few.join(name), format!("example {i}")).unwrap();
        }
        std::fs::write(dir.join("paraphrase.txt"), "give {{count}}").unwrap();
        let p = PromptSet::load_dir(&dir).unwrap();
        assert_eq!(p.few_shot_pool, vec!["example 1", "example 0", "example 2"]);
        assert_eq!(p.few_shot_block_count(), 1);
        assert_eq!(paraphrase_messages(&p, "q", 3).unwrap()[0].content, "give 3");
        assert_eq!(p.operator, PromptSet::builtin().operator);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
