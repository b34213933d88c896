//! Text call language spoken by the agents.
//!
//! Operator turns contain one helper call per line:
//!
//! ```text
//! GetRelation(<entity>)
//! ExploreKG(<entity>, [<relation>, <relation>, ...])
//! Verification()
//! ```
//!
//! Any other line is treated as reasoning prose. Supervisor turns carry an
//! `ANSWER: a | b` line or a `FEEDBACK: ...` block.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg::FactView;

pub const ANSWER_MARKER: &str = "ANSWER:";
pub const FEEDBACK_MARKER: &str = "FEEDBACK:";
pub const LABEL_SEPARATOR: char = '|';

/// One parsed helper-function call.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AgentAction {
    GetRelation { entity: String },
    ExploreKG { entity: String, relations: Vec<String> },
    Verification,
}

impl AgentAction {
    /// Builds an ExploreKG call, dropping repeated relations.
    pub fn explore<E: Into<String>, R: AsRef<str>>(entity: E, relations: &[R]) -> Self {
        let mut rels: Vec<String> = Vec::with_capacity(relations.len());
        for r in relations {
            let r = r.as_ref().trim();
            if !rels.iter().any(|seen| seen == r) {
                rels.push(r.to_string());
            }
        }
        AgentAction::ExploreKG { entity: entity.into(), relations: rels }
    }

    pub fn get_relation<E: Into<String>>(entity: E) -> Self {
        AgentAction::GetRelation { entity: entity.into() }
    }
}

impl fmt::Display for AgentAction {
    /// Canonical call syntax; parses back to the same action.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AgentAction::GetRelation { entity } => write!(f, "GetRelation({entity})"),
            AgentAction::ExploreKG { entity, relations } => {
                write!(f, "ExploreKG({entity}, [{}])", relations.join(", "))
            }
            AgentAction::Verification => f.write_str("Verification()"),
        }
    }
}

/// The Supervisor's verdict.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum VerificationOutcome {
    Answer(Vec<String>),
    Feedback(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{diagnostic}")]
pub struct ParseFailure {
    pub raw: String,
    /// Single line, safe to echo back to the agent.
    pub diagnostic: String,
}

impl ParseFailure {
    fn new(raw: &str, diagnostic: impl Into<String>) -> Self {
        let diagnostic: String = diagnostic.into();
        Self { raw: raw.to_string(), diagnostic: diagnostic.lines().next().unwrap_or_default().to_string() }
    }
}

const CALL_HELP: &str =
    "expected GetRelation(entity), ExploreKG(entity, [relation, ...]) or Verification(), one call per line";

/// Extracts helper calls from an Operator turn, in textual order. Lines that
/// are not calls are ignored as long as at least one call is found.
pub fn parse_operator_turn(text: &str) -> Result<Vec<AgentAction>, ParseFailure> {
    let mut actions = Vec::new();
    let mut first_error: Option<String> = None;
    for line in text.lines() {
        match parse_call_line(line) {
            LineParse::Action(action) => actions.push(action),
            LineParse::Malformed(msg) => {
                first_error.get_or_insert(msg);
            }
            LineParse::Prose => {}
        }
    }
    if actions.is_empty() {
        let diagnostic = match first_error {
            Some(msg) => format!("{msg}; {CALL_HELP}"),
            None => format!("no helper function call found; {CALL_HELP}"),
        };
        return Err(ParseFailure::new(text, diagnostic));
    }
    Ok(actions)
}

enum LineParse {
    Action(AgentAction),
    /// Looked like a call but broke the grammar.
    Malformed(String),
    Prose,
}

fn strip_call<'a>(line: &'a str, name: &str) -> Option<&'a str> {
    let head = line.get(..name.len())?;
    if !head.eq_ignore_ascii_case(name) {
        return None;
    }
    line[name.len()..].trim_start().strip_prefix('(')
}

fn parse_call_line(line: &str) -> LineParse {
    let line = line.trim().trim_matches('`').trim();
    if let Some(rest) = strip_call(line, "GetRelation") {
        let Some(arg) = rest.strip_suffix(')') else {
            return LineParse::Malformed("GetRelation call is missing its closing parenthesis".into());
        };
        return match parse_entity(arg) {
            Ok(entity) => LineParse::Action(AgentAction::GetRelation { entity }),
            Err(msg) => LineParse::Malformed(format!("GetRelation: {msg}")),
        };
    }
    if let Some(rest) = strip_call(line, "ExploreKG") {
        let Some(args) = rest.strip_suffix(')') else {
            return LineParse::Malformed("ExploreKG call is missing its closing parenthesis".into());
        };
        return match parse_explore_args(args) {
            Ok(action) => LineParse::Action(action),
            Err(msg) => LineParse::Malformed(format!("ExploreKG: {msg}")),
        };
    }
    if let Some(rest) = strip_call(line, "Verification") {
        return match rest.strip_suffix(')') {
            Some(_) => LineParse::Action(AgentAction::Verification),
            None => LineParse::Malformed("Verification call is missing its closing parenthesis".into()),
        };
    }
    LineParse::Prose
}

fn unquote(s: &str) -> &str {
    let s = s.trim();
    for q in ['"', '\''] {
        if s.len() >= 2 && s.starts_with(q) && s.ends_with(q) {
            return s[1..s.len() - 1].trim();
        }
    }
    s
}

fn parse_entity(raw: &str) -> Result<String, String> {
    let entity = unquote(raw);
    if entity.is_empty() {
        return Err("entity is empty".into());
    }
    if entity.contains(['(', ')']) {
        return Err(format!("entity {entity:?} must not contain parentheses"));
    }
    Ok(entity.to_string())
}

fn parse_explore_args(args: &str) -> Result<AgentAction, String> {
    let open = args.find('[').ok_or("relation list must be enclosed in [ ]")?;
    let close = args.rfind(']').filter(|&c| c > open).ok_or("relation list is missing ']'")?;
    if !args[close + 1..].trim().is_empty() {
        return Err("unexpected text after the relation list".into());
    }
    let entity_part = args[..open].trim_end();
    let entity_part =
        entity_part.strip_suffix(',').ok_or("expected a comma between the entity and the relation list")?;
    let entity = parse_entity(entity_part)?;
    let relations: Vec<&str> = args[open + 1..close].split(',').map(unquote).filter(|r| !r.is_empty()).collect();
    if relations.is_empty() {
        return Err("at least one relation is required".into());
    }
    if let Some(bad) = relations.iter().find(|r| r.contains(['(', ')', '[', ']'])) {
        return Err(format!("relation {bad:?} contains a bracket"));
    }
    Ok(AgentAction::explore(entity, &relations))
}

/// Reads the Supervisor's verdict. `ANSWER:` takes precedence over
/// `FEEDBACK:` when both are present.
pub fn parse_supervisor_turn(text: &str) -> Result<VerificationOutcome, ParseFailure> {
    let lines: Vec<&str> = text.lines().collect();
    let marker_at = |line: &str, marker: &str| -> Option<usize> {
        let trimmed = line.trim_start().trim_start_matches(['*', '#', '`', ' ']);
        let head = trimmed.get(..marker.len())?;
        head.eq_ignore_ascii_case(marker).then(|| line.len() - trimmed.len() + marker.len())
    };

    for line in &lines {
        if let Some(offset) = marker_at(line, ANSWER_MARKER) {
            let mut labels: Vec<String> = Vec::new();
            for label in line[offset..].split(LABEL_SEPARATOR) {
                let label = label.trim().trim_matches(['*', '`']).trim();
                if !label.is_empty() && !labels.iter().any(|l| l == label) {
                    labels.push(label.to_string());
                }
            }
            if labels.is_empty() {
                return Err(ParseFailure::new(text, "ANSWER: line carries no labels"));
            }
            return Ok(VerificationOutcome::Answer(labels));
        }
    }
    for (idx, line) in lines.iter().enumerate() {
        if let Some(offset) = marker_at(line, FEEDBACK_MARKER) {
            let mut guidance = line[offset..].trim().to_string();
            for rest in &lines[idx + 1..] {
                guidance.push('\n');
                guidance.push_str(rest);
            }
            let guidance = guidance.trim().to_string();
            if guidance.is_empty() {
                return Err(ParseFailure::new(text, "FEEDBACK: block is empty"));
            }
            return Ok(VerificationOutcome::Feedback(guidance));
        }
    }
    Err(ParseFailure::new(text, format!("no {ANSWER_MARKER} or {FEEDBACK_MARKER} line found")))
}

/// What the Server produced for one action.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ActionResult {
    Relations(Vec<String>),
    Facts(Vec<FactView>),
    VerificationRequested,
    Error(String),
}

pub const NO_RESULT: &str = "NO RESULT";

/// Renders the Server's answer to one Operator turn: one section per action,
/// in call order.
pub fn render_server_reply(results: &[(AgentAction, ActionResult)]) -> String {
    let sections: Vec<String> = results.iter().map(|(action, result)| render_section(action, result)).collect();
    sections.join("\n\n")
}

fn render_section(action: &AgentAction, result: &ActionResult) -> String {
    let header = match action {
        AgentAction::GetRelation { entity } => format!("Relations({entity}):"),
        AgentAction::ExploreKG { entity, relations } => {
            format!("Triples({entity}, [{}]):", relations.join(", "))
        }
        AgentAction::Verification => "Verification():".to_string(),
    };
    match result {
        ActionResult::Relations(rels) if rels.is_empty() => format!("{header} {NO_RESULT}"),
        ActionResult::Relations(rels) => {
            let mut sorted = rels.clone();
            sorted.sort();
            format!("{header} {}", sorted.join(", "))
        }
        ActionResult::Facts(facts) if facts.is_empty() => format!("{header} {NO_RESULT}"),
        ActionResult::Facts(facts) => {
            let mut out = header;
            for fact in facts {
                out.push('\n');
                out.push_str(&fact.to_string());
            }
            out
        }
        ActionResult::VerificationRequested => format!("{header} evidence sent to the supervisor"),
        ActionResult::Error(msg) => format!("{header} ERROR: {msg}"),
    }
}

/// Reply used when an Operator turn contains no parseable call.
pub fn render_format_error(failure: &ParseFailure) -> String {
    format!("FORMAT ERROR: {}", failure.diagnostic)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::Fact;
    use proptest::prelude::*;

    #[test]
    fn parses_parallel_calls() {
        let got =
            parse_operator_turn("GetRelation(Roberto Baggio)\nExploreKG(Roberto Baggio, [member of sports team])")
                .unwrap();
        assert_eq!(
            got,
            vec![
                AgentAction::get_relation("Roberto Baggio"),
                AgentAction::explore("Roberto Baggio", &["member of sports team"]),
            ]
        );
    }

    #[test]
    fn zero_argument_verification() {
        assert_eq!(parse_operator_turn("Verification()").unwrap(), vec![AgentAction::Verification]);
    }

    #[test]
    fn prose_only_is_a_failure() {
        let err = parse_operator_turn("I think the answer is Paris.").unwrap_err();
        assert_eq!(err.raw, "I think the answer is Paris.");
        assert!(err.diagnostic.contains("no helper function call"));
        assert!(!err.diagnostic.contains('\n'));
    }

    #[test]
    fn prose_around_calls_is_ignored() {
        let text = "Thought: the director is needed first.\n  ExploreKG(The Vanishing American, [directed_by])  \nThat should do.";
        assert_eq!(
            parse_operator_turn(text).unwrap(),
            vec![AgentAction::explore("The Vanishing American", &["directed_by"])]
        );
    }

    #[test]
    fn malformed_call_diagnostic_is_specific() {
        let err = parse_operator_turn("ExploreKG(Inception, [])").unwrap_err();
        assert!(err.diagnostic.contains("at least one relation"), "{}", err.diagnostic);
        let err = parse_operator_turn("GetRelation(Inception").unwrap_err();
        assert!(err.diagnostic.contains("closing parenthesis"));
        let err = parse_operator_turn("ExploreKG(Inception directed_by)").unwrap_err();
        assert!(err.diagnostic.contains("[ ]"));
    }

    #[test]
    fn explore_accepts_tilde_commas_in_entity_and_dedups() {
        let got = parse_operator_turn("ExploreKG(Washington, D.C., [~capital, ~capital, located_in])").unwrap();
        assert_eq!(got, vec![AgentAction::explore("Washington, D.C.", &["~capital", "located_in"])]);
    }

    #[test]
    fn lenient_quotes_and_case() {
        let got = parse_operator_turn("exploreKG(\"Inception\", ['directed_by'])\ngetRelation('Inception')").unwrap();
        assert_eq!(
            got,
            vec![AgentAction::explore("Inception", &["directed_by"]), AgentAction::get_relation("Inception")]
        );
    }

    #[test]
    fn supervisor_answer_labels() {
        assert_eq!(
            parse_supervisor_turn("ANSWER: English | French").unwrap(),
            VerificationOutcome::Answer(vec!["English".into(), "French".into()])
        );
    }

    #[test]
    fn supervisor_feedback() {
        assert_eq!(
            parse_supervisor_turn("FEEDBACK: explore ~directed_by from George B. Seitz").unwrap(),
            VerificationOutcome::Feedback("explore ~directed_by from George B. Seitz".into())
        );
        let multi = parse_supervisor_turn("Reasoning...\nFEEDBACK: missing languages.\nTry in_language.").unwrap();
        assert_eq!(multi, VerificationOutcome::Feedback("missing languages.\nTry in_language.".into()));
    }

    #[test]
    fn supervisor_empty_answer_and_missing_markers_fail() {
        assert!(parse_supervisor_turn("ANSWER:").is_err());
        assert!(parse_supervisor_turn("ANSWER:  |  ").is_err());
        assert!(parse_supervisor_turn("FEEDBACK:   ").is_err());
        assert!(parse_supervisor_turn("The answer is English").is_err());
    }

    #[test]
    fn answer_wins_over_feedback() {
        let text = "FEEDBACK: you could look further\nANSWER: True";
        assert_eq!(parse_supervisor_turn(text).unwrap(), VerificationOutcome::Answer(vec!["True".into()]));
    }

    #[test]
    fn renders_relations_golden() {
        let reply = render_server_reply(&[(
            AgentAction::get_relation("Roberto Baggio"),
            ActionResult::Relations(vec!["member of sports team".into()]),
        )]);
        assert_eq!(reply, "Relations(Roberto Baggio): member of sports team");
    }

    #[test]
    fn renders_full_reply_golden() {
        let fact = Fact::quintuple("Roberto Baggio", "member of sports team", "Juventus F.C.", 1990, 1995).unwrap();
        let reply = render_server_reply(&[
            (AgentAction::get_relation("X"), ActionResult::Relations(vec!["b".into(), "~a".into(), "a".into()])),
            (
                AgentAction::explore("Roberto Baggio", &["member of sports team"]),
                ActionResult::Facts(vec![fact.forward()]),
            ),
            (AgentAction::explore("Nobody", &["r"]), ActionResult::Facts(vec![])),
            (AgentAction::get_relation("Ghost"), ActionResult::Error("unknown entity \"Ghost\"".into())),
            (AgentAction::Verification, ActionResult::VerificationRequested),
        ]);
        let expected = "\
Relations(X): a, b, ~a

Triples(Roberto Baggio, [member of sports team]):
[Roberto Baggio, member of sports team, Juventus F.C., 1990, 1995]

Triples(Nobody, [r]): NO RESULT

Relations(Ghost): ERROR: unknown entity \"Ghost\"

Verification(): evidence sent to the supervisor";
        assert_eq!(reply, expected);
    }

    #[test]
    fn format_error_golden() {
        let failure = parse_operator_turn("hello").unwrap_err();
        assert_eq!(
            render_format_error(&failure),
            "FORMAT ERROR: no helper function call found; expected GetRelation(entity), ExploreKG(entity, [relation, ...]) or Verification(), one call per line"
        );
    }

    fn name() -> impl Strategy<Value = String> {
        // Printable text without grammar delimiters; may include spaces and unicode.
        "[A-Za-z0-9À-ÿ가-힣._:'\\- ]{0,12}[A-Za-z0-9À-ÿ가-힣.]"
            .prop_map(|s| s.trim().to_string())
            .prop_filter("non-empty", |s| !s.is_empty() && !(s.starts_with('\'') && s.ends_with('\'')))
    }

    fn relation() -> impl Strategy<Value = String> {
        (name(), any::<bool>()).prop_map(|(n, inv)| if inv { format!("~{n}") } else { n })
    }

    fn action() -> impl Strategy<Value = AgentAction> {
        prop_oneof![
            name().prop_map(AgentAction::get_relation),
            (name(), prop::collection::vec(relation(), 1..5)).prop_map(|(e, rels)| AgentAction::explore(e, &rels)),
            Just(AgentAction::Verification),
        ]
    }

    proptest! {
        #[test]
        fn canonical_render_round_trips(a in action()) {
            prop_assert_eq!(parse_operator_turn(&a.to_string()).unwrap(), vec![a]);
        }

        #[test]
        fn parser_is_total(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
            let text = String::from_utf8_lossy(&bytes);
            let _ = parse_operator_turn(&text);
            let _ = parse_supervisor_turn(&text);
        }

        #[test]
        fn answer_labels_never_contain_separator(text in "[a-zA-Z |:\n]{0,60}") {
            if let Ok(VerificationOutcome::Answer(labels)) = parse_supervisor_turn(&format!("ANSWER: {text}")) {
                prop_assert!(!labels.is_empty());
                prop_assert!(labels.iter().all(|l| !l.contains(LABEL_SEPARATOR) && !l.is_empty()));
            }
        }
    }
}
