//! Scripted end-to-end runs of both reasoning modes.

use std::sync::Arc;

use proptest::prelude::*;
use r2kg_core::gateway::{AgentClient, AgentRole, ChatBackend, Predicate, Sampling, ScriptEntry, ScriptedBackend};
use r2kg_core::orchestrator::{
    materialize_trials, run_dual, run_single_sc, run_single_trial, AbstainReason, RunConfig, RunStats,
    Strategy as ScStrategy, Task, TrialAbstain, TrialInput, TrialOutcome, Verdict,
};
use r2kg_core::server::Role;
use r2kg_core::{GraphFormat, KnowledgeGraph, PromptSet};

const MOVIES: &str = "\
The Vanishing American\tdirected_by\tGeorge B. Seitz
The Vanishing American\trelease_year\t1925
The Last of the Mohicans\tdirected_by\tGeorge B. Seitz
Love Finds Andy Hardy\tdirected_by\tGeorge B. Seitz
The Last of the Mohicans\tin_language\tEnglish
Love Finds Andy Hardy\tin_language\tFrench
";

const QUERY: &str =
    "Which languages were used in the films directed by the same directors as [The Vanishing American]?";

fn movies() -> KnowledgeGraph {
    KnowledgeGraph::load(MOVIES.as_bytes(), GraphFormat::TripleTsv).unwrap()
}

fn task() -> Task {
    Task::new(QUERY, ["The Vanishing American"])
}

fn client(script: ScriptedBackend, role: AgentRole) -> (Arc<ScriptedBackend>, AgentClient) {
    let backend = Arc::new(script);
    let dyn_backend: Arc<dyn ChatBackend> = backend.clone();
    (backend, AgentClient::new(dyn_backend, role, "scripted"))
}

fn last_contains(s: &str, response: &str) -> ScriptEntry {
    ScriptEntry::when(Predicate::LastMessageContains(s.into()), response)
}

fn happy_operator() -> ScriptedBackend {
    ScriptedBackend::new(vec![
        ScriptEntry::when(Predicate::LastMessageContains("Topic entities: The Vanishing American".into()), "GetRelation(The Vanishing American)"),
        last_contains("Relations(The Vanishing American): directed_by, release_year", "ExploreKG(The Vanishing American, [directed_by])"),
        last_contains("[The Vanishing American, directed_by, George B. Seitz]", "GetRelation(George B. Seitz)"),
        last_contains("Relations(George B. Seitz): ~directed_by", "ExploreKG(George B. Seitz, [~directed_by])"),
        last_contains(
            "[George B. Seitz, ~directed_by, Love Finds Andy Hardy]",
            "Both films need their language.\nExploreKG(The Last of the Mohicans, [in_language])\nExploreKG(Love Finds Andy Hardy, [in_language])",
        ),
        last_contains("[Love Finds Andy Hardy, in_language, French]", "Verification()"),
    ])
}

#[test]
fn dual_replay_answers_english_and_french() {
    let (op_backend, op) = client(happy_operator(), AgentRole::Operator);
    let (sup_backend, sup) = client(
        ScriptedBackend::new(vec![ScriptEntry::when(
            Predicate::PromptContains("[George B. Seitz, ~directed_by, The Last of the Mohicans]".into()),
            "Paths: The Vanishing American-George B. Seitz-The Last of the Mohicans-English; The Vanishing American-George B. Seitz-Love Finds Andy Hardy-French\nANSWER: English | French",
        )]),
        AgentRole::Supervisor,
    );
    let result = run_dual(&task(), &movies(), &op, &sup, &PromptSet::builtin(), &RunConfig::dual(15));
    assert_eq!(result.verdict, Verdict::Answered(vec!["English".into(), "French".into()]));
    assert_eq!(result.stats, RunStats { operator_calls: 6, supervisor_calls: 1, iterations: 6 });
    assert_eq!(result.error, None);
    assert_eq!((op_backend.remaining(), sup_backend.remaining()), (0, 0));

    // Supervisor saw the relation lists, not just the triples.
    let sup_prompt = &sup_backend.requests()[0].messages[1].content;
    assert!(sup_prompt.contains("George B. Seitz: ~directed_by"));
    assert!(sup_prompt.contains("The Vanishing American: directed_by, release_year"));

    let roles: Vec<Role> = result.transcript.iter().map(|e| e.role).collect();
    assert_eq!(roles.len(), 13);
    assert_eq!(roles.last(), Some(&Role::Supervisor));
}

#[test]
fn feedback_then_answer_counts_two_supervisor_calls() {
    let (_, op) = client(
        ScriptedBackend::from_responses([
            "GetRelation(The Vanishing American)",
            "ExploreKG(The Vanishing American, [directed_by])",
            "Verification()",
            "ExploreKG(George B. Seitz, [~directed_by])",
            "ExploreKG(The Last of the Mohicans, [in_language])\nExploreKG(Love Finds Andy Hardy, [in_language])\nVerification()",
        ]),
        AgentRole::Operator,
    );
    let (sup_backend, sup) = client(
        ScriptedBackend::from_responses([
            "FEEDBACK: explore ~directed_by from George B. Seitz",
            "ANSWER: English | French",
        ]),
        AgentRole::Supervisor,
    );
    let result = run_dual(&task(), &movies(), &op, &sup, &PromptSet::builtin(), &RunConfig::dual(15));
    assert_eq!(result.verdict, Verdict::Answered(vec!["English".into(), "French".into()]));
    assert_eq!(result.stats, RunStats { operator_calls: 5, supervisor_calls: 2, iterations: 5 });
    // Second verification saw the facts gathered in the same turn.
    assert!(sup_backend.requests()[1].messages[1].content.contains("[Love Finds Andy Hardy, in_language, French]"));
}

#[test]
fn feedback_reaches_the_operator() {
    let (op_backend, op) = client(
        ScriptedBackend::new(vec![
            ScriptEntry::any("Verification()"),
            last_contains("Supervisor:\nFEEDBACK: list relations first", "GetRelation(The Vanishing American)"),
        ]),
        AgentRole::Operator,
    );
    let (_, sup) = client(ScriptedBackend::from_responses(["FEEDBACK: list relations first"]), AgentRole::Supervisor);
    let result = run_dual(&task(), &movies(), &op, &sup, &PromptSet::builtin(), &RunConfig::dual(2));
    assert_eq!(result.verdict, Verdict::Abstained(AbstainReason::LimitExceeded));
    assert_eq!(op_backend.remaining(), 0);
}

#[test]
fn prose_only_operator_exhausts_budget() {
    let (_, op) = client(
        ScriptedBackend::from_responses(["I believe the answer is English.", "Let me think again.", "Still thinking."]),
        AgentRole::Operator,
    );
    let (_, sup) = client(ScriptedBackend::from_responses(Vec::<String>::new()), AgentRole::Supervisor);
    let result = run_dual(&task(), &movies(), &op, &sup, &PromptSet::builtin(), &RunConfig::dual(3));
    assert_eq!(result.verdict, Verdict::Abstained(AbstainReason::LimitExceeded));
    assert_eq!(result.stats, RunStats { operator_calls: 3, supervisor_calls: 0, iterations: 3 });
    let format_errors = result.transcript.iter().filter(|e| e.text.starts_with("FORMAT ERROR: ")).count();
    assert_eq!(format_errors, 3);
}

#[test]
fn unparseable_supervisor_is_treated_as_feedback() {
    let (op_backend, op) = client(
        ScriptedBackend::new(vec![
            ScriptEntry::any("Verification()"),
            last_contains("Supervisor:\nI am not sure.", "Verification()"),
        ]),
        AgentRole::Operator,
    );
    let (_, sup) =
        client(ScriptedBackend::from_responses(["I am not sure.", "ANSWER: English"]), AgentRole::Supervisor);
    let result = run_dual(&task(), &movies(), &op, &sup, &PromptSet::builtin(), &RunConfig::dual(5));
    assert_eq!(result.verdict, Verdict::Answered(vec!["English".into()]));
    assert_eq!(result.stats.supervisor_calls, 2);
    assert_eq!(op_backend.remaining(), 0);
}

#[test]
fn gateway_failure_is_a_hard_failure_abstention() {
    let (_, op) = client(ScriptedBackend::from_responses(["GetRelation(The Vanishing American)"]), AgentRole::Operator);
    let (_, sup) = client(ScriptedBackend::from_responses(Vec::<String>::new()), AgentRole::Supervisor);
    let result = run_dual(&task(), &movies(), &op, &sup, &PromptSet::builtin(), &RunConfig::dual(5));
    assert_eq!(result.verdict, Verdict::Abstained(AbstainReason::HardFailure));
    assert_eq!(result.stats.iterations, 1);
    assert_eq!(result.stats.operator_calls, 2);
    let last = result.transcript.last().unwrap();
    assert_eq!(last.role, Role::Error);
    assert!(last.text.contains("script exhausted"), "{}", last.text);
    assert!(result.error.unwrap().starts_with("operator: "));
}

#[test]
fn answer_on_the_final_turn_still_counts() {
    let (_, op) = client(
        ScriptedBackend::from_responses(["GetRelation(The Vanishing American)", "Verification()"]),
        AgentRole::Operator,
    );
    let (_, sup) = client(ScriptedBackend::from_responses(["ANSWER: English"]), AgentRole::Supervisor);
    let result = run_dual(&task(), &movies(), &op, &sup, &PromptSet::builtin(), &RunConfig::dual(2));
    assert_eq!(result.verdict, Verdict::Answered(vec!["English".into()]));
    assert_eq!(result.stats.iterations, 2);
}

#[test]
fn transcripts_are_replay_deterministic() {
    let run = || {
        let (_, op) = client(happy_operator(), AgentRole::Operator);
        let (_, sup) = client(ScriptedBackend::from_responses(["ANSWER: English | French"]), AgentRole::Supervisor);
        let result = run_dual(&task(), &movies(), &op, &sup, &PromptSet::builtin(), &RunConfig::dual(15));
        let mut buf = Vec::new();
        r2kg_core::server::write_transcript(&result.transcript, &mut buf).unwrap();
        buf
    };
    let first = run();
    assert_eq!(first, run());
    assert_eq!(first, run());
}

fn trial_input() -> TrialInput {
    TrialInput { query: QUERY.into(), few_shot_block: 0, sampling: None }
}

#[test]
fn single_trial_answers_on_turn_four() {
    let (backend, agent) = client(
        ScriptedBackend::from_responses([
            "GetRelation(The Vanishing American)",
            "ExploreKG(The Vanishing American, [directed_by])",
            "ExploreKG(George B. Seitz, [~directed_by])",
            "ExploreKG(The Last of the Mohicans, [in_language])\nExploreKG(Love Finds Andy Hardy, [in_language])\nVerification()",
            "ANSWER: English | French",
        ]),
        AgentRole::Operator,
    );
    let trial = run_single_trial(&task(), &movies(), &agent, &PromptSet::builtin(), 10, &trial_input());
    assert_eq!(trial.outcome, TrialOutcome::Labels(vec!["English".into(), "French".into()]));
    assert_eq!(trial.stats, RunStats { operator_calls: 5, supervisor_calls: 0, iterations: 4 });
    let answer_prompt = &backend.requests()[4];
    let last = &answer_prompt.messages.last().unwrap().content;
    assert!(last.contains("You called Verification()"));
    assert!(last.contains("[Love Finds Andy Hardy, in_language, French]"));
}

#[test]
fn single_trial_exhaustion_and_parse_failure_abstain() {
    let (_, agent) = client(ScriptedBackend::from_responses(["hmm", "hmm"]), AgentRole::Operator);
    let trial = run_single_trial(&task(), &movies(), &agent, &PromptSet::builtin(), 2, &trial_input());
    assert_eq!(trial.outcome, TrialOutcome::Abstain(TrialAbstain::LimitExceeded));
    assert_eq!(trial.stats.iterations, 2);

    let (_, agent) =
        client(ScriptedBackend::from_responses(["Verification()", "The films are in English."]), AgentRole::Operator);
    let trial = run_single_trial(&task(), &movies(), &agent, &PromptSet::builtin(), 10, &trial_input());
    assert_eq!(trial.outcome, TrialOutcome::Abstain(TrialAbstain::Unparseable));
    assert_eq!(trial.stats.iterations, 1);
}

fn answering_trial(answer: &str) -> Vec<String> {
    vec!["Verification()".to_string(), format!("ANSWER: {answer}")]
}

#[test]
fn self_consistency_unanimous_and_disagreeing() {
    let cfg = RunConfig::single_sc(10, 3, ScStrategy::MultiPrompt);
    let script: Vec<String> = ["English", "english", " ENGLISH "].iter().flat_map(|a| answering_trial(a)).collect();
    let (_, agent) = client(ScriptedBackend::from_responses(script), AgentRole::Operator);
    let result = run_single_sc(&task(), &movies(), &agent, &PromptSet::builtin(), &cfg);
    assert_eq!(result.verdict, Verdict::Answered(vec!["English".into()]));
    assert_eq!(result.stats, RunStats { operator_calls: 6, supervisor_calls: 0, iterations: 3 });
    assert_eq!(result.trial_inputs.len(), 3);
    assert_eq!(result.transcript.iter().filter_map(|e| e.trial).max(), Some(3));

    let script: Vec<String> = ["English", "English", "French"].iter().flat_map(|a| answering_trial(a)).collect();
    let (_, agent) = client(ScriptedBackend::from_responses(script), AgentRole::Operator);
    let result = run_single_sc(&task(), &movies(), &agent, &PromptSet::builtin(), &cfg);
    assert_eq!(result.verdict, Verdict::Abstained(AbstainReason::TrialDisagreement));
}

#[test]
fn self_consistency_abstains_when_any_trial_abstains() {
    let mut script = answering_trial("English");
    script.extend(["hmm".to_string(), "hmm".to_string()]);
    script.extend(answering_trial("English"));
    let (_, agent) = client(ScriptedBackend::from_responses(script), AgentRole::Operator);
    let cfg = RunConfig::single_sc(2, 3, ScStrategy::SamplingVariation);
    let result = run_single_sc(&task(), &movies(), &agent, &PromptSet::builtin(), &cfg);
    assert_eq!(result.verdict, Verdict::Abstained(AbstainReason::TrialAbstained));
}

#[test]
fn sampling_variation_forwards_each_pair_verbatim() {
    let script: Vec<String> = (0..3).flat_map(|_| answering_trial("English")).collect();
    let (backend, agent) = client(ScriptedBackend::from_responses(script), AgentRole::Operator);
    let cfg = RunConfig::single_sc(10, 3, ScStrategy::SamplingVariation);
    let result = run_single_sc(&task(), &movies(), &agent, &PromptSet::builtin(), &cfg);
    assert!(result.verdict.is_answered());
    let pairs: Vec<(f64, f64)> = backend.requests().iter().map(|r| (r.top_p, r.temperature)).collect();
    assert_eq!(pairs, vec![(0.3, 0.5), (0.3, 0.5), (0.7, 1.0), (0.7, 1.0), (0.95, 0.95), (0.95, 0.95)]);
    assert!(backend.requests()[0].to_wire_json().contains(r#""temperature":0.5,"top_p":0.3"#));
}

#[test]
fn paraphrase_strategy_runs_one_trial_per_variant() {
    let mut script = vec![
        "1. What languages are the films by the director of [The Vanishing American] in?\n2. In which languages were movies sharing a director with [The Vanishing American] made?\n3. The films made by [The Vanishing American]'s director use which languages?".to_string(),
    ];
    script.extend((0..3).flat_map(|_| answering_trial("English | French")));
    let (backend, agent) = client(ScriptedBackend::from_responses(script), AgentRole::Operator);
    let cfg = RunConfig::single_sc(10, 3, ScStrategy::Paraphrase);
    let result = run_single_sc(&task(), &movies(), &agent, &PromptSet::builtin(), &cfg);
    assert_eq!(result.verdict, Verdict::Answered(vec!["English".into(), "French".into()]));
    assert_eq!(result.stats.operator_calls, 7);
    let queries: Vec<&str> = result.trial_inputs.iter().map(|t| t.query.as_str()).collect();
    assert_eq!(queries[1], "In which languages were movies sharing a director with [The Vanishing American] made?");
    assert!(backend.requests()[1].messages[1].content.contains(queries[0]));
    assert!(backend.requests()[0].messages[0].content.contains("into 3 variations"));
}

#[test]
fn short_paraphrase_reply_is_a_hard_failure() {
    let (_, agent) = client(ScriptedBackend::from_responses(["1. only one"]), AgentRole::Operator);
    let cfg = RunConfig::single_sc(10, 3, ScStrategy::Paraphrase);
    let result = run_single_sc(&task(), &movies(), &agent, &PromptSet::builtin(), &cfg);
    assert_eq!(result.verdict, Verdict::Abstained(AbstainReason::HardFailure));
    assert!(result.error.unwrap().contains("1 distinct"));
}

#[test]
fn multi_prompt_blocks_are_distinct_and_seeded() {
    let (_, agent) = client(ScriptedBackend::default(), AgentRole::Operator);
    let prompts = PromptSet::builtin();
    let mut cfg = RunConfig::single_sc(10, 3, ScStrategy::MultiPrompt);
    let mut stats = RunStats::default();
    let a = materialize_trials(&task(), &agent, &prompts, &cfg, &mut stats).unwrap();
    let again = materialize_trials(&task(), &agent, &prompts, &cfg, &mut stats).unwrap();
    assert_eq!(a, again);
    let blocks: std::collections::BTreeSet<usize> = a.iter().map(|t| t.few_shot_block).collect();
    assert_eq!(blocks.len(), 3);
    assert!(a.iter().all(|t| t.query == QUERY && t.sampling.is_none()));
    cfg.seed = 99;
    let other = materialize_trials(&task(), &agent, &prompts, &cfg, &mut stats).unwrap();
    assert_eq!(other.len(), 3);
    assert_eq!(stats.operator_calls, 0);
}

#[test]
fn sampling_variation_uses_configured_pairs() {
    let (_, agent) = client(ScriptedBackend::default(), AgentRole::Operator);
    let cfg = RunConfig::single_sc(10, 3, ScStrategy::SamplingVariation);
    let inputs = materialize_trials(&task(), &agent, &PromptSet::builtin(), &cfg, &mut RunStats::default()).unwrap();
    let pairs: Vec<Sampling> = inputs.iter().map(|t| t.sampling.unwrap()).collect();
    assert_eq!(pairs, Sampling::variation_triples().to_vec());
}

fn operator_line() -> impl Strategy<Value = String> {
    prop_oneof![
        Just("GetRelation(The Vanishing American)".to_string()),
        Just("GetRelation(George B. Seitz)".to_string()),
        Just("ExploreKG(George B. Seitz, [~directed_by])".to_string()),
        Just("ExploreKG(Nobody, [r])".to_string()),
        Just("Verification()".to_string()),
        Just("GetRelation(The Vanishing American)\nVerification()".to_string()),
        "[ -~]{0,30}",
    ]
}

fn supervisor_line() -> impl Strategy<Value = String> {
    prop_oneof![Just("ANSWER: English".to_string()), Just("FEEDBACK: keep going".to_string()), "[ -~]{0,30}",]
}

proptest! {
    #[test]
    fn no_run_exceeds_its_budget(
        limit in 1u32..=20,
        ops in prop::collection::vec(operator_line(), 0..30),
        sups in prop::collection::vec(supervisor_line(), 0..30),
    ) {
        let (op_backend, op) = client(ScriptedBackend::from_responses(ops), AgentRole::Operator);
        let (_, sup) = client(ScriptedBackend::from_responses(sups), AgentRole::Supervisor);
        let result = run_dual(&task(), &movies(), &op, &sup, &PromptSet::builtin(), &RunConfig::dual(limit));
        prop_assert!(result.stats.iterations <= limit);
        prop_assert!(op_backend.cursor() as u32 <= limit);
        prop_assert!(result.stats.supervisor_calls <= limit);
        let turns = result.transcript.iter().filter(|e| e.role == Role::Operator).count() as u32;
        prop_assert_eq!(turns, result.stats.iterations);
        if result.verdict == Verdict::Abstained(AbstainReason::LimitExceeded) {
            prop_assert_eq!(result.stats.iterations, limit);
        }
    }
}
