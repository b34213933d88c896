//! Reasoning loops: the dual-agent Operator/Supervisor loop with
//! abstention, and the single-agent loop with strict self-consistency.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{AgentClient, Sampling};
use crate::kg::KnowledgeGraph;
use crate::prompts::{self, PromptSet};
use crate::protocol::{parse_supervisor_turn, VerificationOutcome};
use crate::server::{ChatEntry, SessionState};

/// Default iteration limit for the dual-agent loop.
pub const DEFAULT_DUAL_LIMIT: u32 = 15;
/// Default iteration limit for each self-consistency trial.
pub const DEFAULT_TRIAL_LIMIT: u32 = 10;
pub const DEFAULT_TRIALS: u32 = 3;

/// A question with its given topic entities.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Task {
    pub query: String,
    pub topic_entities: Vec<String>,
}

impl Task {
    pub fn new<S: Into<String>>(query: impl Into<String>, topic_entities: impl IntoIterator<Item = S>) -> Self {
        Self { query: query.into(), topic_entities: topic_entities.into_iter().map(Into::into).collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbstainReason {
    LimitExceeded,
    TrialDisagreement,
    TrialAbstained,
    HardFailure,
}

impl AbstainReason {
    pub fn as_str(self) -> &'static str {
        match self {
            AbstainReason::LimitExceeded => "limit_exceeded",
            AbstainReason::TrialDisagreement => "trial_disagreement",
            AbstainReason::TrialAbstained => "trial_abstained",
            AbstainReason::HardFailure => "hard_failure",
        }
    }
}

impl fmt::Display for AbstainReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Answered(Vec<String>),
    Abstained(AbstainReason),
}

impl Verdict {
    pub fn is_answered(&self) -> bool {
        matches!(self, Verdict::Answered(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RunStats {
    pub operator_calls: u32,
    pub supervisor_calls: u32,
    /// Operator turns taken. For self-consistency runs, summed over trials.
    pub iterations: u32,
}

impl RunStats {
    fn absorb(&mut self, other: RunStats) {
        self.operator_calls += other.operator_calls;
        self.supervisor_calls += other.supervisor_calls;
        self.iterations += other.iterations;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReasoningResult {
    pub verdict: Verdict,
    /// Chat log of the run. Self-consistency runs concatenate their trials,
    /// each entry tagged with its trial number.
    pub transcript: Vec<ChatEntry>,
    pub stats: RunStats,
    /// Trial inputs used by a self-consistency run.
    pub trial_inputs: Vec<TrialInput>,
    /// Gateway or configuration failure that ended the run.
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Dual,
    SingleSc,
}

/// How self-consistency trials are made to differ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Distinct few-shot blocks, same query.
    MultiPrompt,
    /// One paraphrase of the query per trial.
    Paraphrase,
    /// Fixed prompt, one (top-p, temperature) pair per trial.
    SamplingVariation,
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "multi_prompt" => Ok(Strategy::MultiPrompt),
            "paraphrase" => Ok(Strategy::Paraphrase),
            "sampling_variation" => Ok(Strategy::SamplingVariation),
            other => Err(format!("unknown strategy {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    /// Iteration limit T (per trial in self-consistency mode).
    pub limit: u32,
    pub trials: u32,
    pub strategy: Option<Strategy>,
    /// Per-trial sampling pairs for [`Strategy::SamplingVariation`].
    pub sampling: Vec<Sampling>,
    /// Few-shot block used wherever the strategy does not vary it.
    pub few_shot_block: usize,
    /// Picks which few-shot blocks multi-prompt trials use.
    pub seed: u64,
}

impl RunConfig {
    pub fn dual(limit: u32) -> Self {
        Self { mode: Mode::Dual, limit, trials: 1, strategy: None, sampling: Vec::new(), few_shot_block: 0, seed: 0 }
    }

    pub fn single_sc(limit: u32, trials: u32, strategy: Strategy) -> Self {
        Self {
            mode: Mode::SingleSc,
            limit,
            trials,
            strategy: Some(strategy),
            sampling: Sampling::variation_triples().to_vec(),
            few_shot_block: 0,
            seed: 0,
        }
    }

    pub fn validate(&self, prompts: &PromptSet) -> Result<(), ConfigError> {
        if self.limit == 0 {
            return Err(ConfigError::ZeroLimit);
        }
        if self.mode == Mode::Dual {
            return Ok(());
        }
        if self.trials < 2 {
            return Err(ConfigError::TooFewTrials(self.trials));
        }
        let trials = self.trials as usize;
        match self.strategy {
            None => Err(ConfigError::MissingStrategy),
            Some(Strategy::MultiPrompt) if prompts.few_shot_block_count() < trials => {
                Err(ConfigError::NotEnoughVariants {
                    strategy: "multi_prompt",
                    needed: trials,
                    found: prompts.few_shot_block_count(),
                })
            }
            Some(Strategy::SamplingVariation) => {
                let distinct: Vec<&Sampling> = self.sampling.iter().fold(Vec::new(), |mut acc, s| {
                    if !acc.contains(&s) {
                        acc.push(s);
                    }
                    acc
                });
                if distinct.len() < trials || self.sampling.len() < trials {
                    return Err(ConfigError::NotEnoughVariants {
                        strategy: "sampling_variation",
                        needed: trials,
                        found: distinct.len(),
                    });
                }
                Ok(())
            }
            Some(_) => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("iteration limit must be at least 1")]
    ZeroLimit,
    #[error("self-consistency needs at least 2 trials, got {0}")]
    TooFewTrials(u32),
    #[error("self-consistency needs a strategy")]
    MissingStrategy,
    #[error("{strategy} needs {needed} distinct variants, only {found} available")]
    NotEnoughVariants { strategy: &'static str, needed: usize, found: usize },
}

/// Runs the configured mode.
pub fn run(
    task: &Task,
    graph: &KnowledgeGraph,
    operator: &AgentClient,
    supervisor: &AgentClient,
    prompts: &PromptSet,
    cfg: &RunConfig,
) -> ReasoningResult {
    match cfg.mode {
        Mode::Dual => run_dual(task, graph, operator, supervisor, prompts, cfg),
        Mode::SingleSc => run_single_sc(task, graph, operator, prompts, cfg),
    }
}

fn failed(session: Option<SessionState>, stats: RunStats, error: String) -> ReasoningResult {
    let transcript = match session {
        Some(mut s) => {
            s.record_error(&error);
            s.into_transcript()
        }
        None => Vec::new(),
    };
    ReasoningResult {
        verdict: Verdict::Abstained(AbstainReason::HardFailure),
        transcript,
        stats,
        trial_inputs: Vec::new(),
        error: Some(error),
    }
}

/// Dual-agent loop. The Operator takes at most `cfg.limit` turns; each
/// Verification() hands the evidence to the Supervisor, whose answer ends
/// the run and whose feedback is fed back into the chat log. Running out of
/// turns abstains.
pub fn run_dual(
    task: &Task,
    graph: &KnowledgeGraph,
    operator: &AgentClient,
    supervisor: &AgentClient,
    prompts: &PromptSet,
    cfg: &RunConfig,
) -> ReasoningResult {
    let mut stats = RunStats::default();
    let mut session = match SessionState::new(&task.query, &task.topic_entities, cfg.limit) {
        Ok(s) => s,
        Err(err) => return failed(None, stats, err.to_string()),
    };
    let few_shot = prompts.few_shot_block(cfg.few_shot_block);

    while session.budget_left() {
        let messages = match prompts::operator_messages(prompts, &few_shot, &task.query, &session) {
            Ok(m) => m,
            Err(err) => return failed(Some(session), stats, err.to_string()),
        };
        stats.operator_calls += 1;
        let reply = match operator.ask(messages, None) {
            Ok(c) => c,
            Err(err) => return failed(Some(session), stats, format!("operator: {err}")),
        };
        let turn = session.apply_turn(graph, &reply.text).expect("loop guard keeps the session within budget");
        stats.iterations = session.iteration();
        if !turn.verification_requested {
            continue;
        }

        let evidence = session.snapshot_evidence();
        let messages = match prompts::supervisor_messages(prompts, &task.query, session.topic_entities(), &evidence) {
            Ok(m) => m,
            Err(err) => return failed(Some(session), stats, err.to_string()),
        };
        stats.supervisor_calls += 1;
        let verdict = match supervisor.ask(messages, None) {
            Ok(c) => c,
            Err(err) => return failed(Some(session), stats, format!("supervisor: {err}")),
        };
        session.record_supervisor(&verdict.text);
        match parse_supervisor_turn(&verdict.text) {
            Ok(VerificationOutcome::Answer(labels)) => {
                return ReasoningResult {
                    verdict: Verdict::Answered(labels),
                    transcript: session.into_transcript(),
                    stats,
                    trial_inputs: Vec::new(),
                    error: None,
                };
            }
            // Unparseable verdicts count as feedback; the raw text is already logged.
            Ok(VerificationOutcome::Feedback(_)) | Err(_) => {}
        }
    }

    ReasoningResult {
        verdict: Verdict::Abstained(AbstainReason::LimitExceeded),
        transcript: session.into_transcript(),
        stats,
        trial_inputs: Vec::new(),
        error: None,
    }
}

/// Why a single trial produced no labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialAbstain {
    LimitExceeded,
    Unparseable,
    HardFailure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrialOutcome {
    Labels(Vec<String>),
    Abstain(TrialAbstain),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub outcome: TrialOutcome,
    pub transcript: Vec<ChatEntry>,
    pub stats: RunStats,
    pub error: Option<String>,
}

/// One self-consistency trial's inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialInput {
    pub query: String,
    pub few_shot_block: usize,
    pub sampling: Option<Sampling>,
}

/// Single-agent loop: Verification() is answered by the same agent with an
/// answer-generation prompt. Anything but a parseable answer abstains.
pub fn run_single_trial(
    task: &Task,
    graph: &KnowledgeGraph,
    agent: &AgentClient,
    prompts: &PromptSet,
    limit: u32,
    input: &TrialInput,
) -> TrialResult {
    let mut stats = RunStats::default();
    let abstain = |session: Option<SessionState>, stats, why, error: Option<String>| {
        let transcript = match session {
            Some(mut s) => {
                if let Some(e) = &error {
                    s.record_error(e);
                }
                s.into_transcript()
            }
            None => Vec::new(),
        };
        TrialResult { outcome: TrialOutcome::Abstain(why), transcript, stats, error }
    };
    let mut session = match SessionState::new(&input.query, &task.topic_entities, limit) {
        Ok(s) => s,
        Err(err) => return abstain(None, stats, TrialAbstain::HardFailure, Some(err.to_string())),
    };
    let few_shot = prompts.few_shot_block(input.few_shot_block);

    while session.budget_left() {
        let messages = match prompts::operator_messages(prompts, &few_shot, &input.query, &session) {
            Ok(m) => m,
            Err(err) => return abstain(Some(session), stats, TrialAbstain::HardFailure, Some(err.to_string())),
        };
        stats.operator_calls += 1;
        let reply = match agent.ask(messages, input.sampling) {
            Ok(c) => c,
            Err(err) => {
                return abstain(Some(session), stats, TrialAbstain::HardFailure, Some(format!("operator: {err}")))
            }
        };
        let turn = session.apply_turn(graph, &reply.text).expect("loop guard keeps the session within budget");
        stats.iterations = session.iteration();
        if !turn.verification_requested {
            continue;
        }

        let messages = match prompts::single_answer_messages(prompts, &few_shot, &input.query, &session) {
            Ok(m) => m,
            Err(err) => return abstain(Some(session), stats, TrialAbstain::HardFailure, Some(err.to_string())),
        };
        stats.operator_calls += 1;
        let answer = match agent.ask(messages, input.sampling) {
            Ok(c) => c,
            Err(err) => {
                return abstain(Some(session), stats, TrialAbstain::HardFailure, Some(format!("answer: {err}")))
            }
        };
        session.record_supervisor(&answer.text);
        return match parse_supervisor_turn(&answer.text) {
            Ok(VerificationOutcome::Answer(labels)) => TrialResult {
                outcome: TrialOutcome::Labels(labels),
                transcript: session.into_transcript(),
                stats,
                error: None,
            },
            _ => abstain(Some(session), stats, TrialAbstain::Unparseable, None),
        };
    }
    abstain(Some(session), stats, TrialAbstain::LimitExceeded, None)
}

/// Case-folded, trimmed label set used for agreement checks.
pub fn normalized_label_set<S: AsRef<str>>(labels: &[S]) -> BTreeSet<String> {
    labels.iter().map(|l| l.as_ref().trim().to_lowercase()).filter(|l| !l.is_empty()).collect()
}

/// Strict self-consistency: any abstaining trial abstains, any disagreement
/// abstains, otherwise the common answer (as reported by the first trial).
pub fn unanimous_verdict(outcomes: &[TrialOutcome]) -> Verdict {
    let mut answers = Vec::with_capacity(outcomes.len());
    for outcome in outcomes {
        match outcome {
            TrialOutcome::Abstain(_) => return Verdict::Abstained(AbstainReason::TrialAbstained),
            TrialOutcome::Labels(labels) => answers.push(labels),
        }
    }
    let Some(first) = answers.first() else {
        return Verdict::Abstained(AbstainReason::TrialAbstained);
    };
    let reference = normalized_label_set(first);
    if reference.is_empty() {
        return Verdict::Abstained(AbstainReason::TrialAbstained);
    }
    if answers.iter().all(|a| normalized_label_set(a) == reference) {
        Verdict::Answered((*first).clone())
    } else {
        Verdict::Abstained(AbstainReason::TrialDisagreement)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MaterializeError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("paraphrase request failed: {0}")]
    Paraphrase(String),
    #[error("paraphrase reply held {found} distinct variations, {needed} needed")]
    TooFewParaphrases { needed: usize, found: usize },
}

/// Builds the per-trial inputs for a self-consistency run. The paraphrase
/// strategy spends one agent call (counted in `stats`).
pub fn materialize_trials(
    task: &Task,
    agent: &AgentClient,
    prompts: &PromptSet,
    cfg: &RunConfig,
    stats: &mut RunStats,
) -> Result<Vec<TrialInput>, MaterializeError> {
    cfg.validate(prompts)?;
    let trials = cfg.trials as usize;
    let strategy = cfg.strategy.ok_or(ConfigError::MissingStrategy)?;
    let inputs = match strategy {
        Strategy::MultiPrompt => {
            let mut blocks: Vec<usize> = (0..prompts.few_shot_block_count()).collect();
            blocks.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
            blocks
                .into_iter()
                .take(trials)
                .map(|few_shot_block| TrialInput { query: task.query.clone(), few_shot_block, sampling: None })
                .collect()
        }
        Strategy::Paraphrase => {
            let messages = prompts::paraphrase_messages(prompts, &task.query, trials)
                .map_err(|e| MaterializeError::Paraphrase(e.to_string()))?;
            stats.operator_calls += 1;
            let reply = agent.ask(messages, None).map_err(|e| MaterializeError::Paraphrase(e.to_string()))?;
            let variants = prompts::parse_paraphrases(&reply.text);
            if variants.len() < trials {
                return Err(MaterializeError::TooFewParaphrases { needed: trials, found: variants.len() });
            }
            variants
                .into_iter()
                .take(trials)
                .map(|query| TrialInput { query, few_shot_block: cfg.few_shot_block, sampling: None })
                .collect()
        }
        Strategy::SamplingVariation => cfg
            .sampling
            .iter()
            .take(trials)
            .map(|s| TrialInput { query: task.query.clone(), few_shot_block: cfg.few_shot_block, sampling: Some(*s) })
            .collect(),
    };
    Ok(inputs)
}

/// Single-agent strict self-consistency over `cfg.trials` trials.
pub fn run_single_sc(
    task: &Task,
    graph: &KnowledgeGraph,
    agent: &AgentClient,
    prompts: &PromptSet,
    cfg: &RunConfig,
) -> ReasoningResult {
    let mut stats = RunStats::default();
    let inputs = match materialize_trials(task, agent, prompts, cfg, &mut stats) {
        Ok(inputs) => inputs,
        Err(err) => return failed(None, stats, err.to_string()),
    };

    let mut transcript = Vec::new();
    let mut outcomes = Vec::with_capacity(inputs.len());
    let mut errors = Vec::new();
    for (k, input) in inputs.iter().enumerate() {
        let trial = run_single_trial(task, graph, agent, prompts, cfg.limit, input);
        stats.absorb(trial.stats);
        transcript.extend(trial.transcript.into_iter().map(|mut e| {
            e.trial = Some(k as u32 + 1);
            e
        }));
        if let Some(e) = trial.error {
            errors.push(format!("trial {}: {e}", k + 1));
        }
        outcomes.push(trial.outcome);
    }

    ReasoningResult {
        verdict: unanimous_verdict(&outcomes),
        transcript,
        stats,
        trial_inputs: inputs,
        error: (!errors.is_empty()).then(|| errors.join("; ")),
    }
}
