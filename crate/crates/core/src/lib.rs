//! Knowledge-graph reasoning with an exploring Operator agent, an auditing
//! Supervisor agent, and abstention when the iteration budget runs out.
//!
//! * [`kg`]: immutable triple/quintuple store with inverse (`~rel`) views.
//! * [`protocol`]: the text call language exchanged with both agents.
//! * [`server`]: executes Operator calls and tracks session state.
//! * [`gateway`]: chat-completion backends (HTTP and scripted) and call accounting.
//! * [`prompts`]: prompt templates and message assembly.
//! * [`orchestrator`]: dual-agent loop and single-agent strict self-consistency.
//! * [`metrics`]: coverage, micro/samplewise F1 and hit rate.

pub mod gateway;
pub mod kg;
pub mod metrics;
pub mod orchestrator;
pub mod prompts;
pub mod protocol;
pub mod server;

pub use gateway::{AgentClient, AgentRole, ChatBackend, RemoteBackend, Sampling, ScriptEntry, ScriptedBackend};
pub use kg::{Fact, FactView, GraphFormat, KnowledgeGraph};
pub use metrics::{EvalRecord, MetricReport, Prediction};
pub use orchestrator::{AbstainReason, ReasoningResult, RunConfig, Strategy, Task, Verdict};
pub use prompts::PromptSet;
pub use protocol::{AgentAction, VerificationOutcome};
pub use server::{ChatEntry, Role, SessionState};
