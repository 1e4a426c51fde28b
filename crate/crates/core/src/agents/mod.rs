//! Two-tier orchestration: a manager that owns a priority queue of critical
//! candidates and budgets, plus stateless searcher and refiner sub-agents
//! that run tool-integrated reasoning loops. The decision policy is
//! pluggable: a deterministic scripted policy is the testable default, and a
//! remote chat-endpoint policy speaks the same action schema.

mod manager;
mod policy;
mod react;
mod subagents;

pub use manager::{
    manager_step, DesignOutcome, ManagerAction, ManagerState, Mode, QueueEntry, run_design,
};
pub use policy::{remote_endpoint_from_env, Policy, PolicyAction, RemotePolicy, ScriptedPolicy};
pub use react::{react_loop, replay_calls, ReactOutcome};
pub use subagents::{refiner_run, searcher_run, CriticalCandidate, RefinerResult};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::evaluator::SimReport;
use crate::memory::EbHints;
use crate::spec::DesignSpec;
use crate::tools::{ToolCall, ToolResult};

/// Prompt/completion token tally for one agent invocation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt: u64,
    pub completion: u64,
}

impl TokenUsage {
    pub fn add(&mut self, other: TokenUsage) {
        self.prompt += other.prompt;
        self.completion += other.completion;
    }
}

/// Structured summary a sub-agent returns to the manager.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentReport {
    pub success: bool,
    /// Attained values (noise figure, gains, compression, evaluation spend).
    pub metrics: BTreeMap<String, f64>,
    /// Violated constraints with magnitudes.
    pub violated: Vec<(String, f64)>,
    pub failure_reasons: Vec<String>,
    pub tokens: TokenUsage,
    pub tool_calls_made: u64,
}

impl AgentReport {
    pub fn validate(&self) -> bool {
        self.success == self.violated.is_empty()
    }

    pub fn from_sim_report(report: &SimReport, tokens: TokenUsage, tool_calls: u64) -> AgentReport {
        let mut metrics = BTreeMap::new();
        metrics.insert("nf_db".into(), report.nf_db);
        metrics.insert("ip1db_dbm".into(), report.ip1db_dbm);
        if let Some(min) = report
            .gain_db
            .iter()
            .cloned()
            .reduce(f64::min)
        {
            metrics.insert("gain_min_db".into(), min);
        }
        let violated: Vec<(String, f64)> = report
            .violations
            .iter()
            .filter(|(_, &v)| v > 0.0)
            .map(|(k, &v)| (k.clone(), v))
            .collect();
        let mut failure_reasons = Vec::new();
        if let Some(reason) = &report.failure_reason {
            failure_reasons.push(reason.clone());
        }
        AgentReport {
            success: violated.is_empty() && report.failure_reason.is_none(),
            metrics,
            violated,
            failure_reasons,
            tokens,
            tool_calls_made: tool_calls,
        }
    }
}

/// What kind of sub-task a loop is running.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    Search,
    Refine,
}

/// Everything a sub-agent invocation receives; sub-agents keep no state
/// beyond this frame and their transcript, so identical frames reproduce
/// identical behavior.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskFrame {
    pub kind: TaskKind,
    pub spec: DesignSpec,
    pub instruction: String,
    pub seed: u64,
    /// First-two-stage split of the non-third-stage budget (search tasks).
    pub split: [f64; 2],
    /// Fraction of the budget reserved for the third stage.
    pub third_stage_fraction: f64,
    /// Noise headroom the matching stage starts from (dB).
    pub headroom: f64,
    /// Explicit critical-stage gain floor for the constrained search variant.
    pub gain_require: Option<f64>,
    /// Candidate under refinement (refine tasks).
    pub candidate: Option<CriticalCandidate>,
    /// Retrieved experience, when running in retrieve-and-refine mode.
    pub hints: Option<EbHints>,
    /// Remaining tool-call allowance for this invocation.
    pub max_tool_calls: u64,
}

/// One reasoning turn: thought, chosen action, observation after dispatch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTurn {
    pub thought: String,
    pub action: TurnAction,
    pub observation: Option<ToolResult>,
}

/// Serialized form of the action taken in a turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TurnAction {
    Call(ToolCall),
    Terminate(AgentReport),
    /// A malformed policy reply, kept in the transcript with its error.
    Invalid(String),
}

/// Dispatched call with its observation: (tool, ok, payload, args).
pub(crate) fn observed_call(
    turn: &PolicyTurn,
) -> Option<(crate::tools::ToolName, bool, &serde_json::Value, &serde_json::Value)> {
    if let TurnAction::Call(call) = &turn.action {
        if let Some(obs) = &turn.observation {
            return Some((call.tool_name, obs.ok, &obs.payload, &call.args));
        }
    }
    None
}
