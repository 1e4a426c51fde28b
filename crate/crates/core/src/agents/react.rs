//! The reasoning loop: alternate policy decisions with tool dispatch until
//! the policy terminates, the turn cap is reached, or the budget runs out.

use crate::tools::{ToolCall, Toolbox, SCHEMA_VERSION};

use super::{AgentReport, Policy, PolicyAction, PolicyTurn, TaskFrame, TurnAction};

/// Transcript plus final report of one loop run.
#[derive(Debug, Clone)]
pub struct ReactOutcome {
    pub transcript: Vec<PolicyTurn>,
    pub report: AgentReport,
    /// High-fidelity evaluations consumed across all dispatched calls.
    pub hf_evals: u64,
}

/// Runs the loop. Malformed policy replies get exactly one retry with a
/// format-error observation appended to the transcript; a second failure in
/// the same turn counts as a failed turn and the loop moves on.
pub fn react_loop(
    policy: &mut dyn Policy,
    toolbox: &Toolbox,
    frame: &TaskFrame,
    max_turns: usize,
) -> ReactOutcome {
    assert!(max_turns >= 1, "at least one turn is required");
    let mut transcript: Vec<PolicyTurn> = Vec::new();
    let mut hf_evals = 0u64;
    let mut call_counter = 0u64;

    for turn_idx in 0..max_turns {
        let mut decision = policy.decide(frame, &transcript);
        if decision.is_err() {
            // One retry after recording the malformed turn.
            let msg = decision.as_ref().err().map(ToString::to_string).unwrap_or_default();
            transcript.push(PolicyTurn {
                thought: String::new(),
                action: TurnAction::Invalid(format!("format error: {msg}")),
                observation: None,
            });
            decision = policy.decide(frame, &transcript);
        }
        let (thought, action) = match decision {
            Ok(d) => d,
            Err(e) => {
                transcript.push(PolicyTurn {
                    thought: String::new(),
                    action: TurnAction::Invalid(format!("format error persisted: {e}")),
                    observation: None,
                });
                continue;
            }
        };

        match action {
            PolicyAction::Terminate(mut report) => {
                report.tokens = policy.token_usage();
                if report.tool_calls_made == 0 {
                    report.tool_calls_made = call_count(&transcript);
                }
                transcript.push(PolicyTurn {
                    thought,
                    action: TurnAction::Terminate(report.clone()),
                    observation: None,
                });
                return ReactOutcome {
                    transcript,
                    report,
                    hf_evals,
                };
            }
            PolicyAction::Call { tool, args } => {
                call_counter += 1;
                let call = ToolCall {
                    call_id: call_counter,
                    timestamp: turn_idx as u64,
                    tool_name: tool,
                    args,
                    schema_version: SCHEMA_VERSION,
                };
                let result = toolbox.dispatch(&call);
                hf_evals += result.hf_evals_used;
                transcript.push(PolicyTurn {
                    thought,
                    action: TurnAction::Call(call),
                    observation: Some(result),
                });
            }
        }
    }

    // Turn cap reached without a terminate action: forced failure report.
    let report = AgentReport {
        success: false,
        failure_reasons: vec![format!("turn cap of {max_turns} reached")],
        tokens: policy.token_usage(),
        tool_calls_made: call_count(&transcript),
        ..AgentReport::default()
    };
    ReactOutcome {
        transcript,
        report,
        hf_evals,
    }
}

fn call_count(transcript: &[PolicyTurn]) -> u64 {
    transcript
        .iter()
        .filter(|t| matches!(t.action, TurnAction::Call(_)))
        .count() as u64
}

/// Re-dispatches every call of a serialized transcript against a toolbox and
/// returns the fresh observations, for replay-equality checks.
pub fn replay_calls(toolbox: &Toolbox, transcript: &[PolicyTurn]) -> Vec<crate::tools::ToolResult> {
    transcript
        .iter()
        .filter_map(|t| match &t.action {
            TurnAction::Call(call) => Some(toolbox.dispatch(call)),
            _ => None,
        })
        .collect()
}
