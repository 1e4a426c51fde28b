//! Decision policies: the deterministic scripted trees for searching and
//! refining, and the remote chat-endpoint policy speaking the same schema.

use std::sync::Arc;

use serde_json::{json, Value};

use crate::config::BacktrackSettings;
use crate::device::{lookup_by_current, DeviceKb};
use crate::error::{Error, Result};
use crate::evaluator::SimReport;
use crate::spec::DesignSpec;
use crate::tools::{
    backtrack_decide, ActiveParams, AttemptState, BacktrackAction, CriticalPassive, GainCurve,
    StageParams, ToolName,
};

use super::{AgentReport, PolicyTurn, TaskFrame, TaskKind, TokenUsage, TurnAction};

/// What a policy wants to do next.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicyAction {
    Call { tool: ToolName, args: Value },
    Terminate(AgentReport),
}

/// A decision policy driving the reasoning loop. Implementations must be
/// pure functions of (frame, transcript) up to their own token accounting,
/// so sub-agent invocations stay stateless and replayable.
pub trait Policy {
    fn decide(&mut self, frame: &TaskFrame, transcript: &[PolicyTurn])
        -> Result<(String, PolicyAction)>;

    /// Tokens consumed so far by this policy instance.
    fn token_usage(&self) -> TokenUsage {
        TokenUsage::default()
    }
}

/// Deterministic decision-tree policy; the testable default.
pub struct ScriptedPolicy {
    kb: Arc<DeviceKb>,
    knobs: BacktrackSettings,
}

impl ScriptedPolicy {
    pub fn new(kb: Arc<DeviceKb>, knobs: BacktrackSettings) -> Self {
        ScriptedPolicy { kb, knobs }
    }
}

impl Policy for ScriptedPolicy {
    fn decide(
        &mut self,
        frame: &TaskFrame,
        transcript: &[PolicyTurn],
    ) -> Result<(String, PolicyAction)> {
        match frame.kind {
            TaskKind::Search => self.decide_search(frame, transcript),
            TaskKind::Refine => self.decide_refine(frame, transcript),
        }
    }
}

fn observed<'t>(turn: &'t PolicyTurn) -> Option<(&'t ToolName, bool, &'t Value)> {
    if let TurnAction::Call(call) = &turn.action {
        if let Some(obs) = &turn.observation {
            return Some((&call.tool_name, obs.ok, &obs.payload));
        }
    }
    None
}

impl ScriptedPolicy {
    /// Search procedure: size the stages for the frame's split, then solve
    /// the critical stage twice per extreme configuration (gain-constrained
    /// and unconstrained), and report.
    fn decide_search(
        &self,
        frame: &TaskFrame,
        transcript: &[PolicyTurn],
    ) -> Result<(String, PolicyAction)> {
        let ratios = search_ratios(frame);
        if transcript.is_empty() {
            return Ok((
                format!(
                    "size stages for split {:.2}/{:.2} with {:.0}% of the budget reserved for stage 3",
                    frame.split[0], frame.split[1], 100.0 * frame.third_stage_fraction
                ),
                PolicyAction::Call {
                    tool: ToolName::ActiveSizing,
                    args: json!({ "power_ratio_list": ratios }),
                },
            ));
        }

        // Configurations come from the first successful sizing observation.
        let configs: Vec<ActiveParams> = match transcript.iter().find_map(|t| {
            observed(t).and_then(|(tool, ok, payload)| {
                (*tool == ToolName::ActiveSizing && ok)
                    .then(|| payload.get("active_params_dict_list").cloned())
                    .flatten()
            })
        }) {
            Some(v) => serde_json::from_value(v)?,
            None => {
                return Ok((
                    "sizing failed; nothing to search".into(),
                    PolicyAction::Terminate(AgentReport {
                        success: false,
                        failure_reasons: vec!["active sizing produced no configurations".into()],
                        ..AgentReport::default()
                    }),
                ));
            }
        };

        let matching_done = transcript
            .iter()
            .filter(|t| matches!(observed(t), Some((ToolName::ImpedanceMatching, _, _))))
            .count();
        let total = configs.len() * 2;
        if matching_done < total && (matching_done as u64) < frame.max_tool_calls.saturating_sub(1)
        {
            let config_idx = matching_done / 2;
            let constrained = matching_done % 2 == 1;
            let gain_require = if constrained {
                Some(frame.gain_require.unwrap_or(0.45 * frame.spec.gain))
            } else {
                None
            };
            return Ok((
                format!(
                    "solve critical stage for configuration {config_idx} ({})",
                    if constrained { "gain-constrained" } else { "unconstrained" }
                ),
                PolicyAction::Call {
                    tool: ToolName::ImpedanceMatching,
                    args: json!({
                        "active_params_dict": configs[config_idx],
                        "nf_headroom": frame.headroom,
                        "gain_require": gain_require,
                        "seed": frame.seed.wrapping_add(matching_done as u64),
                    }),
                },
            ));
        }

        // Summarize: success when at least one matching run produced output.
        let produced = transcript
            .iter()
            .filter(|t| matches!(observed(t), Some((ToolName::ImpedanceMatching, true, _))))
            .count();
        let mut report = AgentReport {
            success: produced > 0,
            tool_calls_made: transcript.len() as u64,
            ..AgentReport::default()
        };
        report
            .metrics
            .insert("candidates".into(), produced as f64);
        if produced == 0 {
            report
                .failure_reasons
                .push("no critical-stage candidate was feasible".into());
        }
        Ok(("search complete".into(), PolicyAction::Terminate(report)))
    }

    /// Refinement procedure: plan the band, evaluate the full chain, then
    /// follow the staged backtracking ladder until acceptance or failure.
    fn decide_refine(
        &self,
        frame: &TaskFrame,
        transcript: &[PolicyTurn],
    ) -> Result<(String, PolicyAction)> {
        let candidate = frame.candidate.as_ref().ok_or_else(|| {
            Error::Policy("refine task frame carries no candidate".into())
        })?;
        let view = self.fold_refine(frame, candidate, transcript)?;

        if let Some(report) = view.terminal {
            return Ok(("refinement finished".into(), PolicyAction::Terminate(report)));
        }
        if transcript.len() as u64 >= frame.max_tool_calls {
            return Ok((
                "tool budget exhausted".into(),
                PolicyAction::Terminate(AgentReport {
                    success: false,
                    failure_reasons: vec!["budget exhausted".into()],
                    tool_calls_made: transcript.len() as u64,
                    ..AgentReport::default()
                }),
            ));
        }

        if view.need_rematch {
            return Ok((
                format!("re-match critical stage with headroom {:.2} dB", view.headroom),
                PolicyAction::Call {
                    tool: ToolName::ImpedanceMatching,
                    args: json!({
                        "active_params_dict": view.active,
                        "nf_headroom": view.headroom,
                        "gain_require": view.rematch_gain_require,
                        "seed": frame.seed.wrapping_add(1000 + view.attempts),
                    }),
                },
            ));
        }
        if view.planned.is_none() {
            let active = self.active_with_stage3(&view.active, view.t3, &frame.spec)?;
            return Ok((
                format!(
                    "plan the band with {:.0}% of the budget on stage 3{}",
                    100.0 * view.t3,
                    if view.gain_constraints.is_some() {
                        " under tighter gain distribution"
                    } else {
                        ""
                    }
                ),
                PolicyAction::Call {
                    tool: ToolName::BandPlanning,
                    args: json!({
                        "active_params_dict": active,
                        "gain_list": view.head,
                        "gain_req_list": view.gain_constraints,
                        "critical_passive": view.passive,
                        "seed": frame.seed.wrapping_add(2000 + view.attempts),
                    }),
                },
            ));
        }

        let planned = view.planned.as_ref().unwrap();
        let active = self.active_with_stage3(&view.active, view.t3, &frame.spec)?;
        Ok((
            "evaluate the full chain".into(),
            PolicyAction::Call {
                tool: ToolName::FullchainEval,
                args: json!({
                    "wholechain_active_dict": active,
                    "wholechain_passive_dict": {
                        "mcr": [view.passive.mcr1, planned[0], planned[1]],
                        "input": {
                            "l_par": view.passive.l_par,
                            "l_g": view.passive.l_g,
                            "l_s": view.passive.l_s,
                        },
                    },
                }),
            },
        ))
    }

    /// Replaces the third-stage operating point with the largest device
    /// feasible under the `t3` share of the budget, leaving the critical
    /// stages untouched.
    fn active_with_stage3(
        &self,
        active: &ActiveParams,
        t3: f64,
        spec: &DesignSpec,
    ) -> Result<ActiveParams> {
        let i1 = active.stages[0].dc_current;
        let i2 = active.stages[1].dc_current;
        let share = (t3 * spec.power).min(spec.power - i1 - i2);
        let table = &self.kb.diff_cs;
        let feasible = lookup_by_current(table, share);
        let rec = feasible
            .iter()
            .max_by(|a, b| {
                (a.width, a.vbias)
                    .partial_cmp(&(b.width, b.vbias))
                    .unwrap()
            })
            .copied()
            .ok_or(Error::InfeasibleBudget {
                stage: 2,
                share_ma: share,
            })?;
        let mut out = active.clone();
        out.stages[2] = StageParams::from_record(rec);
        out.power_split = vec![
            i1 / spec.power,
            i2 / spec.power,
            1.0 - (i1 + i2) / spec.power,
        ];
        out.total_budget = spec.power;
        Ok(out)
    }

    /// Replays the transcript into the current refinement state.
    fn fold_refine(
        &self,
        frame: &TaskFrame,
        candidate: &CriticalCandidate,
        transcript: &[PolicyTurn],
    ) -> Result<RefineView> {
        let mut view = RefineView {
            headroom: frame.headroom,
            t3: frame.third_stage_fraction,
            attempts: 0,
            lin_attempts: 0,
            plan_failures: 0,
            rematches: 0,
            gain_constraints: None,
            need_rematch: false,
            rematch_gain_require: candidate.gain_require,
            passive: candidate.passive,
            head: candidate.head_gain.clone(),
            active: candidate.active.clone(),
            planned: None,
            terminal: None,
        };
        if let Some(hints) = &frame.hints {
            if hints.power_split_hint.len() == 3 {
                view.t3 = hints.power_split_hint[2].clamp(0.2, 0.5);
            }
        }

        for turn in transcript {
            let Some((tool, ok, payload)) = observed(turn) else {
                continue;
            };
            match (tool, ok) {
                (ToolName::ImpedanceMatching, true) => {
                    let p = &payload["passive_params_cpstages"];
                    view.passive = CriticalPassive {
                        mcr1: serde_json::from_value(p["mcr1"].clone())?,
                        l_par: p["l_par"].as_f64().unwrap_or(0.0),
                        l_g: p["l_g"].as_f64().unwrap_or(0.0),
                        l_s: p["l_s"].as_f64().unwrap_or(0.0),
                    };
                    view.head =
                        serde_json::from_value(payload["sim_result_cpstages"]["head_gain"].clone())?;
                    view.need_rematch = false;
                    view.planned = None;
                }
                (ToolName::ImpedanceMatching, false) => {
                    view.terminal = Some(AgentReport {
                        success: false,
                        failure_reasons: vec!["critical-stage re-matching infeasible".into()],
                        tool_calls_made: transcript.len() as u64,
                        ..AgentReport::default()
                    });
                    break;
                }
                (ToolName::BandPlanning, true) => {
                    let p = &payload["passive_params_dict"];
                    view.planned = Some([
                        serde_json::from_value(p["mcr2"].clone())?,
                        serde_json::from_value(p["mcr3"].clone())?,
                    ]);
                }
                (ToolName::BandPlanning, false) => {
                    if std::env::var("RFAMP_DEBUG").is_ok() {
                        eprintln!("  refine: band planning failed (attempt {})", view.attempts);
                    }
                    view.plan_failures += 1;
                    view.attempts += 1;
                    view.planned = None;
                    if view.plan_failures >= 2 {
                        if view.rematches == 0 {
                            // The head itself may be unplannable; buy one
                            // fresh critical-stage solution before giving up.
                            view.rematches += 1;
                            view.plan_failures = 0;
                            view.need_rematch = true;
                            view.rematch_gain_require =
                                Some(0.45 * frame.spec.gain);
                        } else {
                            view.terminal = Some(AgentReport {
                                success: false,
                                failure_reasons: vec![
                                    "band planning failed twice; candidate infeasible".into(),
                                ],
                                tool_calls_made: transcript.len() as u64,
                                ..AgentReport::default()
                            });
                            break;
                        }
                    }
                }
                (ToolName::FullchainEval, true) => {
                    let report: SimReport =
                        serde_json::from_value(payload["sim_results_dict"].clone())?;
                    if std::env::var("RFAMP_DEBUG").is_ok() {
                        eprintln!(
                            "  refine: fullchain nf={:.2} ip={:.1} viol={:?}",
                            report.nf_db, report.ip1db_dbm, report.violations
                        );
                    }
                    view.attempts += 1;
                    let state = AttemptState {
                        headroom_db: view.headroom,
                        linearity_attempts: view.lin_attempts,
                        budget_exhausted: transcript.len() as u64 >= frame.max_tool_calls,
                    };
                    match backtrack_decide(&report, &frame.spec, &state, &self.knobs) {
                        BacktrackAction::Accept => {
                            let mut done = AgentReport::from_sim_report(
                                &report,
                                TokenUsage::default(),
                                transcript.len() as u64,
                            );
                            done.metrics
                                .insert("third_stage_fraction".into(), view.t3);
                            view.terminal = Some(done);
                            break;
                        }
                        BacktrackAction::RerunStages2to4 { adjusted_headroom } => {
                            view.headroom = adjusted_headroom;
                            view.need_rematch = true;
                            view.planned = None;
                        }
                        BacktrackAction::ReplanStage3Tighter { gain_constraints } => {
                            if report.violations.get("ip1db").copied().unwrap_or(0.0) > 0.0 {
                                view.lin_attempts += 1;
                                view.t3 = (view.t3 + 0.1).min(0.5);
                            }
                            view.gain_constraints = gain_constraints;
                            view.planned = None;
                        }
                        BacktrackAction::RerunStages2to4GlobalGain => {
                            view.lin_attempts += 1;
                            view.need_rematch = true;
                            view.rematch_gain_require = Some(0.45 * frame.spec.gain);
                            view.planned = None;
                        }
                        BacktrackAction::EscalateStage1 => {
                            let mut done = AgentReport::from_sim_report(
                                &report,
                                TokenUsage::default(),
                                transcript.len() as u64,
                            );
                            done.success = false;
                            done.failure_reasons
                                .push("escalate: reallocate bias current from stage 1".into());
                            view.terminal = Some(done);
                            break;
                        }
                        BacktrackAction::Abort => {
                            view.terminal = Some(AgentReport {
                                success: false,
                                failure_reasons: vec!["budget exhausted".into()],
                                tool_calls_made: transcript.len() as u64,
                                ..AgentReport::default()
                            });
                            break;
                        }
                    }
                }
                (ToolName::FullchainEval, false) => {
                    view.terminal = Some(AgentReport {
                        success: false,
                        failure_reasons: vec!["full-chain evaluation failed".into()],
                        tool_calls_made: transcript.len() as u64,
                        ..AgentReport::default()
                    });
                    break;
                }
                (ToolName::ActiveSizing, _) => {}
            }
        }
        Ok(view)
    }
}

struct RefineView {
    headroom: f64,
    t3: f64,
    attempts: u64,
    lin_attempts: u32,
    plan_failures: u32,
    rematches: u32,
    gain_constraints: Option<Vec<f64>>,
    need_rematch: bool,
    rematch_gain_require: Option<f64>,
    passive: CriticalPassive,
    head: GainCurve,
    active: ActiveParams,
    planned: Option<[crate::mcr::McrPhysical; 2]>,
    terminal: Option<AgentReport>,
}

/// Full per-stage ratios for a search frame: the split covers the first two
/// stages' share of the non-third budget.
pub fn search_ratios(frame: &TaskFrame) -> Vec<f64> {
    let rest = 1.0 - frame.third_stage_fraction;
    vec![
        frame.split[0] * rest,
        frame.split[1] * rest,
        frame.third_stage_fraction,
    ]
}

pub use super::subagents::CriticalCandidate;

/// Remote chat-endpoint policy. Sends the frame, transcript, and tool
/// documentation as JSON; expects a JSON reply with either a tool invocation
/// or a final report, plus optional usage counters.
pub struct RemotePolicy {
    url: String,
    key: String,
    tokens: TokenUsage,
    agent: ureq::Agent,
}

/// Environment variables carrying the endpoint location and credential.
pub const ENV_URL: &str = "RFAMP_LLM_URL";
pub const ENV_KEY: &str = "RFAMP_LLM_KEY";

/// Builds a remote policy from `RFAMP_LLM_URL` / `RFAMP_LLM_KEY`.
pub fn remote_endpoint_from_env() -> Result<RemotePolicy> {
    let url = std::env::var(ENV_URL)
        .map_err(|_| Error::Policy(format!("{ENV_URL} is not set")))?;
    let key = std::env::var(ENV_KEY).unwrap_or_default();
    Ok(RemotePolicy::new(url, key))
}

impl RemotePolicy {
    pub fn new(url: String, key: String) -> Self {
        RemotePolicy {
            url,
            key,
            tokens: TokenUsage::default(),
            agent: ureq::Agent::new_with_defaults(),
        }
    }

    fn tool_docs() -> Value {
        json!([
            {
                "name": "ActiveSizing",
                "input": { "power_ratio_list": "fraction of the current budget per stage, summing to 1" },
                "output": { "active_params_dict_list": "feasible device configurations with width, bias voltage, transconductance, dc current, and input/output impedance per stage" },
            },
            {
                "name": "ImpedanceMatching",
                "input": {
                    "active_params_dict": "one configuration from ActiveSizing",
                    "nf_headroom": "optional noise headroom in dB (default 0.2)",
                    "gain_require": "optional floor on the critical-stage in-band gain in dB",
                    "seed": "optimizer seed",
                },
                "output": { "passive_params_cpstages": "matched input network and first coupler", "sim_result_cpstages": "critical-chain curves and center-frequency metrics" },
            },
            {
                "name": "BandPlanning",
                "input": {
                    "active_params_dict": "all three stages",
                    "gain_list": "head gain curve from the matching result",
                    "gain_req_list": "optional per-stage gain floors in dB",
                    "critical_passive": "matched critical-stage passives",
                    "seed": "optimizer seed",
                },
                "output": { "passive_params_dict": "couplers 2 and 3", "cal_gain_dict": "calibrated gain curve and verified band metrics" },
            },
            {
                "name": "FullchainEval",
                "input": { "wholechain_active_dict": "all stages", "wholechain_passive_dict": "all passives" },
                "output": { "sim_results_dict": "full small-signal, noise, and compression report with the violation ledger" },
            },
        ])
    }

    fn render_request(frame: &TaskFrame, transcript: &[PolicyTurn]) -> Value {
        let mut messages = vec![json!({
            "role": "system",
            "content": "You are sizing a multi-stage wideband amplifier through four staged tools. \
                        Reply with JSON: {\"thought\": str, \"action\": {\"tool_name\": str, \"args\": object}} \
                        to call a tool, or {\"thought\": str, \"final\": {\"success\": bool, \"failure_reasons\": [str]}} to finish.",
        })];
        messages.push(json!({
            "role": "user",
            "content": serde_json::to_string(&json!({
                "task": frame.kind,
                "instruction": frame.instruction,
                "spec": frame.spec,
                "seed": frame.seed,
                "transcript": transcript,
            }))
            .unwrap_or_default(),
        }));
        json!({ "messages": messages, "tools": Self::tool_docs() })
    }

    fn parse_reply(reply: &Value) -> Result<(String, PolicyAction)> {
        let thought = reply["thought"].as_str().unwrap_or_default().to_string();
        if let Some(action) = reply.get("action") {
            let tool = match action["tool_name"].as_str() {
                Some("ActiveSizing") => ToolName::ActiveSizing,
                Some("ImpedanceMatching") => ToolName::ImpedanceMatching,
                Some("BandPlanning") => ToolName::BandPlanning,
                Some("FullchainEval") => ToolName::FullchainEval,
                other => {
                    return Err(Error::Policy(format!(
                        "unknown tool name in reply: {other:?}"
                    )))
                }
            };
            let args = action
                .get("args")
                .cloned()
                .ok_or_else(|| Error::Policy("tool action carries no args".into()))?;
            return Ok((thought, PolicyAction::Call { tool, args }));
        }
        if let Some(fin) = reply.get("final") {
            let report: AgentReport =
                serde_json::from_value(fin.clone()).unwrap_or_else(|_| AgentReport {
                    success: fin["success"].as_bool().unwrap_or(false),
                    ..AgentReport::default()
                });
            return Ok((thought, PolicyAction::Terminate(report)));
        }
        Err(Error::Policy(
            "reply carries neither an action nor a final report".into(),
        ))
    }
}

impl Policy for RemotePolicy {
    fn decide(
        &mut self,
        frame: &TaskFrame,
        transcript: &[PolicyTurn],
    ) -> Result<(String, PolicyAction)> {
        let body = Self::render_request(frame, transcript);
        let mut request = self.agent.post(&self.url);
        if !self.key.is_empty() {
            request = request.header("authorization", &format!("Bearer {}", self.key));
        }
        let mut response = request
            .send_json(&body)
            .map_err(|e| Error::Policy(format!("endpoint transport failed: {e}")))?;
        let reply: Value = response
            .body_mut()
            .read_json()
            .map_err(|e| Error::Policy(format!("endpoint returned invalid JSON: {e}")))?;
        if let Some(usage) = reply.get("usage") {
            self.tokens.add(TokenUsage {
                prompt: usage["prompt_tokens"].as_u64().unwrap_or(0),
                completion: usage["completion_tokens"].as_u64().unwrap_or(0),
            });
        }
        Self::parse_reply(&reply)
    }

    fn token_usage(&self) -> TokenUsage {
        self.tokens
    }
}
