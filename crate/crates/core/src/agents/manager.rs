//! The orchestrating agent: owns the candidate queue and budgets, decides
//! between searching for new candidates and refining the most promising one,
//! and folds sub-agent reports back into priorities.

use std::collections::HashSet;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{Budgets, RunConfig};
use crate::device::DeviceKb;
use crate::error::{Error, Result};
use crate::evaluator::{CandidateDesign, EvalContext, SimReport};
use crate::memory::{render_template, EbHints, EbRecord, KbRecord, MemoryStore};
use crate::spec::DesignSpec;
use crate::tools::Toolbox;

use super::{
    refiner_run, searcher_run, AgentReport, CriticalCandidate, Policy, TaskFrame, TaskKind,
    TokenUsage,
};

/// Operating modes of the orchestration loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    AutonomousSearch,
    RetrieveAndRefine,
}

/// Priority weights along the three ranking axes.
const W_NF: f64 = 1.0;
const W_LINEARITY: f64 = 1.0;
const W_LARGE_SIGNAL: f64 = 0.5;

/// One queued candidate with its ranking state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueueEntry {
    pub candidate: CriticalCandidate,
    /// Violation magnitudes along (noise, linearity, gain) axes.
    pub nf_violation: f64,
    pub ip1db_violation: f64,
    pub gain_violation: f64,
    /// Evaluations spent refining this candidate so far.
    pub hf_spent: u64,
    pub refine_attempts: u32,
    pub insertion: u64,
}

impl QueueEntry {
    pub fn priority(&self) -> f64 {
        -(W_NF * self.nf_violation
            + W_LINEARITY * self.ip1db_violation
            + W_LARGE_SIGNAL * self.gain_violation)
    }
}

/// Manager-owned state.
#[derive(Debug)]
pub struct ManagerState {
    pub queue: Vec<QueueEntry>,
    pub seen: HashSet<u64>,
    pub budget_remaining: Budgets,
    pub mode: Mode,
    pub history: Vec<String>,
    pub search_round: u64,
    insertion_counter: u64,
}

/// Power splits of the non-third-stage budget the searcher walks through.
/// The trailing low-first-share splits put mid-width devices at the front,
/// which is where wideband self-matched front ends live.
pub const SEARCH_SPLITS: [[f64; 2]; 5] =
    [[0.5, 0.5], [0.6, 0.4], [0.4, 0.6], [0.3, 0.7], [0.22, 0.78]];

impl ManagerState {
    pub fn new(mode: Mode, budgets: Budgets) -> Self {
        ManagerState {
            queue: Vec::new(),
            seen: HashSet::new(),
            budget_remaining: budgets,
            mode,
            history: Vec::new(),
            search_round: 0,
            insertion_counter: 0,
        }
    }

    pub fn budget_exhausted(&self) -> bool {
        self.budget_remaining.hf_evals == 0
            || self.budget_remaining.tool_calls == 0
            || self.budget_remaining.wall_seconds <= 0.0
    }

    /// Inserts a candidate unless its hash was already queued or evicted.
    pub fn enqueue(&mut self, spec: &DesignSpec, candidate: CriticalCandidate) -> bool {
        if !self.seen.insert(candidate.hash) {
            return false;
        }
        // Initial ranking from the critical-chain result: the noise axis
        // carries both the noise shortfall and the in-band reflection excess
        // (mismatch feeds noise), and a rippled head curve predicts
        // band-planning trouble on the gain axis.
        let nf_violation = (candidate.nf_db - spec.nf_max).max(0.0)
            + (candidate.s11_inband_max_db - crate::evaluator::S11_INBAND_MAX_DB).max(0.0);
        let gain_violation = (candidate.head_ripple_db - 6.0).max(0.0);
        self.insertion_counter += 1;
        self.queue.push(QueueEntry {
            candidate,
            nf_violation,
            ip1db_violation: 0.0,
            gain_violation,
            hf_spent: 0,
            refine_attempts: 0,
            insertion: self.insertion_counter,
        });
        true
    }

    fn head_index(&self) -> Option<usize> {
        (0..self.queue.len()).min_by(|&a, &b| {
            let ea = &self.queue[a];
            let eb = &self.queue[b];
            eb.priority()
                .partial_cmp(&ea.priority())
                .unwrap()
                .then(ea.hf_spent.cmp(&eb.hf_spent))
                .then(ea.insertion.cmp(&eb.insertion))
        })
    }

    /// Applies a refinement report to the entry it concerned: failures carry
    /// updated violation magnitudes, infeasible candidates are evicted.
    pub fn apply_report(&mut self, hash: u64, report: &AgentReport, hf_spent: u64) {
        let Some(idx) = self.queue.iter().position(|e| e.candidate.hash == hash) else {
            return;
        };
        let infeasible = report
            .failure_reasons
            .iter()
            .any(|r| r.contains("escalate") || r.contains("infeasible"));
        if infeasible {
            self.queue.remove(idx);
            return;
        }
        let entry = &mut self.queue[idx];
        entry.refine_attempts += 1;
        entry.hf_spent += hf_spent;
        for (name, magnitude) in &report.violated {
            match name.as_str() {
                "nf" => entry.nf_violation = *magnitude,
                "ip1db" => entry.ip1db_violation = *magnitude,
                "gain" | "ripple" => entry.gain_violation = entry.gain_violation.max(*magnitude),
                _ => {}
            }
        }
        if entry.refine_attempts >= 2 {
            self.queue.remove(idx);
        }
    }
}

/// The manager's next move.
#[derive(Debug, Clone)]
pub enum ManagerAction {
    SearchCandidates { split_index: usize },
    RefineCandidate { queue_index: usize },
}

/// Picks the next action: search when the queue is empty, otherwise refine
/// the head of the queue. Budget exhaustion is terminal.
pub fn manager_step(state: &mut ManagerState, spec: &DesignSpec) -> Result<ManagerAction> {
    if state.budget_exhausted() {
        return Err(Error::BudgetExhausted(format!(
            "hf={} tool_calls={} wall={:.1}s left",
            state.budget_remaining.hf_evals,
            state.budget_remaining.tool_calls,
            state.budget_remaining.wall_seconds
        )));
    }
    match state.head_index() {
        None => {
            // Wide bands need mid-width front ends, which live at the
            // low-first-share end of the schedule; narrow bands want the
            // balanced splits first.
            let order: Vec<usize> = if spec.fbw >= 40.0 {
                (0..SEARCH_SPLITS.len()).rev().collect()
            } else {
                (0..SEARCH_SPLITS.len()).collect()
            };
            let split_index = order[(state.search_round as usize) % order.len()];
            state.search_round += 1;
            state
                .history
                .push(format!("search split index {split_index}"));
            Ok(ManagerAction::SearchCandidates { split_index })
        }
        Some(queue_index) => {
            state.history.push(format!(
                "refine candidate {:016x} (priority {:.3})",
                state.queue[queue_index].candidate.hash,
                state.queue[queue_index].priority()
            ));
            Ok(ManagerAction::RefineCandidate { queue_index })
        }
    }
}

/// Result of one end-to-end design run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DesignOutcome {
    pub success: bool,
    pub report: Option<SimReport>,
    pub candidate: Option<CandidateDesign>,
    pub hf_evals: u64,
    pub tool_calls: u64,
    pub wall_seconds: f64,
    pub tokens: TokenUsage,
    pub search_invocations: u64,
    pub refine_invocations: u64,
}

/// Builds a policy instance for each sub-agent invocation so no state leaks
/// across invocations.
pub type PolicyFactory<'f> = dyn Fn() -> Box<dyn Policy> + 'f;

/// Runs the full two-tier loop for one specification.
///
/// In retrieve-and-refine mode the queue is preloaded with the most similar
/// stored designs and the experience base contributes initialization hints;
/// solved designs are persisted back into memory either way when a store is
/// supplied.
#[allow(clippy::too_many_arguments)]
pub fn run_design(
    spec: &DesignSpec,
    kb: &Arc<DeviceKb>,
    mode: Mode,
    policy_factory: &PolicyFactory,
    seed: u64,
    config: &RunConfig,
    memory: Option<&mut MemoryStore>,
    run_id: &str,
) -> Result<DesignOutcome> {
    spec.validate()?;
    let ctx = EvalContext::new();
    let toolbox = Toolbox::new(kb, spec.clone(), config.optim.clone(), &ctx);
    let mut state = ManagerState::new(mode, config.budgets);
    let started = Instant::now();
    let mut tokens = TokenUsage::default();
    let mut tool_calls = 0u64;
    let mut search_invocations = 0u64;
    let mut refine_invocations = 0u64;
    let mut memory = memory;

    // Retrieval: preload similar solved designs and distill hints.
    let mut hints: Option<EbHints> = None;
    if mode == Mode::RetrieveAndRefine {
        if let Some(store) = memory.as_deref() {
            for (_, rec) in store.kb_query(spec, 3) {
                if let Ok(cand) =
                    CriticalCandidate::from_design(&toolbox, &rec.candidate, &rec.report)
                {
                    state.enqueue(spec, cand);
                }
            }
            hints = store.eb_hints(spec, 3).ok();
        }
    }

    let outcome = loop {
        state.budget_remaining.wall_seconds =
            config.budgets.wall_seconds - started.elapsed().as_secs_f64();
        let action = match manager_step(&mut state, spec) {
            Ok(a) => a,
            Err(Error::BudgetExhausted(_)) => break None,
            Err(e) => return Err(e),
        };
        match action {
            ManagerAction::SearchCandidates { split_index } => {
                // The split schedule is finite; wrapping past it without any
                // queued work means the search space is exhausted.
                if state.search_round > SEARCH_SPLITS.len() as u64 {
                    break None;
                }
                search_invocations += 1;
                let t3 = hints
                    .as_ref()
                    .filter(|h| h.power_split_hint.len() == 3)
                    .map(|h| h.power_split_hint[2].clamp(0.2, 0.5))
                    .unwrap_or(0.3);
                let frame = TaskFrame {
                    kind: TaskKind::Search,
                    spec: spec.clone(),
                    instruction: format!("search split {split_index}"),
                    seed: seed.wrapping_add(split_index as u64 * 101),
                    split: SEARCH_SPLITS[split_index],
                    third_stage_fraction: t3,
                    headroom: 0.2,
                    gain_require: None,
                    candidate: None,
                    hints: hints.clone(),
                    max_tool_calls: state.budget_remaining.tool_calls.min(12),
                };
                let mut policy = policy_factory();
                let before = ctx.count();
                let (candidates, report, _transcript, _) =
                    searcher_run(policy.as_mut(), &toolbox, &frame);
                let spent = ctx.count() - before;
                tokens.add(report.tokens);
                tool_calls += report.tool_calls_made;
                state.budget_remaining.hf_evals =
                    state.budget_remaining.hf_evals.saturating_sub(spent);
                state.budget_remaining.tool_calls = state
                    .budget_remaining
                    .tool_calls
                    .saturating_sub(report.tool_calls_made);
                for c in candidates {
                    state.enqueue(spec, c);
                }
            }
            ManagerAction::RefineCandidate { queue_index } => {
                refine_invocations += 1;
                let candidate = state.queue[queue_index].candidate.clone();
                let frame = TaskFrame {
                    kind: TaskKind::Refine,
                    spec: spec.clone(),
                    instruction: "refine candidate".into(),
                    seed: seed
                        .wrapping_add(candidate.hash)
                        .wrapping_add(state.queue[queue_index].refine_attempts as u64),
                    split: candidate.split,
                    third_stage_fraction: candidate.third_stage_fraction,
                    headroom: 0.2,
                    gain_require: None,
                    candidate: Some(candidate.clone()),
                    hints: hints.clone(),
                    max_tool_calls: state.budget_remaining.tool_calls.min(16),
                };
                let mut policy = policy_factory();
                let before = ctx.count();
                let result = refiner_run(policy.as_mut(), &toolbox, &frame);
                let spent = ctx.count() - before;
                tokens.add(result.report.tokens);
                tool_calls += result.report.tool_calls_made;
                state.budget_remaining.hf_evals =
                    state.budget_remaining.hf_evals.saturating_sub(spent);
                state.budget_remaining.tool_calls = state
                    .budget_remaining
                    .tool_calls
                    .saturating_sub(result.report.tool_calls_made);

                if let Some((design, sim)) = result.finalized {
                    if let Some(store) = memory.as_deref_mut() {
                        persist(store, spec, &design, &sim, run_id)?;
                    }
                    break Some((design, sim));
                }
                state.apply_report(candidate.hash, &result.report, spent);
            }
        }
    };

    let wall_seconds = started.elapsed().as_secs_f64();
    Ok(match outcome {
        Some((design, sim)) => DesignOutcome {
            success: true,
            report: Some(sim),
            candidate: Some(design),
            hf_evals: ctx.count(),
            tool_calls,
            wall_seconds,
            tokens,
            search_invocations,
            refine_invocations,
        },
        None => DesignOutcome {
            success: false,
            report: None,
            candidate: None,
            hf_evals: ctx.count(),
            tool_calls,
            wall_seconds,
            tokens,
            search_invocations,
            refine_invocations,
        },
    })
}

fn persist(
    store: &mut MemoryStore,
    spec: &DesignSpec,
    design: &CandidateDesign,
    sim: &SimReport,
    run_id: &str,
) -> Result<()> {
    let created_at = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs().to_string())
        .unwrap_or_default();
    store.kb_put(KbRecord {
        spec: spec.clone(),
        candidate: design.clone(),
        report: sim.clone(),
        candidate_hash: format!("{:016x}", design.content_hash()),
        created_at,
        run_id: run_id.to_string(),
    })?;

    let currents: Vec<f64> = {
        let kb = DeviceKb::generate(0);
        let classes = DeviceKb::stage_classes(3);
        (0..3)
            .map(|i| {
                crate::device::lookup_exact(kb.table(classes[i]), design.x1.w[i], design.x1.vgs[i])
                    .map(|r| r.id)
                    .unwrap_or(f64::NAN)
            })
            .collect()
    };
    let template_id = if sim.all_pass() { "success" } else { "partial" };
    let gain_min = sim.gain_db.iter().cloned().fold(f64::INFINITY, f64::min);
    store.eb_put(EbRecord {
        spec: spec.clone(),
        system_nf: sim.nf_db,
        first_stage_nf: sim.per_stage_nf_db.first().copied().unwrap_or(f64::NAN),
        per_stage_ip1db: sim.per_stage_ip1db_dbm.clone(),
        per_stage_gain: sim.per_stage_gain_db.clone(),
        per_stage_current_ma: currents,
        template_id: template_id.into(),
        notes: render_template(template_id, spec, sim.nf_db, gain_min),
    })?;
    Ok(())
}
