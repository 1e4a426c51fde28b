//! Stateless sub-agents: the searcher proposes critical-stage candidates,
//! the refiner turns one candidate into a finalized design. Both receive
//! everything through their task frame and return a transcript plus a
//! structured report, so identical inputs reproduce identical outputs.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::evaluator::{CandidateDesign, SimReport};
use crate::tools::{ActiveParams, CriticalPassive, GainCurve, ToolName, Toolbox, WholechainPassive};

use super::{observed_call, AgentReport, Policy, PolicyTurn, ReactOutcome, TaskFrame};

/// A critical-stage partial design: fixed front-end devices and passives,
/// with the rest of the chain still open.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalCandidate {
    pub active: ActiveParams,
    pub passive: CriticalPassive,
    /// Voltage-transfer head curve feeding the band planner.
    pub head_gain: GainCurve,
    /// Critical-chain noise figure at the center frequency (dB).
    pub nf_db: f64,
    /// Critical-chain input reflection at the center frequency (dB).
    pub s11_db: f64,
    /// Matching cost at the optimum (zero when feasible).
    pub match_cost: f64,
    /// Gain floor the matching ran under, if any.
    pub gain_require: Option<f64>,
    /// In-band ripple of the head curve (dB); flat heads plan easily, so
    /// this seeds the queue's gain axis.
    pub head_ripple_db: f64,
    /// Worst in-band input reflection of the critical chain (dB).
    pub s11_inband_max_db: f64,
    /// Split and third-stage fraction the candidate was sized with.
    pub split: [f64; 2],
    pub third_stage_fraction: f64,
    /// Stable content hash for queue deduplication.
    pub hash: u64,
}

fn inband_ripple(spec: &crate::spec::DesignSpec, curve: &GainCurve) -> f64 {
    let idx = spec.in_band_indices(&curve.freq_ghz);
    let vals: Vec<f64> = idx.iter().map(|&i| curve.gain_db[i]).collect();
    let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if vals.is_empty() {
        0.0
    } else {
        max - min
    }
}

fn inband_max(spec: &crate::spec::DesignSpec, grid_ghz: &[f64], vals: &[f64]) -> f64 {
    spec.in_band_indices(grid_ghz)
        .iter()
        .map(|&i| vals[i])
        .fold(f64::NEG_INFINITY, f64::max)
}

impl CriticalCandidate {
    fn content_hash(active: &ActiveParams, passive: &CriticalPassive) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |x: f64| {
            for byte in x.to_bits().to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x100_0000_01b3);
            }
        };
        for s in &active.stages {
            eat(s.width);
            eat(s.bias_voltage);
        }
        for v in [
            passive.mcr1.k,
            passive.mcr1.l1,
            passive.mcr1.l2,
            passive.mcr1.r1,
            passive.mcr1.r2,
            passive.mcr1.c1,
            passive.mcr1.c2,
            passive.l_par,
            passive.l_g,
            passive.l_s,
        ] {
            eat(v);
        }
        h
    }

    /// Rebuilds a critical candidate from a finalized design point, e.g.
    /// when preloading retrieved knowledge into the queue.
    pub fn from_design(
        toolbox: &Toolbox,
        design: &CandidateDesign,
        report: &SimReport,
    ) -> Result<CriticalCandidate> {
        let kb = toolbox.kb;
        let classes = crate::device::DeviceKb::stage_classes(3);
        let mut stages = Vec::with_capacity(3);
        for i in 0..3 {
            let rec = crate::device::lookup_exact(
                kb.table(classes[i]),
                design.x1.w[i],
                design.x1.vgs[i],
            )?;
            stages.push(crate::tools::StageParams::from_record(rec));
        }
        let total: f64 = stages.iter().map(|s| s.dc_current).sum();
        let budget = toolbox.spec.power.max(total);
        let active = ActiveParams {
            power_split: stages.iter().map(|s| s.dc_current / total).collect(),
            total_budget: budget,
            stages,
        };
        let passive = CriticalPassive {
            mcr1: design.x2[0],
            l_par: design.x3.l_par,
            l_g: design.x3.l_g,
            l_s: design.x3.l_s,
        };
        let head_gain = toolbox.head_curve_for(&active, &passive)?;
        let hash = Self::content_hash(&active, &passive);
        let head_ripple_db = inband_ripple(&toolbox.spec, &head_gain);
        Ok(CriticalCandidate {
            active,
            passive,
            head_gain,
            nf_db: report.nf_db,
            s11_db: report
                .s11_db
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max),
            match_cost: 0.0,
            gain_require: None,
            head_ripple_db,
            s11_inband_max_db: inband_max(&toolbox.spec, &report.freq_grid, &report.s11_db),
            split: [0.5, 0.5],
            third_stage_fraction: 0.3,
            hash,
        })
    }
}

/// Runs one search invocation and extracts the new candidates from the
/// transcript. Candidates come in pairs per configuration: one solved under
/// an explicit gain floor, one unconstrained.
pub fn searcher_run(
    policy: &mut dyn Policy,
    toolbox: &Toolbox,
    frame: &TaskFrame,
) -> (Vec<CriticalCandidate>, AgentReport, Vec<PolicyTurn>, u64) {
    assert!(matches!(frame.kind, super::TaskKind::Search));
    let max_turns = frame.max_tool_calls as usize + 2;
    let ReactOutcome {
        transcript,
        report,
        hf_evals,
    } = super::react_loop(policy, toolbox, frame, max_turns);

    let mut candidates = Vec::new();
    for turn in &transcript {
        let Some((tool, ok, payload, call_args)) = observed_call(turn) else {
            continue;
        };
        if tool != ToolName::ImpedanceMatching || !ok {
            continue;
        }
        let Ok(active) =
            serde_json::from_value::<ActiveParams>(call_args["active_params_dict"].clone())
        else {
            continue;
        };
        let p = &payload["passive_params_cpstages"];
        let Ok(mcr1) = serde_json::from_value(p["mcr1"].clone()) else {
            continue;
        };
        let passive = CriticalPassive {
            mcr1,
            l_par: p["l_par"].as_f64().unwrap_or(0.0),
            l_g: p["l_g"].as_f64().unwrap_or(0.0),
            l_s: p["l_s"].as_f64().unwrap_or(0.0),
        };
        let sim = &payload["sim_result_cpstages"];
        let Ok(head_gain) = serde_json::from_value(sim["head_gain"].clone()) else {
            continue;
        };
        let hash = CriticalCandidate::content_hash(&active, &passive);
        let head_ripple_db = inband_ripple(&toolbox.spec, &head_gain);
        let s11_curve: Vec<f64> = sim["s11_db_curve"]
            .as_array()
            .map(|a| a.iter().filter_map(|v| v.as_f64()).collect())
            .unwrap_or_default();
        let s11_inband_max_db = if s11_curve.len() == head_gain.freq_ghz.len() {
            inband_max(&toolbox.spec, &head_gain.freq_ghz, &s11_curve)
        } else {
            sim["s11_db"].as_f64().unwrap_or(0.0)
        };
        candidates.push(CriticalCandidate {
            active,
            passive,
            head_gain,
            nf_db: sim["nf_db"].as_f64().unwrap_or(f64::NAN),
            s11_db: sim["s11_db"].as_f64().unwrap_or(f64::NAN),
            match_cost: sim["cost"].as_f64().unwrap_or(f64::NAN),
            gain_require: call_args["gain_require"].as_f64(),
            head_ripple_db,
            s11_inband_max_db,
            split: frame.split,
            third_stage_fraction: frame.third_stage_fraction,
            hash,
        });
    }
    (candidates, report, transcript, hf_evals)
}

/// Outcome of one refinement invocation.
#[derive(Debug, Clone)]
pub struct RefinerResult {
    pub finalized: Option<(CandidateDesign, SimReport)>,
    pub report: AgentReport,
    pub transcript: Vec<PolicyTurn>,
    pub hf_evals: u64,
}

/// Runs one refinement invocation; on success the finalized design is the
/// last full-chain evaluation's candidate.
pub fn refiner_run(policy: &mut dyn Policy, toolbox: &Toolbox, frame: &TaskFrame) -> RefinerResult {
    assert!(matches!(frame.kind, super::TaskKind::Refine));
    let max_turns = frame.max_tool_calls as usize + 2;
    let ReactOutcome {
        transcript,
        report,
        hf_evals,
    } = super::react_loop(policy, toolbox, frame, max_turns);

    let mut finalized = None;
    if report.success {
        // The accepting evaluation is the last successful full-chain call.
        for turn in transcript.iter().rev() {
            let Some((tool, ok, payload, call_args)) = observed_call(turn) else {
                continue;
            };
            if tool != ToolName::FullchainEval || !ok {
                continue;
            }
            let sim: std::result::Result<SimReport, _> =
                serde_json::from_value(payload["sim_results_dict"].clone());
            let active: std::result::Result<ActiveParams, _> =
                serde_json::from_value(call_args["wholechain_active_dict"].clone());
            let passive: std::result::Result<WholechainPassive, _> =
                serde_json::from_value(call_args["wholechain_passive_dict"].clone());
            if let (Ok(sim), Ok(active), Ok(passive)) = (sim, active, passive) {
                let critical = CriticalPassive {
                    mcr1: passive.mcr[0],
                    l_par: passive.input.l_par,
                    l_g: passive.input.l_g,
                    l_s: passive.input.l_s,
                };
                if let Ok(candidate) =
                    toolbox.build_candidate(&active, &critical, &passive.mcr[1], &passive.mcr[2])
                {
                    finalized = Some((candidate, sim));
                    break;
                }
            }
        }
    }
    RefinerResult {
        finalized,
        report,
        transcript,
        hf_evals,
    }
}
