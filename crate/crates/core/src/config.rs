//! Run configuration: optimizer defaults, budgets, and backtracking knobs.
//! Loaded from an `rfamp.toml`-style file; every field has a default so a
//! missing file or section is fine.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{BoConfig, GaConfig, PsoConfig, SaConfig};

/// Optimizer sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimSettings {
    /// General-purpose particle swarm defaults.
    pub pso: PsoConfig,
    /// General-purpose annealing defaults.
    pub sa: SaConfig,
    pub ga: GaConfig,
    pub bo: BoConfig,
    /// Matching-stage swarm; each cost evaluation spends two high-fidelity
    /// probes, so the budget is deliberately small.
    pub stage2_pso: PsoConfig,
    /// Band-planning annealer; runs on the cheap model, so it can afford a
    /// longer schedule.
    pub stage3_sa: SaConfig,
    /// Calibration rounds for the band planner.
    pub calibration_rounds: usize,
}

impl Default for OptimSettings {
    fn default() -> Self {
        OptimSettings {
            pso: PsoConfig::default(),
            sa: SaConfig::default(),
            ga: GaConfig::default(),
            bo: BoConfig::default(),
            stage2_pso: PsoConfig {
                particles: 12,
                iters: 12,
                ..PsoConfig::default()
            },
            stage3_sa: SaConfig {
                steps: 2500,
                ..SaConfig::default()
            },
            calibration_rounds: 10,
        }
    }
}

/// Budgets for one design run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Budgets {
    /// High-fidelity evaluation cap.
    pub hf_evals: u64,
    /// Wall-clock cap in seconds.
    pub wall_seconds: f64,
    /// Tool-call cap.
    pub tool_calls: u64,
}

impl Default for Budgets {
    fn default() -> Self {
        Budgets {
            hf_evals: 8000,
            wall_seconds: 60.0,
            tool_calls: 64,
        }
    }
}

/// Staged backtracking knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BacktrackSettings {
    /// Headroom grows by this multiple of the observed noise degradation.
    pub headroom_gain: f64,
    /// Gain shifted away from the last stage per tighter re-plan (dB).
    pub gain_shift_db: f64,
    /// Linearity escalation ladder depth before stage-1 reallocation.
    pub ladder_depth: u32,
}

impl Default for BacktrackSettings {
    fn default() -> Self {
        BacktrackSettings {
            headroom_gain: 1.0,
            gain_shift_db: 2.0,
            ladder_depth: 3,
        }
    }
}

/// Top-level configuration document.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub optim: OptimSettings,
    pub budgets: Budgets,
    pub backtrack: BacktrackSettings,
}

impl RunConfig {
    pub fn load(path: &str) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Schema {
            path: path.into(),
            reason: e.to_string(),
        })
    }

    /// Loads `path` when given, otherwise the defaults.
    pub fn load_or_default(path: Option<&str>) -> Result<RunConfig> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(RunConfig::default()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn partial_files_inherit_defaults() {
        let cfg: RunConfig =
            toml::from_str("[optim.pso]\nparticles = 8\n[budgets]\nhf_evals = 100\n").unwrap();
        assert_eq!(cfg.optim.pso.particles, 8);
        assert_eq!(cfg.optim.pso.iters, PsoConfig::default().iters);
        assert_eq!(cfg.budgets.hf_evals, 100);
        assert_eq!(cfg.backtrack, BacktrackSettings::default());
    }
}
