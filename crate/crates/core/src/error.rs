//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the sizing engine.
#[derive(Debug, Error)]
pub enum Error {
    /// A power allocation left some stage without any feasible device.
    #[error("infeasible budget: stage {stage} has no device drawing <= {share_ma:.4} mA")]
    InfeasibleBudget { stage: usize, share_ma: f64 },

    /// The resonator network has non-positive input conductance at the
    /// evaluation point, i.e. the parameter combination is not a passive tank.
    #[error("degenerate network: Re(y11) = {re_y11:.6e} <= 0 at omega = {omega:.6e} rad/s")]
    DegenerateNetwork { omega: f64, re_y11: f64 },

    /// No tank capacitance in the search interval realizes the requested
    /// resonance once the absorbed loading is accounted for.
    #[error("unrealizable resonator: no tank capacitance in [{lo_ff:.2}, {hi_ff:.2}] fF resonates at {f0_ghz:.3} GHz")]
    Unrealizable { lo_ff: f64, hi_ff: f64, f0_ghz: f64 },

    /// Two curves that must share a frequency grid have different lengths.
    #[error("grid mismatch: expected {expected} points, got {got}")]
    GridMismatch { expected: usize, got: usize },

    /// A candidate references a (width, bias) pair that is not on the
    /// characterization grid. There is no interpolation.
    #[error("unknown device: {class} W = {width_um} um, Vgs = {vbias_mv} mV is not on the characterization grid")]
    UnknownDevice {
        class: String,
        width_um: f64,
        vbias_mv: f64,
    },

    /// The cascade produced a singular or non-finite system at a frequency.
    #[error("singular network at {freq_ghz:.4} GHz")]
    SingularNetwork { freq_ghz: f64 },

    /// The inductor-only L-section cannot realize the requested transform.
    #[error("unmatchable input impedance {re:.3}{im:+.3}j ohm under the inductor-only L-section")]
    Unmatchable { re: f64, im: f64 },

    /// Optimization finished with a violated constraint set. The best
    /// candidate is still reported by the caller for triage.
    #[error("no feasible solution: best cost {best_cost:.3}")]
    NoFeasibleSolution { best_cost: f64 },

    /// Residual feedback did not reach the acceptance predicate in budget.
    #[error("calibration failed after {rounds} rounds: max residual {max_residual:.3} dB")]
    CalibrationFailed { rounds: usize, max_residual: f64 },

    /// The experience base is empty; callers fall back to a cold start.
    #[error("no experience records available")]
    NoExperience,

    /// A budget dimension reached zero.
    #[error("budget exhausted: {0}")]
    BudgetExhausted(String),

    /// Candidate dictionaries did not assemble into a valid design.
    #[error("assembly error at {path}: {reason}")]
    Assembly { path: String, reason: String },

    /// A JSON document violated its schema.
    #[error("schema error at {path}: {reason}")]
    Schema { path: String, reason: String },

    /// The decision policy failed (transport, parse, or contract violation).
    #[error("policy error: {0}")]
    Policy(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Wraps an I/O error with the offending path.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
