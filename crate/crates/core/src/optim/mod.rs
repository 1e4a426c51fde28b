//! Optimization kernels and the staged cost functions.
//!
//! All four optimizers are deterministic functions of (cost, bounds, config
//! including seed); best-so-far histories are non-increasing and the reported
//! `evals` equals the exact number of cost invocations.

mod bo;
mod calibrate;
mod ga;
mod pso;
mod sa;

pub use bo::{bo_minimize, BoConfig};
pub use calibrate::{calibrate_multifidelity, Calibration};
pub use ga::{ga_minimize, GaConfig};
pub use pso::{pso_minimize, PsoConfig};
pub use sa::{sa_minimize, SaConfig};

use serde::{Deserialize, Serialize};

/// Per-dimension search box with unit labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub labels: Vec<String>,
}

impl Bounds {
    pub fn new(dims: &[(f64, f64, &str)]) -> Self {
        let b = Bounds {
            lo: dims.iter().map(|d| d.0).collect(),
            hi: dims.iter().map(|d| d.1).collect(),
            labels: dims.iter().map(|d| d.2.to_string()).collect(),
        };
        assert!(
            b.lo.iter().zip(&b.hi).all(|(l, h)| l < h),
            "each dimension needs lo < hi"
        );
        b
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn range(&self, i: usize) -> f64 {
        self.hi[i] - self.lo[i]
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .enumerate()
                .all(|(i, &v)| v >= self.lo[i] - 1e-12 && v <= self.hi[i] + 1e-12)
    }

    pub fn clamp(&self, x: &mut [f64]) {
        for (i, v) in x.iter_mut().enumerate() {
            *v = v.clamp(self.lo[i], self.hi[i]);
        }
    }

    /// Reflects a coordinate back into the box, folding as often as needed.
    pub fn reflect(&self, i: usize, v: f64) -> f64 {
        let (lo, hi) = (self.lo[i], self.hi[i]);
        let range = hi - lo;
        let mut t = v;
        loop {
            if t < lo {
                t = 2.0 * lo - t;
            } else if t > hi {
                t = 2.0 * hi - t;
            } else {
                return t;
            }
            // Pathological velocities can overshoot repeatedly; clamp when
            // the excursion exceeds a full fold.
            if (t - lo).abs() > 2.0 * range {
                return t.clamp(lo, hi);
            }
        }
    }
}

/// Outcome of one optimizer run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptResult {
    pub best_x: Vec<f64>,
    pub best_cost: f64,
    /// Best-so-far cost per iteration.
    pub history: Vec<f64>,
    /// Exact number of cost invocations.
    pub evals: u64,
    pub seed: u64,
}

/// Stage-2 matching cost: penalized noise-figure and input-reflection
/// violations, 1000 x max(0, nf - (nf_user - headroom)) + 1000 x max(0, s11 + 20).
pub fn cost_stage2(nf_sim_db: f64, s11_sim_db: f64, nf_user_db: f64, headroom_db: f64) -> f64 {
    let nf_violation = (nf_sim_db - (nf_user_db - headroom_db)).max(0.0);
    let s11_violation = (s11_sim_db + 20.0).max(0.0);
    1000.0 * nf_violation + 1000.0 * s11_violation
}

/// Stage-3 band-planning cost on a calibrated gain curve: penalized deviation
/// of the band minimum from the target and penalized ripple, both with a
/// 3 dB allowance.
pub fn cost_stage3(gain_cal_db: &[f64], gain_user_db: f64) -> f64 {
    assert!(!gain_cal_db.is_empty(), "gain curve must be non-empty");
    let min = gain_cal_db.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = gain_cal_db.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let gain_violation = ((gain_user_db - min).abs() - 3.0).max(0.0);
    let ripple_violation = (max - min - 3.0).max(0.0);
    1000.0 * gain_violation + 1000.0 * ripple_violation
}

#[cfg(test)]
pub(crate) fn sphere(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage2_cost_examples() {
        // Both violations clamp to zero.
        assert_eq!(cost_stage2(4.5, -25.0, 5.0, 0.2), 0.0);
        // 1000 * 0.2 + 1000 * 2 = 2200.
        assert!((cost_stage2(5.0, -18.0, 5.0, 0.2) - 2200.0).abs() < 1e-9);
        // Headroom variant: 1000 * max(0, 5.0 - 4.5) = 500.
        assert!((cost_stage2(5.0, -25.0, 5.0, 0.5) - 500.0).abs() < 1e-9);
    }

    #[test]
    fn stage3_cost_examples() {
        assert_eq!(cost_stage3(&[23.0, 26.0, 24.0], 25.0), 0.0);
        // Span [18, 24] against 25: 1000*4 + 1000*3 = 7000.
        assert!((cost_stage3(&[18.0, 24.0], 25.0) - 7000.0).abs() < 1e-9);
        assert_eq!(cost_stage3(&[25.0, 25.0, 25.0], 25.0), 0.0);
    }

    #[test]
    fn reflection_stays_in_box() {
        let b = Bounds::new(&[(0.0, 1.0, "x")]);
        assert!((b.reflect(0, 1.2) - 0.8).abs() < 1e-12);
        assert!((b.reflect(0, -0.3) - 0.3).abs() < 1e-12);
        assert_eq!(b.reflect(0, 0.5), 0.5);
        let v = b.reflect(0, 17.3);
        assert!((0.0..=1.0).contains(&v));
    }
}
