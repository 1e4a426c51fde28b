//! Multi-fidelity calibration: plan on the cheap model, verify with sparse
//! expensive evaluations, feed the pointwise residual back into the next
//! planning round.

use crate::error::{Error, Result};

/// Outcome of a calibration run.
#[derive(Debug, Clone)]
pub struct Calibration {
    /// Parameters chosen in the final round.
    pub params: Vec<f64>,
    /// Residual curve (expensive minus cheap) recorded after each round.
    pub residual_history: Vec<Vec<f64>>,
    /// Number of expensive evaluations consumed (one per round).
    pub hf_calls: u64,
    /// Expensive-model curve at the final parameters.
    pub final_hf: Vec<f64>,
    /// True when the acceptance predicate held on the final curve.
    pub satisfied: bool,
}

/// Residual magnitude below which the cheap model is considered exact at the
/// planned point, so further rounds cannot add information.
const RESIDUAL_STALL_DB: f64 = 1e-9;

/// Runs up to `max_rounds` of plan-evaluate-correct.
///
/// Round t plans on `lofi(x) + r_{t-1}` (piecewise residual on the shared
/// grid), spends one `hifi` call at the planned point, and updates the
/// residual. Terminates when `accept` holds on the expensive curve, or when
/// the residual is identically zero (no model gap left to learn; the
/// `satisfied` flag still reports the acceptance verdict). Exhausting the
/// rounds without either is a calibration failure carrying the residual
/// history.
pub fn calibrate_multifidelity(
    lofi: &mut dyn FnMut(&[f64]) -> Vec<f64>,
    hifi: &mut dyn FnMut(&[f64]) -> Vec<f64>,
    planner: &mut dyn FnMut(&mut dyn FnMut(&[f64]) -> Vec<f64>) -> Vec<f64>,
    accept: &dyn Fn(&[f64]) -> bool,
    max_rounds: usize,
) -> Result<Calibration> {
    assert!(max_rounds >= 1, "at least one round is required");
    let mut residual: Vec<f64> = Vec::new();
    let mut residual_history: Vec<Vec<f64>> = Vec::new();
    let mut hf_calls = 0u64;

    for round in 1..=max_rounds {
        let r = residual.clone();
        let mut corrected = |x: &[f64]| -> Vec<f64> {
            let mut curve = lofi(x);
            if !r.is_empty() {
                assert_eq!(curve.len(), r.len(), "models must share the grid");
                for (c, d) in curve.iter_mut().zip(&r) {
                    *c += d;
                }
            }
            curve
        };
        let params = planner(&mut corrected);

        let hf = hifi(&params);
        hf_calls += 1;
        let lf = lofi(&params);
        assert_eq!(hf.len(), lf.len(), "models must share the grid");
        let new_residual: Vec<f64> = hf.iter().zip(&lf).map(|(h, l)| h - l).collect();

        let stalled = new_residual.iter().all(|d| d.abs() <= RESIDUAL_STALL_DB);
        residual = new_residual;
        residual_history.push(residual.clone());

        let satisfied = accept(&hf);
        if satisfied || stalled {
            return Ok(Calibration {
                params,
                residual_history,
                hf_calls,
                final_hf: hf,
                satisfied,
            });
        }
        if round == max_rounds {
            let max_residual = residual.iter().cloned().fold(0.0f64, |m, d| m.max(d.abs()));
            return Err(Error::CalibrationFailed {
                rounds: max_rounds,
                max_residual,
            });
        }
    }
    unreachable!("loop returns or errors on the last round")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{sa_minimize, Bounds, SaConfig};

    /// Cheap parabola-shaped "gain curve" over a 5-point grid.
    fn lofi_curve(x: &[f64]) -> Vec<f64> {
        (0..5).map(|i| x[0] - 0.1 * (i as f64 - 2.0).powi(2)).collect()
    }

    #[test]
    fn identical_models_converge_in_one_round() {
        let lofi = lofi_curve;
        let hifi = lofi_curve;
        let mut planner = |model: &mut dyn FnMut(&[f64]) -> Vec<f64>| -> Vec<f64> {
            // Pick the level whose curve midpoint hits 10.
            let b = Bounds::new(&[(0.0, 20.0, "level")]);
            let cfg = SaConfig {
                steps: 200,
                seed: 1,
                ..SaConfig::default()
            };
            let mut cost = |x: &[f64]| (model(x)[2] - 10.0).abs();
            sa_minimize(&mut cost, &b, &cfg).best_x
        };
        let accept = |hf: &[f64]| (hf[2] - 10.0).abs() < 0.5;
        let cal = calibrate_multifidelity(
            &mut |x| lofi(x),
            &mut |x| hifi(x),
            &mut planner,
            &accept,
            5,
        )
        .unwrap();
        assert_eq!(cal.hf_calls, 1);
        assert!(cal.satisfied);
        assert!(cal.residual_history[0].iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn constant_offset_converges_in_two_rounds() {
        let offset = 2.0;
        let mut planner = |model: &mut dyn FnMut(&[f64]) -> Vec<f64>| -> Vec<f64> {
            let b = Bounds::new(&[(0.0, 20.0, "level")]);
            let cfg = SaConfig {
                steps: 400,
                seed: 3,
                ..SaConfig::default()
            };
            let mut cost = |x: &[f64]| (model(x)[2] - 10.0).abs();
            sa_minimize(&mut cost, &b, &cfg).best_x
        };
        // Tight acceptance so round 1 (planned without the offset) misses.
        let accept = |hf: &[f64]| (hf[2] - 10.0).abs() < 0.1;
        let cal = calibrate_multifidelity(
            &mut lofi_curve,
            &mut |x| lofi_curve(x).iter().map(|v| v + offset).collect(),
            &mut planner,
            &accept,
            5,
        )
        .unwrap();
        assert_eq!(cal.hf_calls, 2);
        assert!(cal.satisfied);
        // Residual learned in round 1 is exactly the offset.
        assert!(cal.residual_history[0]
            .iter()
            .all(|d| (d - offset).abs() < 1e-9));
    }

    #[test]
    fn exhausted_rounds_report_failure() {
        // Expensive model the planner can never satisfy.
        let mut planner =
            |_model: &mut dyn FnMut(&[f64]) -> Vec<f64>| -> Vec<f64> { vec![0.0] };
        let accept = |_: &[f64]| false;
        let err = calibrate_multifidelity(
            &mut lofi_curve,
            &mut |x| lofi_curve(x).iter().map(|v| v + 5.0).collect(),
            &mut planner,
            &accept,
            3,
        )
        .unwrap_err();
        match err {
            Error::CalibrationFailed { rounds, .. } => assert_eq!(rounds, 3),
            other => panic!("unexpected error {other}"),
        }
    }
}
