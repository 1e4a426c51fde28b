//! User-facing design specification and the evaluation frequency grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of points on every evaluation grid.
pub const GRID_POINTS: usize = 21;

/// Load presented at the chain output. Default is the benchmark load,
/// 1787 ohm in parallel with 62 fF.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoadModel {
    /// Parallel load resistance (ohm).
    pub r_load: f64,
    /// Parallel load capacitance (fF).
    pub c_load: f64,
}

impl Default for LoadModel {
    fn default() -> Self {
        LoadModel {
            r_load: 1787.0,
            c_load: 62.0,
        }
    }
}

impl LoadModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_load > 0.0) || !(self.c_load >= 0.0) {
            return Err(Error::Schema {
                path: "load".into(),
                reason: format!("r_load must be > 0 and c_load >= 0, got {self:?}"),
            });
        }
        Ok(())
    }
}

fn default_stages() -> usize {
    3
}

/// Performance targets for one design task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    /// Center frequency (GHz).
    pub fc: f64,
    /// Fractional bandwidth (percent of `fc`).
    pub fbw: f64,
    /// Total dc current budget (mA).
    pub power: f64,
    /// Target small-signal gain (dB).
    pub gain: f64,
    /// Maximum noise figure at the center frequency (dB).
    pub nf_max: f64,
    /// Minimum input 1 dB compression point at the center frequency (dBm).
    pub ip1db_min: f64,
    /// Number of active stages.
    #[serde(default = "default_stages")]
    pub stages: usize,
    /// Output load model.
    #[serde(default)]
    pub load: LoadModel,
}

impl DesignSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.fc > 0.0) {
            return Err(Error::Schema {
                path: "fc".into(),
                reason: format!("center frequency must be > 0 GHz, got {}", self.fc),
            });
        }
        if !(self.fbw > 0.0 && self.fbw < 100.0) {
            return Err(Error::Schema {
                path: "fbw".into(),
                reason: format!("fractional bandwidth must be in (0, 100) %, got {}", self.fbw),
            });
        }
        for (name, v) in [
            ("power", self.power),
            ("gain", self.gain),
            ("nf_max", self.nf_max),
            ("ip1db_min", self.ip1db_min),
        ] {
            if !v.is_finite() {
                return Err(Error::Schema {
                    path: name.into(),
                    reason: format!("threshold must be finite, got {v}"),
                });
            }
        }
        if self.stages == 0 {
            return Err(Error::Schema {
                path: "stages".into(),
                reason: "stage count must be >= 1".into(),
            });
        }
        self.load.validate()?;
        Ok(())
    }

    /// Band edges (f_low, f_high) in GHz.
    pub fn band_edges(&self) -> (f64, f64) {
        let half = self.fbw / 200.0;
        (self.fc * (1.0 - half), self.fc * (1.0 + half))
    }

    /// Evaluation grid: 21 log-spaced points over [0.8 f_L, 1.2 f_H], with the
    /// point nearest to f_c snapped onto f_c exactly so that center-frequency
    /// quantities are grid values.
    pub fn report_grid_ghz(&self) -> Vec<f64> {
        let (fl, fh) = self.band_edges();
        let mut grid = log_grid_ghz(0.8 * fl, 1.2 * fh, GRID_POINTS);
        let nearest = grid
            .iter()
            .enumerate()
            .min_by(|a, b| {
                let da = (a.1 - self.fc).abs();
                let db = (b.1 - self.fc).abs();
                da.partial_cmp(&db).unwrap()
            })
            .map(|(i, _)| i)
            .unwrap();
        grid[nearest] = self.fc;
        grid
    }

    /// Indices of `grid` points inside the specified band (inclusive edges
    /// with a small tolerance so the snapped center point always counts).
    pub fn in_band_indices(&self, grid_ghz: &[f64]) -> Vec<usize> {
        let (fl, fh) = self.band_edges();
        grid_ghz
            .iter()
            .enumerate()
            .filter(|(_, &f)| f >= fl * (1.0 - 1e-12) && f <= fh * (1.0 + 1e-12))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Log-spaced grid between two positive frequencies, inclusive.
pub fn log_grid_ghz(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi > lo && n >= 2);
    let (llo, lhi) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (llo + (lhi - llo) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// GHz to angular frequency (rad/s).
pub fn ghz_to_rad(f_ghz: f64) -> f64 {
    2.0 * std::f64::consts::PI * f_ghz * 1e9
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s1() -> DesignSpec {
        DesignSpec {
            fc: 10.0,
            fbw: 20.0,
            power: 30.0,
            gain: 25.0,
            nf_max: 5.0,
            ip1db_min: -25.0,
            stages: 3,
            load: LoadModel::default(),
        }
    }

    #[test]
    fn band_edges_are_centered() {
        let s = s1();
        let (fl, fh) = s.band_edges();
        assert!((fl - 9.0).abs() < 1e-12);
        assert!((fh - 11.0).abs() < 1e-12);
        assert!(((fh - fl) / s.fc - 0.20).abs() < 1e-12);
    }

    #[test]
    fn report_grid_contains_center_and_spans_band() {
        let s = s1();
        let grid = s.report_grid_ghz();
        assert_eq!(grid.len(), GRID_POINTS);
        assert!(grid.iter().any(|&f| f == s.fc));
        assert!(grid[0] <= 0.8 * 9.0 + 1e-9);
        assert!(*grid.last().unwrap() >= 1.2 * 11.0 - 1e-9);
        for w in grid.windows(2) {
            assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn in_band_subset_is_within_edges() {
        let s = s1();
        let grid = s.report_grid_ghz();
        let idx = s.in_band_indices(&grid);
        assert!(!idx.is_empty());
        let (fl, fh) = s.band_edges();
        for i in idx {
            assert!(grid[i] >= fl - 1e-9 && grid[i] <= fh + 1e-9);
        }
    }

    #[test]
    fn validation_rejects_bad_fields() {
        let mut s = s1();
        s.fbw = 0.0;
        assert!(s.validate().is_err());
        let mut s = s1();
        s.nf_max = f64::NAN;
        assert!(s.validate().is_err());
        let mut s = s1();
        s.load.r_load = -1.0;
        assert!(s.validate().is_err());
    }
}
