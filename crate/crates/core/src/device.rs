//! Synthetic active-device knowledge base and the sizing/biasing allocator.
//!
//! Records follow a fixed analytic model (square-law current, linear
//! capacitance scaling) so that every table is reproducible on any machine:
//!
//! ```text
//! Id  [mA] = kappa * W[um] * (Vgs - Vth)^2        Vth = 280 mV
//! gm  [mS] = 2 * kappa * W * (Vgs - Vth)
//! cin [fF] = 1.1  fF/um * W
//! cs_out   = 0.55 fF/um * W
//! rs_out   = 22000 / Id[mA] ohm
//! nf_min   = 0.9 + 40 / gm[mS] dB
//! ip1db    = 10 log10(2.2 * Id[mA]) - 2 dBm
//! ```
//!
//! kappa is 0.9 mA/(um V^2) for the single-ended cascode and 1.1 for the
//! differential common-source stage. Larger devices trade current for
//! transconductance and linearity, which is the trade-off the allocator
//! exposes to the search layer.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spec::log_grid_ghz;

/// Threshold voltage of the synthetic process (mV).
pub const VTH_MV: f64 = 280.0;

/// Reference impedance of the characterization bench (ohm).
pub const CHAR_REF_OHM: f64 = 50.0;

/// Frequency grid on which per-record impedances are tabulated (GHz).
pub fn impedance_grid_ghz() -> Vec<f64> {
    log_grid_ghz(1.0, 100.0, 21)
}

/// Active stage families of the topology.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DeviceClass {
    /// Single-ended cascode, used as the noise-critical first stage.
    CascodeSingleEnded,
    /// Differential common-source stage with neutralization, stages 2+.
    DiffCommonSource,
}

impl DeviceClass {
    /// Width grid in um: 45..=180 (cascode) or 45..=117 (diff-CS), 9 um steps.
    pub fn width_grid(&self) -> Vec<f64> {
        let max = match self {
            DeviceClass::CascodeSingleEnded => 180,
            DeviceClass::DiffCommonSource => 117,
        };
        (45..=max).step_by(9).map(|w| w as f64).collect()
    }

    /// Bias grid in mV: 300..=500 in 25 mV steps.
    pub fn vbias_grid(&self) -> Vec<f64> {
        (300..=500).step_by(25).map(|v| v as f64).collect()
    }

    /// Current-law coefficient kappa in mA/(um V^2).
    pub fn kappa(&self) -> f64 {
        match self {
            DeviceClass::CascodeSingleEnded => 0.9,
            DeviceClass::DiffCommonSource => 1.1,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            DeviceClass::CascodeSingleEnded => "cascode_single_ended",
            DeviceClass::DiffCommonSource => "diff_common_source",
        }
    }
}

/// One characterized (width, bias) operating point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceRecord {
    pub class: DeviceClass,
    /// Gate width (um).
    pub width: f64,
    /// Gate bias (mV).
    pub vbias: f64,
    /// Drain current (mA).
    pub id: f64,
    /// Transconductance (mS).
    pub gm: f64,
    /// Input impedance on [`impedance_grid_ghz`], (re, im) ohm pairs.
    pub zin: Vec<[f64; 2]>,
    /// Output impedance on the same grid, (re, im) ohm pairs.
    pub zout: Vec<[f64; 2]>,
    /// Output resistance (ohm).
    pub rs_out: f64,
    /// Output capacitance (fF).
    pub cs_out: f64,
    /// Input capacitance (fF).
    pub cin: f64,
    /// Minimum stage noise figure (dB).
    pub nf_min: f64,
    /// Stage input 1 dB compression point (dBm).
    pub ip1db_stage: f64,
}

impl DeviceRecord {
    fn from_grid_point(class: DeviceClass, width: f64, vbias: f64) -> Self {
        let vov = (vbias - VTH_MV) / 1000.0; // overdrive in volts
        let id = class.kappa() * width * vov * vov;
        let gm = 2.0 * class.kappa() * width * vov;
        let cin = 1.1 * width;
        let cs_out = 0.55 * width;
        let rs_out = 22_000.0 / id;
        let nf_min = 0.9 + 40.0 / gm;
        let ip1db_stage = 10.0 * (2.2 * id).log10() - 2.0;

        // R||C equivalents tabulated over the fixed log grid. The input side
        // uses a large shunt resistance so the record stays a strict R||C pair.
        let r_in = 1.0e6;
        let grid = impedance_grid_ghz();
        let zin = grid
            .iter()
            .map(|&f| parallel_rc_ohm(r_in, cin, f))
            .collect();
        let zout = grid
            .iter()
            .map(|&f| parallel_rc_ohm(rs_out, cs_out, f))
            .collect();

        DeviceRecord {
            class,
            width,
            vbias,
            id,
            gm,
            zin,
            zout,
            rs_out,
            cs_out,
            cin,
            nf_min,
            ip1db_stage,
        }
    }

    /// Input capacitance in farads.
    pub fn cin_f(&self) -> f64 {
        self.cin * 1e-15
    }

    /// Output capacitance in farads.
    pub fn cs_out_f(&self) -> f64 {
        self.cs_out * 1e-15
    }

    /// Transconductance in siemens.
    pub fn gm_s(&self) -> f64 {
        self.gm * 1e-3
    }
}

fn parallel_rc_ohm(r_ohm: f64, c_ff: f64, f_ghz: f64) -> [f64; 2] {
    let omega = 2.0 * std::f64::consts::PI * f_ghz * 1e9;
    let y = Complex64::new(1.0 / r_ohm, omega * c_ff * 1e-15);
    let z = y.inv();
    [z.re, z.im]
}

/// A full characterization table for one device class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceTable {
    pub class: DeviceClass,
    pub seed: u64,
    pub records: Vec<DeviceRecord>,
}

/// Generates the table for `class`. The analytic model is deterministic, so
/// the seed only tags the table for provenance tracking.
pub fn generate_table(seed: u64, class: DeviceClass) -> DeviceTable {
    let mut records = Vec::new();
    for &w in &class.width_grid() {
        for &v in &class.vbias_grid() {
            records.push(DeviceRecord::from_grid_point(class, w, v));
        }
    }
    DeviceTable {
        class,
        seed,
        records,
    }
}

/// All records drawing at most `i_max_ma`, sorted by width then bias.
/// An empty result is not an error; callers must handle it.
pub fn lookup_by_current(table: &DeviceTable, i_max_ma: f64) -> Vec<&DeviceRecord> {
    let mut hits: Vec<&DeviceRecord> = table
        .records
        .iter()
        .filter(|r| r.id <= i_max_ma)
        .collect();
    hits.sort_by(|a, b| {
        (a.width, a.vbias)
            .partial_cmp(&(b.width, b.vbias))
            .unwrap()
    });
    hits
}

/// Exact grid lookup; candidates never interpolate.
pub fn lookup_exact(table: &DeviceTable, width_um: f64, vbias_mv: f64) -> Result<&DeviceRecord> {
    table
        .records
        .iter()
        .find(|r| (r.width - width_um).abs() < 1e-9 && (r.vbias - vbias_mv).abs() < 1e-9)
        .ok_or_else(|| Error::UnknownDevice {
            class: table.class.label().into(),
            width_um,
            vbias_mv,
        })
}

/// Both class tables bundled; the evaluator and the Stage-1 tool share it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeviceKb {
    pub cascode: DeviceTable,
    pub diff_cs: DeviceTable,
}

impl DeviceKb {
    pub fn generate(seed: u64) -> Self {
        DeviceKb {
            cascode: generate_table(seed, DeviceClass::CascodeSingleEnded),
            diff_cs: generate_table(seed, DeviceClass::DiffCommonSource),
        }
    }

    pub fn table(&self, class: DeviceClass) -> &DeviceTable {
        match class {
            DeviceClass::CascodeSingleEnded => &self.cascode,
            DeviceClass::DiffCommonSource => &self.diff_cs,
        }
    }

    /// Stage class convention of the topology: cascode first, diff-CS after.
    pub fn stage_classes(stages: usize) -> Vec<DeviceClass> {
        (0..stages)
            .map(|i| {
                if i == 0 {
                    DeviceClass::CascodeSingleEnded
                } else {
                    DeviceClass::DiffCommonSource
                }
            })
            .collect()
    }
}

/// One candidate set of per-stage operating points under a power split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveConfig {
    pub stages: Vec<DeviceRecord>,
    /// Fractions of the budget per stage; sums to 1.
    pub power_split: Vec<f64>,
    /// Total current budget (mA).
    pub total_budget: f64,
}

impl ActiveConfig {
    pub fn total_current_ma(&self) -> f64 {
        self.stages.iter().map(|r| r.id).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let split_sum: f64 = self.power_split.iter().sum();
        if (split_sum - 1.0).abs() > 1e-9 || self.power_split.iter().any(|&r| r <= 0.0 || r >= 1.0)
        {
            return Err(Error::Schema {
                path: "power_split".into(),
                reason: format!("fractions must lie in (0,1) and sum to 1, got {:?}", self.power_split),
            });
        }
        if self.total_current_ma() > self.total_budget * (1.0 + 1e-9) {
            return Err(Error::Schema {
                path: "stages".into(),
                reason: format!(
                    "total current {:.4} mA exceeds budget {:.4} mA",
                    self.total_current_ma(),
                    self.total_budget
                ),
            });
        }
        Ok(())
    }
}

/// Index-based critical/non-critical grouping. Stage 0 is the noise-dominant
/// stage in this topology; the list is a parameter so other amplifier types
/// can redeclare their critical stages.
pub const DEFAULT_CRITICAL_STAGES: &[usize] = &[0];

/// Enumerates candidate configurations for a power split.
///
/// Each stage keeps the records feasible under its current share. Stages are
/// grouped into critical and non-critical; each group retains only its
/// largest-width and smallest-width feasible realization, and the cross
/// product of group choices is returned (at most four configurations, fewer
/// when a group's extremes coincide).
pub fn allocate(
    kb: &DeviceKb,
    power_ratio_list: &[f64],
    budget_ma: f64,
    stage_classes: &[DeviceClass],
    critical: &[usize],
) -> Result<Vec<ActiveConfig>> {
    assert_eq!(
        power_ratio_list.len(),
        stage_classes.len(),
        "ratio count must equal stage count"
    );
    let split_sum: f64 = power_ratio_list.iter().sum();
    assert!(
        (split_sum - 1.0).abs() < 1e-9 && budget_ma > 0.0,
        "ratios must sum to 1 and budget must be positive"
    );

    // Per-stage extreme picks. The largest realization is the widest device
    // the share can drive at the top of the bias grid (a wide device at
    // reduced bias would always fit, which would decouple the power split
    // from device size entirely); the smallest realization is the narrowest
    // width at its highest feasible bias.
    let mut largest: Vec<DeviceRecord> = Vec::new();
    let mut smallest: Vec<DeviceRecord> = Vec::new();
    for (stage, (&ratio, &class)) in power_ratio_list.iter().zip(stage_classes).enumerate() {
        let share = ratio * budget_ma;
        let feasible = lookup_by_current(kb.table(class), share);
        if feasible.is_empty() {
            return Err(Error::InfeasibleBudget {
                stage,
                share_ma: share,
            });
        }
        let top_bias = *class.vbias_grid().last().unwrap();
        let full_bias_max_w = feasible
            .iter()
            .filter(|r| r.vbias == top_bias)
            .map(|r| r.width)
            .fold(f64::MIN, f64::max);
        let max_w = if full_bias_max_w > 0.0 {
            full_bias_max_w
        } else {
            // Share too small to run anything at top bias: widest fitting.
            feasible.iter().map(|r| r.width).fold(f64::MIN, f64::max)
        };
        let min_w = feasible.iter().map(|r| r.width).fold(f64::MAX, f64::min);
        let pick = |w: f64| -> DeviceRecord {
            feasible
                .iter()
                .filter(|r| (r.width - w).abs() < 1e-9)
                .max_by(|a, b| a.vbias.partial_cmp(&b.vbias).unwrap())
                .copied()
                .unwrap()
                .clone()
        };
        largest.push(pick(max_w));
        smallest.push(pick(min_w));
    }

    // Group realizations: pick per-stage from `largest` or `smallest`
    // uniformly within each group.
    let group_choices = |idx: &[usize]| -> Vec<Vec<DeviceRecord>> {
        let big: Vec<DeviceRecord> = idx.iter().map(|&i| largest[i].clone()).collect();
        let small: Vec<DeviceRecord> = idx.iter().map(|&i| smallest[i].clone()).collect();
        if big == small {
            vec![big]
        } else {
            vec![big, small]
        }
    };

    let critical_idx: Vec<usize> = critical
        .iter()
        .copied()
        .filter(|&i| i < stage_classes.len())
        .collect();
    let noncritical_idx: Vec<usize> = (0..stage_classes.len())
        .filter(|i| !critical_idx.contains(i))
        .collect();

    let crit_opts = group_choices(&critical_idx);
    let non_opts = if noncritical_idx.is_empty() {
        vec![Vec::new()]
    } else {
        group_choices(&noncritical_idx)
    };

    let mut out = Vec::new();
    for c in &crit_opts {
        for n in &non_opts {
            let mut stages: Vec<DeviceRecord> = vec![largest[0].clone(); stage_classes.len()];
            for (slot, &i) in critical_idx.iter().enumerate() {
                stages[i] = c[slot].clone();
            }
            for (slot, &i) in noncritical_idx.iter().enumerate() {
                stages[i] = n[slot].clone();
            }
            let cfg = ActiveConfig {
                stages,
                power_split: power_ratio_list.to_vec(),
                total_budget: budget_ma,
            };
            cfg.validate()?;
            out.push(cfg);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_cardinality() {
        // (180 - 45) / 9 + 1 = 16 widths, (500 - 300) / 25 + 1 = 9 biases.
        let t = generate_table(7, DeviceClass::CascodeSingleEnded);
        assert_eq!(t.records.len(), 16 * 9);
        let t = generate_table(7, DeviceClass::DiffCommonSource);
        assert_eq!(t.records.len(), 9 * 9);
    }

    #[test]
    fn record_matches_independent_model_evaluation() {
        // Frozen from a separate evaluation of the device law at
        // W = 90 um, Vgs = 400 mV, cascode:
        //   Id = 0.9 * 90 * 0.12^2  = 1.1664 mA
        //   gm = 2 * 0.9 * 90 * 0.12 = 19.44 mS
        let t = generate_table(7, DeviceClass::CascodeSingleEnded);
        let r = lookup_exact(&t, 90.0, 400.0).unwrap();
        assert!((r.id - 1.1664).abs() < 1e-12);
        assert!((r.gm - 19.44).abs() < 1e-12);
        assert!((r.cin - 99.0).abs() < 1e-12);
        assert!((r.cs_out - 49.5).abs() < 1e-12);
        assert!((r.rs_out - 22_000.0 / 1.1664).abs() < 1e-9);
        assert!((r.nf_min - (0.9 + 40.0 / 19.44)).abs() < 1e-12);
        assert!((r.ip1db_stage - (10.0 * (2.2 * 1.1664f64).log10() - 2.0)).abs() < 1e-12);
    }

    #[test]
    fn generation_is_pure() {
        let a = generate_table(3, DeviceClass::DiffCommonSource);
        let b = generate_table(3, DeviceClass::DiffCommonSource);
        assert_eq!(
            serde_json::to_vec(&a).unwrap(),
            serde_json::to_vec(&b).unwrap()
        );
    }

    #[test]
    fn current_is_monotone_in_width_and_bias() {
        for class in [DeviceClass::CascodeSingleEnded, DeviceClass::DiffCommonSource] {
            let t = generate_table(1, class);
            for &v in &class.vbias_grid() {
                let ids: Vec<f64> = class
                    .width_grid()
                    .iter()
                    .map(|&w| lookup_exact(&t, w, v).unwrap().id)
                    .collect();
                for pair in ids.windows(2) {
                    assert!(pair[1] >= pair[0]);
                }
            }
            for &w in &class.width_grid() {
                let gms: Vec<f64> = class
                    .vbias_grid()
                    .iter()
                    .map(|&v| lookup_exact(&t, w, v).unwrap().gm)
                    .collect();
                for pair in gms.windows(2) {
                    assert!(pair[1] >= pair[0]);
                }
            }
        }
    }

    #[test]
    fn lookup_filters_match_linear_scan() {
        let t = generate_table(7, DeviceClass::CascodeSingleEnded);
        assert_eq!(lookup_by_current(&t, f64::INFINITY).len(), t.records.len());
        assert!(lookup_by_current(&t, 0.0001).is_empty());

        let mut ids: Vec<f64> = t.records.iter().map(|r| r.id).collect();
        ids.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = ids[ids.len() / 2];
        let got = lookup_by_current(&t, median);
        let expect = t.records.iter().filter(|r| r.id <= median).count();
        assert_eq!(got.len(), expect);
        for w in got.windows(2) {
            assert!((w[0].width, w[0].vbias) <= (w[1].width, w[1].vbias));
        }
    }

    #[test]
    fn allocate_produces_four_extreme_configs() {
        let kb = DeviceKb::generate(7);
        let classes = DeviceKb::stage_classes(3);
        let cfgs = allocate(&kb, &[0.4, 0.3, 0.3], 30.0, &classes, DEFAULT_CRITICAL_STAGES)
            .unwrap();
        assert_eq!(cfgs.len(), 4);
        for cfg in &cfgs {
            assert!(cfg.total_current_ma() <= 30.0 + 1e-9);
            for (i, r) in cfg.stages.iter().enumerate() {
                assert!(r.id <= cfg.power_split[i] * cfg.total_budget + 1e-12);
            }
        }
    }

    #[test]
    fn allocate_rejects_starved_stage() {
        let kb = DeviceKb::generate(7);
        let classes = vec![DeviceClass::CascodeSingleEnded];
        // Smallest cascode draws 0.9 * 45 * 0.02^2 = 0.0162 mA.
        let err = allocate(&kb, &[1.0], 0.01, &classes, DEFAULT_CRITICAL_STAGES).unwrap_err();
        assert!(matches!(err, Error::InfeasibleBudget { stage: 0, .. }));
    }

    #[test]
    fn allocate_matches_exhaustive_pair_enumeration() {
        let kb = DeviceKb::generate(7);
        let classes = DeviceKb::stage_classes(2);
        let budget = 20.0;
        let cfgs = allocate(&kb, &[0.5, 0.5], budget, &classes, DEFAULT_CRITICAL_STAGES)
            .unwrap();
        assert!(!cfgs.is_empty() && cfgs.len() <= 4);

        // Brute force over every record pair; the returned configs must be a
        // subset of the feasible pairs and respect per-stage shares.
        for cfg in &cfgs {
            assert!(cfg.total_current_ma() <= budget + 1e-9);
            let s0 = &cfg.stages[0];
            let s1 = &cfg.stages[1];
            assert!(s0.id <= 10.0 && s1.id <= 10.0);
            let found = kb
                .cascode
                .records
                .iter()
                .any(|r| r.width == s0.width && r.vbias == s0.vbias)
                && kb
                    .diff_cs
                    .records
                    .iter()
                    .any(|r| r.width == s1.width && r.vbias == s1.vbias);
            assert!(found);
        }

        // Extremes: config 0 carries the widest feasible choices.
        let widest_cascode = lookup_by_current(&kb.cascode, 10.0)
            .iter()
            .map(|r| r.width)
            .fold(f64::MIN, f64::max);
        assert_eq!(cfgs[0].stages[0].width, widest_cascode);
    }
}
