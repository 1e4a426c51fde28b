//! Knowledge Base and Experience Base persistence with top-k retrieval.
//!
//! Both stores are append-only JSON-lines files with an in-memory index
//! rebuilt at open; every line carries a schema version. Writes are
//! serialized through the single owning handle, readers see the snapshot
//! taken at open.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::{CandidateDesign, SimReport};
use crate::spec::DesignSpec;

/// Store line schema version.
pub const MEMORY_SCHEMA_VERSION: u32 = 1;

/// One solved design point with its measured performance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbRecord {
    pub spec: DesignSpec,
    pub candidate: CandidateDesign,
    pub report: SimReport,
    /// Content hash of the candidate at evaluation time; lets readers check
    /// that a re-evaluation still talks about the same design point.
    pub candidate_hash: String,
    pub created_at: String,
    pub run_id: String,
}

/// Derived per-stage indicators used for screening and initialization hints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EbRecord {
    pub spec: DesignSpec,
    pub system_nf: f64,
    pub first_stage_nf: f64,
    pub per_stage_ip1db: Vec<f64>,
    pub per_stage_gain: Vec<f64>,
    /// Per-stage dc currents (mA); the basis of the power-split hint.
    pub per_stage_current_ma: Vec<f64>,
    pub template_id: String,
    pub notes: String,
}

impl EbRecord {
    pub fn validate(&self, stages: usize) -> Result<()> {
        if self.per_stage_ip1db.len() != stages
            || self.per_stage_gain.len() != stages
            || self.per_stage_current_ma.len() != stages
        {
            return Err(Error::Schema {
                path: "eb_record".into(),
                reason: format!("per-stage lists must have {stages} entries"),
            });
        }
        Ok(())
    }
}

/// Fixed report templates rendered into `notes`.
pub fn render_template(template_id: &str, spec: &DesignSpec, nf: f64, gain: f64) -> String {
    match template_id {
        "success" => format!(
            "met {:.1} GHz / {:.0}% target: nf {:.2} dB, band gain {:.1} dB",
            spec.fc, spec.fbw, nf, gain
        ),
        "partial" => format!(
            "partially met {:.1} GHz / {:.0}% target: nf {:.2} dB, band gain {:.1} dB; reuse with caution",
            spec.fc, spec.fbw, nf, gain
        ),
        _ => format!(
            "infeasible at {:.1} GHz / {:.0}%: best nf {:.2} dB, band gain {:.1} dB",
            spec.fc, spec.fbw, nf, gain
        ),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct StoredLine<T> {
    schema_version: u32,
    id: u64,
    dedup_key: String,
    record: T,
}

/// Append-only JSON-lines store with idempotent puts.
#[derive(Debug)]
pub struct JsonlStore<T> {
    path: PathBuf,
    records: Vec<(u64, T)>,
    by_key: HashMap<String, u64>,
    next_id: u64,
}

impl<T: Serialize + DeserializeOwned + Clone> JsonlStore<T> {
    pub fn open(path: &Path) -> Result<Self> {
        let mut store = JsonlStore {
            path: path.to_path_buf(),
            records: Vec::new(),
            by_key: HashMap::new(),
            next_id: 1,
        };
        if path.exists() {
            let file = std::fs::File::open(path)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
            for line in BufReader::new(file).lines() {
                let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let stored: StoredLine<T> =
                    serde_json::from_str(&line).map_err(|e| Error::Schema {
                        path: path.display().to_string(),
                        reason: e.to_string(),
                    })?;
                store.next_id = store.next_id.max(stored.id + 1);
                store.by_key.insert(stored.dedup_key.clone(), stored.id);
                store.records.push((stored.id, stored.record));
            }
        }
        Ok(store)
    }

    /// Appends durably unless the key was already stored; returns the id
    /// either way.
    pub fn put(&mut self, dedup_key: &str, record: T) -> Result<u64> {
        if let Some(&id) = self.by_key.get(dedup_key) {
            return Ok(id);
        }
        let id = self.next_id;
        let line = StoredLine {
            schema_version: MEMORY_SCHEMA_VERSION,
            id,
            dedup_key: dedup_key.to_string(),
            record: record.clone(),
        };
        if let Some(parent) = self.path.parent() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::io(parent.display().to_string(), e))?;
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(self.path.display().to_string(), e))?;
        let mut text = serde_json::to_string(&line)?;
        text.push('\n');
        file.write_all(text.as_bytes())
            .map_err(|e| Error::io(self.path.display().to_string(), e))?;
        file.flush()
            .map_err(|e| Error::io(self.path.display().to_string(), e))?;

        self.next_id += 1;
        self.by_key.insert(dedup_key.to_string(), id);
        self.records.push((id, record));
        Ok(id)
    }

    pub fn get(&self, id: u64) -> Option<&T> {
        self.records
            .iter()
            .find(|(rid, _)| *rid == id)
            .map(|(_, r)| r)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(u64, T)> {
        self.records.iter()
    }
}

/// Specification similarity in [0, 1]: one minus a weighted L1 distance over
/// (log fc, fractional bandwidth, power, gain, nf, ip1db), each dimension
/// scaled by its benchmark range. Frequency and bandwidth carry double
/// weight since feasible regions shift fastest along them.
pub fn similarity(a: &DesignSpec, b: &DesignSpec) -> f64 {
    const W: [f64; 6] = [2.0, 2.0, 1.0, 1.0, 1.0, 1.0];
    // Benchmark suite ranges: fc 10..50 GHz (log), fbw 10..80 %,
    // power 15..30 mA, gain 20..25 dB, nf 2.5..5 dB, ip1db -25..-15 dBm.
    let scale = [(50.0f64 / 10.0).ln(), 70.0, 15.0, 5.0, 2.5, 10.0];
    let d = [
        (a.fc.ln() - b.fc.ln()).abs(),
        (a.fbw - b.fbw).abs(),
        (a.power - b.power).abs(),
        (a.gain - b.gain).abs(),
        (a.nf_max - b.nf_max).abs(),
        (a.ip1db_min - b.ip1db_min).abs(),
    ];
    let total: f64 = W
        .iter()
        .zip(d.iter().zip(scale))
        .map(|(w, (di, s))| w * di / s)
        .sum();
    (1.0 - total / W.iter().sum::<f64>()).clamp(0.0, 1.0)
}

/// Initialization hints distilled from retrieved experience.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EbHints {
    /// Recommended per-stage power fractions (sums to 1).
    pub power_split_hint: Vec<f64>,
    /// Recommended per-stage gain budget (dB).
    pub per_stage_gain_hint: Vec<f64>,
    /// Worst-case slack per constraint over the retrieved records
    /// (positive means margin was available).
    pub headroom_estimates: std::collections::BTreeMap<String, f64>,
}

/// Both memory files under one data directory.
#[derive(Debug)]
pub struct MemoryStore {
    pub kb: JsonlStore<KbRecord>,
    pub eb: JsonlStore<EbRecord>,
}

impl MemoryStore {
    pub fn open(data_dir: &Path) -> Result<Self> {
        Ok(MemoryStore {
            kb: JsonlStore::open(&data_dir.join("kb.jsonl"))?,
            eb: JsonlStore::open(&data_dir.join("eb.jsonl"))?,
        })
    }

    pub fn kb_put(&mut self, record: KbRecord) -> Result<u64> {
        let key = format!("{}:{}", record.run_id, record.candidate_hash);
        self.kb.put(&key, record)
    }

    pub fn eb_put(&mut self, record: EbRecord) -> Result<u64> {
        record.validate(record.spec.stages)?;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for byte in serde_json::to_vec(&record)? {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100_0000_01b3);
        }
        let key = format!("eb:{h:016x}");
        self.eb.put(&key, record)
    }

    /// Top-k records by similarity to `spec`, ties broken by recency.
    pub fn kb_query(&self, spec: &DesignSpec, k: usize) -> Vec<(u64, &KbRecord)> {
        assert!(k >= 1);
        let mut scored: Vec<(f64, u64, &KbRecord)> = self
            .kb
            .iter()
            .map(|(id, r)| (similarity(spec, &r.spec), *id, r))
            .collect();
        scored.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap()
                .then_with(|| b.1.cmp(&a.1))
        });
        scored.into_iter().take(k).map(|(_, id, r)| (id, r)).collect()
    }

    /// Similarity-weighted initialization hints from the top-k experience
    /// records, plus the most pessimistic constraint slack seen among them.
    pub fn eb_hints(&self, spec: &DesignSpec, k: usize) -> Result<EbHints> {
        assert!(k >= 1);
        if self.eb.is_empty() {
            return Err(Error::NoExperience);
        }
        let mut scored: Vec<(f64, &EbRecord)> = self
            .eb
            .iter()
            .map(|(_, r)| (similarity(spec, &r.spec), r))
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let top: Vec<(f64, &EbRecord)> = scored.into_iter().take(k).collect();
        let weight_sum: f64 = top.iter().map(|(w, _)| *w).sum();
        let stages = top[0].1.per_stage_gain.len();

        let weighted = |extract: &dyn Fn(&EbRecord) -> &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; stages];
            for (w, r) in &top {
                for (o, v) in out.iter_mut().zip(extract(r)) {
                    *o += if weight_sum > 0.0 {
                        w / weight_sum * v
                    } else {
                        v / top.len() as f64
                    };
                }
            }
            out
        };

        let mut split = weighted(&|r| &r.per_stage_current_ma);
        let total: f64 = split.iter().sum();
        if total > 0.0 {
            for s in &mut split {
                *s /= total;
            }
        }
        let gain_hint = weighted(&|r| &r.per_stage_gain);

        let mut headroom = std::collections::BTreeMap::new();
        let nf_slack = top
            .iter()
            .map(|(_, r)| spec.nf_max - r.system_nf)
            .fold(f64::INFINITY, f64::min);
        let gain_slack = top
            .iter()
            .map(|(_, r)| r.per_stage_gain.iter().sum::<f64>() - spec.gain)
            .fold(f64::INFINITY, f64::min);
        let ip_slack = top
            .iter()
            .map(|(_, r)| cascade_ip1db(&r.per_stage_ip1db, &r.per_stage_gain) - spec.ip1db_min)
            .fold(f64::INFINITY, f64::min);
        headroom.insert("nf".to_string(), nf_slack);
        headroom.insert("gain".to_string(), gain_slack);
        headroom.insert("ip1db".to_string(), ip_slack);

        Ok(EbHints {
            power_split_hint: split,
            per_stage_gain_hint: gain_hint,
            headroom_estimates: headroom,
        })
    }
}

/// Input-referred compression recomposed from per-stage values and gains,
/// ignoring inter-stage coupler losses (a hint, not a simulation).
fn cascade_ip1db(per_stage_dbm: &[f64], per_stage_gain_db: &[f64]) -> f64 {
    let mut inv = 0.0;
    let mut prefix_db = 0.0;
    for (i, p) in per_stage_dbm.iter().enumerate() {
        inv += 10f64.powf(prefix_db / 10.0) / 10f64.powf(p / 10.0);
        prefix_db += per_stage_gain_db[i];
    }
    if inv > 0.0 {
        10.0 * (1.0 / inv).log10()
    } else {
        f64::INFINITY
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluator::{InputNetwork, Provenance, StageDevices};
    use crate::mcr::McrPhysical;
    use crate::spec::LoadModel;
    use std::collections::BTreeMap;

    fn spec(fc: f64, fbw: f64, power: f64, gain: f64, nf: f64, ip: f64) -> DesignSpec {
        DesignSpec {
            fc,
            fbw,
            power,
            gain,
            nf_max: nf,
            ip1db_min: ip,
            stages: 3,
            load: LoadModel::default(),
        }
    }

    fn kb_record(run: &str, tag: f64) -> KbRecord {
        let m = McrPhysical {
            k: 0.4,
            l1: 300.0,
            l2: 300.0,
            r1: 400.0,
            r2: 400.0,
            c1: 30.0,
            c2: 30.0,
        };
        let candidate = CandidateDesign {
            x1: StageDevices {
                w: [90.0, 90.0, tag],
                vgs: [400.0, 400.0, 400.0],
            },
            x2: [m, m, m],
            x3: InputNetwork {
                l_par: 400.0,
                l_g: 200.0,
                l_s: 80.0,
            },
            meta: Provenance::default(),
        };
        let hash = format!("{:016x}", candidate.content_hash());
        KbRecord {
            spec: spec(30.0, 20.0, 30.0, 25.0, 5.0, -25.0),
            candidate,
            report: SimReport {
                freq_grid: vec![30.0],
                gain_db: vec![25.0],
                s11_db: vec![-20.0],
                s22_db: vec![-10.0],
                nf_db: 4.0,
                nf_db_curve: vec![4.0],
                ip1db_dbm: -20.0,
                op1db_dbm: 4.0,
                per_stage_gain_db: vec![10.0, 8.0, 7.0],
                per_stage_nf_db: vec![3.0, 3.0, 3.0],
                per_stage_ip1db_dbm: vec![10.0, 10.0, 10.0],
                pass_flags: BTreeMap::new(),
                violations: BTreeMap::new(),
                hf_eval_count_delta: 1,
                failure_reason: None,
            },
            candidate_hash: hash,
            created_at: "2026-01-01T00:00:00Z".into(),
            run_id: run.into(),
        }
    }

    #[test]
    fn put_get_roundtrip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = MemoryStore::open(dir.path()).unwrap();
        let rec = kb_record("run1", 90.0);
        let id = store.kb_put(rec.clone()).unwrap();
        let got = store.kb.get(id).unwrap();
        assert_eq!(
            serde_json::to_vec(&rec).unwrap(),
            serde_json::to_vec(got).unwrap()
        );

        // Reopen and check durability.
        drop(store);
        let store = MemoryStore::open(dir.path()).unwrap();
        assert_eq!(store.kb.len(), 1);
        assert_eq!(
            serde_json::to_vec(store.kb.get(id).unwrap()).unwrap(),
            serde_json::to_vec(&rec).unwrap()
        );
    }

    #[test]
    fn duplicate_puts_are_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = MemoryStore::open(dir.path()).unwrap();
        let rec = kb_record("run1", 90.0);
        let a = store.kb_put(rec.clone()).unwrap();
        let b = store.kb_put(rec).unwrap();
        assert_eq!(a, b);
        assert_eq!(store.kb.len(), 1);
    }

    #[test]
    fn ids_are_strictly_increasing() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = MemoryStore::open(dir.path()).unwrap();
        let mut last = 0;
        for i in 0..50 {
            let id = store.kb_put(kb_record("run1", 45.0 + i as f64)).unwrap();
            assert!(id > last);
            last = id;
        }
    }

    #[test]
    fn similarity_is_symmetric_and_reflexive() {
        let s2 = spec(30.0, 20.0, 30.0, 25.0, 5.0, -25.0);
        let s3 = spec(50.0, 20.0, 30.0, 20.0, 5.0, -20.0);
        assert_eq!(similarity(&s2, &s2), 1.0);
        assert!((similarity(&s2, &s3) - similarity(&s3, &s2)).abs() < 1e-15);
    }

    #[test]
    fn bandwidth_only_difference_scores_higher() {
        // S2 vs S4 (bandwidth only) against S2 vs S3 (frequency, gain,
        // linearity all differ).
        let s2 = spec(30.0, 20.0, 30.0, 25.0, 5.0, -25.0);
        let s4 = spec(30.0, 10.0, 30.0, 25.0, 5.0, -25.0);
        let s3 = spec(50.0, 20.0, 30.0, 20.0, 5.0, -20.0);
        assert!(similarity(&s2, &s4) > similarity(&s2, &s3));
    }

    #[test]
    fn kb_query_matches_brute_force_sort() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = MemoryStore::open(dir.path()).unwrap();
        for i in 0..10 {
            let mut rec = kb_record("run1", 45.0 + 9.0 * i as f64);
            rec.spec.fc = 10.0 + 4.0 * i as f64;
            store.kb_put(rec).unwrap();
        }
        let target = spec(30.0, 20.0, 30.0, 25.0, 5.0, -25.0);
        let got = store.kb_query(&target, 3);
        assert_eq!(got.len(), 3);

        let mut brute: Vec<(f64, u64)> = store
            .kb
            .iter()
            .map(|(id, r)| (similarity(&target, &r.spec), *id))
            .collect();
        brute.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| b.1.cmp(&a.1)));
        let expect: Vec<u64> = brute.iter().take(3).map(|(_, id)| *id).collect();
        let got_ids: Vec<u64> = got.iter().map(|(id, _)| *id).collect();
        assert_eq!(got_ids, expect);

        // Empty store yields the empty list.
        let empty = MemoryStore::open(tempfile::tempdir().unwrap().path()).unwrap();
        assert!(empty.kb_query(&target, 3).is_empty());
    }

    fn eb_record(fc: f64, nf: f64, currents: [f64; 3]) -> EbRecord {
        EbRecord {
            spec: spec(fc, 20.0, 30.0, 25.0, 5.0, -25.0),
            system_nf: nf,
            first_stage_nf: nf - 0.5,
            per_stage_ip1db: vec![10.0, 10.0, 10.0],
            per_stage_gain: vec![10.0, 9.0, 8.0],
            per_stage_current_ma: currents.to_vec(),
            template_id: "success".into(),
            notes: "fixture".into(),
        }
    }

    #[test]
    fn empty_eb_reports_no_experience() {
        let dir = tempfile::tempdir().unwrap();
        let store = MemoryStore::open(dir.path()).unwrap();
        let target = spec(30.0, 20.0, 30.0, 25.0, 5.0, -25.0);
        assert!(matches!(
            store.eb_hints(&target, 2),
            Err(Error::NoExperience)
        ));
    }

    #[test]
    fn single_record_hints_equal_that_record() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = MemoryStore::open(dir.path()).unwrap();
        store.eb_put(eb_record(30.0, 4.0, [12.0, 9.0, 9.0])).unwrap();
        let target = spec(30.0, 20.0, 30.0, 25.0, 5.0, -25.0);
        let hints = store.eb_hints(&target, 3).unwrap();
        assert!((hints.power_split_hint[0] - 0.4).abs() < 1e-12);
        assert_eq!(hints.per_stage_gain_hint, vec![10.0, 9.0, 8.0]);
        assert!((hints.headroom_estimates["nf"] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_record_hints_are_similarity_weighted() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = MemoryStore::open(dir.path()).unwrap();
        let a = eb_record(30.0, 4.0, [10.0, 10.0, 10.0]);
        let b = eb_record(50.0, 4.5, [20.0, 5.0, 5.0]);
        store.eb_put(a.clone()).unwrap();
        store.eb_put(b.clone()).unwrap();
        let target = spec(30.0, 20.0, 30.0, 25.0, 5.0, -25.0);
        let (wa, wb) = (similarity(&target, &a.spec), similarity(&target, &b.spec));
        let hints = store.eb_hints(&target, 2).unwrap();

        // Hand arithmetic: weighted currents then normalized.
        let sum = wa + wb;
        let cur0 = (wa / sum) * 10.0 + (wb / sum) * 20.0;
        let total = cur0 + ((wa / sum) * 10.0 + (wb / sum) * 5.0) * 2.0;
        assert!((hints.power_split_hint[0] - cur0 / total).abs() < 1e-12);
        // Headroom takes the worst slack: min(5-4, 5-4.5) = 0.5.
        assert!((hints.headroom_estimates["nf"] - 0.5).abs() < 1e-12);
    }
}
