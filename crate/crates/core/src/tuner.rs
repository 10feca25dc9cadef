//! Per-category PR acceptance tracking and rotation weights.
//!
//! Counters are the source of truth; weights are always recomputed from them.
//! Categories below a 20% acceptance rate (with enough samples) get weight 0
//! and are never picked.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::RwLock;

use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clock::{rfc3339, Instant, SharedClock};
use crate::fleet::sim::WorkPolicy;
use crate::fsutil;
use crate::ledger::WorkItem;

pub const MIN_SAMPLES: u64 = 5;
pub const BLOCK_BELOW: f64 = 0.20;
pub const NEUTRAL_WEIGHT: f64 = 0.5;
pub const BOOST: f64 = 1.5;
pub const TUNING_FILE: &str = "qa-tuning.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Merged,
    Closed,
}

impl FromStr for Outcome {
    type Err = TunerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "merged" => Ok(Outcome::Merged),
            "closed" => Ok(Outcome::Closed),
            _ => Err(TunerError::InvalidInput(format!("unknown outcome {s:?}"))),
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outcome::Merged => "merged",
            Outcome::Closed => "closed",
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TunerError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("every category is blocked")]
    AllBlocked,
    #[error("tuning state: {0}")]
    Storage(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuningRecord {
    pub category: String,
    pub merged: u64,
    pub closed: u64,
    pub weight: f64,
    #[serde(with = "rfc3339")]
    pub updated_at: Instant,
}

impl TuningRecord {
    pub fn samples(&self) -> u64 {
        self.merged + self.closed
    }

    pub fn acceptance_rate(&self) -> Option<f64> {
        acceptance_rate(self.merged, self.closed)
    }

    fn recompute(&mut self) {
        self.weight = weight_for(self.acceptance_rate(), self.samples());
    }
}

/// `merged / (merged + closed)`, or `None` with no data.
pub fn acceptance_rate(merged: u64, closed: u64) -> Option<f64> {
    let total = merged + closed;
    (total > 0).then(|| merged as f64 / total as f64)
}

pub fn weight_for(rate: Option<f64>, samples: u64) -> f64 {
    match rate {
        None => NEUTRAL_WEIGHT,
        Some(_) if samples < MIN_SAMPLES => NEUTRAL_WEIGHT,
        Some(r) if r < BLOCK_BELOW => 0.0,
        Some(r) => (BOOST * r).min(1.0),
    }
}

/// Weighted draw with a fresh seeded generator.
pub fn pick_category(records: &[TuningRecord], seed: u64) -> Result<String, TunerError> {
    pick_category_with(records, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn pick_category_with<R: Rng>(records: &[TuningRecord], rng: &mut R) -> Result<String, TunerError> {
    let index = WeightedIndex::new(records.iter().map(|r| r.weight)).map_err(|_| TunerError::AllBlocked)?;
    Ok(records[index.sample(rng)].category.clone())
}

#[derive(Serialize, Deserialize)]
struct FileEntry {
    merged: u64,
    closed: u64,
    weight: f64,
    #[serde(with = "rfc3339")]
    updated_at: Instant,
}

pub struct Tuner {
    clock: SharedClock,
    path: Option<PathBuf>,
    records: RwLock<BTreeMap<String, TuningRecord>>,
}

impl Tuner {
    pub fn in_memory(clock: SharedClock) -> Self {
        Tuner { clock, path: None, records: RwLock::new(BTreeMap::new()) }
    }

    /// Loads `path` if it exists; weights in the file are ignored and recomputed.
    pub fn open(path: impl Into<PathBuf>, clock: SharedClock) -> Result<Self, TunerError> {
        let path = path.into();
        let records = match std::fs::read(&path) {
            Ok(bytes) => parse_file(&bytes)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
            Err(e) => return Err(TunerError::Storage(format!("{}: {e}", path.display()))),
        };
        Ok(Tuner { clock, path: Some(path), records: RwLock::new(records) })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn record_outcome(&self, category: &str, outcome: Outcome) -> Result<TuningRecord, TunerError> {
        if category.trim().is_empty() {
            return Err(TunerError::InvalidInput("category must not be empty".into()));
        }
        let now = self.clock.now();
        let mut records = self.records.write().unwrap();
        let mut rec = records.get(category).cloned().unwrap_or_else(|| TuningRecord {
            category: category.to_string(),
            merged: 0,
            closed: 0,
            weight: NEUTRAL_WEIGHT,
            updated_at: now,
        });
        match outcome {
            Outcome::Merged => rec.merged += 1,
            Outcome::Closed => rec.closed += 1,
        }
        rec.updated_at = now;
        rec.recompute();
        let mut next = records.clone();
        next.insert(category.to_string(), rec.clone());
        if let Some(path) = &self.path {
            fsutil::write_atomic(path, &render_file(&next))
                .map_err(|e| TunerError::Storage(format!("{}: {e}", path.display())))?;
        }
        *records = next;
        Ok(rec)
    }

    pub fn records(&self) -> Vec<TuningRecord> {
        self.records.read().unwrap().values().cloned().collect()
    }

    pub fn record(&self, category: &str) -> Option<TuningRecord> {
        self.records.read().unwrap().get(category).cloned()
    }

    /// Weight for `category`; unseen categories are neutral.
    pub fn weight(&self, category: &str) -> f64 {
        self.record(category).map_or(NEUTRAL_WEIGHT, |r| r.weight)
    }

    pub fn pick(&self, seed: u64) -> Result<String, TunerError> {
        pick_category(&self.records(), seed)
    }
}

fn render_file(records: &BTreeMap<String, TuningRecord>) -> Vec<u8> {
    let out: BTreeMap<&str, FileEntry> = records
        .iter()
        .map(|(k, r)| {
            (k.as_str(), FileEntry { merged: r.merged, closed: r.closed, weight: r.weight, updated_at: r.updated_at })
        })
        .collect();
    let mut bytes = serde_json::to_vec_pretty(&out).expect("tuning state serializes");
    bytes.push(b'\n');
    bytes
}

fn parse_file(bytes: &[u8]) -> Result<BTreeMap<String, TuningRecord>, TunerError> {
    let raw: BTreeMap<String, FileEntry> =
        serde_json::from_slice(bytes).map_err(|e| TunerError::Storage(e.to_string()))?;
    Ok(raw
        .into_iter()
        .map(|(category, e)| {
            let mut rec = TuningRecord { category: category.clone(), merged: e.merged, closed: e.closed, weight: e.weight, updated_at: e.updated_at };
            rec.recompute();
            (category, rec)
        })
        .collect())
}

/// Work items are categorised by repo: blocked categories are not picked up,
/// and finished items count as merged or closed.
impl WorkPolicy for Tuner {
    fn eligible(&self, item: &WorkItem) -> bool {
        self.weight(&item.repo) > 0.0
    }

    fn on_outcome(&self, item: &WorkItem, success: bool) {
        let outcome = if success { Outcome::Merged } else { Outcome::Closed };
        if let Err(e) = self.record_outcome(&item.repo, outcome) {
            tracing::warn!(category = %item.repo, error = %e, "could not record outcome");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::VirtualClock;
    use proptest::prelude::*;

    fn rec(category: &str, weight: f64) -> TuningRecord {
        TuningRecord { category: category.into(), merged: 0, closed: 0, weight, updated_at: Instant::EPOCH }
    }

    #[test]
    fn rates() {
        assert!((acceptance_rate(11, 129).unwrap() - 0.0786).abs() < 5e-5);
        assert!((acceptance_rate(320, 539).unwrap() - 0.373).abs() < 5e-4);
        assert_eq!(acceptance_rate(0, 0), None);
    }

    #[test]
    fn weights() {
        assert!((weight_for(Some(0.62), 100) - 0.93).abs() < 1e-12);
        assert_eq!(weight_for(Some(0.08), 140), 0.0);
        assert_eq!(weight_for(Some(1.0), 10), 1.0);
        assert_eq!(weight_for(Some(0.19), 10), 0.0);
        assert_eq!(weight_for(None, 0), NEUTRAL_WEIGHT);
        assert_eq!(weight_for(Some(0.0), 1), NEUTRAL_WEIGHT);
    }

    #[test]
    fn first_outcome_initialises_counters() {
        let t = Tuner::in_memory(VirtualClock::new().shared());
        let r = t.record_outcome("a11y", Outcome::Merged).unwrap();
        assert_eq!((r.merged, r.closed), (1, 0));
        assert!(t.record_outcome(" ", Outcome::Merged).is_err());
    }

    #[test]
    fn operator_category_gets_blocked() {
        let t = Tuner::in_memory(VirtualClock::new().shared());
        for _ in 0..11 {
            t.record_outcome("operator", Outcome::Merged).unwrap();
        }
        for _ in 0..129 {
            t.record_outcome("operator", Outcome::Closed).unwrap();
        }
        assert_eq!(t.record("operator").unwrap().weight, 0.0);
    }

    #[test]
    fn state_survives_restart() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(TUNING_FILE);
        let clock = VirtualClock::new();
        let t = Tuner::open(&path, clock.shared()).unwrap();
        for (cat, m, c) in [("a11y", 31, 19), ("operator", 1, 12), ("docs", 2, 0)] {
            for _ in 0..m {
                t.record_outcome(cat, Outcome::Merged).unwrap();
            }
            for _ in 0..c {
                t.record_outcome(cat, Outcome::Closed).unwrap();
            }
        }
        let before = t.records();
        let again = Tuner::open(&path, clock.shared()).unwrap();
        assert_eq!(again.records(), before);
    }

    #[test]
    fn weights_in_file_are_not_trusted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(TUNING_FILE);
        std::fs::write(
            &path,
            r#"{"operator":{"merged":1,"closed":20,"weight":0.9,"updated_at":"2026-01-01T00:00:00.000Z"}}"#,
        )
        .unwrap();
        let t = Tuner::open(&path, VirtualClock::new().shared()).unwrap();
        assert_eq!(t.weight("operator"), 0.0);
    }

    #[test]
    fn zero_weight_is_never_picked() {
        let records = [rec("a", 0.93), rec("b", 0.0)];
        for seed in 0..200 {
            assert_eq!(pick_category(&records, seed).unwrap(), "a");
        }
        assert!(matches!(pick_category(&[rec("a", 0.0), rec("b", 0.0)], 1), Err(TunerError::AllBlocked)));
        assert!(matches!(pick_category(&[], 1), Err(TunerError::AllBlocked)));
    }

    #[test]
    fn draw_frequency_matches_weights() {
        let records = [rec("a", 0.75), rec("b", 0.25)];
        let mut rng = ChaCha8Rng::seed_from_u64(2026);
        let n = 100_000;
        let hits = (0..n).filter(|_| pick_category_with(&records, &mut rng).unwrap() == "a").count();
        let frac = hits as f64 / n as f64;
        assert!((frac - 0.75).abs() <= 0.02, "{frac}");
    }

    #[test]
    fn picks_are_deterministic_per_seed() {
        let records = [rec("a", 0.3), rec("b", 0.3), rec("c", 0.4)];
        for seed in 0..20 {
            assert_eq!(pick_category(&records, seed).unwrap(), pick_category(&records, seed).unwrap());
        }
    }

    proptest! {
        #[test]
        fn blocking_invariant(merged in 0u64..200, closed in 0u64..200) {
            let samples = merged + closed;
            let rate = acceptance_rate(merged, closed);
            let w = weight_for(rate, samples);
            prop_assert!((0.0..=1.0).contains(&w));
            if samples >= MIN_SAMPLES && rate.unwrap() < BLOCK_BELOW {
                prop_assert_eq!(w, 0.0);
                let records = [TuningRecord { category: "x".into(), merged, closed, weight: w, updated_at: Instant::EPOCH }, rec("y", 0.5)];
                for seed in 0..10 {
                    prop_assert_eq!(pick_category(&records, seed).unwrap(), "y");
                }
            }
        }

        #[test]
        fn monotone_above_threshold(a in 0.20f64..=1.0, b in 0.20f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(weight_for(Some(lo), 50) <= weight_for(Some(hi), 50));
        }
    }
}
