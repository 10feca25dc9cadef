//! Scenario-driven runs of the whole kernel on a virtual clock.
//!
//! A scenario lists backlog arrivals and simulated agents; `run` wires the
//! real ledger, governor, fleet, tuner and notifier to sim backends,
//! advances the clock to the horizon, and reports what happened. The same
//! seed always yields a byte-identical report.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clock::{Clock, Duration, Instant, VirtualClock};
use crate::dashboard::CoverageSource;
use crate::events::{EventBus, EventRecorder, FleetEvent};
use crate::fleet::sim::{secs, SimBackend, SimBehavior, WorkPolicy};
use crate::fleet::{AgentRecord, AgentSpec, Fleet, FleetConfig, MemoryHeartbeats};
use crate::governor::{Governor, GovernorConfig, LedgerBacklog, Mode, Role};
use crate::kernel::{Kernel, KernelParts, KickOutcome};
use crate::ledger::{self, ItemKind, ItemStatus, Ledger, LedgerState, WorkItem};
use crate::notifier::{Notification, Notifier};
use crate::tuner::{Tuner, TuningRecord};

const SEED_ACTOR: &str = "scenario";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arrival {
    /// Seconds from start. Exactly one of `at` and `poisson_rate` is set.
    #[serde(default)]
    pub at: Option<f64>,
    /// Mean arrivals per hour, from start until the horizon.
    #[serde(default)]
    pub poisson_rate: Option<f64>,
    pub repo: String,
    #[serde(default = "default_kind")]
    pub kind: ItemKind,
    #[serde(default = "default_title")]
    pub title: String,
    /// Items arriving together at `at`.
    #[serde(default = "one")]
    pub count: u32,
}

fn default_kind() -> ItemKind {
    ItemKind::Issue
}

fn default_title() -> String {
    "item".to_string()
}

fn one() -> u32 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentGroup {
    pub role: Role,
    #[serde(default = "one")]
    pub count: u32,
    #[serde(default)]
    pub behavior: SimBehavior,
    #[serde(default)]
    pub self_scheduled: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub seed: u64,
    #[serde(with = "secs")]
    pub horizon: Duration,
    #[serde(default)]
    pub arrivals: Vec<Arrival>,
    pub agents: Vec<AgentGroup>,
    /// Governor env keys, e.g. `CADENCE_QUIET_SCANNER`.
    #[serde(default)]
    pub governor: BTreeMap<String, String>,
    #[serde(default)]
    pub max_respawns: Option<u32>,
    /// Let tuner weights decide which categories agents pick up.
    #[serde(default)]
    pub tuning_gates_work: bool,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ScenarioError {
    #[error("scenario does not parse: {0}")]
    Parse(String),
    #[error("invalid scenario fields: {}", .0.join("; "))]
    Invalid(Vec<String>),
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Scenario, ScenarioError> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut bad = Vec::new();
        if self.horizon.is_zero() {
            bad.push("horizon: must be positive".to_string());
        }
        for (i, a) in self.arrivals.iter().enumerate() {
            let f = |name: &str, why: &str| format!("arrivals[{i}].{name}: {why}");
            match (a.at, a.poisson_rate) {
                (Some(_), Some(_)) | (None, None) => bad.push(f("at", "set exactly one of at and poisson_rate")),
                (Some(at), None) => {
                    if !(at.is_finite() && at >= 0.0) || at > self.horizon.as_secs_f64() {
                        bad.push(f("at", "must lie within [0, horizon]"));
                    }
                }
                (None, Some(rate)) => {
                    if !(rate.is_finite() && rate > 0.0) {
                        bad.push(f("poisson_rate", "must be a positive number"));
                    }
                }
            }
            if a.repo.trim().is_empty() {
                bad.push(f("repo", "must not be empty"));
            }
            if a.title.trim().is_empty() {
                bad.push(f("title", "must not be empty"));
            }
            if a.count == 0 {
                bad.push(f("count", "must be at least 1"));
            }
        }
        if self.agents.is_empty() {
            bad.push("agents: at least one agent group is required".to_string());
        }
        for (i, g) in self.agents.iter().enumerate() {
            let f = |name: &str, why: &str| format!("agents[{i}].{name}: {why}");
            if g.count == 0 {
                bad.push(f("count", "must be at least 1"));
            }
            let b = &g.behavior;
            if !(0.0..=1.0).contains(&b.success_probability) {
                bad.push(f("behavior.success_probability", "must be within [0, 1]"));
            }
            for (j, o) in b.success_overrides.iter().enumerate() {
                if !(0.0..=1.0).contains(&o.p) {
                    bad.push(f(&format!("behavior.success_overrides[{j}].p"), "must be within [0, 1]"));
                }
            }
            if b.items_per_kick == 0 {
                bad.push(f("behavior.items_per_kick", "must be at least 1"));
            }
            if b.heartbeat_every.is_zero() {
                bad.push(f("behavior.heartbeat_every", "must be positive"));
            }
        }
        if let Err(e) = GovernorConfig::from_pairs(&self.governor) {
            bad.push(format!("governor: {e}"));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(ScenarioError::Invalid(bad))
        }
    }

    /// Arrival times in milliseconds with their source entry, sorted.
    fn arrival_schedule(&self) -> Vec<(u64, usize)> {
        let horizon_ms = self.horizon.as_millis() as u64;
        let mut out = Vec::new();
        for (i, a) in self.arrivals.iter().enumerate() {
            if let Some(at) = a.at {
                let ms = (at * 1000.0).round() as u64;
                out.extend(std::iter::repeat_n((ms, i), a.count as usize));
            } else if let Some(rate) = a.poisson_rate {
                // Exponential gaps by inversion of the CDF.
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
                let per_ms = rate / 3_600_000.0;
                let mut t = 0.0f64;
                loop {
                    let u: f64 = rng.gen();
                    t += -(1.0 - u).ln() / per_ms;
                    if t > horizon_ms as f64 {
                        break;
                    }
                    out.extend(std::iter::repeat_n((t.round() as u64, i), a.count as usize));
                }
            }
        }
        out.sort();
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub at: Instant,
    pub mode: Mode,
    pub queue: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemTiming {
    pub id: String,
    pub repo: String,
    pub kind: ItemKind,
    pub title: String,
    pub status: ItemStatus,
    pub fix_attempts: u32,
    pub arrived_at: Instant,
    pub done_at: Option<Instant>,
    pub time_to_done_secs: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixTimeStats {
    pub count: usize,
    pub median_secs: f64,
    pub p90_secs: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusCounts {
    pub arrived: u64,
    pub done: u64,
    pub skip: u64,
    pub escalated: u64,
    pub open: u64,
    pub in_progress: u64,
}

impl StatusCounts {
    pub fn conserved(&self) -> bool {
        self.arrived == self.done + self.skip + self.escalated + self.open + self.in_progress
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KickCounts {
    pub delivered: BTreeMap<Role, u64>,
    pub skipped_busy: u64,
    pub unavailable: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub scenario: String,
    pub seed: u64,
    pub horizon_secs: f64,
    pub mode_trace: Vec<TracePoint>,
    pub kicks: KickCounts,
    pub items: Vec<ItemTiming>,
    pub fix_time: Option<FixTimeStats>,
    pub counts: StatusCounts,
    pub notifications: Vec<Notification>,
    pub agents: Vec<AgentRecord>,
    pub tuning: Vec<TuningRecord>,
    pub final_ledger: LedgerState,
}

impl SimReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn mode_trace_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["at_secs", "mode", "queue"]).unwrap();
        for p in &self.mode_trace {
            w.write_record([secs_str(p.at), p.mode.to_string(), p.queue.to_string()]).unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }

    pub fn items_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "id", "repo", "kind", "title", "status", "fix_attempts", "arrived_secs", "done_secs", "time_to_done_secs",
        ])
        .unwrap();
        for i in &self.items {
            w.write_record([
                i.id.clone(),
                i.repo.clone(),
                i.kind.as_str().to_string(),
                i.title.clone(),
                i.status.to_string(),
                i.fix_attempts.to_string(),
                secs_str(i.arrived_at),
                i.done_at.map(secs_str).unwrap_or_default(),
                i.time_to_done_secs.map(|s| s.to_string()).unwrap_or_default(),
            ])
            .unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }

    /// Checks the report's own invariants: conservation, and every arrived
    /// item present exactly once.
    pub fn invariants_hold(&self) -> bool {
        let mut ids: Vec<&str> = self.items.iter().map(|i| i.id.as_str()).collect();
        ids.sort();
        ids.dedup();
        self.counts.conserved() && ids.len() as u64 == self.counts.arrived
    }
}

fn secs_str(at: Instant) -> String {
    let ms = at.as_millis();
    if ms.is_multiple_of(1000) {
        (ms / 1000).to_string()
    } else {
        format!("{:.3}", ms as f64 / 1000.0)
    }
}

/// A finished run: the report, the raw ledger event log, and every fleet
/// event published on the bus.
pub struct SimRun {
    pub report: SimReport,
    pub ledger_lines: Vec<String>,
    pub events: Vec<FleetEvent>,
}

/// Records outcomes with the tuner without letting weights gate work.
struct RecordOutcomes(Arc<Tuner>);

impl WorkPolicy for RecordOutcomes {
    fn on_outcome(&self, item: &WorkItem, success: bool) {
        self.0.on_outcome(item, success);
    }
}

pub fn run(scenario: &Scenario) -> Result<SimRun, ScenarioError> {
    scenario.validate()?;
    let clock = VirtualClock::new();
    let shared = clock.shared();
    let bus = EventBus::new();
    let recorder = EventRecorder::new();
    bus.subscribe(recorder.clone());
    let ledger = Arc::new(Ledger::in_memory(shared.clone()).with_bus(bus.clone()));
    let tuner = Arc::new(Tuner::in_memory(shared.clone()));
    let notifier = Arc::new(Notifier::new(shared.clone(), vec![]).with_line_sink(|_| {}));

    let mut sim = SimBackend::new("sim", shared.clone(), ledger.clone(), scenario.seed);
    sim = if scenario.tuning_gates_work {
        sim.with_policy(tuner.clone())
    } else {
        sim.with_policy(Arc::new(RecordOutcomes(tuner.clone())))
    };
    let mut specs = Vec::new();
    for group in &scenario.agents {
        for n in 1..=group.count {
            let name = format!("{}-{n}", group.role);
            sim = sim.with_behavior(name.clone(), group.behavior.clone());
            let mut spec = AgentSpec::new(name.clone(), group.role, "sim", format!("policies/{name}.md"));
            spec.self_scheduled = group.self_scheduled;
            specs.push(spec);
        }
    }
    let mut fleet_config = FleetConfig { verify_policies: false, ..Default::default() };
    if let Some(max) = scenario.max_respawns {
        fleet_config.max_respawns = max;
    }
    let mut fleet = Fleet::new(fleet_config, shared.clone(), bus.clone(), MemoryHeartbeats::new());
    fleet.register_backend(Arc::new(sim));
    for spec in specs {
        if let Err(e) = fleet.add_agent(spec) {
            return Err(ScenarioError::Invalid(vec![format!("agents: {e}")]));
        }
    }
    let governor = Governor::new(GovernorConfig::default())
        .with_overrides(scenario.governor.clone())
        .map_err(|e| ScenarioError::Invalid(vec![format!("governor: {e}")]))?
        .with_bus(bus.clone());

    let kernel = Kernel::new(KernelParts {
        clock: shared.clone(),
        bus,
        ledger: ledger.clone(),
        fleet,
        governor,
        backlog: Arc::new(LedgerBacklog(ledger.clone())),
        tuner: tuner.clone(),
        notifier: notifier.clone(),
        coverage: CoverageSource::default(),
        snapshot_every: None,
    });

    // Arrival timers go in before the kernel's loops so that an arrival at a
    // tick instant is visible to that tick. Arrivals at t=0 precede the first tick.
    let schedule = scenario.arrival_schedule();
    let mut by_time: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (ms, i) in schedule {
        by_time.entry(ms).or_default().push(i);
    }
    let mut serial = 0u64;
    for (ms, entries) in by_time {
        let batch: Vec<(String, ItemKind, String)> = entries
            .into_iter()
            .map(|i| {
                serial += 1;
                let a = &scenario.arrivals[i];
                (a.repo.clone(), a.kind, format!("{} #{serial}", a.title))
            })
            .collect();
        let ledger = ledger.clone();
        let add = move |_: Instant| {
            for (repo, kind, title) in &batch {
                if let Err(e) = ledger.add_item(repo, *kind, title, SEED_ACTOR) {
                    tracing::error!(error = %e, "arrival rejected");
                }
            }
        };
        if ms == 0 {
            add(Instant::EPOCH);
        } else {
            clock.schedule_at(Instant::from_millis(ms), Box::new(add));
        }
    }

    kernel.start();
    clock.advance(scenario.horizon).expect("virtual clock");
    let report = build_report(scenario, &kernel, &ledger, &tuner, &notifier);
    kernel.shutdown();
    Ok(SimRun { report, ledger_lines: ledger.event_lines(), events: recorder.events() })
}

fn build_report(
    scenario: &Scenario,
    kernel: &Kernel,
    ledger: &Ledger,
    tuner: &Tuner,
    notifier: &Notifier,
) -> SimReport {
    let ticks = kernel.ticks();
    let mut kicks = KickCounts::default();
    for k in ticks.iter().flat_map(|t| &t.kicks) {
        match k.outcome {
            KickOutcome::Delivered => *kicks.delivered.entry(k.role).or_default() += 1,
            KickOutcome::Skipped => kicks.skipped_busy += 1,
            KickOutcome::Unavailable => kicks.unavailable += 1,
        }
    }
    let state = ledger.state();
    let mut counts = StatusCounts::default();
    let mut items = Vec::new();
    for item in state.items.values() {
        counts.arrived += 1;
        match item.status {
            ItemStatus::Done => counts.done += 1,
            ItemStatus::Skip => counts.skip += 1,
            ItemStatus::Escalated => counts.escalated += 1,
            ItemStatus::Open => counts.open += 1,
            ItemStatus::InProgress => counts.in_progress += 1,
        }
        let done_at = (item.status == ItemStatus::Done).then_some(item.updated_at);
        items.push(ItemTiming {
            id: item.id.clone(),
            repo: item.repo.clone(),
            kind: item.kind,
            title: item.title.clone(),
            status: item.status,
            fix_attempts: item.fix_attempts,
            arrived_at: item.created_at,
            done_at,
            time_to_done_secs: done_at.map(|d| (d - item.created_at).as_secs_f64()),
        });
    }
    let mut fix_times: Vec<f64> = items.iter().filter_map(|i| i.time_to_done_secs).collect();
    fix_times.sort_by(f64::total_cmp);
    let fix_time = (!fix_times.is_empty()).then(|| FixTimeStats {
        count: fix_times.len(),
        median_secs: percentile(&fix_times, 0.5),
        p90_secs: percentile(&fix_times, 0.9),
    });
    SimReport {
        scenario: scenario.name.clone(),
        seed: scenario.seed,
        horizon_secs: scenario.horizon.as_secs_f64(),
        mode_trace: ticks.iter().map(|t| TracePoint { at: t.at, mode: t.mode, queue: t.queue_size }).collect(),
        kicks,
        items,
        fix_time,
        counts,
        notifications: notifier.sent(),
        agents: kernel.records(),
        tuning: tuner.records(),
        final_ledger: state,
    }
}

/// Nearest-rank percentile of sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

/// True iff replaying `ledger_lines` reproduces the report's final ledger.
pub fn replay(report: &SimReport, ledger_lines: &[String]) -> bool {
    match ledger::replay(ledger_lines.iter().map(String::as_str)) {
        Ok(state) => state == report.final_ledger,
        Err(_) => false,
    }
}

/// Scenarios shipped with the crate, by name.
pub fn bundled() -> Vec<(&'static str, &'static str)> {
    vec![
        ("burst", include_str!("../scenarios/burst.json")),
        ("steady", include_str!("../scenarios/steady.json")),
        ("flaky", include_str!("../scenarios/flaky.json")),
        ("quiet", include_str!("../scenarios/quiet.json")),
    ]
}

pub fn bundled_scenario(name: &str) -> Option<Scenario> {
    bundled()
        .into_iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| Scenario::from_json(text).expect("bundled scenario is valid"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(arrivals: Vec<Arrival>) -> Scenario {
        Scenario {
            name: "t".into(),
            seed: 1,
            horizon: Duration::from_secs(7200),
            arrivals,
            agents: vec![AgentGroup {
                role: Role::Scanner,
                count: 1,
                behavior: SimBehavior::default(),
                self_scheduled: false,
            }],
            governor: BTreeMap::new(),
            max_respawns: None,
            tuning_gates_work: false,
        }
    }

    #[test]
    fn validation_names_offending_fields() {
        let mut s = tiny(vec![Arrival {
            at: Some(1.0),
            poisson_rate: Some(2.0),
            repo: "".into(),
            kind: ItemKind::Issue,
            title: "x".into(),
            count: 0,
        }]);
        s.agents[0].behavior.success_probability = 1.5;
        s.governor.insert("SURGE_THRESHOLD".into(), "lots".into());
        let ScenarioError::Invalid(fields) = s.validate().unwrap_err() else { panic!() };
        let joined = fields.join("\n");
        for needle in ["arrivals[0].at", "arrivals[0].repo", "arrivals[0].count", "success_probability", "governor"] {
            assert!(joined.contains(needle), "{needle} missing from {joined}");
        }
    }

    #[test]
    fn malformed_json_is_a_parse_error() {
        assert!(matches!(Scenario::from_json("{"), Err(ScenarioError::Parse(_))));
        assert!(matches!(
            Scenario::from_json(r#"{"seed":1,"horizon":60,"agents":[],"bogus":1}"#),
            Err(ScenarioError::Parse(_))
        ));
    }

    #[test]
    fn empty_workload_stays_idle() {
        let run = run(&tiny(vec![])).unwrap();
        let r = &run.report;
        assert!(r.mode_trace.iter().all(|p| p.mode == Mode::Idle));
        assert_eq!(r.mode_trace.len(), 25);
        // IDLE scanner cadence is 30 min: kicks at 0, 30, 60, 90, 120 min.
        assert_eq!(r.kicks.delivered.get(&Role::Scanner), Some(&5));
        assert!(replay(r, &run.ledger_lines));
        assert!(r.invariants_hold());
    }

    #[test]
    fn poisson_arrivals_are_seeded() {
        let a = Arrival { at: None, poisson_rate: Some(6.0), repo: "r".into(), kind: ItemKind::Pr, title: "p".into(), count: 1 };
        let s = tiny(vec![a]);
        let first = s.arrival_schedule();
        assert_eq!(first, s.arrival_schedule());
        // 6/h over 2 h: expect about 12.
        assert!((4..=24).contains(&first.len()), "{}", first.len());
        let mut other = s.clone();
        other.seed = 2;
        assert_ne!(first, other.arrival_schedule());
    }

    #[test]
    fn tampered_log_fails_replay() {
        let run = run(&tiny(vec![Arrival {
            at: Some(0.0),
            poisson_rate: None,
            repo: "r".into(),
            kind: ItemKind::Issue,
            title: "x".into(),
            count: 3,
        }]))
        .unwrap();
        assert!(replay(&run.report, &run.ledger_lines));
        let mut lines = run.ledger_lines.clone();
        lines.remove(lines.len() / 2);
        assert!(!replay(&run.report, &lines));
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.5), 5.0);
        assert_eq!(percentile(&v, 0.9), 9.0);
        assert_eq!(percentile(&[7.0], 0.9), 7.0);
    }

    #[test]
    fn bundled_scenarios_parse() {
        for (name, _) in bundled() {
            assert!(bundled_scenario(name).is_some(), "{name}");
        }
    }
}
