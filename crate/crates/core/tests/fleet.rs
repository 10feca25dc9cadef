use std::path::PathBuf;
use std::sync::Arc;

use hive_core::clock::{Clock, Duration, Instant, VirtualClock};
use hive_core::events::{EventBus, EventKind, EventRecorder};
use hive_core::fleet::sim::{Fault, FaultKind, SimBackend, SimBehavior};
use hive_core::fleet::{
    AgentSpec, Fleet, FleetConfig, FleetError, KickResult, MemoryHeartbeats, ProcessBackend, SessionState,
};
use hive_core::governor::{KickOrder, Mode, Role};
use hive_core::ledger::{ItemKind, ItemStatus, Ledger, ListFilter};

struct Harness {
    clock: VirtualClock,
    ledger: Arc<Ledger>,
    recorder: Arc<EventRecorder>,
    fleet: Fleet,
    _dir: tempfile::TempDir,
}

fn harness(behavior: SimBehavior) -> Harness {
    let dir = tempfile::tempdir().unwrap();
    let clock = VirtualClock::new();
    let ledger = Arc::new(Ledger::in_memory(clock.shared()));
    let bus = EventBus::new();
    let recorder = EventRecorder::new();
    bus.subscribe(recorder.clone());
    let config = FleetConfig { pins_path: Some(dir.path().join("pins.json")), ..Default::default() };
    let mut fleet = Fleet::new(config, clock.shared(), bus, MemoryHeartbeats::new());
    let sim = SimBackend::new("sim", clock.shared(), Arc::clone(&ledger), 11).with_default_behavior(behavior.clone());
    let alt = SimBackend::new("alt", clock.shared(), Arc::clone(&ledger), 12).with_default_behavior(behavior);
    fleet.register_backend(Arc::new(sim));
    fleet.register_backend(Arc::new(alt));
    let policy = dir.path().join("scanner.md");
    std::fs::write(&policy, "scan things\n").unwrap();
    fleet.add_agent(AgentSpec::new("scanner", Role::Scanner, "sim", policy)).unwrap();
    Harness { clock, ledger, recorder, fleet, _dir: dir }
}

impl Harness {
    fn state(&self) -> SessionState {
        self.fleet.record("scanner").unwrap().session_state
    }

    fn order(&self, id: &str) -> KickOrder {
        KickOrder {
            kick_id: id.into(),
            agent_name: "scanner".into(),
            role: Role::Scanner,
            mode: Mode::Busy,
            queue_snapshot: 12,
            issued_at: self.clock.now(),
        }
    }

    fn advance_polling(&mut self, total: Duration) {
        let steps = total.as_secs() / 10;
        for _ in 0..steps {
            self.clock.advance(Duration::from_secs(10)).unwrap();
            self.fleet.supervisor_poll();
        }
    }

    fn count(&self, pred: impl Fn(&EventKind) -> bool) -> usize {
        self.recorder.count(pred)
    }
}

#[test]
fn spawn_reaches_idle_ready() {
    let mut h = harness(SimBehavior::default());
    let rec = h.fleet.spawn("scanner").unwrap();
    assert_eq!(rec.session_state, SessionState::IdleReady);
    assert_eq!(rec.session_started_at, Some(Instant::EPOCH));
    assert!(matches!(h.fleet.spawn("scanner"), Err(FleetError::Precondition { .. })));
    assert!(matches!(h.fleet.spawn("nobody"), Err(FleetError::UnknownAgent(_))));
}

#[test]
fn missing_policy_blocks_spawn() {
    let mut h = harness(SimBehavior::default());
    h.fleet
        .add_agent(AgentSpec::new("rev", Role::Reviewer, "sim", "/nonexistent/rev.md"))
        .unwrap();
    assert!(matches!(h.fleet.spawn("rev"), Err(FleetError::PolicyMissing(_))));
    assert_eq!(h.fleet.record("rev").unwrap().session_state, SessionState::Stopped);
}

#[test]
fn kick_idle_then_skip_while_busy() {
    let mut h = harness(SimBehavior::default());
    h.ledger.add_item("r", ItemKind::Issue, "one", "seed").unwrap();
    h.fleet.spawn("scanner").unwrap();
    let first = h.fleet.kick(&h.order("k-1")).unwrap();
    assert_eq!(first, KickResult::Delivered { kick_id: "k-1".into() });
    assert_eq!(h.state(), SessionState::Busy);
    let second = h.fleet.kick(&h.order("k-2")).unwrap();
    assert!(matches!(second, KickResult::Skipped { .. }));
    assert_eq!(h.count(|e| matches!(e, EventKind::KickSkipped { .. })), 1);

    h.advance_polling(Duration::from_secs(610));
    assert_eq!(h.state(), SessionState::IdleReady);
    assert_eq!(h.ledger.list(&ListFilter::status(ItemStatus::Done)).len(), 1);
    assert_eq!(h.count(|e| matches!(e, EventKind::KickCompleted { ok: true, .. })), 1);
    assert_eq!(h.count(|e| matches!(e, EventKind::TokensReported { .. })), 1);
}

#[test]
fn manual_kicks_get_their_own_ids() {
    let mut h = harness(SimBehavior::default());
    h.fleet.spawn("scanner").unwrap();
    let r = h.fleet.manual_kick("scanner", Mode::Quiet, 4).unwrap();
    assert_eq!(r, KickResult::Delivered { kick_id: "m-1".into() });
    assert!(matches!(h.fleet.manual_kick("ghost", Mode::Quiet, 4), Err(FleetError::UnknownAgent(_))));
}

#[test]
fn kicking_a_stopped_agent_is_refused() {
    let mut h = harness(SimBehavior::default());
    let err = h.fleet.kick(&h.order("k-1")).unwrap_err();
    assert!(matches!(err, FleetError::AgentUnavailable(SessionState::Stopped)));
}

#[test]
fn crash_is_respawned_and_recovers() {
    let behavior = SimBehavior {
        faults: vec![Fault { session: Some(0), kind: FaultKind::CrashAt { after: Duration::from_secs(30) } }],
        ..Default::default()
    };
    let mut h = harness(behavior);
    h.fleet.spawn("scanner").unwrap();
    h.advance_polling(Duration::from_secs(40));
    let rec = h.fleet.record("scanner").unwrap();
    assert_eq!(rec.respawn_count, 1);
    assert_eq!(rec.session_state, SessionState::IdleReady);
    assert_eq!(h.count(|e| matches!(e, EventKind::Crashed { .. })), 1);
    assert_eq!(h.count(|e| matches!(e, EventKind::Recovered { .. })), 1);
}

#[test]
fn crash_loop_stops_at_the_cap() {
    let behavior = SimBehavior {
        faults: vec![Fault { session: None, kind: FaultKind::CrashAt { after: Duration::from_secs(5) } }],
        ..Default::default()
    };
    let mut h = harness(behavior);
    h.fleet.spawn("scanner").unwrap();
    h.advance_polling(Duration::from_secs(600));
    let rec = h.fleet.record("scanner").unwrap();
    assert_eq!(rec.session_state, SessionState::Failed);
    assert_eq!(rec.respawn_count, 3);
    assert_eq!(h.count(|e| matches!(e, EventKind::Respawned { .. })), 3);
    assert_eq!(h.count(|e| matches!(e, EventKind::RespawnCapReached { .. })), 1);

    h.fleet.reset("scanner").unwrap();
    assert_eq!(h.state(), SessionState::Stopped);
    assert_eq!(h.fleet.record("scanner").unwrap().respawn_count, 0);
}

#[test]
fn stale_heartbeat_triggers_respawn() {
    let behavior = SimBehavior {
        faults: vec![Fault { session: Some(0), kind: FaultKind::StopHeartbeatAt { after: Duration::from_secs(100) } }],
        ..Default::default()
    };
    let mut h = harness(behavior);
    h.fleet.spawn("scanner").unwrap();
    h.clock.advance(Duration::from_secs(1200)).unwrap();
    h.fleet.healthcheck();
    assert_eq!(h.fleet.record("scanner").unwrap().respawn_count, 0);
    h.clock.advance(Duration::from_secs(1200)).unwrap();
    let events = h.fleet.healthcheck();
    assert!(events
        .iter()
        .any(|e| matches!(e.kind, EventKind::Stalled { heartbeat_age_secs, .. } if heartbeat_age_secs == 2340)));
    let rec = h.fleet.record("scanner").unwrap();
    assert_eq!(rec.respawn_count, 1);
    assert_eq!(rec.session_state, SessionState::IdleReady);
    assert_eq!(h.count(|e| matches!(e, EventKind::Recovered { .. })), 1);
}

#[test]
fn hang_at_start_times_out() {
    let behavior = SimBehavior {
        faults: vec![Fault { session: Some(0), kind: FaultKind::HangAtStart }],
        ..Default::default()
    };
    let mut h = harness(behavior);
    assert_eq!(h.fleet.spawn("scanner").unwrap().session_state, SessionState::Starting);
    h.advance_polling(Duration::from_secs(50));
    assert_eq!(h.state(), SessionState::Starting);
    h.advance_polling(Duration::from_secs(10));
    assert_eq!(h.count(|e| matches!(e, EventKind::ReadyTimeout { .. })), 1);
    assert_eq!(h.state(), SessionState::IdleReady);
    assert_eq!(h.fleet.record("scanner").unwrap().respawn_count, 1);
}

#[test]
fn renew_is_accounting_neutral_and_waits_for_busy_agents() {
    let mut h = harness(SimBehavior::default());
    h.ledger.add_item("r", ItemKind::Issue, "one", "seed").unwrap();
    h.fleet.spawn("scanner").unwrap();
    h.fleet.kick(&h.order("k-1")).unwrap();
    h.clock.advance(Duration::from_secs(60)).unwrap();
    h.fleet.renew();
    assert_eq!(h.count(|e| matches!(e, EventKind::Renewed { .. })), 0);
    assert_eq!(h.state(), SessionState::Busy);
    h.advance_polling(Duration::from_secs(600));
    assert_eq!(h.count(|e| matches!(e, EventKind::Renewed { .. })), 1);
    let rec = h.fleet.record("scanner").unwrap();
    assert_eq!(rec.session_state, SessionState::IdleReady);
    assert_eq!(rec.respawn_count, 0);
    assert_eq!(rec.session_started_at, Some(Instant::from_secs(600)));

    h.fleet.renew();
    assert_eq!(h.count(|e| matches!(e, EventKind::Renewed { .. })), 2);
    assert_eq!(h.fleet.record("scanner").unwrap().respawn_count, 0);
}

#[test]
fn switch_backend_pins_and_defers_while_busy() {
    let mut h = harness(SimBehavior::default());
    h.ledger.add_item("r", ItemKind::Issue, "one", "seed").unwrap();
    h.fleet.spawn("scanner").unwrap();
    assert!(matches!(h.fleet.switch_backend("scanner", "nope"), Err(FleetError::UnknownBackend(_))));

    h.fleet.kick(&h.order("k-1")).unwrap();
    let out = h.fleet.switch_backend("scanner", "alt").unwrap();
    assert!(out.deferred && out.pinned);
    assert_eq!(h.state(), SessionState::Busy);
    h.advance_polling(Duration::from_secs(610));
    assert_eq!(h.ledger.list(&ListFilter::status(ItemStatus::Done)).len(), 1);
    assert_eq!(h.count(|e| matches!(e, EventKind::Spawned { backend, .. } if backend == "alt")), 1);

    let pins: serde_json::Value =
        serde_json::from_slice(&std::fs::read(h._dir.path().join("pins.json")).unwrap()).unwrap();
    assert_eq!(pins["scanner"], "alt");

    // A fresh fleet reading the same pin file honours the pin.
    let config = FleetConfig { pins_path: Some(h._dir.path().join("pins.json")), ..Default::default() };
    let mut again = Fleet::new(config, h.clock.shared(), EventBus::new(), MemoryHeartbeats::new());
    again.register_backend(Arc::new(SimBackend::new("sim", h.clock.shared(), h.ledger.clone(), 1)));
    again.register_backend(Arc::new(SimBackend::new("alt", h.clock.shared(), h.ledger.clone(), 1)));
    let rec = again
        .add_agent(AgentSpec::new("scanner", Role::Scanner, "sim", PathBuf::from("x.md")))
        .unwrap();
    assert_eq!(rec.backend_id, "alt");
    assert!(rec.pinned);
}

#[test]
fn self_scheduled_agents_are_not_on_the_roster() {
    let mut h = harness(SimBehavior::default());
    let mut spec = AgentSpec::new("arch", Role::Architect, "sim", "a.md");
    spec.self_scheduled = true;
    h.fleet.add_agent(spec).unwrap();
    let roster = h.fleet.roster();
    assert_eq!(roster.len(), 1);
    assert_eq!(roster[0].name, "scanner");
}

#[test]
fn process_backend_speaks_the_protocol() {
    let dir = tempfile::tempdir().unwrap();
    let policy = dir.path().join("p.md");
    std::fs::write(&policy, "x").unwrap();
    let script = r#"echo '@@READY@@'; while read -r line; do id=$(echo "$line" | cut -d' ' -f2); echo "@@TOKENS 42@@"; echo "@@DONE $id ok@@"; done"#;
    let clock = VirtualClock::new();
    let bus = EventBus::new();
    let recorder = EventRecorder::new();
    bus.subscribe(recorder.clone());
    let mut fleet = Fleet::new(FleetConfig::default(), clock.shared(), bus, MemoryHeartbeats::new());
    fleet.register_backend(Arc::new(ProcessBackend::new("sh", script)));
    fleet.add_agent(AgentSpec::new("outreach", Role::Outreach, "sh", policy)).unwrap();
    fleet.spawn("outreach").unwrap();

    let wait_for = |fleet: &mut Fleet, want: SessionState| {
        for _ in 0..200 {
            fleet.supervisor_poll();
            if fleet.record("outreach").unwrap().session_state == want {
                return;
            }
            std::thread::sleep(std::time::Duration::from_millis(10));
        }
        panic!("agent never reached {want}");
    };
    wait_for(&mut fleet, SessionState::IdleReady);
    fleet.manual_kick("outreach", Mode::Idle, 0).unwrap();
    wait_for(&mut fleet, SessionState::IdleReady);
    assert_eq!(recorder.count(|e| matches!(e, EventKind::KickCompleted { ok: true, .. })), 1);
    assert_eq!(recorder.count(|e| matches!(e, EventKind::TokensReported { tokens: 42, .. })), 1);
    fleet.terminate_all();
    assert_eq!(fleet.record("outreach").unwrap().session_state, SessionState::Stopped);
}
