use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use hive_core::clock::{Clock, Duration, VirtualClock};
use hive_core::fleet::{FleetError, KickResult, SessionState};
use hive_core::governor::Mode;
use hive_core::kernel::{KernelConfig, DEFAULT_PORT};
use hive_core::ledger::{ItemKind, ItemStatus, ListFilter};

fn write(dir: &Path, name: &str, text: &str) {
    let path = dir.join(name);
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    std::fs::write(path, text).unwrap();
}

fn site() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "hive.conf", "AGENTS_CONF=agents.conf\nSIM_SEED=7\n");
    write(
        d,
        "agents.conf",
        "SCANNER_ROLE=scanner\nREVIEWER_ROLE=reviewer\nARCHITECT_ROLE=architect\nOUTREACH_ROLE=outreach\n",
    );
    for agent in ["scanner", "reviewer", "architect", "outreach"] {
        write(d, &format!("policies/{agent}.md"), "do the work\n");
    }
    write(d, "governor.env", "GOVERNOR_TICK_SECS=300\n");
    write(d, "notify.conf", "CHANNEL_LOG_KIND=stdout\nCHANNEL_LOG_MIN_SEVERITY=page\n");
    dir
}

fn config(dir: &Path) -> KernelConfig {
    KernelConfig::load(&dir.join("hive.conf"), &BTreeMap::new()).unwrap()
}

#[test]
fn config_defaults_and_relative_paths() {
    let dir = site();
    let cfg = config(dir.path());
    assert_eq!(cfg.port, DEFAULT_PORT);
    assert_eq!(cfg.agents_conf, dir.path().join("agents.conf"));
    assert_eq!(cfg.ledger_dir, dir.path().join("run/ledger"));
    assert_eq!(cfg.governor_env, Some(dir.path().join("governor.env")));
    assert_eq!(cfg.sim_seed, 7);

    let overrides = BTreeMap::from([("PORT".to_string(), "4100".to_string())]);
    let cfg = KernelConfig::load(&dir.path().join("hive.conf"), &overrides).unwrap();
    assert_eq!(cfg.port, 4100);

    let overrides = BTreeMap::from([("PORT".to_string(), "many".to_string())]);
    let err = KernelConfig::load(&dir.path().join("hive.conf"), &overrides).unwrap_err();
    assert_eq!(err.component, "config");
    assert!(err.to_string().starts_with("[config] PORT"));
}

#[test]
fn missing_policy_file_stops_assembly() {
    let dir = site();
    std::fs::remove_file(dir.path().join("policies/reviewer.md")).unwrap();
    let err = config(dir.path()).assemble(VirtualClock::new().shared()).err().unwrap();
    assert_eq!(err.component, "fleet");
    assert!(err.message.contains("reviewer"), "{err}");
}

#[test]
fn snapshots_are_pushed_every_five_seconds() {
    let dir = site();
    let clock = VirtualClock::new();
    let kernel = config(dir.path()).assemble(clock.shared()).unwrap();
    let pushes = Arc::new(AtomicUsize::new(0));
    let p = pushes.clone();
    kernel.hub().subscribe(move |_| {
        p.fetch_add(1, Ordering::SeqCst);
        true
    });
    kernel.start();
    pushes.store(0, Ordering::SeqCst);
    clock.advance(Duration::from_secs(60)).unwrap();
    let n = pushes.load(Ordering::SeqCst);
    assert!((11..=13).contains(&n), "{n} snapshots in 60 s");
    kernel.shutdown();
}

#[test]
fn mode_change_pushes_a_snapshot_immediately() {
    let dir = site();
    let clock = VirtualClock::new();
    let kernel = config(dir.path()).assemble(clock.shared()).unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let s = seen.clone();
    kernel.hub().subscribe(move |snap| {
        s.lock().unwrap().push((snap.at, snap.governor.mode));
        true
    });
    kernel.start();
    assert_eq!(kernel.snapshot().governor.mode, Mode::Idle);
    for n in 0..25 {
        kernel.ledger().add_item("console", ItemKind::Issue, &format!("bug {n}"), "triage").unwrap();
    }
    clock.advance(Duration::from_secs(300)).unwrap();
    let seen = seen.lock().unwrap();
    let surge: Vec<_> = seen.iter().filter(|(_, m)| *m == Mode::Surge).collect();
    assert!(!surge.is_empty());
    assert_eq!(surge[0].0.as_millis(), 300_000);
    kernel.shutdown();
}

#[test]
fn work_flows_from_ledger_through_sim_agents() {
    let dir = site();
    let clock = VirtualClock::new();
    let kernel = config(dir.path()).assemble(clock.shared()).unwrap();
    for n in 0..4 {
        kernel.ledger().add_item("console", ItemKind::Issue, &format!("bug {n}"), "triage").unwrap();
    }
    kernel.start();
    let busy = kernel.records().into_iter().filter(|r| r.session_state == SessionState::Busy).count();
    assert_eq!(busy, 4);
    assert!(matches!(kernel.manual_kick("scanner"), Ok(KickResult::Skipped { .. })));
    assert!(matches!(kernel.manual_kick("nobody"), Err(FleetError::UnknownAgent(_))));

    clock.advance(Duration::from_secs(3600)).unwrap();
    assert_eq!(kernel.ledger().list(&ListFilter::status(ItemStatus::Done)).len(), 4);
    let ticks = kernel.ticks();
    assert_eq!(ticks.len(), 13);
    assert!(kernel.sparklines("scanner").unwrap().iter().any(|s| s.buckets.iter().any(|&b| b > 0.0)));
    assert!(kernel.sparklines("ghost").is_err());
    kernel.shutdown();
}

#[test]
fn ledger_and_pins_survive_a_restart() {
    let dir = site();
    {
        let clock = VirtualClock::new();
        let kernel = config(dir.path()).assemble(clock.shared()).unwrap();
        kernel.start();
        kernel.ledger().add_item("docs", ItemKind::Pr, "typo", "triage").unwrap();
        let out = kernel.switch_backend("architect", "sim").unwrap();
        assert!(out.pinned);
        assert!(matches!(kernel.switch_backend("architect", "gpt"), Err(FleetError::UnknownBackend(_))));
        kernel.shutdown();
    }
    let clock = VirtualClock::new();
    let kernel = config(dir.path()).assemble(clock.shared()).unwrap();
    assert_eq!(kernel.ledger().state().items.len(), 1);
    let architect = kernel.records().into_iter().find(|r| r.name == "architect").unwrap();
    assert!(architect.pinned);
    assert!(dir.path().join("run/ledger/ledger.events").exists());
}

#[test]
fn governor_env_edits_apply_on_the_next_tick() {
    let dir = site();
    let clock = VirtualClock::new();
    let kernel = config(dir.path()).assemble(clock.shared()).unwrap();
    kernel.start();
    // IDLE outreach runs every 30 minutes by default.
    write(dir.path(), "governor.env", "CADENCE_IDLE_OUTREACH=300\n");
    clock.advance(Duration::from_secs(300)).unwrap();
    let at_300 = kernel.ticks().last().unwrap().clone();
    assert!(at_300.kicks.iter().any(|k| k.agent == "outreach"), "{at_300:?}");
    assert_eq!(clock.now().as_millis(), 300_000);
    kernel.shutdown();
}

#[test]
fn shipped_deploy_config_assembles() {
    let run = tempfile::tempdir().unwrap();
    let conf = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../deploy/hive.conf");
    let overrides = BTreeMap::from([("RUN_DIR".to_string(), run.path().display().to_string())]);
    let cfg = KernelConfig::load(&conf, &overrides).unwrap();
    assert_eq!(cfg.port, DEFAULT_PORT);
    let kernel = cfg.assemble(VirtualClock::new().shared()).unwrap();
    assert_eq!(kernel.records().len(), 4);
    assert_eq!(kernel.snapshot().governor.mode, Mode::Idle);
}
