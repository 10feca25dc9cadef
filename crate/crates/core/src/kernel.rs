//! The running system: ledger, fleet, governor, tuner, notifier and metrics
//! on one clock, with the supervisor loops registered as timers.
//!
//! Lock order: never hold the governor and fleet locks at the same time.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, Weak};

use serde::Serialize;

use crate::clock::{Duration, Instant, SharedClock, TimerId};
use crate::dashboard::{CoverageSource, Metrics, SnapshotHub, SparklineSeries, StatusSnapshot, UnknownAgent};
use crate::events::{EventBus, FleetEvent};
use crate::fleet::sim::SimBackend;
use crate::fleet::{
    AgentRecord, FileHeartbeats, Fleet, FleetConfig, FleetError, FleetFile, KickResult, ProcessBackend,
    SwitchOutcome, HEALTHCHECK_INTERVAL, POLL_INTERVAL, RENEW_INTERVAL,
};
use crate::governor::{BacklogSource, Governor, KickOrder, LedgerBacklog, Mode, Role};
use crate::ledger::Ledger;
use crate::notifier::{self, Notifier};
use crate::tuner::{Tuner, TUNING_FILE};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum KickOutcome {
    Delivered,
    Skipped,
    Unavailable,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct KickRecord {
    pub kick_id: String,
    pub agent: String,
    pub role: Role,
    pub outcome: KickOutcome,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TickRecord {
    pub at: Instant,
    pub mode: Mode,
    pub queue_size: u64,
    pub kicks: Vec<KickRecord>,
}

pub struct KernelParts {
    pub clock: SharedClock,
    pub bus: Arc<EventBus>,
    pub ledger: Arc<Ledger>,
    pub fleet: Fleet,
    pub governor: Governor,
    pub backlog: Arc<dyn BacklogSource>,
    pub tuner: Arc<Tuner>,
    pub notifier: Arc<Notifier>,
    pub coverage: CoverageSource,
    /// Snapshot push period; `None` disables the timer (batch simulation).
    pub snapshot_every: Option<Duration>,
}

pub struct Kernel {
    clock: SharedClock,
    bus: Arc<EventBus>,
    ledger: Arc<Ledger>,
    fleet: Mutex<Fleet>,
    governor: Mutex<Governor>,
    backlog: Arc<dyn BacklogSource>,
    tuner: Arc<Tuner>,
    notifier: Arc<Notifier>,
    metrics: Arc<Metrics>,
    hub: Arc<SnapshotHub>,
    coverage: CoverageSource,
    snapshot_every: Option<Duration>,
    ticks: Mutex<Vec<TickRecord>>,
    timers: Mutex<Vec<TimerId>>,
}

impl Kernel {
    pub fn new(parts: KernelParts) -> Arc<Kernel> {
        let metrics = Metrics::new();
        for r in parts.fleet.records() {
            metrics.register_agent(&r.name);
        }
        parts.bus.subscribe(parts.notifier.clone());
        parts.bus.subscribe(metrics.clone());
        Arc::new(Kernel {
            clock: parts.clock,
            bus: parts.bus,
            ledger: parts.ledger,
            fleet: Mutex::new(parts.fleet),
            governor: Mutex::new(parts.governor),
            backlog: parts.backlog,
            tuner: parts.tuner,
            notifier: parts.notifier,
            metrics,
            hub: SnapshotHub::new(),
            coverage: parts.coverage,
            snapshot_every: parts.snapshot_every,
            ticks: Mutex::new(Vec::new()),
            timers: Mutex::new(Vec::new()),
        })
    }

    /// Spawns every agent, runs the first governor tick now, then registers
    /// the periodic loops: 10 s poll, governor tick, 20 min healthcheck,
    /// 6 day renewal, and the snapshot push.
    pub fn start(self: &Arc<Self>) -> Vec<FleetEvent> {
        let events = self.fleet.lock().unwrap().spawn_all();
        self.governor_tick();
        self.publish_snapshot();
        let tick = self.governor.lock().unwrap().config().tick;
        let mut timers = self.timers.lock().unwrap();
        timers.push(self.every(POLL_INTERVAL, |k| k.poll()));
        timers.push(self.every(tick, |k| {
            k.governor_tick();
        }));
        timers.push(self.every(HEALTHCHECK_INTERVAL, |k| k.healthcheck()));
        timers.push(self.every(RENEW_INTERVAL, |k| k.renew()));
        if let Some(period) = self.snapshot_every {
            timers.push(self.every(period, |k| k.publish_snapshot()));
        }
        events
    }

    fn every(self: &Arc<Self>, period: Duration, f: impl Fn(&Kernel) + Send + 'static) -> TimerId {
        let weak: Weak<Kernel> = Arc::downgrade(self);
        self.clock.schedule_every(
            period,
            Box::new(move |_| {
                if let Some(k) = weak.upgrade() {
                    f(&k);
                }
            }),
        )
    }

    /// Cancels the loops, terminates sessions, flushes the ledger and the
    /// notification queue.
    pub fn shutdown(&self) {
        for id in self.timers.lock().unwrap().drain(..) {
            self.clock.cancel(id);
        }
        self.fleet.lock().unwrap().terminate_all();
        if let Err(e) = self.ledger.flush() {
            tracing::error!(error = %e, "ledger flush failed during shutdown");
        }
        self.notifier.flush();
    }

    pub fn governor_tick(&self) -> TickRecord {
        let now = self.clock.now();
        let roster = self.fleet.lock().unwrap().roster();
        let (previous, outcome) = {
            let mut gov = self.governor.lock().unwrap();
            let previous = gov.state().last_tick.map(|_| gov.state().mode);
            (previous, gov.tick(self.backlog.as_ref(), &roster, now))
        };
        let mut kicks = Vec::with_capacity(outcome.kicks.len());
        for order in &outcome.kicks {
            kicks.push(self.deliver(order));
        }
        let record = TickRecord { at: now, mode: outcome.mode, queue_size: outcome.queue_size, kicks };
        self.ticks.lock().unwrap().push(record.clone());
        if previous.is_some_and(|m| m != outcome.mode) {
            self.publish_snapshot();
        }
        record
    }

    fn deliver(&self, order: &KickOrder) -> KickRecord {
        let result = self.fleet.lock().unwrap().kick(order);
        let outcome = match result {
            Ok(KickResult::Delivered { .. }) => KickOutcome::Delivered,
            Ok(KickResult::Skipped { .. }) => KickOutcome::Skipped,
            Err(e) => {
                tracing::debug!(agent = %order.agent_name, error = %e, "kick not delivered");
                KickOutcome::Unavailable
            }
        };
        KickRecord { kick_id: order.kick_id.clone(), agent: order.agent_name.clone(), role: order.role, outcome }
    }

    pub fn poll(&self) {
        self.fleet.lock().unwrap().supervisor_poll();
    }

    pub fn healthcheck(&self) {
        self.fleet.lock().unwrap().healthcheck();
    }

    pub fn renew(&self) {
        self.fleet.lock().unwrap().renew();
    }

    pub fn manual_kick(&self, agent: &str) -> Result<KickResult, FleetError> {
        let (mode, queue) = {
            let gov = self.governor.lock().unwrap();
            (gov.state().mode, gov.state().queue_size)
        };
        self.fleet.lock().unwrap().manual_kick(agent, mode, queue)
    }

    pub fn switch_backend(&self, agent: &str, backend_id: &str) -> Result<SwitchOutcome, FleetError> {
        self.fleet.lock().unwrap().switch_backend(agent, backend_id)
    }

    pub fn snapshot(&self) -> StatusSnapshot {
        let now = self.clock.now();
        let gov = self.governor.lock().unwrap().state().clone();
        let agents = self.fleet.lock().unwrap().records();
        StatusSnapshot::build(now, &gov, &agents, self.coverage.read(), self.metrics.intensity(now))
    }

    pub fn publish_snapshot(&self) {
        self.hub.publish(self.snapshot());
    }

    pub fn sparklines(&self, agent: &str) -> Result<Vec<SparklineSeries>, UnknownAgent> {
        self.metrics.series(agent, self.clock.now())
    }

    pub fn records(&self) -> Vec<AgentRecord> {
        self.fleet.lock().unwrap().records()
    }

    pub fn backend_ids(&self) -> Vec<String> {
        self.fleet.lock().unwrap().backend_ids()
    }

    pub fn ticks(&self) -> Vec<TickRecord> {
        self.ticks.lock().unwrap().clone()
    }

    pub fn clock(&self) -> &SharedClock {
        &self.clock
    }

    pub fn bus(&self) -> &Arc<EventBus> {
        &self.bus
    }

    pub fn ledger(&self) -> &Arc<Ledger> {
        &self.ledger
    }

    pub fn tuner(&self) -> &Arc<Tuner> {
        &self.tuner
    }

    pub fn notifier(&self) -> &Arc<Notifier> {
        &self.notifier
    }

    pub fn metrics(&self) -> &Arc<Metrics> {
        &self.metrics
    }

    pub fn hub(&self) -> &Arc<SnapshotHub> {
        &self.hub
    }
}

/// Settings from `hive.conf`. Relative paths resolve against the file's
/// directory.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelConfig {
    pub agents_conf: PathBuf,
    pub governor_env: Option<PathBuf>,
    pub notify_conf: Option<PathBuf>,
    pub policies_dir: PathBuf,
    pub run_dir: PathBuf,
    pub ledger_dir: PathBuf,
    pub port: u16,
    pub coverage_file: Option<PathBuf>,
    pub coverage_target: f64,
    pub sim_seed: u64,
}

pub const DEFAULT_PORT: u16 = 3001;

#[derive(Debug, thiserror::Error)]
#[error("[{component}] {message}")]
pub struct StartupError {
    pub component: &'static str,
    pub message: String,
}

impl StartupError {
    fn new(component: &'static str, message: impl Into<String>) -> Self {
        StartupError { component, message: message.into() }
    }
}

impl KernelConfig {
    /// Reads `path`, then applies `overrides` (same keys) on top.
    pub fn load(path: &Path, overrides: &BTreeMap<String, String>) -> Result<Self, StartupError> {
        let mut pairs = crate::fsutil::read_env_file(path)
            .map_err(|e| StartupError::new("config", format!("{}: {e}", path.display())))?;
        pairs.extend(overrides.clone());
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_pairs(&pairs, base)
    }

    pub fn from_pairs(pairs: &BTreeMap<String, String>, base: &Path) -> Result<Self, StartupError> {
        let path = |key: &str, default: &str| base.join(pairs.get(key).map(String::as_str).unwrap_or(default));
        let explicit = |key: &str| pairs.get(key).filter(|v| !v.trim().is_empty()).map(|v| base.join(v));
        let bad = |key: &str, v: &str| StartupError::new("config", format!("{key}: invalid value {v:?}"));

        let run_dir = path("RUN_DIR", "run");
        let ledger_dir = match explicit("LEDGER_DIR") {
            Some(p) => p,
            None => run_dir.join("ledger"),
        };
        let port = match pairs.get("PORT") {
            Some(v) => v.trim().parse().map_err(|_| bad("PORT", v))?,
            None => DEFAULT_PORT,
        };
        let coverage_target = match pairs.get("COVERAGE_TARGET") {
            Some(v) => v.trim().trim_end_matches('%').parse().map_err(|_| bad("COVERAGE_TARGET", v))?,
            None => 80.0,
        };
        let sim_seed = match pairs.get("SIM_SEED") {
            Some(v) => v.trim().parse().map_err(|_| bad("SIM_SEED", v))?,
            None => 0,
        };
        let optional = |key: &str, default: &str| -> Result<Option<PathBuf>, StartupError> {
            match explicit(key) {
                Some(p) if p.exists() => Ok(Some(p)),
                Some(p) => Err(StartupError::new("config", format!("{key}: {} does not exist", p.display()))),
                None => {
                    let p = base.join(default);
                    Ok(p.exists().then_some(p))
                }
            }
        };
        let cfg = KernelConfig {
            agents_conf: path("AGENTS_CONF", "agents.conf"),
            governor_env: optional("GOVERNOR_ENV", "governor.env")?,
            notify_conf: optional("NOTIFY_CONF", "notify.conf")?,
            policies_dir: path("POLICIES_DIR", "policies"),
            run_dir,
            ledger_dir,
            port,
            coverage_file: explicit("COVERAGE_FILE"),
            coverage_target,
            sim_seed,
        };
        if !cfg.agents_conf.exists() {
            return Err(StartupError::new("config", format!("{} does not exist", cfg.agents_conf.display())));
        }
        Ok(cfg)
    }

    /// Builds a kernel from the files this config points at. Nothing is
    /// started; every referenced policy file is checked first.
    pub fn assemble(&self, clock: SharedClock) -> Result<Arc<Kernel>, StartupError> {
        let fleet_file = FleetFile::load(&self.agents_conf, &self.policies_dir)
            .map_err(|e| StartupError::new("fleet", e))?;
        for agent in &fleet_file.agents {
            if std::fs::metadata(&agent.policy).is_err() {
                return Err(StartupError::new(
                    "fleet",
                    format!("policy file {} for agent {} is missing", agent.policy.display(), agent.name),
                ));
            }
        }
        std::fs::create_dir_all(&self.run_dir)
            .map_err(|e| StartupError::new("config", format!("{}: {e}", self.run_dir.display())))?;

        let bus = EventBus::new();
        let ledger = Arc::new(
            Ledger::open(&self.ledger_dir, clock.clone())
                .map_err(|e| StartupError::new("ledger", e.to_string()))?
                .with_bus(bus.clone()),
        );
        let governor = match &self.governor_env {
            Some(p) => Governor::from_file(p).map_err(|e| StartupError::new("governor", e.to_string()))?,
            None => Governor::new(Default::default()),
        }
        .with_bus(bus.clone());
        let tuner = Arc::new(
            Tuner::open(self.run_dir.join(TUNING_FILE), clock.clone())
                .map_err(|e| StartupError::new("tuner", e.to_string()))?,
        );
        let channels = match &self.notify_conf {
            Some(p) => notifier::load_channels(p).map_err(|e| StartupError::new("notifier", e))?,
            None => vec![notifier::ChannelConfig::stdout()],
        };
        let notifier = Arc::new(Notifier::new(clock.clone(), channels).start_background());

        let heartbeats = FileHeartbeats::new(self.run_dir.join("heartbeats"))
            .map_err(|e| StartupError::new("fleet", e.to_string()))?;
        let mut fleet_config = FleetConfig { pins_path: Some(self.run_dir.join("pins.json")), ..Default::default() };
        fleet_file.apply_to(&mut fleet_config);
        let mut fleet = Fleet::new(fleet_config, clock.clone(), bus.clone(), heartbeats);
        fleet.register_backend(Arc::new(
            SimBackend::new("sim", clock.clone(), ledger.clone(), self.sim_seed).with_policy(tuner.clone()),
        ));
        for (id, cmd) in &fleet_file.backend_commands {
            fleet.register_backend(Arc::new(ProcessBackend::new(id.clone(), cmd.clone())));
        }
        for spec in fleet_file.agents {
            fleet.add_agent(spec).map_err(|e| StartupError::new("fleet", e.to_string()))?;
        }

        Ok(Kernel::new(KernelParts {
            clock,
            bus,
            backlog: Arc::new(LedgerBacklog(ledger.clone())),
            ledger,
            fleet,
            governor,
            tuner,
            notifier,
            coverage: CoverageSource { file: self.coverage_file.clone(), target_pct: self.coverage_target },
            snapshot_every: Some(crate::dashboard::SNAPSHOT_EVERY),
        }))
    }
}
