//! Agent lifecycles: spawn, ready detection, kicks, crash and heartbeat
//! supervision, capped respawn, planned renewal, and backend switching.
//!
//! The fleet table is owned by one caller at a time (the kernel keeps it
//! behind a mutex). Events are published on the bus and also returned, so a
//! sink must never call back into the fleet.

mod backend;
mod config;
mod protocol;
pub mod sim;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use backend::{
    AgentBackend, BackendError, FileHeartbeats, HeartbeatStore, MemoryHeartbeats, ProcessBackend, Session,
    SessionSpec,
};
pub use config::{AgentSpec, FleetFile};
pub use protocol::{Sentinel, WorkOrder};

use crate::clock::{Duration, Instant, SharedClock};
use crate::events::{EventBus, EventKind, FleetEvent};
use crate::fsutil;
use crate::governor::{KickOrder, Mode, Role, RosterEntry};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FleetConfig {
    pub max_respawns: u32,
    pub heartbeat_stale: Duration,
    pub ready_timeout: Duration,
    /// Read each agent's policy file at every spawn and refuse to start
    /// without it.
    pub verify_policies: bool,
    /// Where backend pins are persisted, if anywhere.
    pub pins_path: Option<PathBuf>,
}

impl Default for FleetConfig {
    fn default() -> Self {
        FleetConfig {
            max_respawns: 3,
            heartbeat_stale: Duration::from_secs(1800),
            ready_timeout: Duration::from_secs(60),
            verify_policies: true,
            pins_path: None,
        }
    }
}

pub const POLL_INTERVAL: Duration = Duration::from_secs(10);
pub const HEALTHCHECK_INTERVAL: Duration = Duration::from_secs(20 * 60);
pub const RENEW_INTERVAL: Duration = Duration::from_secs(6 * 24 * 3600);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Stopped,
    Starting,
    IdleReady,
    Busy,
    Stalled,
    Failed,
}

impl SessionState {
    pub fn as_str(self) -> &'static str {
        match self {
            SessionState::Stopped => "stopped",
            SessionState::Starting => "starting",
            SessionState::IdleReady => "idle_ready",
            SessionState::Busy => "busy",
            SessionState::Stalled => "stalled",
            SessionState::Failed => "failed",
        }
    }
}

impl fmt::Display for SessionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentRecord {
    pub name: String,
    pub role: Role,
    pub backend_id: String,
    pub pinned: bool,
    pub self_scheduled: bool,
    pub session_state: SessionState,
    pub heartbeat_at: Option<Instant>,
    pub respawn_count: u32,
    pub last_kick: Option<Instant>,
    pub policy_path: PathBuf,
    pub session_started_at: Option<Instant>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum KickResult {
    Delivered { kick_id: String },
    Skipped { kick_id: String, reason: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwitchOutcome {
    pub agent: String,
    pub backend_id: String,
    pub pinned: bool,
    pub deferred: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum FleetError {
    #[error("unknown agent {0:?}")]
    UnknownAgent(String),
    #[error("unknown backend {0:?}")]
    UnknownBackend(String),
    #[error("agent {0:?} already exists")]
    DuplicateAgent(String),
    #[error("agent unavailable: {0}")]
    AgentUnavailable(SessionState),
    #[error("cannot spawn {agent}: session is {state}")]
    Precondition { agent: String, state: SessionState },
    #[error("policy file {0} is missing or unreadable")]
    PolicyMissing(PathBuf),
    #[error("kick {kick_id} targets {target}, not {agent}")]
    WrongTarget { kick_id: String, target: String, agent: String },
    #[error("backend: {0}")]
    Backend(#[from] BackendError),
    #[error("pin store: {0}")]
    Pins(#[from] std::io::Error),
}

struct Managed {
    record: AgentRecord,
    session: Option<Box<dyn Session>>,
    current_kick: Option<String>,
    pending_renew: bool,
    pending_switch: bool,
    recovering: bool,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Cause {
    Crash,
    Stall,
    FailedStart,
}

pub struct Fleet {
    config: FleetConfig,
    clock: SharedClock,
    bus: Arc<EventBus>,
    heartbeats: Arc<dyn HeartbeatStore>,
    backends: BTreeMap<String, Arc<dyn AgentBackend>>,
    agents: BTreeMap<String, Managed>,
    manual_kicks: u64,
}

impl Fleet {
    pub fn new(
        config: FleetConfig,
        clock: SharedClock,
        bus: Arc<EventBus>,
        heartbeats: Arc<dyn HeartbeatStore>,
    ) -> Self {
        Fleet {
            config,
            clock,
            bus,
            heartbeats,
            backends: BTreeMap::new(),
            agents: BTreeMap::new(),
            manual_kicks: 0,
        }
    }

    pub fn config(&self) -> &FleetConfig {
        &self.config
    }

    pub fn register_backend(&mut self, backend: Arc<dyn AgentBackend>) {
        self.backends.insert(backend.id().to_string(), backend);
    }

    pub fn backend_ids(&self) -> Vec<String> {
        self.backends.keys().cloned().collect()
    }

    /// Adds an agent in the `stopped` state. A persisted pin overrides the
    /// configured backend.
    pub fn add_agent(&mut self, spec: AgentSpec) -> Result<AgentRecord, FleetError> {
        if self.agents.contains_key(&spec.name) {
            return Err(FleetError::DuplicateAgent(spec.name));
        }
        let pins = self.load_pins()?;
        let (backend_id, pinned) = match pins.get(&spec.name) {
            Some(pin) => (pin.clone(), true),
            None => (spec.backend.clone(), false),
        };
        if !self.backends.contains_key(&backend_id) {
            return Err(FleetError::UnknownBackend(backend_id));
        }
        let record = AgentRecord {
            name: spec.name.clone(),
            role: spec.role,
            backend_id,
            pinned,
            self_scheduled: spec.self_scheduled,
            session_state: SessionState::Stopped,
            heartbeat_at: None,
            respawn_count: 0,
            last_kick: None,
            policy_path: spec.policy,
            session_started_at: None,
        };
        self.agents.insert(
            spec.name,
            Managed {
                record: record.clone(),
                session: None,
                current_kick: None,
                pending_renew: false,
                pending_switch: false,
                recovering: false,
            },
        );
        Ok(record)
    }

    pub fn records(&self) -> Vec<AgentRecord> {
        self.agents.values().map(|m| m.record.clone()).collect()
    }

    pub fn record(&self, name: &str) -> Option<AgentRecord> {
        self.agents.get(name).map(|m| m.record.clone())
    }

    /// Agents the governor may kick; self-scheduled agents drive themselves.
    pub fn roster(&self) -> Vec<RosterEntry> {
        self.agents
            .values()
            .filter(|m| !m.record.self_scheduled)
            .map(|m| RosterEntry { name: m.record.name.clone(), role: m.record.role })
            .collect()
    }

    pub fn spawn(&mut self, name: &str) -> Result<AgentRecord, FleetError> {
        let state = self.managed(name)?.record.session_state;
        if state != SessionState::Stopped {
            return Err(FleetError::Precondition { agent: name.to_string(), state });
        }
        let mut events = Vec::new();
        self.start_session(name, &mut events)?;
        self.publish(events);
        Ok(self.agents[name].record.clone())
    }

    /// Spawns every stopped agent; failures to start feed respawn accounting.
    pub fn spawn_all(&mut self) -> Vec<FleetEvent> {
        let names: Vec<String> = self
            .agents
            .iter()
            .filter(|(_, m)| m.record.session_state == SessionState::Stopped)
            .map(|(n, _)| n.clone())
            .collect();
        let mut events = Vec::new();
        for name in names {
            if let Err(e) = self.start_session(&name, &mut events) {
                tracing::warn!(agent = %name, error = %e, "initial spawn failed");
                if matches!(e, FleetError::Backend(_)) {
                    self.respawn_inner(&name, Cause::FailedStart, &mut events);
                }
            }
        }
        self.publish(events)
    }

    /// Manual reset after a human intervened: clears the respawn counter and
    /// returns a failed agent to `stopped` so it can be spawned again.
    pub fn reset(&mut self, name: &str) -> Result<AgentRecord, FleetError> {
        let m = self.managed_mut(name)?;
        if let Some(mut s) = m.session.take() {
            s.terminate();
        }
        m.record.respawn_count = 0;
        m.record.session_state = SessionState::Stopped;
        m.current_kick = None;
        m.recovering = false;
        Ok(m.record.clone())
    }

    pub fn kick(&mut self, order: &KickOrder) -> Result<KickResult, FleetError> {
        let now = self.clock.now();
        let name = order.agent_name.as_str();
        let m = self.managed_mut(name)?;
        match m.record.session_state {
            SessionState::IdleReady => {}
            SessionState::Busy => {
                self.publish(vec![FleetEvent::new(
                    now,
                    EventKind::KickSkipped { agent: name.into(), kick_id: order.kick_id.clone() },
                )]);
                return Ok(KickResult::Skipped { kick_id: order.kick_id.clone(), reason: "busy".into() });
            }
            state => return Err(FleetError::AgentUnavailable(state)),
        }
        let text = WorkOrder::for_kick(order, m.record.policy_path.clone()).render();
        let session = m.session.as_mut().expect("idle agent has a session");
        if let Err(e) = session.deliver(&text) {
            tracing::warn!(agent = name, error = %e, "work order delivery failed");
            let mut events = vec![FleetEvent::new(now, EventKind::Crashed { agent: name.into() })];
            self.respawn_inner(name, Cause::Crash, &mut events);
            self.publish(events);
            let state = self.agents[name].record.session_state;
            return Err(FleetError::AgentUnavailable(state));
        }
        m.record.session_state = SessionState::Busy;
        m.record.last_kick = Some(now);
        m.current_kick = Some(order.kick_id.clone());
        self.publish(vec![FleetEvent::new(
            now,
            EventKind::KickDelivered { agent: name.into(), kick_id: order.kick_id.clone() },
        )]);
        Ok(KickResult::Delivered { kick_id: order.kick_id.clone() })
    }

    /// Builds a manual kick order (dashboard button or CLI) and delivers it.
    pub fn manual_kick(&mut self, name: &str, mode: Mode, queue: u64) -> Result<KickResult, FleetError> {
        let role = self.managed(name)?.record.role;
        self.manual_kicks += 1;
        let order = KickOrder {
            kick_id: format!("m-{}", self.manual_kicks),
            agent_name: name.to_string(),
            role,
            mode,
            queue_snapshot: queue,
            issued_at: self.clock.now(),
        };
        self.kick(&order)
    }

    /// Ten-second supervisor pass: output sentinels, process death, ready timeouts.
    pub fn supervisor_poll(&mut self) -> Vec<FleetEvent> {
        let now = self.clock.now();
        let mut events = Vec::new();
        let names: Vec<String> = self.agents.keys().cloned().collect();
        for name in names {
            let m = self.agents.get_mut(&name).unwrap();
            let Some(session) = m.session.as_mut() else { continue };
            let lines = session.drain_output();
            let alive = session.is_alive();
            self.handle_output(&name, lines, &mut events);

            let m = self.agents.get_mut(&name).unwrap();
            if m.session.is_none() {
                continue;
            }
            if !alive {
                events.push(FleetEvent::new(now, EventKind::Crashed { agent: name.clone() }));
                self.respawn_inner(&name, Cause::Crash, &mut events);
                continue;
            }
            if m.record.session_state == SessionState::Starting {
                let started = m.record.session_started_at.unwrap_or(now);
                if now - started >= self.config.ready_timeout {
                    events.push(FleetEvent::new(now, EventKind::ReadyTimeout { agent: name.clone() }));
                    self.respawn_inner(&name, Cause::FailedStart, &mut events);
                    continue;
                }
            }
            if let Some(hb) = self.heartbeats.last(&name) {
                m.record.heartbeat_at = Some(hb);
            }
        }
        self.publish(events)
    }

    /// Twenty-minute pass: kill and respawn running agents with stale heartbeats.
    pub fn healthcheck(&mut self) -> Vec<FleetEvent> {
        let now = self.clock.now();
        let mut events = Vec::new();
        let names: Vec<String> = self.agents.keys().cloned().collect();
        for name in names {
            let m = self.agents.get_mut(&name).unwrap();
            if !matches!(
                m.record.session_state,
                SessionState::IdleReady | SessionState::Busy | SessionState::Stalled
            ) {
                continue;
            }
            let last = self.heartbeats.last(&name).or(m.record.heartbeat_at).or(m.record.session_started_at);
            m.record.heartbeat_at = last;
            let age = last.map_or(Duration::MAX, |hb| now - hb);
            if age > self.config.heartbeat_stale {
                m.record.session_state = SessionState::Stalled;
                events.push(FleetEvent::new(
                    now,
                    EventKind::Stalled { agent: name.clone(), heartbeat_age_secs: age.as_secs() },
                ));
                self.respawn_inner(&name, Cause::Stall, &mut events);
            }
        }
        self.publish(events)
    }

    /// Failure-path restart with the respawn cap.
    pub fn respawn(&mut self, name: &str) -> Result<AgentRecord, FleetError> {
        self.managed(name)?;
        let mut events = Vec::new();
        self.respawn_inner(name, Cause::Crash, &mut events);
        self.publish(events);
        Ok(self.agents[name].record.clone())
    }

    /// Planned restart of every idle session; busy agents renew when they
    /// next become idle. Respawn accounting is untouched.
    pub fn renew(&mut self) -> Vec<FleetEvent> {
        let mut events = Vec::new();
        let names: Vec<String> = self.agents.keys().cloned().collect();
        for name in names {
            match self.agents[&name].record.session_state {
                SessionState::IdleReady => self.restart_planned(&name, &mut events),
                SessionState::Busy => self.agents.get_mut(&name).unwrap().pending_renew = true,
                _ => {}
            }
        }
        self.publish(events)
    }

    /// Pins `backend_id` and restarts the agent on it; deferred while busy.
    pub fn switch_backend(&mut self, name: &str, backend_id: &str) -> Result<SwitchOutcome, FleetError> {
        if !self.backends.contains_key(backend_id) {
            return Err(FleetError::UnknownBackend(backend_id.to_string()));
        }
        self.managed(name)?;
        self.save_pin(name, backend_id)?;
        let now = self.clock.now();
        let m = self.agents.get_mut(name).unwrap();
        m.record.backend_id = backend_id.to_string();
        m.record.pinned = true;
        let state = m.record.session_state;
        let deferred = state == SessionState::Busy;
        let mut events = vec![FleetEvent::new(
            now,
            EventKind::BackendSwitched { agent: name.into(), backend: backend_id.into(), deferred },
        )];
        match state {
            SessionState::Busy => m.pending_switch = true,
            SessionState::IdleReady | SessionState::Starting | SessionState::Stalled => {
                self.restart_planned(name, &mut events)
            }
            SessionState::Stopped | SessionState::Failed => {}
        }
        self.publish(events);
        Ok(SwitchOutcome { agent: name.to_string(), backend_id: backend_id.to_string(), pinned: true, deferred })
    }

    /// Terminates every session (shutdown path).
    pub fn terminate_all(&mut self) {
        for m in self.agents.values_mut() {
            if let Some(mut s) = m.session.take() {
                s.terminate();
            }
            if m.record.session_state != SessionState::Failed {
                m.record.session_state = SessionState::Stopped;
            }
            m.current_kick = None;
        }
    }

    fn managed(&self, name: &str) -> Result<&Managed, FleetError> {
        self.agents.get(name).ok_or_else(|| FleetError::UnknownAgent(name.to_string()))
    }

    fn managed_mut(&mut self, name: &str) -> Result<&mut Managed, FleetError> {
        self.agents.get_mut(name).ok_or_else(|| FleetError::UnknownAgent(name.to_string()))
    }

    fn publish(&self, events: Vec<FleetEvent>) -> Vec<FleetEvent> {
        self.bus.publish_all(events.iter().cloned());
        events
    }

    fn handle_output(&mut self, name: &str, lines: Vec<String>, events: &mut Vec<FleetEvent>) {
        let now = self.clock.now();
        for line in lines {
            let Some(sentinel) = Sentinel::parse(&line) else { continue };
            let m = self.agents.get_mut(name).unwrap();
            match sentinel {
                Sentinel::Ready if m.record.session_state == SessionState::Starting => {
                    m.record.session_state = SessionState::IdleReady;
                    events.push(FleetEvent::new(now, EventKind::Ready { agent: name.into() }));
                    if std::mem::take(&mut m.recovering) {
                        events.push(FleetEvent::new(now, EventKind::Recovered { agent: name.into() }));
                    }
                }
                Sentinel::Ready => {}
                Sentinel::Done { kick_id, ok } => {
                    if m.record.session_state != SessionState::Busy || m.current_kick.as_deref() != Some(&kick_id) {
                        continue;
                    }
                    m.record.session_state = SessionState::IdleReady;
                    m.current_kick = None;
                    events.push(FleetEvent::new(
                        now,
                        EventKind::KickCompleted { agent: name.into(), kick_id, ok },
                    ));
                    if m.pending_switch || m.pending_renew {
                        self.restart_planned(name, events);
                        // The restarted session may already have printed its
                        // ready marker; nothing else is left to read.
                        break;
                    }
                }
                Sentinel::Tokens(tokens) => {
                    events.push(FleetEvent::new(now, EventKind::TokensReported { agent: name.into(), tokens }))
                }
            }
        }
    }

    fn read_policy(&self, path: &Path) -> Result<(), FleetError> {
        if self.config.verify_policies {
            std::fs::read(path).map_err(|_| FleetError::PolicyMissing(path.to_path_buf()))?;
        }
        Ok(())
    }

    /// Starts a fresh session regardless of the current state.
    fn start_session(&mut self, name: &str, events: &mut Vec<FleetEvent>) -> Result<(), FleetError> {
        let now = self.clock.now();
        let (backend_id, role, policy) = {
            let r = &self.agents[name].record;
            (r.backend_id.clone(), r.role, r.policy_path.clone())
        };
        self.read_policy(&policy)?;
        let backend = self
            .backends
            .get(&backend_id)
            .cloned()
            .ok_or_else(|| FleetError::UnknownBackend(backend_id.clone()))?;
        self.heartbeats.touch(name, now);
        let session = backend.start(&SessionSpec {
            agent: name,
            role,
            policy_path: &policy,
            heartbeats: Arc::clone(&self.heartbeats),
        })?;
        let m = self.agents.get_mut(name).unwrap();
        m.session = Some(session);
        m.current_kick = None;
        m.pending_renew = false;
        m.pending_switch = false;
        m.record.session_state = SessionState::Starting;
        m.record.session_started_at = Some(now);
        m.record.heartbeat_at = Some(now);
        events.push(FleetEvent::new(now, EventKind::Spawned { agent: name.into(), backend: backend_id }));
        let lines = m.session.as_mut().unwrap().drain_output();
        self.handle_output(name, lines, events);
        Ok(())
    }

    fn terminate_session(&mut self, name: &str) {
        let m = self.agents.get_mut(name).unwrap();
        if let Some(mut s) = m.session.take() {
            s.terminate();
        }
        m.current_kick = None;
    }

    fn restart_planned(&mut self, name: &str, events: &mut Vec<FleetEvent>) {
        let now = self.clock.now();
        self.terminate_session(name);
        events.push(FleetEvent::new(now, EventKind::Renewed { agent: name.into() }));
        if let Err(e) = self.start_session(name, events) {
            tracing::warn!(agent = name, error = %e, "planned restart failed");
            self.respawn_inner(name, Cause::FailedStart, events);
        }
    }

    fn respawn_inner(&mut self, name: &str, cause: Cause, events: &mut Vec<FleetEvent>) {
        let now = self.clock.now();
        loop {
            if self.agents[name].record.session_state == SessionState::Failed {
                return;
            }
            self.terminate_session(name);
            let max = self.config.max_respawns;
            let m = self.agents.get_mut(name).unwrap();
            if m.record.respawn_count >= max {
                m.record.session_state = SessionState::Failed;
                m.recovering = false;
                events.push(FleetEvent::new(
                    now,
                    EventKind::RespawnCapReached { agent: name.into(), respawn_count: m.record.respawn_count },
                ));
                return;
            }
            m.record.respawn_count += 1;
            m.recovering = true;
            let count = m.record.respawn_count;
            tracing::info!(agent = name, count, cause = ?matches!(cause, Cause::Stall), "respawning");
            events.push(FleetEvent::new(now, EventKind::Respawned { agent: name.into(), respawn_count: count }));
            match self.start_session(name, events) {
                Ok(()) => return,
                Err(e) => {
                    tracing::warn!(agent = name, error = %e, "respawn failed to start");
                    self.agents.get_mut(name).unwrap().record.session_state = SessionState::Stopped;
                }
            }
        }
    }

    fn load_pins(&self) -> Result<BTreeMap<String, String>, FleetError> {
        let Some(path) = &self.config.pins_path else { return Ok(BTreeMap::new()) };
        match std::fs::read(path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map_err(|e| FleetError::Pins(std::io::Error::new(std::io::ErrorKind::InvalidData, e))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(BTreeMap::new()),
            Err(e) => Err(e.into()),
        }
    }

    fn save_pin(&self, name: &str, backend_id: &str) -> Result<(), FleetError> {
        let Some(path) = &self.config.pins_path else { return Ok(()) };
        let mut pins = self.load_pins()?;
        pins.insert(name.to_string(), backend_id.to_string());
        let bytes = serde_json::to_vec_pretty(&pins).expect("pins serialize");
        fsutil::write_atomic(path, &bytes)?;
        Ok(())
    }
}

impl Drop for Fleet {
    fn drop(&mut self) {
        self.terminate_all();
    }
}
