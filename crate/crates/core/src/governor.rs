//! Adaptive workload governor.
//!
//! Every tick the governor re-reads its env-style config, measures the
//! backlog across managed repos, picks a [`Mode`] from the thresholds and
//! hands out [`KickOrder`]s for each role whose cadence has elapsed. It never
//! touches agent sessions itself; the fleet executes the orders.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::clock::{Duration, Instant};
use crate::events::{EventBus, EventKind, FleetEvent};
use crate::fsutil;
use crate::ledger::{ItemKind, ItemStatus, Ledger, ListFilter};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Mode {
    Idle,
    Quiet,
    Busy,
    Surge,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Surge, Mode::Busy, Mode::Quiet, Mode::Idle];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Surge => "SURGE",
            Mode::Busy => "BUSY",
            Mode::Quiet => "QUIET",
            Mode::Idle => "IDLE",
        }
    }

    fn index(self) -> usize {
        match self {
            Mode::Surge => 0,
            Mode::Busy => 1,
            Mode::Quiet => 2,
            Mode::Idle => 3,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = GovernorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| GovernorError::Config(format!("unknown mode {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Scanner,
    Reviewer,
    Architect,
    Outreach,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Scanner, Role::Reviewer, Role::Architect, Role::Outreach];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Scanner => "scanner",
            Role::Reviewer => "reviewer",
            Role::Architect => "architect",
            Role::Outreach => "outreach",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = GovernorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Role::ALL
            .into_iter()
            .find(|r| r.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| GovernorError::UnknownRole(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cadence {
    Every(Duration),
    Paused,
}

impl Cadence {
    const fn minutes(m: u64) -> Cadence {
        Cadence::Every(Duration::from_secs(m * 60))
    }

    fn parse(value: &str) -> Result<Cadence, GovernorError> {
        let v = value.trim();
        if v.eq_ignore_ascii_case("paused") {
            return Ok(Cadence::Paused);
        }
        match v.parse::<u64>() {
            Ok(secs) if secs > 0 => Ok(Cadence::Every(Duration::from_secs(secs))),
            _ => Err(GovernorError::Config(format!("bad cadence {value:?}"))),
        }
    }
}

/// Kick cadence for every (mode, role) pair. The supervisor role is not in
/// the table; it runs on the fixed governor tick.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CadenceTable([[Cadence; 4]; 4]);

impl Default for CadenceTable {
    fn default() -> Self {
        use Cadence::Paused as P;
        let m = Cadence::minutes;
        // Rows SURGE, BUSY, QUIET, IDLE; columns scanner, reviewer, architect, outreach.
        CadenceTable([
            [m(10), m(10), P, P],
            [m(15), m(15), P, P],
            [m(15), m(30), m(60), m(120)],
            [m(30), m(60), m(30), m(30)],
        ])
    }
}

impl CadenceTable {
    pub fn get(&self, mode: Mode, role: Role) -> Cadence {
        self.0[mode.index()][role.index()]
    }

    pub fn set(&mut self, mode: Mode, role: Role, cadence: Cadence) {
        self.0[mode.index()][role.index()] = cadence;
    }
}

/// Default-table lookup by role name.
pub fn cadence_for(mode: Mode, role: &str) -> Result<Cadence, GovernorError> {
    Ok(CadenceTable::default().get(mode, role.parse()?))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GovernorConfig {
    pub surge_threshold: u64,
    pub busy_threshold: u64,
    pub quiet_threshold: u64,
    pub cadences: CadenceTable,
    pub tick: Duration,
}

impl Default for GovernorConfig {
    fn default() -> Self {
        GovernorConfig {
            surge_threshold: 20,
            busy_threshold: 10,
            quiet_threshold: 2,
            cadences: CadenceTable::default(),
            tick: Duration::from_secs(300),
        }
    }
}

impl GovernorConfig {
    /// Builds a config from `KEY=VALUE` pairs layered over the defaults.
    /// Unknown keys are ignored so the file can be shared with other tools.
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self, GovernorError> {
        let mut cfg = GovernorConfig::default();
        for (key, value) in pairs {
            let num = || {
                value
                    .trim()
                    .parse::<u64>()
                    .map_err(|_| GovernorError::Config(format!("{key}: expected an integer, got {value:?}")))
            };
            match key.as_str() {
                "SURGE_THRESHOLD" => cfg.surge_threshold = num()?,
                "BUSY_THRESHOLD" => cfg.busy_threshold = num()?,
                "QUIET_THRESHOLD" => cfg.quiet_threshold = num()?,
                "GOVERNOR_TICK_SECS" => {
                    let secs = num()?;
                    if secs == 0 {
                        return Err(GovernorError::Config("GOVERNOR_TICK_SECS must be positive".into()));
                    }
                    cfg.tick = Duration::from_secs(secs);
                }
                k if k.starts_with("CADENCE_") => {
                    let rest = &k["CADENCE_".len()..];
                    let (mode, role) = rest
                        .split_once('_')
                        .ok_or_else(|| GovernorError::Config(format!("bad cadence key {k}")))?;
                    let role = role.parse().map_err(|_| GovernorError::Config(format!("{k}: unknown role")))?;
                    cfg.cadences.set(mode.parse()?, role, Cadence::parse(value)?);
                }
                _ => {}
            }
        }
        if !(cfg.quiet_threshold <= cfg.busy_threshold && cfg.busy_threshold <= cfg.surge_threshold) {
            return Err(GovernorError::Config(
                "thresholds must satisfy QUIET <= BUSY <= SURGE".into(),
            ));
        }
        Ok(cfg)
    }

    pub fn from_env_str(text: &str) -> Result<Self, GovernorError> {
        let pairs = fsutil::parse_env_str(text).map_err(|e| GovernorError::Config(e.to_string()))?;
        Self::from_pairs(&pairs)
    }

    pub fn select_mode(&self, queue: u64) -> Mode {
        if queue > self.surge_threshold {
            Mode::Surge
        } else if queue > self.busy_threshold {
            Mode::Busy
        } else if queue > self.quiet_threshold {
            Mode::Quiet
        } else {
            Mode::Idle
        }
    }
}

/// Mode for a queue size under the default thresholds.
pub fn select_mode(queue: u64) -> Mode {
    GovernorConfig::default().select_mode(queue)
}

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum GovernorError {
    #[error("unknown role {0:?}")]
    UnknownRole(String),
    #[error("governor config: {0}")]
    Config(String),
    #[error("backlog source unavailable: {0}")]
    SourceUnavailable(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepoBacklog {
    pub repo: String,
    pub open_issues: u64,
    pub open_prs: u64,
}

/// Adapter yielding per-repo open issue and PR counts.
pub trait BacklogSource: Send + Sync {
    fn backlog(&self) -> Result<Vec<RepoBacklog>, GovernorError>;
}

/// Total open issues plus open PRs across repos.
pub fn measure_backlog(source: &dyn BacklogSource) -> Result<u64, GovernorError> {
    Ok(source.backlog()?.iter().map(|r| r.open_issues + r.open_prs).sum())
}

/// Fixed counts, mainly for tests.
#[derive(Clone, Debug, Default)]
pub struct StaticBacklog(pub Vec<RepoBacklog>);

impl BacklogSource for StaticBacklog {
    fn backlog(&self) -> Result<Vec<RepoBacklog>, GovernorError> {
        Ok(self.0.clone())
    }
}

/// Counts unfinished ledger items (open or in progress) per repo.
/// Skipped and escalated items no longer consume agent time and are excluded.
pub struct LedgerBacklog(pub Arc<Ledger>);

impl BacklogSource for LedgerBacklog {
    fn backlog(&self) -> Result<Vec<RepoBacklog>, GovernorError> {
        let mut per_repo: BTreeMap<String, RepoBacklog> = BTreeMap::new();
        for item in self.0.list(&ListFilter::default()) {
            if !matches!(item.status, ItemStatus::Open | ItemStatus::InProgress) {
                continue;
            }
            let entry = per_repo.entry(item.repo.clone()).or_insert_with(|| RepoBacklog {
                repo: item.repo.clone(),
                open_issues: 0,
                open_prs: 0,
            });
            match item.kind {
                ItemKind::Pr => entry.open_prs += 1,
                ItemKind::Issue | ItemKind::Task => entry.open_issues += 1,
            }
        }
        Ok(per_repo.into_values().collect())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KickOrder {
    pub kick_id: String,
    pub agent_name: String,
    pub role: Role,
    pub mode: Mode,
    pub queue_snapshot: u64,
    pub issued_at: Instant,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GovernorState {
    pub mode: Mode,
    pub queue_size: u64,
    pub repos: Vec<RepoBacklog>,
    pub last_tick: Option<Instant>,
    pub last_kick: BTreeMap<Role, Instant>,
    pub config: GovernorConfig,
}

impl Default for GovernorState {
    fn default() -> Self {
        GovernorState {
            mode: Mode::Idle,
            queue_size: 0,
            repos: Vec::new(),
            last_tick: None,
            last_kick: BTreeMap::new(),
            config: GovernorConfig::default(),
        }
    }
}

/// Agent eligible for governor kicks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RosterEntry {
    pub name: String,
    pub role: Role,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TickOutcome {
    pub mode: Mode,
    pub queue_size: u64,
    pub kicks: Vec<KickOrder>,
}

pub struct Governor {
    state: GovernorState,
    config_path: Option<PathBuf>,
    overrides: BTreeMap<String, String>,
    bus: Option<Arc<EventBus>>,
    next_kick: u64,
}

impl Governor {
    pub fn new(config: GovernorConfig) -> Self {
        Governor {
            state: GovernorState { config, ..Default::default() },
            config_path: None,
            overrides: BTreeMap::new(),
            bus: None,
            next_kick: 0,
        }
    }

    /// Governor whose config is re-read from `path` at the start of every tick.
    pub fn from_file(path: impl Into<PathBuf>) -> Result<Self, GovernorError> {
        let mut gov = Governor::new(GovernorConfig::default());
        gov.config_path = Some(path.into());
        gov.state.config = gov.load_config()?;
        Ok(gov)
    }

    pub fn with_bus(mut self, bus: Arc<EventBus>) -> Self {
        self.bus = Some(bus);
        self
    }

    /// Keys layered on top of the file (or defaults) on every reload.
    pub fn with_overrides(mut self, overrides: BTreeMap<String, String>) -> Result<Self, GovernorError> {
        self.overrides = overrides;
        self.state.config = self.load_config()?;
        Ok(self)
    }

    pub fn state(&self) -> &GovernorState {
        &self.state
    }

    pub fn config(&self) -> &GovernorConfig {
        &self.state.config
    }

    fn load_config(&self) -> Result<GovernorConfig, GovernorError> {
        let mut pairs = match &self.config_path {
            Some(path) => fsutil::read_env_file(path)
                .map_err(|e| GovernorError::Config(format!("{}: {e}", path.display())))?,
            None => BTreeMap::new(),
        };
        pairs.extend(self.overrides.clone());
        GovernorConfig::from_pairs(&pairs)
    }

    /// One governor pass. `roster` lists the agents the governor may kick
    /// (self-scheduled agents are left out by the caller).
    pub fn tick(&mut self, source: &dyn BacklogSource, roster: &[RosterEntry], now: Instant) -> TickOutcome {
        let mut events = Vec::new();

        if self.config_path.is_some() {
            match self.load_config() {
                Ok(cfg) => self.state.config = cfg,
                Err(e) => events.push(EventKind::ConfigError { reason: e.to_string() }),
            }
        }

        match source.backlog() {
            Ok(repos) => {
                let queue = repos.iter().map(|r| r.open_issues + r.open_prs).sum();
                let mode = self.state.config.select_mode(queue);
                if mode != self.state.mode {
                    events.push(EventKind::ModeChanged { from: self.state.mode, to: mode, queue });
                }
                self.state.queue_size = queue;
                self.state.repos = repos;
                self.state.mode = mode;
            }
            Err(e) => events.push(EventKind::DegradedMeasurement { reason: e.to_string() }),
        }

        let mode = self.state.mode;
        let mut kicks = Vec::new();
        for role in Role::ALL {
            let Cadence::Every(period) = self.state.config.cadences.get(mode, role) else {
                continue;
            };
            let due = self.state.last_kick.get(&role).is_none_or(|&last| now - last >= period);
            if !due {
                continue;
            }
            self.state.last_kick.insert(role, now);
            for agent in roster.iter().filter(|a| a.role == role) {
                self.next_kick += 1;
                kicks.push(KickOrder {
                    kick_id: format!("k-{}", self.next_kick),
                    agent_name: agent.name.clone(),
                    role,
                    mode,
                    queue_snapshot: self.state.queue_size,
                    issued_at: now,
                });
            }
        }
        self.state.last_tick = Some(now);

        if let Some(bus) = &self.bus {
            bus.publish_all(events.into_iter().map(|k| FleetEvent::new(now, k)));
        }
        TickOutcome { mode, queue_size: self.state.queue_size, kicks }
    }
}
