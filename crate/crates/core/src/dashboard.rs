//! Data behind the live dashboard: status snapshots, 24-hour sparklines,
//! the token burn meter, and the fan-out hub that streams snapshots.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::clock::{Duration, Instant};
use crate::events::{EventKind, EventSink, FleetEvent};
use crate::fleet::{AgentRecord, SessionState};
use crate::governor::{GovernorState, Mode, RepoBacklog, Role};

pub const BUCKET: Duration = Duration::from_secs(300);
pub const BUCKETS_PER_DAY: usize = 288;
pub const WINDOW: Duration = Duration::from_secs(24 * 3600);
pub const RECENT_WINDOW: Duration = Duration::from_secs(15 * 60);
pub const TRAILING_WINDOW: Duration = Duration::from_secs(24 * 3600);
pub const SNAPSHOT_EVERY: Duration = Duration::from_secs(5);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GovernorView {
    pub mode: Mode,
    pub queue_size: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentView {
    pub name: String,
    pub role: Role,
    pub backend_id: String,
    pub pinned: bool,
    pub session_state: SessionState,
    /// Seconds since the last heartbeat, when one was ever seen.
    pub heartbeat_age: Option<u64>,
    pub respawn_count: u32,
    pub last_kick: Option<Instant>,
}

impl AgentView {
    pub fn from_record(r: &AgentRecord, now: Instant) -> Self {
        AgentView {
            name: r.name.clone(),
            role: r.role,
            backend_id: r.backend_id.clone(),
            pinned: r.pinned,
            session_state: r.session_state,
            heartbeat_age: r.heartbeat_at.map(|hb| now.saturating_since(hb).as_secs()),
            respawn_count: r.respawn_count,
            last_kick: r.last_kick,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub current_pct: Option<f64>,
    pub target_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatusSnapshot {
    pub at: Instant,
    pub governor: GovernorView,
    pub repos: Vec<RepoBacklog>,
    pub agents: Vec<AgentView>,
    pub coverage: Coverage,
    pub intensity: f64,
}

impl StatusSnapshot {
    pub fn build(
        now: Instant,
        governor: &GovernorState,
        agents: &[AgentRecord],
        coverage: Coverage,
        intensity: f64,
    ) -> Self {
        StatusSnapshot {
            at: now,
            governor: GovernorView { mode: governor.mode, queue_size: governor.queue_size },
            repos: governor.repos.clone(),
            agents: agents.iter().map(|r| AgentView::from_record(r, now)).collect(),
            coverage,
            intensity,
        }
    }
}

/// `coverage.txt` holds a single percentage, optionally with a `%` sign.
#[derive(Clone, Debug, Default)]
pub struct CoverageSource {
    pub file: Option<PathBuf>,
    pub target_pct: f64,
}

impl CoverageSource {
    pub fn read(&self) -> Coverage {
        let current_pct = self.file.as_ref().and_then(|p| {
            let text = std::fs::read_to_string(p).ok()?;
            text.trim().trim_end_matches('%').trim().parse::<f64>().ok()
        });
        Coverage { current_pct, target_pct: self.target_pct }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    BusySeconds,
    Restarts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparklineSeries {
    pub agent: String,
    pub metric: Metric,
    /// Start of the oldest bucket.
    pub start: Instant,
    pub bucket_secs: u64,
    pub buckets: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Bucket {
    busy_seconds: f64,
    restarts: f64,
}

fn bucket_index(at: Instant) -> u64 {
    at.as_millis() / BUCKET.as_millis() as u64
}

/// Per-agent 5-minute buckets over a rolling 24 hours.
#[derive(Debug, Default)]
pub struct SparklineStore {
    agents: BTreeMap<String, BTreeMap<u64, Bucket>>,
}

impl SparklineStore {
    fn add(&mut self, agent: &str, at: Instant, f: impl FnOnce(&mut Bucket)) {
        let idx = bucket_index(at);
        let series = self.agents.entry(agent.to_string()).or_default();
        f(series.entry(idx).or_default());
        Self::evict(series, idx);
    }

    fn evict(series: &mut BTreeMap<u64, Bucket>, current: u64) {
        let oldest = (current + 1).saturating_sub(BUCKETS_PER_DAY as u64);
        series.retain(|&i, _| i >= oldest);
    }

    pub fn add_busy(&mut self, agent: &str, at: Instant, secs: f64) {
        self.add(agent, at, |b| b.busy_seconds += secs);
    }

    /// Splits a busy interval over the buckets it spans.
    pub fn add_busy_interval(&mut self, agent: &str, from: Instant, to: Instant) {
        let mut t = from;
        while t < to {
            let next = Instant::from_millis((bucket_index(t) + 1) * BUCKET.as_millis() as u64);
            let end = next.min(to);
            self.add_busy(agent, t, (end - t).as_secs_f64());
            t = end;
        }
    }

    pub fn add_restarts(&mut self, agent: &str, at: Instant, n: u64) {
        self.add(agent, at, |b| b.restarts += n as f64);
    }

    /// Buckets currently held for `agent` (at most 288).
    pub fn stored_buckets(&self, agent: &str) -> usize {
        self.agents.get(agent).map_or(0, |s| s.len())
    }

    /// The 288 buckets ending with the one containing `now`.
    pub fn series(&self, agent: &str, metric: Metric, now: Instant) -> SparklineSeries {
        let current = bucket_index(now) as i64;
        let first = current + 1 - BUCKETS_PER_DAY as i64;
        let empty = BTreeMap::new();
        let stored = self.agents.get(agent).unwrap_or(&empty);
        let buckets = (first..=current)
            .map(|i| {
                let b = u64::try_from(i).ok().and_then(|i| stored.get(&i)).copied().unwrap_or_default();
                match metric {
                    Metric::BusySeconds => b.busy_seconds,
                    Metric::Restarts => b.restarts,
                }
            })
            .collect();
        SparklineSeries {
            agent: agent.to_string(),
            metric,
            start: Instant::from_millis(first.max(0) as u64 * BUCKET.as_millis() as u64),
            bucket_secs: BUCKET.as_secs(),
            buckets,
        }
    }
}

/// Reported token counts with timestamps, kept for the trailing window.
#[derive(Debug, Default)]
pub struct TokenMeter {
    samples: VecDeque<(Instant, u64)>,
}

impl TokenMeter {
    pub fn record(&mut self, at: Instant, tokens: u64) {
        let pos = self.samples.partition_point(|(t, _)| *t <= at);
        self.samples.insert(pos, (at, tokens));
        while let Some(&(t, _)) = self.samples.front() {
            if at.saturating_since(t) > TRAILING_WINDOW {
                self.samples.pop_front();
            } else {
                break;
            }
        }
    }

    fn per_minute(&self, now: Instant, window: Duration) -> f64 {
        let total: u64 = self
            .samples
            .iter()
            .filter(|(t, _)| *t <= now && now.saturating_since(*t) < window)
            .map(|(_, n)| n)
            .sum();
        total as f64 / (window.as_secs_f64() / 60.0)
    }

    pub fn recent_rate(&self, now: Instant) -> f64 {
        self.per_minute(now, RECENT_WINDOW)
    }

    pub fn trailing_rate(&self, now: Instant) -> f64 {
        self.per_minute(now, TRAILING_WINDOW)
    }
}

/// Recent over trailing burn rate; 1.0 without a trailing baseline.
pub fn compute_intensity(meter: &TokenMeter, now: Instant) -> f64 {
    intensity_from_rates(meter.recent_rate(now), meter.trailing_rate(now))
}

pub fn intensity_from_rates(recent: f64, trailing: f64) -> f64 {
    if trailing <= 0.0 {
        1.0
    } else {
        recent / trailing
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsSample {
    pub busy_seconds: Option<f64>,
    pub restarts: Option<u64>,
    pub tokens: Option<u64>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("unknown agent {0:?}")]
pub struct UnknownAgent(pub String);

#[derive(Default)]
struct MetricsInner {
    agents: BTreeSet<String>,
    sparklines: SparklineStore,
    tokens: TokenMeter,
    busy_since: BTreeMap<String, Instant>,
}

/// Sparklines and token meter, fed by fleet events or explicit samples.
#[derive(Default)]
pub struct Metrics {
    inner: Mutex<MetricsInner>,
}

impl Metrics {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn register_agent(&self, name: &str) {
        self.inner.lock().unwrap().agents.insert(name.to_string());
    }

    pub fn record_metrics(&self, agent: &str, sample: MetricsSample, at: Instant) -> Result<(), UnknownAgent> {
        let mut inner = self.inner.lock().unwrap();
        if !inner.agents.contains(agent) {
            return Err(UnknownAgent(agent.to_string()));
        }
        if let Some(s) = sample.busy_seconds {
            inner.sparklines.add_busy(agent, at, s);
        }
        if let Some(n) = sample.restarts {
            inner.sparklines.add_restarts(agent, at, n);
        }
        if let Some(t) = sample.tokens {
            inner.tokens.record(at, t);
        }
        Ok(())
    }

    pub fn series(&self, agent: &str, now: Instant) -> Result<Vec<SparklineSeries>, UnknownAgent> {
        let inner = self.inner.lock().unwrap();
        if !inner.agents.contains(agent) {
            return Err(UnknownAgent(agent.to_string()));
        }
        Ok([Metric::BusySeconds, Metric::Restarts]
            .into_iter()
            .map(|m| inner.sparklines.series(agent, m, now))
            .collect())
    }

    pub fn stored_buckets(&self, agent: &str) -> usize {
        self.inner.lock().unwrap().sparklines.stored_buckets(agent)
    }

    pub fn intensity(&self, now: Instant) -> f64 {
        compute_intensity(&self.inner.lock().unwrap().tokens, now)
    }

    fn end_busy(inner: &mut MetricsInner, agent: &str, at: Instant) {
        if let Some(since) = inner.busy_since.remove(agent) {
            inner.sparklines.add_busy_interval(agent, since, at);
        }
    }
}

impl EventSink for Metrics {
    fn on_event(&self, event: &FleetEvent) {
        let mut inner = self.inner.lock().unwrap();
        let at = event.at;
        match &event.kind {
            EventKind::KickDelivered { agent, .. } => {
                inner.busy_since.insert(agent.clone(), at);
            }
            EventKind::KickCompleted { agent, .. }
            | EventKind::Crashed { agent }
            | EventKind::Stalled { agent, .. }
            | EventKind::Renewed { agent }
            | EventKind::RespawnCapReached { agent, .. } => Self::end_busy(&mut inner, agent, at),
            EventKind::Respawned { agent, .. } => {
                Self::end_busy(&mut inner, agent, at);
                inner.sparklines.add_restarts(agent, at, 1);
            }
            EventKind::TokensReported { tokens, .. } => inner.tokens.record(at, *tokens),
            _ => {}
        }
    }
}

/// When to push a snapshot: every 5 s, and immediately on a mode change.
#[derive(Debug, Default)]
pub struct SnapshotCadence {
    last: Option<(Instant, Mode)>,
}

impl SnapshotCadence {
    pub fn due(&mut self, now: Instant, mode: Mode) -> bool {
        let due = match self.last {
            None => true,
            Some((at, m)) => m != mode || now.saturating_since(at) >= SNAPSHOT_EVERY,
        };
        if due {
            self.last = Some((now, mode));
        }
        due
    }
}

type Subscriber = Box<dyn Fn(&Arc<StatusSnapshot>) -> bool + Send + Sync>;

/// Latest snapshot plus subscribers. A subscriber returning false is dropped
/// (its client went away).
#[derive(Default)]
pub struct SnapshotHub {
    latest: Mutex<Option<Arc<StatusSnapshot>>>,
    subscribers: Mutex<Vec<Subscriber>>,
}

impl SnapshotHub {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn subscribe(&self, f: impl Fn(&Arc<StatusSnapshot>) -> bool + Send + Sync + 'static) {
        self.subscribers.lock().unwrap().push(Box::new(f));
    }

    pub fn publish(&self, snapshot: StatusSnapshot) {
        let snap = Arc::new(snapshot);
        *self.latest.lock().unwrap() = Some(Arc::clone(&snap));
        self.subscribers.lock().unwrap().retain(|f| f(&snap));
    }

    pub fn latest(&self) -> Option<Arc<StatusSnapshot>> {
        self.latest.lock().unwrap().clone()
    }

    pub fn subscriber_count(&self) -> usize {
        self.subscribers.lock().unwrap().len()
    }
}
