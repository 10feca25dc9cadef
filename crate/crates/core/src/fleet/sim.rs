//! In-process simulated agent backend.
//!
//! A simulated session works the shared ledger the way a real agent would:
//! on each kick it resumes its own in-progress items, claims open ones up
//! to `items_per_kick`, holds each for `service_time`, then completes it or
//! records a failed attempt. All timing runs on the injected clock, so the
//! same backend drives deterministic simulations and a live supervisor.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backend::{AgentBackend, BackendError, HeartbeatStore, Session, SessionSpec};
use super::protocol::{Sentinel, WorkOrder};
use crate::clock::{Duration, Instant, SharedClock, TimerId};
use crate::ledger::{ItemStatus, Ledger, LedgerError, ListFilter, WorkItem};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimBehavior {
    #[serde(with = "secs")]
    pub service_time: Duration,
    pub success_probability: f64,
    pub items_per_kick: u32,
    #[serde(with = "secs")]
    pub heartbeat_every: Duration,
    pub tokens_per_item: u64,
    pub success_overrides: Vec<SuccessOverride>,
    pub faults: Vec<Fault>,
}

impl Default for SimBehavior {
    fn default() -> Self {
        SimBehavior {
            service_time: Duration::from_secs(600),
            success_probability: 1.0,
            items_per_kick: 1,
            heartbeat_every: Duration::from_secs(60),
            tokens_per_item: 1000,
            success_overrides: Vec::new(),
            faults: Vec::new(),
        }
    }
}

impl SimBehavior {
    fn success_probability_for(&self, item: &WorkItem) -> f64 {
        self.success_overrides
            .iter()
            .find(|o| item.title.contains(&o.title_contains))
            .map_or(self.success_probability, |o| o.p)
    }
}

/// Success probability for items whose title contains `title_contains`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuccessOverride {
    pub title_contains: String,
    pub p: f64,
}

/// A fault injected into the `session`-th start of an agent (0-based), or
/// into every start when `session` is absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fault {
    #[serde(default)]
    pub session: Option<u32>,
    #[serde(flatten)]
    pub kind: FaultKind,
}

/// Offsets are relative to session start.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "fault", rename_all = "snake_case")]
pub enum FaultKind {
    /// Never prints the ready marker and never heartbeats.
    HangAtStart,
    /// Process exits at the offset.
    CrashAt {
        #[serde(with = "secs")]
        after: Duration,
    },
    /// Session wedges at the offset: heartbeats stop and work halts.
    StopHeartbeatAt {
        #[serde(with = "secs")]
        after: Duration,
    },
}

pub(crate) mod secs {
    use super::Duration;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        if !(v.is_finite() && v >= 0.0) {
            return Err(serde::de::Error::custom("duration must be a non-negative number of seconds"));
        }
        Ok(Duration::from_secs_f64(v))
    }
}

/// Lets the embedding kernel steer which items simulated agents take and
/// observe their outcomes (for example to feed acceptance tuning).
pub trait WorkPolicy: Send + Sync {
    fn eligible(&self, _item: &WorkItem) -> bool {
        true
    }
    fn on_outcome(&self, _item: &WorkItem, _success: bool) {}
}

struct AcceptAll;
impl WorkPolicy for AcceptAll {}

pub struct SimBackend {
    id: String,
    clock: SharedClock,
    ledger: Arc<Ledger>,
    seed: u64,
    default_behavior: SimBehavior,
    behaviors: BTreeMap<String, SimBehavior>,
    policy: Arc<dyn WorkPolicy>,
    starts: Mutex<BTreeMap<String, u32>>,
}

impl SimBackend {
    pub fn new(id: impl Into<String>, clock: SharedClock, ledger: Arc<Ledger>, seed: u64) -> Self {
        SimBackend {
            id: id.into(),
            clock,
            ledger,
            seed,
            default_behavior: SimBehavior::default(),
            behaviors: BTreeMap::new(),
            policy: Arc::new(AcceptAll),
            starts: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn with_default_behavior(mut self, behavior: SimBehavior) -> Self {
        self.default_behavior = behavior;
        self
    }

    pub fn with_behavior(mut self, agent: impl Into<String>, behavior: SimBehavior) -> Self {
        self.behaviors.insert(agent.into(), behavior);
        self
    }

    pub fn with_policy(mut self, policy: Arc<dyn WorkPolicy>) -> Self {
        self.policy = policy;
        self
    }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl AgentBackend for SimBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn start(&self, spec: &SessionSpec<'_>) -> Result<Box<dyn Session>, BackendError> {
        let index = {
            let mut starts = self.starts.lock().unwrap();
            let n = starts.entry(spec.agent.to_string()).or_insert(0);
            *n += 1;
            *n - 1
        };
        let behavior = self.behaviors.get(spec.agent).unwrap_or(&self.default_behavior).clone();
        let faults: Vec<FaultKind> = behavior
            .faults
            .iter()
            .filter(|f| f.session.is_none_or(|s| s == index))
            .map(|f| f.kind.clone())
            .collect();
        let seed = self.seed ^ fnv1a(spec.agent) ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);

        let ctx = Arc::new(SimCtx {
            agent: spec.agent.to_string(),
            clock: Arc::clone(&self.clock),
            ledger: Arc::clone(&self.ledger),
            heartbeats: Arc::clone(&spec.heartbeats),
            policy: Arc::clone(&self.policy),
            behavior,
            state: Mutex::new(SimState {
                alive: true,
                wedged: false,
                output: Vec::new(),
                timers: Vec::new(),
                step: None,
                rng: ChaCha8Rng::seed_from_u64(seed),
            }),
        });

        let started = self.clock.now();
        let hangs = faults.iter().any(|f| matches!(f, FaultKind::HangAtStart));
        for fault in &faults {
            match fault {
                FaultKind::HangAtStart => {}
                FaultKind::CrashAt { after } if after.is_zero() => ctx.crash(),
                FaultKind::CrashAt { after } => {
                    let c = Arc::clone(&ctx);
                    let id = self.clock.schedule_at(started + *after, Box::new(move |_| c.crash()));
                    ctx.state.lock().unwrap().timers.push(id);
                }
                FaultKind::StopHeartbeatAt { after } => {
                    let c = Arc::clone(&ctx);
                    let id = self.clock.schedule_at(started + *after, Box::new(move |_| c.wedge()));
                    ctx.state.lock().unwrap().timers.push(id);
                }
            }
        }

        if ctx.is_alive() && !hangs {
            ctx.heartbeats.touch(&ctx.agent, started);
            ctx.emit(Sentinel::Ready);
            let c = Arc::clone(&ctx);
            let id = self.clock.schedule_every(
                ctx.behavior.heartbeat_every,
                Box::new(move |at| {
                    let st = c.state.lock().unwrap();
                    if st.alive && !st.wedged {
                        drop(st);
                        c.heartbeats.touch(&c.agent, at);
                    }
                }),
            );
            ctx.state.lock().unwrap().timers.push(id);
        } else if hangs {
            ctx.state.lock().unwrap().wedged = true;
        }
        Ok(Box::new(SimSession { ctx }))
    }
}

struct SimState {
    alive: bool,
    wedged: bool,
    output: Vec<String>,
    timers: Vec<TimerId>,
    step: Option<TimerId>,
    rng: ChaCha8Rng,
}

struct SimCtx {
    agent: String,
    clock: SharedClock,
    ledger: Arc<Ledger>,
    heartbeats: Arc<dyn HeartbeatStore>,
    policy: Arc<dyn WorkPolicy>,
    behavior: SimBehavior,
    state: Mutex<SimState>,
}

impl SimCtx {
    fn is_alive(&self) -> bool {
        self.state.lock().unwrap().alive
    }

    fn working(&self) -> bool {
        let st = self.state.lock().unwrap();
        st.alive && !st.wedged
    }

    fn emit(&self, s: Sentinel) {
        self.state.lock().unwrap().output.push(s.render());
    }

    fn stop_timers(&self, st: &mut SimState) {
        for id in st.timers.drain(..).chain(st.step.take()) {
            self.clock.cancel(id);
        }
    }

    fn crash(&self) {
        let mut st = self.state.lock().unwrap();
        st.alive = false;
        self.stop_timers(&mut st);
    }

    fn wedge(&self) {
        let mut st = self.state.lock().unwrap();
        st.wedged = true;
        self.stop_timers(&mut st);
    }

    /// Own in-progress items first (continuity after a restart), then fresh
    /// claims, up to `items_per_kick`.
    fn gather_work(&self) -> Vec<WorkItem> {
        let limit = self.behavior.items_per_kick as usize;
        let mut work: Vec<WorkItem> = self
            .ledger
            .list(&ListFilter::status(ItemStatus::InProgress).with_actor(&self.agent))
            .into_iter()
            .take(limit)
            .collect();
        if work.len() < limit {
            for item in self.ledger.list(&ListFilter::status(ItemStatus::Open)) {
                if work.len() >= limit {
                    break;
                }
                if !self.policy.eligible(&item) {
                    continue;
                }
                match self.ledger.claim(&item.id, &self.agent) {
                    Ok(claimed) => work.push(claimed),
                    Err(LedgerError::AlreadyClaimed(_)) | Err(LedgerError::InvalidState { .. }) => {}
                    Err(e) => tracing::warn!(agent = %self.agent, error = %e, "claim failed"),
                }
            }
        }
        work
    }

    fn schedule_step(self: &Arc<Self>, at: Instant, kick_id: String, mut queue: Vec<WorkItem>, all_ok: bool) {
        let c = Arc::clone(self);
        let id = self.clock.schedule_at(
            at,
            Box::new(move |now| {
                if !c.working() {
                    return;
                }
                let item = queue.remove(0);
                let p = c.behavior.success_probability_for(&item);
                let success = c.state.lock().unwrap().rng.gen_bool(p.clamp(0.0, 1.0));
                let result = if success {
                    c.ledger.complete(&item.id, &c.agent, &format!("fixed by {}", c.agent))
                } else {
                    c.ledger.fail_attempt(&item.id, &c.agent)
                };
                match result {
                    Ok(updated) => c.policy.on_outcome(&updated, success),
                    Err(e) => tracing::warn!(agent = %c.agent, error = %e, "could not record outcome"),
                }
                if c.behavior.tokens_per_item > 0 {
                    c.emit(Sentinel::Tokens(c.behavior.tokens_per_item));
                }
                let ok = all_ok && success;
                if queue.is_empty() {
                    c.emit(Sentinel::Done { kick_id, ok });
                } else {
                    c.schedule_step(now + c.behavior.service_time, kick_id, queue, ok);
                }
            }),
        );
        self.state.lock().unwrap().step = Some(id);
    }
}

struct SimSession {
    ctx: Arc<SimCtx>,
}

impl Session for SimSession {
    fn deliver(&mut self, work_order: &str) -> Result<(), BackendError> {
        if !self.ctx.is_alive() {
            return Err(BackendError::SessionDead);
        }
        if !self.ctx.working() {
            // A wedged session swallows input.
            return Ok(());
        }
        let order = WorkOrder::parse(work_order)
            .ok_or_else(|| BackendError::Start(format!("unparsable work order {work_order:?}")))?;
        let work = self.ctx.gather_work();
        if work.is_empty() {
            self.ctx.emit(Sentinel::Done { kick_id: order.kick_id, ok: true });
        } else {
            let first = self.ctx.clock.now() + self.ctx.behavior.service_time;
            self.ctx.schedule_step(first, order.kick_id, work, true);
        }
        Ok(())
    }

    fn drain_output(&mut self) -> Vec<String> {
        std::mem::take(&mut self.ctx.state.lock().unwrap().output)
    }

    fn is_alive(&mut self) -> bool {
        self.ctx.is_alive()
    }

    fn terminate(&mut self) {
        self.ctx.crash();
    }
}

impl Drop for SimSession {
    fn drop(&mut self) {
        self.ctx.crash();
    }
}
