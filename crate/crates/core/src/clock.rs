//! Injectable time source and timer scheduling.
//!
//! Every cadence in the kernel (supervisor polls, governor ticks, heartbeat
//! checks, renewals, simulated service times) is expressed against a
//! [`Clock`]. Production uses [`SystemClock`]; tests and the simulation
//! harness use [`VirtualClock`], where time moves only through
//! [`Clock::advance`] and due timers fire synchronously in deadline order.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::fmt;
use std::ops::{Add, Sub};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
pub use std::time::Duration;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

/// A point in time, in milliseconds since the Unix epoch.
///
/// A fresh [`VirtualClock`] starts at `Instant(0)`.
#[derive(Copy, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Instant(u64);

impl Instant {
    pub const EPOCH: Instant = Instant(0);

    pub const fn from_millis(ms: u64) -> Self {
        Instant(ms)
    }

    pub const fn from_secs(secs: u64) -> Self {
        Instant(secs * 1000)
    }

    pub const fn as_millis(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1000.0
    }

    /// Elapsed time since `earlier`, zero if `earlier` is in the future.
    pub fn saturating_since(self, earlier: Instant) -> Duration {
        Duration::from_millis(self.0.saturating_sub(earlier.0))
    }

    /// ISO-8601 / RFC 3339 rendering with millisecond precision, UTC.
    pub fn to_rfc3339(self) -> String {
        let dt = chrono::DateTime::<chrono::Utc>::from_timestamp_millis(self.0 as i64)
            .unwrap_or_default();
        dt.to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
    }

    pub fn parse_rfc3339(s: &str) -> Option<Instant> {
        let dt = chrono::DateTime::parse_from_rfc3339(s).ok()?;
        u64::try_from(dt.timestamp_millis()).ok().map(Instant)
    }
}

impl fmt::Debug for Instant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Instant({}ms)", self.0)
    }
}

impl fmt::Display for Instant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_rfc3339())
    }
}

impl Add<Duration> for Instant {
    type Output = Instant;

    fn add(self, rhs: Duration) -> Instant {
        Instant(self.0.saturating_add(rhs.as_millis() as u64))
    }
}

impl Sub<Instant> for Instant {
    type Output = Duration;

    fn sub(self, rhs: Instant) -> Duration {
        self.saturating_since(rhs)
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ClockError {
    #[error("advance() is only available on a virtual clock")]
    NotVirtual,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TimerId(u64);

pub type OneShotTask = Box<dyn FnOnce(Instant) + Send>;
pub type PeriodicTask = Box<dyn FnMut(Instant) + Send>;

/// Injectable time source shared by every kernel module.
pub trait Clock: Send + Sync {
    fn now(&self) -> Instant;

    /// Moves a virtual clock forward by exactly `by`, firing every timer
    /// whose deadline falls inside the span. Real clocks return
    /// [`ClockError::NotVirtual`].
    fn advance(&self, by: Duration) -> Result<Instant, ClockError>;

    /// Runs `task` once at `deadline`. A deadline at or before `now` fires
    /// on the next opportunity.
    fn schedule_at(&self, deadline: Instant, task: OneShotTask) -> TimerId;

    /// Runs `task` at `now + period`, `now + 2 * period`, ...
    ///
    /// A periodic timer keeps its original registration rank, so it still
    /// fires ahead of later registrations that share a deadline.
    fn schedule_every(&self, period: Duration, task: PeriodicTask) -> TimerId;

    /// Returns false if the timer already fired (one-shot) or was unknown.
    fn cancel(&self, id: TimerId) -> bool;
}

pub type SharedClock = Arc<dyn Clock>;

enum Task {
    Once(OneShotTask),
    Every(Duration, PeriodicTask),
}

struct Entry {
    // None while the task is running outside the lock.
    task: Option<Task>,
}

/// Deadline-ordered timer table: ties broken by registration order.
#[derive(Default)]
struct TimerQueue {
    heap: BinaryHeap<Reverse<(Instant, u64)>>,
    entries: HashMap<u64, Entry>,
    next_seq: u64,
}

impl TimerQueue {
    fn insert(&mut self, deadline: Instant, task: Task) -> TimerId {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse((deadline, seq)));
        self.entries.insert(seq, Entry { task: Some(task) });
        TimerId(seq)
    }

    fn cancel(&mut self, id: TimerId) -> bool {
        // Stale heap entries are skipped on pop.
        self.entries.remove(&id.0).is_some()
    }

    fn peek_deadline(&mut self) -> Option<Instant> {
        while let Some(Reverse((deadline, seq))) = self.heap.peek().copied() {
            if self.entries.contains_key(&seq) {
                return Some(deadline);
            }
            self.heap.pop();
        }
        None
    }

    /// Pops the earliest live timer if it is due at or before `limit`.
    fn pop_due(&mut self, limit: Instant) -> Option<(Instant, u64, Task)> {
        let deadline = self.peek_deadline()?;
        if deadline > limit {
            return None;
        }
        let Reverse((deadline, seq)) = self.heap.pop()?;
        let entry = self.entries.get_mut(&seq)?;
        let task = entry.task.take()?;
        if matches!(task, Task::Once(_)) {
            self.entries.remove(&seq);
        }
        Some((deadline, seq, task))
    }

    /// Re-arms a periodic task after it ran, unless it was cancelled meanwhile.
    fn rearm(&mut self, seq: u64, fired_at: Instant, period: Duration, task: PeriodicTask) {
        if let Some(entry) = self.entries.get_mut(&seq) {
            entry.task = Some(Task::Every(period, task));
            self.heap.push(Reverse((fired_at + period, seq)));
        }
    }
}

fn run_task(queue: &Mutex<TimerQueue>, deadline: Instant, seq: u64, task: Task) {
    match task {
        Task::Once(f) => f(deadline),
        Task::Every(period, mut f) => {
            f(deadline);
            queue.lock().unwrap().rearm(seq, deadline, period, f);
        }
    }
}

fn assert_period(period: Duration) {
    assert!(!period.is_zero(), "periodic timer needs a non-zero period");
}

/// Deterministic clock for tests and simulation.
#[derive(Clone)]
pub struct VirtualClock {
    inner: Arc<VirtualInner>,
}

struct VirtualInner {
    now: Mutex<Instant>,
    timers: Mutex<TimerQueue>,
    advancing: Mutex<()>,
}

impl Default for VirtualClock {
    fn default() -> Self {
        Self::new()
    }
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::starting_at(Instant::EPOCH)
    }

    pub fn starting_at(start: Instant) -> Self {
        VirtualClock {
            inner: Arc::new(VirtualInner {
                now: Mutex::new(start),
                timers: Mutex::new(TimerQueue::default()),
                advancing: Mutex::new(()),
            }),
        }
    }

    /// Number of live (not yet fired or cancelled) timers.
    pub fn pending_timers(&self) -> usize {
        self.inner.timers.lock().unwrap().entries.len()
    }

    pub fn shared(&self) -> SharedClock {
        Arc::new(self.clone())
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> Instant {
        *self.inner.now.lock().unwrap()
    }

    fn advance(&self, by: Duration) -> Result<Instant, ClockError> {
        let _serial = self.inner.advancing.lock().unwrap();
        let target = self.now() + by;
        loop {
            // The queue lock is released before the task runs so callbacks
            // can read the clock and register further timers.
            let due = self.inner.timers.lock().unwrap().pop_due(target);
            let Some((deadline, seq, task)) = due else { break };
            {
                let mut now = self.inner.now.lock().unwrap();
                if deadline > *now {
                    *now = deadline;
                }
            }
            run_task(&self.inner.timers, deadline.max(self.now()), seq, task);
        }
        *self.inner.now.lock().unwrap() = target;
        Ok(target)
    }

    fn schedule_at(&self, deadline: Instant, task: OneShotTask) -> TimerId {
        self.inner.timers.lock().unwrap().insert(deadline, Task::Once(task))
    }

    fn schedule_every(&self, period: Duration, task: PeriodicTask) -> TimerId {
        assert_period(period);
        let first = self.now() + period;
        self.inner
            .timers
            .lock()
            .unwrap()
            .insert(first, Task::Every(period, task))
    }

    fn cancel(&self, id: TimerId) -> bool {
        self.inner.timers.lock().unwrap().cancel(id)
    }
}

/// Wall-clock time with a background timer thread.
pub struct SystemClock {
    shared: Arc<SystemShared>,
    worker: Mutex<Option<JoinHandle<()>>>,
}

struct SystemShared {
    timers: Mutex<TimerQueue>,
    wake: Condvar,
    shutdown: AtomicBool,
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl SystemClock {
    pub fn new() -> Self {
        SystemClock {
            shared: Arc::new(SystemShared {
                timers: Mutex::new(TimerQueue::default()),
                wake: Condvar::new(),
                shutdown: AtomicBool::new(false),
            }),
            worker: Mutex::new(None),
        }
    }

    fn wall_now() -> Instant {
        let ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        Instant(ms)
    }

    fn ensure_worker(&self) {
        let mut worker = self.worker.lock().unwrap();
        if worker.is_some() {
            return;
        }
        let shared = Arc::clone(&self.shared);
        *worker = Some(
            std::thread::Builder::new()
                .name("hive-timers".into())
                .spawn(move || timer_loop(shared))
                .expect("spawn timer thread"),
        );
    }

    /// Stops the timer thread; pending timers never fire.
    pub fn shutdown(&self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        self.shared.wake.notify_all();
        if let Some(handle) = self.worker.lock().unwrap().take() {
            if handle.thread().id() != std::thread::current().id() {
                let _ = handle.join();
            }
        }
    }
}

impl Drop for SystemClock {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn timer_loop(shared: Arc<SystemShared>) {
    let mut timers = shared.timers.lock().unwrap();
    loop {
        if shared.shutdown.load(Ordering::SeqCst) {
            return;
        }
        let now = SystemClock::wall_now();
        if let Some((deadline, seq, task)) = timers.pop_due(now) {
            drop(timers);
            run_task(&shared.timers, deadline, seq, task);
            timers = shared.timers.lock().unwrap();
            continue;
        }
        timers = match timers.peek_deadline() {
            Some(deadline) => {
                let wait = deadline.saturating_since(now);
                shared.wake.wait_timeout(timers, wait).unwrap().0
            }
            None => shared.wake.wait(timers).unwrap(),
        };
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Instant {
        Self::wall_now()
    }

    fn advance(&self, _by: Duration) -> Result<Instant, ClockError> {
        Err(ClockError::NotVirtual)
    }

    fn schedule_at(&self, deadline: Instant, task: OneShotTask) -> TimerId {
        self.ensure_worker();
        let id = self.shared.timers.lock().unwrap().insert(deadline, Task::Once(task));
        self.shared.wake.notify_all();
        id
    }

    fn schedule_every(&self, period: Duration, task: PeriodicTask) -> TimerId {
        assert_period(period);
        self.ensure_worker();
        let first = self.now() + period;
        let id = self
            .shared
            .timers
            .lock()
            .unwrap()
            .insert(first, Task::Every(period, task));
        self.shared.wake.notify_all();
        id
    }

    fn cancel(&self, id: TimerId) -> bool {
        self.shared.timers.lock().unwrap().cancel(id)
    }
}

/// Serde adapter rendering an [`Instant`] as an RFC 3339 string.
pub mod rfc3339 {
    use super::Instant;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(at: &Instant, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&at.to_rfc3339())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Instant, D::Error> {
        let s = String::deserialize(d)?;
        Instant::parse_rfc3339(&s).ok_or_else(|| serde::de::Error::custom("bad timestamp"))
    }
}
