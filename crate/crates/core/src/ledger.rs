//! Embedded, event-sourced work ledger with actor claims.
//!
//! The append-only event log is the source of truth. Every mutation is
//! validated against the current state, turned into a [`LedgerEvent`],
//! persisted, and only then applied to the materialized item table through
//! the same [`LedgerState::apply`] used by replay. A snapshot file may be
//! written to shorten startup; it never replaces the log.
//!
//! On-disk layout inside the ledger directory:
//!
//! * `ledger.events` - one JSON object per line with the fixed field order
//!   `seq, at, item_id, actor, transition, payload`. Lines are never rewritten.
//! * `ledger.snapshot` - the full item table plus the last applied `seq`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::clock::{rfc3339, Instant, SharedClock};
use crate::events::{EventBus, EventKind, FleetEvent};

pub const MAX_FIX_ATTEMPTS: u32 = 3;
pub const EVENTS_FILE: &str = "ledger.events";
pub const SNAPSHOT_FILE: &str = "ledger.snapshot";

/// Actor recorded on transitions the kernel makes on its own behalf.
pub const KERNEL_ACTOR: &str = "kernel";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemKind {
    Issue,
    Pr,
    Task,
}

impl ItemKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ItemKind::Issue => "issue",
            ItemKind::Pr => "pr",
            ItemKind::Task => "task",
        }
    }
}

impl FromStr for ItemKind {
    type Err = LedgerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "issue" => Ok(ItemKind::Issue),
            "pr" => Ok(ItemKind::Pr),
            "task" => Ok(ItemKind::Task),
            other => Err(LedgerError::InvalidInput(format!("unknown item kind {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemStatus {
    Open,
    InProgress,
    Done,
    Skip,
    Escalated,
}

impl ItemStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ItemStatus::Open => "open",
            ItemStatus::InProgress => "in_progress",
            ItemStatus::Done => "done",
            ItemStatus::Skip => "skip",
            ItemStatus::Escalated => "escalated",
        }
    }
}

impl fmt::Display for ItemStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ItemStatus {
    type Err = LedgerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "open" => Ok(ItemStatus::Open),
            "in_progress" => Ok(ItemStatus::InProgress),
            "done" => Ok(ItemStatus::Done),
            "skip" => Ok(ItemStatus::Skip),
            "escalated" => Ok(ItemStatus::Escalated),
            other => Err(LedgerError::InvalidInput(format!("unknown status {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkItem {
    pub id: String,
    pub repo: String,
    pub kind: ItemKind,
    pub title: String,
    pub status: ItemStatus,
    pub actor: Option<String>,
    pub fix_attempts: u32,
    pub notes: String,
    pub created_at: Instant,
    pub updated_at: Instant,
}

impl WorkItem {
    fn append_note(&mut self, text: &str) {
        if text.is_empty() {
            return;
        }
        if !self.notes.is_empty() {
            self.notes.push('\n');
        }
        self.notes.push_str(text);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transition {
    Create,
    Note,
    Move { from: ItemStatus, to: ItemStatus },
}

impl fmt::Display for Transition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transition::Create => f.write_str("create"),
            Transition::Note => f.write_str("note"),
            Transition::Move { from, to } => write!(f, "{from}->{to}"),
        }
    }
}

impl FromStr for Transition {
    type Err = LedgerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "create" => Ok(Transition::Create),
            "note" => Ok(Transition::Note),
            _ => {
                let (from, to) = s
                    .split_once("->")
                    .ok_or_else(|| LedgerError::InvalidInput(format!("bad transition {s:?}")))?;
                Ok(Transition::Move { from: from.parse()?, to: to.parse()? })
            }
        }
    }
}

impl Serialize for Transition {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Transition {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One line of `ledger.events`. Field order is part of the file format.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEvent {
    pub seq: u64,
    #[serde(with = "rfc3339")]
    pub at: Instant,
    pub item_id: String,
    pub actor: String,
    pub transition: Transition,
    pub payload: String,
}

impl LedgerEvent {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("ledger event serializes")
    }

    pub fn from_line(line: &str) -> Result<Self, LedgerError> {
        serde_json::from_str(line).map_err(|e| LedgerError::Corrupt(format!("{e}: {line}")))
    }
}

#[derive(Serialize, Deserialize)]
struct CreatePayload {
    repo: String,
    kind: ItemKind,
    title: String,
}

#[derive(Debug, thiserror::Error)]
pub enum LedgerError {
    #[error("work item {0} not found")]
    NotFound(String),
    #[error("already claimed by {0}")]
    AlreadyClaimed(String),
    #[error("item {item_id} is {status}")]
    InvalidState { item_id: String, status: ItemStatus },
    #[error("item {item_id} is owned by {owner:?}")]
    NotOwner { item_id: String, owner: Option<String> },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("corrupt ledger: {0}")]
    Corrupt(String),
    #[error("ledger storage: {0}")]
    Storage(#[from] io::Error),
}

/// Materialized item table, reproducible from the event log alone.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerState {
    pub last_seq: u64,
    pub created: u64,
    pub items: BTreeMap<String, WorkItem>,
}

impl LedgerState {
    /// Applies one event, rejecting anything that is not a legal successor
    /// of the current state (gaps in `seq`, illegal transitions, unknown items).
    pub fn apply(&mut self, ev: &LedgerEvent) -> Result<(), LedgerError> {
        if ev.seq != self.last_seq + 1 {
            return Err(LedgerError::Corrupt(format!(
                "expected seq {}, found {}",
                self.last_seq + 1,
                ev.seq
            )));
        }
        match ev.transition {
            Transition::Create => {
                if self.items.contains_key(&ev.item_id) {
                    return Err(LedgerError::Corrupt(format!("duplicate create {}", ev.item_id)));
                }
                let p: CreatePayload = serde_json::from_str(&ev.payload)
                    .map_err(|e| LedgerError::Corrupt(format!("create payload: {e}")))?;
                self.items.insert(
                    ev.item_id.clone(),
                    WorkItem {
                        id: ev.item_id.clone(),
                        repo: p.repo,
                        kind: p.kind,
                        title: p.title,
                        status: ItemStatus::Open,
                        actor: None,
                        fix_attempts: 0,
                        notes: String::new(),
                        created_at: ev.at,
                        updated_at: ev.at,
                    },
                );
                self.created += 1;
            }
            Transition::Note => {
                let item = self.item_mut(&ev.item_id)?;
                item.append_note(&ev.payload);
                item.updated_at = ev.at;
            }
            Transition::Move { from, to } => {
                let item = self.item_mut(&ev.item_id)?;
                if item.status != from {
                    return Err(LedgerError::Corrupt(format!(
                        "{}: transition {from}->{to} but status is {}",
                        ev.item_id, item.status
                    )));
                }
                use ItemStatus::*;
                match (from, to) {
                    (Open, InProgress) => item.actor = Some(ev.actor.clone()),
                    (InProgress, Done) => item.append_note(&ev.payload),
                    (InProgress, Open) | (InProgress, Skip) => {
                        item.fix_attempts += 1;
                        item.actor = None;
                    }
                    (f, Escalated) if f != Done && f != Escalated => item.append_note(&ev.payload),
                    (Skip, Open) | (Escalated, Open) => {
                        item.fix_attempts = 0;
                        item.actor = None;
                        item.append_note(&ev.payload);
                    }
                    _ => {
                        return Err(LedgerError::Corrupt(format!(
                            "{}: illegal transition {from}->{to}",
                            ev.item_id
                        )))
                    }
                }
                item.status = to;
                item.updated_at = ev.at;
            }
        }
        self.last_seq = ev.seq;
        Ok(())
    }

    fn item_mut(&mut self, id: &str) -> Result<&mut WorkItem, LedgerError> {
        self.items
            .get_mut(id)
            .ok_or_else(|| LedgerError::Corrupt(format!("event for unknown item {id}")))
    }

    /// Stable byte representation used for equivalence checks.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("ledger state serializes")
    }
}

/// Rebuilds ledger state from `ledger.events` lines.
pub fn replay<'a>(lines: impl IntoIterator<Item = &'a str>) -> Result<LedgerState, LedgerError> {
    let mut state = LedgerState::default();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        state.apply(&LedgerEvent::from_line(line)?)?;
    }
    Ok(state)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ListFilter {
    pub status: Option<ItemStatus>,
    pub actor: Option<String>,
    pub repo: Option<String>,
}

impl ListFilter {
    pub fn status(status: ItemStatus) -> Self {
        ListFilter { status: Some(status), ..Default::default() }
    }

    pub fn with_actor(mut self, actor: impl Into<String>) -> Self {
        self.actor = Some(actor.into());
        self
    }

    pub fn with_repo(mut self, repo: impl Into<String>) -> Self {
        self.repo = Some(repo.into());
        self
    }

    fn matches(&self, item: &WorkItem) -> bool {
        self.status.is_none_or(|s| item.status == s)
            && self.actor.as_deref().is_none_or(|a| item.actor.as_deref() == Some(a))
            && self.repo.as_deref().is_none_or(|r| item.repo == r)
    }
}

enum Storage {
    Memory,
    Dir { dir: PathBuf, writer: BufWriter<File> },
}

struct Inner {
    state: LedgerState,
    log: Vec<LedgerEvent>,
    storage: Storage,
}

/// Single-writer work ledger. Cheap to share behind an `Arc`.
pub struct Ledger {
    clock: SharedClock,
    bus: Option<Arc<EventBus>>,
    max_fix_attempts: u32,
    inner: RwLock<Inner>,
}

impl Ledger {
    /// Ledger whose log lives only in memory.
    pub fn in_memory(clock: SharedClock) -> Self {
        Ledger {
            clock,
            bus: None,
            max_fix_attempts: MAX_FIX_ATTEMPTS,
            inner: RwLock::new(Inner {
                state: LedgerState::default(),
                log: Vec::new(),
                storage: Storage::Memory,
            }),
        }
    }

    /// Opens (or creates) a ledger directory, restoring state from the
    /// snapshot and the events that follow it.
    pub fn open(dir: impl AsRef<Path>, clock: SharedClock) -> Result<Self, LedgerError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let events_path = dir.join(EVENTS_FILE);

        let mut state = match fs::read(dir.join(SNAPSHOT_FILE)) {
            Ok(bytes) => serde_json::from_slice::<LedgerState>(&bytes)
                .map_err(|e| LedgerError::Corrupt(format!("snapshot: {e}")))?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => LedgerState::default(),
            Err(e) => return Err(e.into()),
        };
        let snapshot_seq = state.last_seq;

        let mut log = Vec::new();
        match File::open(&events_path) {
            Ok(f) => {
                for line in BufReader::new(f).lines() {
                    let line = line?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    let ev = LedgerEvent::from_line(&line)?;
                    if ev.seq > snapshot_seq {
                        state.apply(&ev)?;
                    }
                    log.push(ev);
                }
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(e.into()),
        }
        if log.last().map_or(0, |e| e.seq) < snapshot_seq {
            return Err(LedgerError::Corrupt("snapshot is ahead of the event log".into()));
        }

        let file = OpenOptions::new().create(true).append(true).open(&events_path)?;
        Ok(Ledger {
            clock,
            bus: None,
            max_fix_attempts: MAX_FIX_ATTEMPTS,
            inner: RwLock::new(Inner {
                state,
                log,
                storage: Storage::Dir { dir, writer: BufWriter::new(file) },
            }),
        })
    }

    pub fn with_bus(mut self, bus: Arc<EventBus>) -> Self {
        self.bus = Some(bus);
        self
    }

    pub fn with_max_fix_attempts(mut self, max: u32) -> Self {
        assert!(max > 0, "max fix attempts must be positive");
        self.max_fix_attempts = max;
        self
    }

    pub fn max_fix_attempts(&self) -> u32 {
        self.max_fix_attempts
    }

    pub fn add_item(
        &self,
        repo: &str,
        kind: ItemKind,
        title: &str,
        actor: &str,
    ) -> Result<WorkItem, LedgerError> {
        if title.trim().is_empty() {
            return Err(LedgerError::InvalidInput("title must not be empty".into()));
        }
        require_actor(actor)?;
        let payload = serde_json::to_string(&CreatePayload {
            repo: repo.to_string(),
            kind,
            title: title.to_string(),
        })
        .expect("payload serializes");
        let mut inner = self.inner.write().unwrap();
        let id = format!("wi-{:06}", inner.state.created + 1);
        let item = self.commit(&mut inner, &id, actor, Transition::Create, payload)?;
        Ok(item)
    }

    pub fn claim(&self, item_id: &str, actor: &str) -> Result<WorkItem, LedgerError> {
        require_actor(actor)?;
        let mut inner = self.inner.write().unwrap();
        let item = get(&inner.state, item_id)?;
        match item.status {
            ItemStatus::Open => {}
            ItemStatus::InProgress => {
                let owner = item.actor.clone().unwrap_or_default();
                if owner == actor {
                    return Ok(item.clone());
                }
                return Err(LedgerError::AlreadyClaimed(owner));
            }
            status => return Err(invalid(item_id, status)),
        }
        let item = self.commit(&mut inner, item_id, actor, mv(ItemStatus::Open, ItemStatus::InProgress), String::new())?;
        drop(inner);
        self.emit(EventKind::ItemClaimed { item_id: item_id.into(), actor: actor.into() });
        Ok(item)
    }

    pub fn list(&self, filter: &ListFilter) -> Vec<WorkItem> {
        let inner = self.inner.read().unwrap();
        let mut items: Vec<WorkItem> =
            inner.state.items.values().filter(|i| filter.matches(i)).cloned().collect();
        items.sort_by(|a, b| a.created_at.cmp(&b.created_at).then_with(|| a.id.cmp(&b.id)));
        items
    }

    pub fn get(&self, item_id: &str) -> Result<WorkItem, LedgerError> {
        get(&self.inner.read().unwrap().state, item_id).cloned()
    }

    pub fn complete(&self, item_id: &str, actor: &str, notes: &str) -> Result<WorkItem, LedgerError> {
        let mut inner = self.inner.write().unwrap();
        check_owned(&inner.state, item_id, actor)?;
        let item = self.commit(&mut inner, item_id, actor, mv(ItemStatus::InProgress, ItemStatus::Done), notes.to_string())?;
        drop(inner);
        self.emit(EventKind::ItemCompleted { item_id: item_id.into(), actor: actor.into() });
        Ok(item)
    }

    /// Records a failed fix. Below the cap the item goes back to `open` for
    /// any actor; at the cap it moves to `skip` and one escalation is emitted.
    pub fn fail_attempt(&self, item_id: &str, actor: &str) -> Result<WorkItem, LedgerError> {
        let mut inner = self.inner.write().unwrap();
        let attempts = check_owned(&inner.state, item_id, actor)?.fix_attempts + 1;
        let to = if attempts >= self.max_fix_attempts { ItemStatus::Skip } else { ItemStatus::Open };
        let item = self.commit(
            &mut inner,
            item_id,
            actor,
            mv(ItemStatus::InProgress, to),
            format!("attempt={attempts}"),
        )?;
        drop(inner);
        if to == ItemStatus::Skip {
            self.emit(EventKind::ItemSkipped { item_id: item_id.into(), fix_attempts: attempts });
        }
        Ok(item)
    }

    /// Hands an item to a human. Escalating an already escalated item is a no-op.
    pub fn escalate(&self, item_id: &str, reason: &str) -> Result<WorkItem, LedgerError> {
        let mut inner = self.inner.write().unwrap();
        let item = get(&inner.state, item_id)?;
        match item.status {
            ItemStatus::Escalated => return Ok(item.clone()),
            ItemStatus::Done => return Err(invalid(item_id, ItemStatus::Done)),
            _ => {}
        }
        let from = item.status;
        let item = self.commit(&mut inner, item_id, KERNEL_ACTOR, mv(from, ItemStatus::Escalated), reason.to_string())?;
        drop(inner);
        self.emit(EventKind::ItemEscalated { item_id: item_id.into(), reason: reason.into() });
        Ok(item)
    }

    /// Operator transition from `skip` or `escalated` back to `open`,
    /// resetting the fix-attempt counter.
    pub fn reopen(&self, item_id: &str, actor: &str, reason: &str) -> Result<WorkItem, LedgerError> {
        require_actor(actor)?;
        let mut inner = self.inner.write().unwrap();
        let status = get(&inner.state, item_id)?.status;
        if !matches!(status, ItemStatus::Skip | ItemStatus::Escalated) {
            return Err(invalid(item_id, status));
        }
        self.commit(&mut inner, item_id, actor, mv(status, ItemStatus::Open), format!("reopened: {reason}"))
    }

    pub fn add_note(&self, item_id: &str, actor: &str, note: &str) -> Result<WorkItem, LedgerError> {
        require_actor(actor)?;
        let mut inner = self.inner.write().unwrap();
        get(&inner.state, item_id)?;
        self.commit(&mut inner, item_id, actor, Transition::Note, note.to_string())
    }

    pub fn events(&self) -> Vec<LedgerEvent> {
        self.inner.read().unwrap().log.clone()
    }

    /// The event log rendered exactly as stored in `ledger.events`.
    pub fn event_lines(&self) -> Vec<String> {
        self.inner.read().unwrap().log.iter().map(LedgerEvent::to_line).collect()
    }

    pub fn state(&self) -> LedgerState {
        self.inner.read().unwrap().state.clone()
    }

    pub fn flush(&self) -> Result<(), LedgerError> {
        if let Storage::Dir { writer, .. } = &mut self.inner.write().unwrap().storage {
            writer.flush()?;
            writer.get_ref().sync_data()?;
        }
        Ok(())
    }

    /// Writes `ledger.snapshot` atomically. No-op for in-memory ledgers.
    pub fn write_snapshot(&self) -> Result<(), LedgerError> {
        let inner = self.inner.read().unwrap();
        if let Storage::Dir { dir, .. } = &inner.storage {
            let bytes = serde_json::to_vec_pretty(&inner.state).expect("state serializes");
            crate::fsutil::write_atomic(&dir.join(SNAPSHOT_FILE), &bytes)?;
        }
        Ok(())
    }

    fn commit(
        &self,
        inner: &mut Inner,
        item_id: &str,
        actor: &str,
        transition: Transition,
        payload: String,
    ) -> Result<WorkItem, LedgerError> {
        let ev = LedgerEvent {
            seq: inner.state.last_seq + 1,
            at: self.clock.now(),
            item_id: item_id.to_string(),
            actor: actor.to_string(),
            transition,
            payload,
        };
        if let Storage::Dir { writer, .. } = &mut inner.storage {
            writeln!(writer, "{}", ev.to_line())?;
            writer.flush()?;
        }
        inner.state.apply(&ev)?;
        inner.log.push(ev);
        Ok(inner.state.items[item_id].clone())
    }

    fn emit(&self, kind: EventKind) {
        if let Some(bus) = &self.bus {
            bus.publish(FleetEvent::new(self.clock.now(), kind));
        }
    }
}

fn mv(from: ItemStatus, to: ItemStatus) -> Transition {
    Transition::Move { from, to }
}

fn invalid(item_id: &str, status: ItemStatus) -> LedgerError {
    LedgerError::InvalidState { item_id: item_id.to_string(), status }
}

fn require_actor(actor: &str) -> Result<(), LedgerError> {
    if actor.trim().is_empty() {
        return Err(LedgerError::InvalidInput("actor must not be empty".into()));
    }
    Ok(())
}

fn get<'a>(state: &'a LedgerState, item_id: &str) -> Result<&'a WorkItem, LedgerError> {
    state.items.get(item_id).ok_or_else(|| LedgerError::NotFound(item_id.to_string()))
}

fn check_owned<'a>(state: &'a LedgerState, item_id: &str, actor: &str) -> Result<&'a WorkItem, LedgerError> {
    let item = get(state, item_id)?;
    if item.status != ItemStatus::InProgress {
        return Err(invalid(item_id, item.status));
    }
    if item.actor.as_deref() != Some(actor) {
        return Err(LedgerError::NotOwner { item_id: item_id.to_string(), owner: item.actor.clone() });
    }
    Ok(item)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::{Clock, Duration, VirtualClock};
    use crate::events::EventRecorder;

    fn ledger() -> (VirtualClock, Ledger, Arc<EventRecorder>) {
        let clock = VirtualClock::new();
        let bus = EventBus::new();
        let rec = EventRecorder::new();
        bus.subscribe(rec.clone());
        (clock.clone(), Ledger::in_memory(clock.shared()).with_bus(bus), rec)
    }

    #[test]
    fn add_item_starts_open() {
        let (_, l, _) = ledger();
        let item = l.add_item("console", ItemKind::Issue, "fix z-index", "scanner").unwrap();
        assert_eq!(item.status, ItemStatus::Open);
        assert_eq!(item.fix_attempts, 0);
        assert_eq!(item.actor, None);
    }

    #[test]
    fn same_title_gets_distinct_ids() {
        let (_, l, _) = ledger();
        let a = l.add_item("console", ItemKind::Issue, "dup", "scanner").unwrap();
        let b = l.add_item("console", ItemKind::Issue, "dup", "scanner").unwrap();
        assert_ne!(a.id, b.id);
    }

    #[test]
    fn add_rejects_empty_title_and_actor() {
        let (_, l, _) = ledger();
        assert!(matches!(l.add_item("r", ItemKind::Task, " ", "a"), Err(LedgerError::InvalidInput(_))));
        assert!(matches!(l.add_item("r", ItemKind::Task, "t", ""), Err(LedgerError::InvalidInput(_))));
    }

    #[test]
    fn claim_happy_path_and_conflict() {
        let (_, l, _) = ledger();
        let id = l.add_item("console", ItemKind::Pr, "t", "scanner").unwrap().id;
        let item = l.claim(&id, "reviewer").unwrap();
        assert_eq!(item.status, ItemStatus::InProgress);
        assert_eq!(item.actor.as_deref(), Some("reviewer"));
        match l.claim(&id, "scanner") {
            Err(LedgerError::AlreadyClaimed(owner)) => assert_eq!(owner, "reviewer"),
            other => panic!("unexpected {other:?}"),
        }
        // Reclaiming your own item is harmless.
        assert!(l.claim(&id, "reviewer").is_ok());
    }

    #[test]
    fn claim_guards() {
        let (_, l, _) = ledger();
        assert!(matches!(l.claim("nope", "a"), Err(LedgerError::NotFound(_))));
        let id = l.add_item("r", ItemKind::Task, "t", "a").unwrap().id;
        l.claim(&id, "a").unwrap();
        l.complete(&id, "a", "ok").unwrap();
        assert!(matches!(l.claim(&id, "b"), Err(LedgerError::InvalidState { status: ItemStatus::Done, .. })));
    }

    #[test]
    fn list_filters_and_orders() {
        let (clock, l, _) = ledger();
        assert!(l.list(&ListFilter::status(ItemStatus::Open)).is_empty());
        let mut ids = Vec::new();
        for i in 0..5 {
            ids.push(l.add_item("console", ItemKind::Issue, &format!("t{i}"), "scanner").unwrap().id);
            clock.advance(Duration::from_secs(1)).unwrap();
        }
        l.claim(&ids[1], "reviewer").unwrap();
        l.claim(&ids[3], "scanner").unwrap();
        let open: Vec<_> = l.list(&ListFilter::status(ItemStatus::Open)).into_iter().map(|i| i.id).collect();
        assert_eq!(open, vec![ids[0].clone(), ids[2].clone(), ids[4].clone()]);
        let mine = l.list(&ListFilter::status(ItemStatus::InProgress).with_actor("reviewer"));
        assert_eq!(mine.len(), 1);
        assert_eq!(mine[0].id, ids[1]);
        assert_eq!(l.list(&ListFilter::default().with_repo("other")).len(), 0);
    }

    #[test]
    fn complete_guards() {
        let (_, l, _) = ledger();
        let id = l.add_item("r", ItemKind::Issue, "t", "s").unwrap().id;
        assert!(matches!(l.complete(&id, "a", ""), Err(LedgerError::InvalidState { .. })));
        l.claim(&id, "a").unwrap();
        assert!(matches!(l.complete(&id, "b", ""), Err(LedgerError::NotOwner { .. })));
        let done = l.complete(&id, "a", "merged #12").unwrap();
        assert_eq!(done.status, ItemStatus::Done);
        assert_eq!(done.notes, "merged #12");
    }

    #[test]
    fn fail_attempt_retries_then_skips_once() {
        let (_, l, rec) = ledger();
        let id = l.add_item("r", ItemKind::Issue, "flaky", "s").unwrap().id;
        for expected in 1..=2 {
            l.claim(&id, "fixer").unwrap();
            let item = l.fail_attempt(&id, "fixer").unwrap();
            assert_eq!(item.fix_attempts, expected);
            assert_eq!(item.status, ItemStatus::Open);
            assert_eq!(item.actor, None);
        }
        l.claim(&id, "other").unwrap();
        let item = l.fail_attempt(&id, "other").unwrap();
        assert_eq!(item.status, ItemStatus::Skip);
        assert_eq!(item.fix_attempts, MAX_FIX_ATTEMPTS);
        assert_eq!(rec.count(|k| matches!(k, EventKind::ItemSkipped { .. })), 1);
        assert!(matches!(l.fail_attempt(&id, "other"), Err(LedgerError::InvalidState { .. })));
    }

    #[test]
    fn fail_attempt_on_done_item_is_invalid() {
        let (_, l, _) = ledger();
        let id = l.add_item("r", ItemKind::Issue, "t", "s").unwrap().id;
        l.claim(&id, "a").unwrap();
        l.complete(&id, "a", "").unwrap();
        assert!(matches!(l.fail_attempt(&id, "a"), Err(LedgerError::InvalidState { .. })));
    }

    #[test]
    fn escalate_is_idempotent() {
        let (_, l, rec) = ledger();
        let id = l.add_item("r", ItemKind::Issue, "t", "s").unwrap().id;
        let item = l.escalate(&id, "high-risk path").unwrap();
        assert_eq!(item.status, ItemStatus::Escalated);
        assert!(item.notes.contains("high-risk path"));
        let events_before = l.event_lines();
        l.escalate(&id, "again").unwrap();
        assert_eq!(l.event_lines(), events_before);
        assert_eq!(rec.count(|k| matches!(k, EventKind::ItemEscalated { .. })), 1);
    }

    #[test]
    fn escalate_done_is_invalid() {
        let (_, l, _) = ledger();
        let id = l.add_item("r", ItemKind::Issue, "t", "s").unwrap().id;
        l.claim(&id, "a").unwrap();
        l.complete(&id, "a", "").unwrap();
        assert!(matches!(l.escalate(&id, "x"), Err(LedgerError::InvalidState { status: ItemStatus::Done, .. })));
        assert!(matches!(l.escalate("missing", "x"), Err(LedgerError::NotFound(_))));
    }

    #[test]
    fn reopen_resets_attempts() {
        let (_, l, _) = ledger();
        let l = l.with_max_fix_attempts(1);
        let id = l.add_item("r", ItemKind::Issue, "t", "s").unwrap().id;
        l.claim(&id, "a").unwrap();
        assert_eq!(l.fail_attempt(&id, "a").unwrap().status, ItemStatus::Skip);
        let item = l.reopen(&id, "operator", "new approach").unwrap();
        assert_eq!(item.status, ItemStatus::Open);
        assert_eq!(item.fix_attempts, 0);
        assert!(matches!(l.reopen(&id, "operator", ""), Err(LedgerError::InvalidState { .. })));
    }

    #[test]
    fn event_line_has_fixed_field_order() {
        let (clock, l, _) = ledger();
        clock.advance(Duration::from_secs(65)).unwrap();
        l.add_item("console", ItemKind::Issue, "fix z-index", "scanner").unwrap();
        let line = &l.event_lines()[0];
        assert_eq!(
            line,
            r#"{"seq":1,"at":"1970-01-01T00:01:05.000Z","item_id":"wi-000001","actor":"scanner","transition":"create","payload":"{\"repo\":\"console\",\"kind\":\"issue\",\"title\":\"fix z-index\"}"}"#
        );
    }

    #[test]
    fn replay_rejects_gaps_and_illegal_moves() {
        let (_, l, _) = ledger();
        let id = l.add_item("r", ItemKind::Issue, "t", "s").unwrap().id;
        l.claim(&id, "a").unwrap();
        l.complete(&id, "a", "").unwrap();
        let lines = l.event_lines();
        assert_eq!(replay(lines.iter().map(String::as_str)).unwrap(), l.state());
        let gapped: Vec<&str> = vec![&lines[0], &lines[2]];
        assert!(replay(gapped).is_err());
        let bogus = lines[1].replace("open->in_progress", "done->open");
        assert!(replay(vec![lines[0].as_str(), bogus.as_str()]).is_err());
    }

    #[test]
    fn persists_across_reopen_with_and_without_snapshot() {
        let dir = tempfile::tempdir().unwrap();
        let clock = VirtualClock::new();
        let before = {
            let l = Ledger::open(dir.path(), clock.shared()).unwrap();
            let id = l.add_item("console", ItemKind::Issue, "fix z-index", "scanner").unwrap().id;
            l.claim(&id, "reviewer").unwrap();
            l.write_snapshot().unwrap();
            l.add_item("console", ItemKind::Pr, "second", "scanner").unwrap();
            l.flush().unwrap();
            l.list(&ListFilter::default())
        };
        let l = Ledger::open(dir.path(), clock.shared()).unwrap();
        assert_eq!(l.list(&ListFilter::default()), before);
        // Ids stay unique after restart.
        let next = l.add_item("console", ItemKind::Issue, "third", "scanner").unwrap();
        assert!(before.iter().all(|i| i.id != next.id));

        fs::remove_file(dir.path().join(SNAPSHOT_FILE)).unwrap();
        let l2 = Ledger::open(dir.path(), clock.shared()).unwrap();
        assert_eq!(l2.state(), l.state());
    }
}
