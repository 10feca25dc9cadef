//! Fleet events and the in-process bus that fans them out to the notifier,
//! dashboard metrics and any other sink.

use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::clock::Instant;
use crate::governor::Mode;

/// A timestamped kernel event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FleetEvent {
    pub at: Instant,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EventKind {
    // governor
    ModeChanged { from: Mode, to: Mode, queue: u64 },
    DegradedMeasurement { reason: String },
    ConfigError { reason: String },

    // fleet
    Spawned { agent: String, backend: String },
    Ready { agent: String },
    ReadyTimeout { agent: String },
    KickDelivered { agent: String, kick_id: String },
    KickSkipped { agent: String, kick_id: String },
    KickCompleted { agent: String, kick_id: String, ok: bool },
    Crashed { agent: String },
    Stalled { agent: String, heartbeat_age_secs: u64 },
    Recovered { agent: String },
    Respawned { agent: String, respawn_count: u32 },
    RespawnCapReached { agent: String, respawn_count: u32 },
    Renewed { agent: String },
    BackendSwitched { agent: String, backend: String, deferred: bool },
    TokensReported { agent: String, tokens: u64 },

    // ledger
    ItemClaimed { item_id: String, actor: String },
    ItemCompleted { item_id: String, actor: String },
    ItemSkipped { item_id: String, fix_attempts: u32 },
    ItemEscalated { item_id: String, reason: String },
}

impl FleetEvent {
    pub fn new(at: Instant, kind: EventKind) -> Self {
        FleetEvent { at, kind }
    }
}

/// Receives every published event, synchronously, on the publisher's thread.
pub trait EventSink: Send + Sync {
    fn on_event(&self, event: &FleetEvent);
}

impl<F> EventSink for F
where
    F: Fn(&FleetEvent) + Send + Sync,
{
    fn on_event(&self, event: &FleetEvent) {
        self(event)
    }
}

/// Synchronous fan-out bus.
///
/// Publishers must not hold locks that a sink might need; every kernel
/// module releases its own state before publishing.
#[derive(Default)]
pub struct EventBus {
    sinks: RwLock<Vec<Arc<dyn EventSink>>>,
}

impl EventBus {
    pub fn new() -> Arc<Self> {
        Arc::new(EventBus::default())
    }

    pub fn subscribe(&self, sink: Arc<dyn EventSink>) {
        self.sinks.write().unwrap().push(sink);
    }

    pub fn publish(&self, event: FleetEvent) {
        let sinks = self.sinks.read().unwrap().clone();
        for sink in sinks {
            sink.on_event(&event);
        }
    }

    pub fn publish_all(&self, events: impl IntoIterator<Item = FleetEvent>) {
        for event in events {
            self.publish(event);
        }
    }
}

/// Sink that keeps every event; used by the simulation report and tests.
#[derive(Default)]
pub struct EventRecorder {
    events: Mutex<Vec<FleetEvent>>,
}

impl EventRecorder {
    pub fn new() -> Arc<Self> {
        Arc::new(EventRecorder::default())
    }

    pub fn events(&self) -> Vec<FleetEvent> {
        self.events.lock().unwrap().clone()
    }

    pub fn count(&self, pred: impl Fn(&EventKind) -> bool) -> usize {
        self.events.lock().unwrap().iter().filter(|e| pred(&e.kind)).count()
    }
}

impl EventSink for EventRecorder {
    fn on_event(&self, event: &FleetEvent) {
        self.events.lock().unwrap().push(event.clone());
    }
}
