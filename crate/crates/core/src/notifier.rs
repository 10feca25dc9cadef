//! Human alerts: ntfy, Slack and Discord webhooks, and stdout.
//!
//! Delivery is retried three times with doubling backoff. Notifications with
//! the same dedupe key inside the window go out once. In queued mode a
//! background thread does the delivery and callers never wait on the network.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};

use crate::clock::{Duration, Instant, SharedClock};
use crate::events::{EventKind, EventSink, FleetEvent};

pub const DEDUPE_WINDOW: Duration = Duration::from_secs(3600);
pub const MAX_ATTEMPTS: u32 = 3;
pub const BASE_BACKOFF: Duration = Duration::from_secs(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Info,
    Warn,
    Page,
}

impl Severity {
    pub fn as_str(self) -> &'static str {
        match self {
            Severity::Info => "info",
            Severity::Warn => "warn",
            Severity::Page => "page",
        }
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Severity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "info" => Ok(Severity::Info),
            "warn" | "warning" => Ok(Severity::Warn),
            "page" => Ok(Severity::Page),
            _ => Err(format!("unknown severity {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Notification {
    pub severity: Severity,
    pub title: String,
    pub body: String,
    /// `module/entity`, e.g. `fleet/scanner`.
    pub source: String,
    pub dedupe_key: String,
    pub at: Instant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    Ntfy,
    Slack,
    Discord,
    Stdout,
}

impl FromStr for ChannelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ntfy" => Ok(ChannelKind::Ntfy),
            "slack" | "slack-webhook" => Ok(ChannelKind::Slack),
            "discord" | "discord-webhook" => Ok(ChannelKind::Discord),
            "stdout" => Ok(ChannelKind::Stdout),
            _ => Err(format!("unknown channel kind {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub kind: ChannelKind,
    pub url: Option<String>,
    pub min_severity: Severity,
}

impl ChannelConfig {
    pub fn stdout() -> Self {
        ChannelConfig { kind: ChannelKind::Stdout, url: None, min_severity: Severity::Info }
    }
}

/// Parses `notify.conf`. With no channels at all, stdout at `info` is used.
pub fn parse_channels(pairs: &std::collections::BTreeMap<String, String>) -> Result<Vec<ChannelConfig>, String> {
    let mut ids: Vec<&str> = pairs
        .keys()
        .filter_map(|k| k.strip_prefix("CHANNEL_")?.strip_suffix("_KIND"))
        .collect();
    ids.sort_by_key(|id| (id.parse::<u64>().unwrap_or(u64::MAX), id.to_string()));
    let mut errors = Vec::new();
    let mut out = Vec::new();
    for id in ids {
        let kind = match pairs[&format!("CHANNEL_{id}_KIND")].parse::<ChannelKind>() {
            Ok(k) => k,
            Err(e) => {
                errors.push(format!("CHANNEL_{id}_KIND: {e}"));
                continue;
            }
        };
        let url = pairs.get(&format!("CHANNEL_{id}_URL")).filter(|u| !u.trim().is_empty()).cloned();
        if kind != ChannelKind::Stdout && url.is_none() {
            errors.push(format!("CHANNEL_{id}_URL: required for this channel kind"));
            continue;
        }
        let min_severity = match pairs.get(&format!("CHANNEL_{id}_MIN_SEVERITY")) {
            None => Severity::Info,
            Some(s) => match s.parse() {
                Ok(s) => s,
                Err(e) => {
                    errors.push(format!("CHANNEL_{id}_MIN_SEVERITY: {e}"));
                    continue;
                }
            },
        };
        out.push(ChannelConfig { kind, url, min_severity });
    }
    if !errors.is_empty() {
        return Err(errors.join("; "));
    }
    if out.is_empty() {
        out.push(ChannelConfig::stdout());
    }
    Ok(out)
}

pub fn load_channels(path: &Path) -> Result<Vec<ChannelConfig>, String> {
    let pairs = crate::fsutil::read_env_file(path).map_err(|e| format!("{}: {e}", path.display()))?;
    parse_channels(&pairs)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OutboundRequest {
    pub url: String,
    pub headers: Vec<(String, String)>,
    pub content_type: &'static str,
    pub body: String,
}

impl OutboundRequest {
    pub fn for_channel(kind: ChannelKind, url: &str, n: &Notification) -> Option<OutboundRequest> {
        let json = |v: serde_json::Value| v.to_string();
        let (headers, content_type, body) = match kind {
            ChannelKind::Stdout => return None,
            ChannelKind::Ntfy => {
                let priority = match n.severity {
                    Severity::Info => "default",
                    Severity::Warn => "high",
                    Severity::Page => "urgent",
                };
                (
                    vec![("Title".to_string(), n.title.clone()), ("Priority".to_string(), priority.to_string())],
                    "text/plain",
                    n.body.clone(),
                )
            }
            ChannelKind::Slack => {
                (vec![], "application/json", json(serde_json::json!({ "text": format!("*{}*\n{}", n.title, n.body) })))
            }
            ChannelKind::Discord => (
                vec![],
                "application/json",
                json(serde_json::json!({ "content": format!("**{}**\n{}", n.title, n.body) })),
            ),
        };
        Some(OutboundRequest { url: url.to_string(), headers, content_type, body })
    }
}

pub trait Transport: Send + Sync {
    fn send(&self, req: &OutboundRequest) -> Result<(), String>;
}

/// Plain blocking HTTP. A client is built per request so it lives and dies on
/// the delivering thread.
pub struct HttpTransport {
    pub timeout: Duration,
}

impl Default for HttpTransport {
    fn default() -> Self {
        HttpTransport { timeout: Duration::from_secs(10) }
    }
}

impl Transport for HttpTransport {
    fn send(&self, req: &OutboundRequest) -> Result<(), String> {
        let client = reqwest::blocking::Client::builder()
            .timeout(self.timeout)
            .build()
            .map_err(|e| e.to_string())?;
        let mut rb = client.post(&req.url).header("Content-Type", req.content_type).body(req.body.clone());
        for (k, v) in &req.headers {
            rb = rb.header(k.as_str(), v.as_str());
        }
        let resp = rb.send().map_err(|e| e.to_string())?;
        if resp.status().is_success() {
            Ok(())
        } else {
            Err(format!("HTTP {}", resp.status()))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ChannelReport {
    pub kind: ChannelKind,
    pub delivered: bool,
    pub filtered: bool,
    pub attempts: u32,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DeliveryReport {
    pub dedupe_key: String,
    pub suppressed: bool,
    pub channels: Vec<ChannelReport>,
}

type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;
type LineSink = Arc<dyn Fn(&str) + Send + Sync>;

struct Inner {
    clock: SharedClock,
    channels: Vec<ChannelConfig>,
    transport: Arc<dyn Transport>,
    sleeper: Sleeper,
    lines: LineSink,
    backoff: Duration,
    window: Duration,
    last_sent: Mutex<HashMap<String, Instant>>,
    sent: Mutex<Vec<Notification>>,
    reports: Mutex<Vec<DeliveryReport>>,
}

impl Inner {
    /// Claims the dedupe key. False when it was used within the window.
    fn admit(&self, n: &Notification) -> bool {
        let mut last = self.last_sent.lock().unwrap();
        if let Some(&prev) = last.get(&n.dedupe_key) {
            if n.at.saturating_since(prev) < self.window {
                return false;
            }
        }
        last.insert(n.dedupe_key.clone(), n.at);
        self.sent.lock().unwrap().push(n.clone());
        true
    }

    fn deliver(&self, n: &Notification) -> DeliveryReport {
        let mut channels = Vec::new();
        for ch in &self.channels {
            if n.severity < ch.min_severity {
                channels.push(ChannelReport { kind: ch.kind, delivered: false, filtered: true, attempts: 0, error: None });
                continue;
            }
            let Some(req) = OutboundRequest::for_channel(ch.kind, ch.url.as_deref().unwrap_or(""), n) else {
                (self.lines)(&format!(
                    "{} [{}] {}: {} ({})",
                    n.at.to_rfc3339(),
                    n.severity.as_str().to_ascii_uppercase(),
                    n.title,
                    n.body,
                    n.source
                ));
                channels.push(ChannelReport { kind: ch.kind, delivered: true, filtered: false, attempts: 1, error: None });
                continue;
            };
            let mut attempts = 0;
            let mut error = None;
            let mut backoff = self.backoff;
            while attempts < MAX_ATTEMPTS {
                attempts += 1;
                match self.transport.send(&req) {
                    Ok(()) => {
                        error = None;
                        break;
                    }
                    Err(e) => {
                        tracing::warn!(url = %req.url, attempt = attempts, error = %e, "notification delivery failed");
                        error = Some(e);
                        if attempts < MAX_ATTEMPTS {
                            (self.sleeper)(backoff);
                            backoff *= 2;
                        }
                    }
                }
            }
            channels.push(ChannelReport { kind: ch.kind, delivered: error.is_none(), filtered: false, attempts, error });
        }
        let report = DeliveryReport { dedupe_key: n.dedupe_key.clone(), suppressed: false, channels };
        self.reports.lock().unwrap().push(report.clone());
        report
    }
}

#[derive(Default)]
struct Pending {
    count: Mutex<usize>,
    idle: Condvar,
}

pub struct Notifier {
    inner: Arc<Inner>,
    queue: Mutex<Option<Sender<Notification>>>,
    pending: Arc<Pending>,
    worker: Mutex<Option<JoinHandle<()>>>,
}

impl Notifier {
    pub fn new(clock: SharedClock, channels: Vec<ChannelConfig>) -> Self {
        let channels = if channels.is_empty() { vec![ChannelConfig::stdout()] } else { channels };
        Notifier {
            inner: Arc::new(Inner {
                clock,
                channels,
                transport: Arc::new(HttpTransport::default()),
                sleeper: Arc::new(std::thread::sleep),
                lines: Arc::new(|line: &str| println!("{line}")),
                backoff: BASE_BACKOFF,
                window: DEDUPE_WINDOW,
                last_sent: Mutex::new(HashMap::new()),
                sent: Mutex::new(Vec::new()),
                reports: Mutex::new(Vec::new()),
            }),
            queue: Mutex::new(None),
            pending: Arc::new(Pending::default()),
            worker: Mutex::new(None),
        }
    }

    fn inner_mut(&mut self) -> &mut Inner {
        Arc::get_mut(&mut self.inner).expect("configure the notifier before starting it")
    }

    pub fn with_transport(mut self, transport: Arc<dyn Transport>) -> Self {
        self.inner_mut().transport = transport;
        self
    }

    pub fn with_sleeper(mut self, sleeper: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.inner_mut().sleeper = Arc::new(sleeper);
        self
    }

    pub fn with_line_sink(mut self, sink: impl Fn(&str) + Send + Sync + 'static) -> Self {
        self.inner_mut().lines = Arc::new(sink);
        self
    }

    pub fn with_backoff(mut self, base: Duration) -> Self {
        self.inner_mut().backoff = base;
        self
    }

    pub fn with_dedupe_window(mut self, window: Duration) -> Self {
        self.inner_mut().window = window;
        self
    }

    /// Switches to queued delivery on a background thread.
    pub fn start_background(self) -> Self {
        let (tx, rx) = mpsc::channel::<Notification>();
        let inner = Arc::clone(&self.inner);
        let pending = Arc::clone(&self.pending);
        let handle = std::thread::Builder::new()
            .name("hive-notify".into())
            .spawn(move || {
                for n in rx {
                    inner.deliver(&n);
                    let mut count = pending.count.lock().unwrap();
                    *count -= 1;
                    if *count == 0 {
                        pending.idle.notify_all();
                    }
                }
            })
            .expect("spawn notifier thread");
        *self.queue.lock().unwrap() = Some(tx);
        *self.worker.lock().unwrap() = Some(handle);
        self
    }

    pub fn channels(&self) -> &[ChannelConfig] {
        &self.inner.channels
    }

    /// Delivers on the calling thread and waits for the outcome.
    pub fn notify(&self, n: Notification) -> DeliveryReport {
        if !self.inner.admit(&n) {
            return DeliveryReport { dedupe_key: n.dedupe_key, suppressed: true, channels: Vec::new() };
        }
        self.inner.deliver(&n)
    }

    /// Queues delivery when running in the background, otherwise delivers
    /// inline. Returns false if the dedupe window suppressed it.
    pub fn enqueue(&self, n: Notification) -> bool {
        if !self.inner.admit(&n) {
            return false;
        }
        let queue = self.queue.lock().unwrap();
        match queue.as_ref() {
            Some(tx) => {
                *self.pending.count.lock().unwrap() += 1;
                if let Err(mpsc::SendError(n)) = tx.send(n) {
                    *self.pending.count.lock().unwrap() -= 1;
                    self.inner.deliver(&n);
                }
            }
            None => {
                drop(queue);
                self.inner.deliver(&n);
            }
        }
        true
    }

    /// Blocks until the background queue is empty.
    pub fn flush(&self) {
        let mut count = self.pending.count.lock().unwrap();
        while *count > 0 {
            count = self.pending.idle.wait(count).unwrap();
        }
    }

    /// Notifications that passed the dedupe check, in order.
    pub fn sent(&self) -> Vec<Notification> {
        self.inner.sent.lock().unwrap().clone()
    }

    pub fn reports(&self) -> Vec<DeliveryReport> {
        self.inner.reports.lock().unwrap().clone()
    }

    pub fn now(&self) -> Instant {
        self.inner.clock.now()
    }
}

impl Drop for Notifier {
    fn drop(&mut self) {
        self.queue.lock().unwrap().take();
        if let Some(h) = self.worker.lock().unwrap().take() {
            let _ = h.join();
        }
    }
}

/// Maps a fleet event to the alert it warrants, if any.
pub fn notification_for(event: &FleetEvent) -> Option<Notification> {
    let (severity, title, body, source, key) = match &event.kind {
        EventKind::Stalled { agent, heartbeat_age_secs } => (
            Severity::Warn,
            format!("{agent} stalled"),
            format!("no heartbeat for {} min, restarting", heartbeat_age_secs / 60),
            format!("fleet/{agent}"),
            format!("stalled:{agent}"),
        ),
        EventKind::Recovered { agent } => (
            Severity::Info,
            format!("{agent} recovered"),
            "session restarted and ready".to_string(),
            format!("fleet/{agent}"),
            format!("recovered:{agent}"),
        ),
        EventKind::RespawnCapReached { agent, respawn_count } => (
            Severity::Page,
            format!("{agent}: manual intervention needed"),
            format!("respawned {respawn_count} times and still failing; auto-restart disabled"),
            format!("fleet/{agent}"),
            format!("respawn_cap:{agent}"),
        ),
        EventKind::ItemSkipped { item_id, fix_attempts } => (
            Severity::Page,
            format!("{item_id} skipped"),
            format!("gave up after {fix_attempts} failed attempts"),
            format!("ledger/{item_id}"),
            format!("skipped:{item_id}"),
        ),
        EventKind::ItemEscalated { item_id, reason } => (
            Severity::Page,
            format!("{item_id} needs a human"),
            reason.clone(),
            format!("ledger/{item_id}"),
            format!("escalated:{item_id}"),
        ),
        _ => return None,
    };
    Some(Notification { severity, title, body, source, dedupe_key: key, at: event.at })
}

impl EventSink for Notifier {
    fn on_event(&self, event: &FleetEvent) {
        if let Some(n) = notification_for(event) {
            self.enqueue(n);
        }
    }
}
