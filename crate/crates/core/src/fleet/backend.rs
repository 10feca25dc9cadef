//! Backend adapters and heartbeat storage.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::{Arc, Mutex};

use crate::clock::Instant;
use crate::governor::Role;

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("session has exited")]
    SessionDead,
    #[error("failed to start session: {0}")]
    Start(String),
    #[error("session i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// What a backend needs to launch one agent session.
pub struct SessionSpec<'a> {
    pub agent: &'a str,
    pub role: Role,
    pub policy_path: &'a Path,
    pub heartbeats: Arc<dyn HeartbeatStore>,
}

/// Launches agent sessions. Identified by an opaque id such as `claude` or `sim`.
pub trait AgentBackend: Send + Sync {
    fn id(&self) -> &str;
    fn start(&self, spec: &SessionSpec<'_>) -> Result<Box<dyn Session>, BackendError>;
}

/// A live agent session with a text input channel and a line-oriented
/// output channel. While alive, the session must keep its heartbeat fresh.
pub trait Session: Send {
    fn deliver(&mut self, work_order: &str) -> Result<(), BackendError>;
    /// Output lines produced since the previous call.
    fn drain_output(&mut self) -> Vec<String>;
    fn is_alive(&mut self) -> bool;
    fn terminate(&mut self);
}

/// Where agents record liveness.
pub trait HeartbeatStore: Send + Sync {
    fn touch(&self, agent: &str, at: Instant);
    fn last(&self, agent: &str) -> Option<Instant>;
    /// Backing file, when the store is file based.
    fn path_for(&self, _agent: &str) -> Option<PathBuf> {
        None
    }
}

#[derive(Default)]
pub struct MemoryHeartbeats(Mutex<BTreeMap<String, Instant>>);

impl MemoryHeartbeats {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }
}

impl HeartbeatStore for MemoryHeartbeats {
    fn touch(&self, agent: &str, at: Instant) {
        self.0.lock().unwrap().insert(agent.to_string(), at);
    }

    fn last(&self, agent: &str) -> Option<Instant> {
        self.0.lock().unwrap().get(agent).copied()
    }
}

/// `<dir>/heartbeat.<agent>` files holding epoch seconds. An empty or
/// unparsable file falls back to its mtime, so agents may simply `touch` it.
pub struct FileHeartbeats {
    dir: PathBuf,
}

impl FileHeartbeats {
    pub fn new(dir: impl Into<PathBuf>) -> std::io::Result<Arc<Self>> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Arc::new(FileHeartbeats { dir }))
    }

    fn file(&self, agent: &str) -> PathBuf {
        self.dir.join(format!("heartbeat.{agent}"))
    }
}

impl HeartbeatStore for FileHeartbeats {
    fn touch(&self, agent: &str, at: Instant) {
        if let Err(e) = fs::write(self.file(agent), format!("{}\n", at.as_millis() / 1000)) {
            tracing::warn!(agent, error = %e, "could not write heartbeat");
        }
    }

    fn last(&self, agent: &str) -> Option<Instant> {
        let path = self.file(agent);
        let text = fs::read_to_string(&path).ok()?;
        if let Ok(secs) = text.trim().parse::<u64>() {
            return Some(Instant::from_secs(secs));
        }
        let mtime = fs::metadata(&path).ok()?.modified().ok()?;
        let ms = mtime.duration_since(std::time::UNIX_EPOCH).ok()?.as_millis();
        Some(Instant::from_millis(ms as u64))
    }

    fn path_for(&self, agent: &str) -> Option<PathBuf> {
        Some(self.file(agent))
    }
}

/// Runs an external command per session. The command receives work orders
/// on stdin and must print sentinels on stdout. Environment passed to the
/// child: `HIVE_AGENT`, `HIVE_ROLE`, `HIVE_POLICY`, and `HIVE_HEARTBEAT` when
/// heartbeats are file based.
pub struct ProcessBackend {
    id: String,
    command: String,
}

impl ProcessBackend {
    pub fn new(id: impl Into<String>, command: impl Into<String>) -> Self {
        ProcessBackend { id: id.into(), command: command.into() }
    }
}

impl AgentBackend for ProcessBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn start(&self, spec: &SessionSpec<'_>) -> Result<Box<dyn Session>, BackendError> {
        let mut cmd = Command::new("sh");
        cmd.arg("-c")
            .arg(&self.command)
            .env("HIVE_AGENT", spec.agent)
            .env("HIVE_ROLE", spec.role.as_str())
            .env("HIVE_POLICY", spec.policy_path)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null());
        if let Some(hb) = spec.heartbeats.path_for(spec.agent) {
            cmd.env("HIVE_HEARTBEAT", hb);
        }
        let mut child = cmd.spawn().map_err(|e| BackendError::Start(e.to_string()))?;
        let stdin = child.stdin.take();
        let stdout = child.stdout.take().ok_or_else(|| BackendError::Start("no stdout".into()))?;
        let output = Arc::new(Mutex::new(VecDeque::new()));
        let sink = Arc::clone(&output);
        std::thread::Builder::new()
            .name(format!("hive-out-{}", spec.agent))
            .spawn(move || {
                for line in BufReader::new(stdout).lines() {
                    match line {
                        Ok(line) => sink.lock().unwrap().push_back(line),
                        Err(_) => break,
                    }
                }
            })
            .map_err(|e| BackendError::Start(e.to_string()))?;
        Ok(Box::new(ProcessSession { child, stdin, output }))
    }
}

struct ProcessSession {
    child: Child,
    stdin: Option<ChildStdin>,
    output: Arc<Mutex<VecDeque<String>>>,
}

impl Session for ProcessSession {
    fn deliver(&mut self, work_order: &str) -> Result<(), BackendError> {
        let stdin = self.stdin.as_mut().ok_or(BackendError::SessionDead)?;
        writeln!(stdin, "{work_order}")?;
        stdin.flush()?;
        Ok(())
    }

    fn drain_output(&mut self) -> Vec<String> {
        self.output.lock().unwrap().drain(..).collect()
    }

    fn is_alive(&mut self) -> bool {
        matches!(self.child.try_wait(), Ok(None))
    }

    fn terminate(&mut self) {
        self.stdin = None;
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for ProcessSession {
    fn drop(&mut self) {
        self.terminate();
    }
}
