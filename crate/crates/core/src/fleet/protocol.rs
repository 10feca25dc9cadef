//! Text protocol spoken on agent session channels.
//!
//! Input channel, one line per kick:
//! `@@KICK <kick_id> role=<role> mode=<mode> queue=<n> policy=<path>@@`
//!
//! Output channel sentinels: `@@READY@@`, `@@DONE <kick_id> ok@@`,
//! `@@DONE <kick_id> fail@@`, and optionally `@@TOKENS <n>@@` to report
//! token usage. Anything else on the output channel is ordinary agent chatter.

use std::path::PathBuf;

use crate::governor::{KickOrder, Mode, Role};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WorkOrder {
    pub kick_id: String,
    pub role: Role,
    pub mode: Mode,
    pub queue: u64,
    pub policy: PathBuf,
}

impl WorkOrder {
    pub fn for_kick(order: &KickOrder, policy: PathBuf) -> Self {
        WorkOrder {
            kick_id: order.kick_id.clone(),
            role: order.role,
            mode: order.mode,
            queue: order.queue_snapshot,
            policy,
        }
    }

    pub fn render(&self) -> String {
        format!(
            "@@KICK {} role={} mode={} queue={} policy={}@@",
            self.kick_id,
            self.role,
            self.mode,
            self.queue,
            self.policy.display()
        )
    }

    pub fn parse(line: &str) -> Option<WorkOrder> {
        let body = line.trim().strip_prefix("@@KICK ")?.strip_suffix("@@")?;
        let (kick_id, rest) = body.split_once(' ')?;
        let rest = rest.strip_prefix("role=")?;
        let (role, rest) = rest.split_once(" mode=")?;
        let (mode, rest) = rest.split_once(" queue=")?;
        let (queue, policy) = rest.split_once(" policy=")?;
        Some(WorkOrder {
            kick_id: kick_id.to_string(),
            role: role.parse().ok()?,
            mode: mode.parse().ok()?,
            queue: queue.parse().ok()?,
            policy: PathBuf::from(policy),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Sentinel {
    Ready,
    Done { kick_id: String, ok: bool },
    Tokens(u64),
}

impl Sentinel {
    pub fn parse(line: &str) -> Option<Sentinel> {
        let body = line.trim().strip_prefix("@@")?.strip_suffix("@@")?;
        if body == "READY" {
            return Some(Sentinel::Ready);
        }
        if let Some(rest) = body.strip_prefix("DONE ") {
            let (kick_id, status) = rest.rsplit_once(' ')?;
            let ok = match status {
                "ok" => true,
                "fail" => false,
                _ => return None,
            };
            return Some(Sentinel::Done { kick_id: kick_id.to_string(), ok });
        }
        if let Some(n) = body.strip_prefix("TOKENS ") {
            return n.trim().parse().ok().map(Sentinel::Tokens);
        }
        None
    }

    pub fn render(&self) -> String {
        match self {
            Sentinel::Ready => "@@READY@@".to_string(),
            Sentinel::Done { kick_id, ok } => {
                format!("@@DONE {kick_id} {}@@", if *ok { "ok" } else { "fail" })
            }
            Sentinel::Tokens(n) => format!("@@TOKENS {n}@@"),
        }
    }
}
