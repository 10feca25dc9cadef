//! `agents.conf`: the fleet definition.
//!
//! ```text
//! SCANNER_ROLE=scanner
//! SCANNER_BACKEND=claude
//! SCANNER_POLICY=policies/scanner.md
//! BACKEND_CLAUDE_CMD="claude-agent --stdin"
//! MAX_RESPAWNS=3
//! ```
//!
//! Every `<NAME>_ROLE` key declares an agent named `<name>` (lowercased).
//! Backend defaults to `sim`, policy to `<policies_dir>/<name>.md`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::clock::Duration;
use crate::governor::Role;

use super::FleetConfig;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AgentSpec {
    pub name: String,
    pub role: Role,
    pub backend: String,
    pub policy: PathBuf,
    pub self_scheduled: bool,
}

impl AgentSpec {
    pub fn new(name: impl Into<String>, role: Role, backend: impl Into<String>, policy: impl Into<PathBuf>) -> Self {
        AgentSpec {
            name: name.into(),
            role,
            backend: backend.into(),
            policy: policy.into(),
            self_scheduled: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FleetFile {
    pub agents: Vec<AgentSpec>,
    /// Backend id (lowercased) to shell command.
    pub backend_commands: BTreeMap<String, String>,
    pub max_respawns: Option<u32>,
    pub heartbeat_stale: Option<Duration>,
    pub ready_timeout: Option<Duration>,
}

impl FleetFile {
    pub fn parse(text: &str, policies_dir: &Path) -> Result<FleetFile, String> {
        let pairs = crate::fsutil::parse_env_str(text).map_err(|e| e.to_string())?;
        Self::from_pairs(&pairs, policies_dir)
    }

    pub fn load(path: &Path, policies_dir: &Path) -> Result<FleetFile, String> {
        let pairs = crate::fsutil::read_env_file(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_pairs(&pairs, policies_dir)
    }

    pub fn from_pairs(pairs: &BTreeMap<String, String>, policies_dir: &Path) -> Result<FleetFile, String> {
        let mut out = FleetFile::default();
        let mut errors = Vec::new();
        let num = |key: &str, errors: &mut Vec<String>| -> Option<u64> {
            let v = pairs.get(key)?;
            match v.trim().parse() {
                Ok(n) => Some(n),
                Err(_) => {
                    errors.push(format!("{key}: expected a non-negative integer, got {v:?}"));
                    None
                }
            }
        };
        out.max_respawns = num("MAX_RESPAWNS", &mut errors).map(|n| n as u32);
        out.heartbeat_stale = num("HEARTBEAT_STALE_SECS", &mut errors).map(Duration::from_secs);
        out.ready_timeout = num("READY_TIMEOUT_SECS", &mut errors).map(Duration::from_secs);

        for (key, value) in pairs {
            if let Some(id) = key.strip_prefix("BACKEND_").and_then(|k| k.strip_suffix("_CMD")) {
                out.backend_commands.insert(id.to_ascii_lowercase(), value.clone());
                continue;
            }
            let Some(upper) = key.strip_suffix("_ROLE") else { continue };
            let name = upper.to_ascii_lowercase();
            let role = match value.parse::<Role>() {
                Ok(r) => r,
                Err(e) => {
                    errors.push(format!("{key}: {e}"));
                    continue;
                }
            };
            let backend = pairs
                .get(&format!("{upper}_BACKEND"))
                .map(|b| b.to_ascii_lowercase())
                .unwrap_or_else(|| "sim".to_string());
            let policy = pairs
                .get(&format!("{upper}_POLICY"))
                .map(PathBuf::from)
                .unwrap_or_else(|| policies_dir.join(format!("{name}.md")));
            let self_scheduled = pairs
                .get(&format!("{upper}_SELF_SCHEDULED"))
                .is_some_and(|v| matches!(v.trim().to_ascii_lowercase().as_str(), "1" | "true" | "yes"));
            out.agents.push(AgentSpec { name, role, backend, policy, self_scheduled });
        }
        if errors.is_empty() {
            Ok(out)
        } else {
            Err(errors.join("; "))
        }
    }

    pub fn apply_to(&self, config: &mut FleetConfig) {
        if let Some(n) = self.max_respawns {
            config.max_respawns = n;
        }
        if let Some(d) = self.heartbeat_stale {
            config.heartbeat_stale = d;
        }
        if let Some(d) = self.ready_timeout {
            config.ready_timeout = d;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_agents_and_backends() {
        let text = "\
SCANNER_ROLE=scanner
SCANNER_BACKEND=Claude
REVIEWER_ROLE=reviewer
REVIEWER_POLICY=/etc/hive/review.md
ARCHIE_ROLE=architect
ARCHIE_SELF_SCHEDULED=true
BACKEND_CLAUDE_CMD=\"claude-agent --stdin\"
MAX_RESPAWNS=5
";
        let f = FleetFile::parse(text, Path::new("policies")).unwrap();
        assert_eq!(f.agents.len(), 3);
        let by_name: BTreeMap<_, _> = f.agents.iter().map(|a| (a.name.as_str(), a)).collect();
        assert_eq!(by_name["scanner"].backend, "claude");
        assert_eq!(by_name["scanner"].policy, PathBuf::from("policies/scanner.md"));
        assert_eq!(by_name["reviewer"].policy, PathBuf::from("/etc/hive/review.md"));
        assert_eq!(by_name["reviewer"].backend, "sim");
        assert!(by_name["archie"].self_scheduled);
        assert_eq!(f.backend_commands["claude"], "claude-agent --stdin");
        assert_eq!(f.max_respawns, Some(5));
    }

    #[test]
    fn reports_every_bad_key() {
        let err = FleetFile::parse("X_ROLE=janitor\nMAX_RESPAWNS=lots\n", Path::new("p")).unwrap_err();
        assert!(err.contains("X_ROLE"), "{err}");
        assert!(err.contains("MAX_RESPAWNS"), "{err}");
    }
}
