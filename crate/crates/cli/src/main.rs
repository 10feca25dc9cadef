use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod client;
mod serve;
mod sim;

/// Run and operate an agent hive.
#[derive(Parser)]
#[command(name = "hive", version)]
struct Cli {
    /// Path to hive.conf.
    #[arg(long, global = true, env = "HIVE_CONFIG", default_value = "hive.conf")]
    config: PathBuf,
    /// Dashboard port: the one to listen on, or the one to talk to.
    #[arg(long, global = true, env = "HIVE_PORT")]
    port: Option<u16>,
    /// Supervisor base URL for client commands; overrides --port.
    #[arg(long, global = true, env = "HIVE_URL")]
    url: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start the ledger, fleet, governor, notifier and web dashboard.
    Supervisor {
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
    },
    /// Serve the web UI against an already running supervisor.
    Dashboard {
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
    },
    /// Show governor mode, queue and agent states.
    Status {
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
    /// Kick an agent now.
    Kick { agent: String },
    /// Move an agent to another backend and pin it there.
    Switch { agent: String, backend: String },
    /// Add a work item to the ledger.
    Add {
        repo: String,
        title: String,
        #[arg(long, default_value = "issue")]
        kind: String,
    },
    /// Reopen a finished, skipped or escalated work item.
    Reopen {
        id: String,
        #[arg(long, default_value = "")]
        reason: String,
    },
    /// Run a scenario file (or a bundled scenario by name) on a virtual clock.
    Sim {
        scenario: String,
        #[arg(long, default_value = "sim-out")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Raw,
}

#[derive(Debug)]
pub enum Failure {
    Validation(String),
    Connectivity(String),
    Internal(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Connectivity(_) => 2,
            Failure::Internal(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Validation(m) | Failure::Connectivity(m) | Failure::Internal(m) => m,
        }
    }
}

/// `HIVE_<KEY>` environment variables, minus the ones that map to flags,
/// become hive.conf overrides.
fn env_overrides(port: Option<u16>) -> BTreeMap<String, String> {
    let mut out: BTreeMap<String, String> = std::env::vars()
        .filter_map(|(k, v)| Some((k.strip_prefix("HIVE_")?.to_string(), v)))
        .filter(|(k, _)| !matches!(k.as_str(), "CONFIG" | "URL" | "LOG"))
        .collect();
    if let Some(p) = port {
        out.insert("PORT".into(), p.to_string());
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Supervisor { bind } => serve::supervisor(&cli.config, env_overrides(cli.port), bind),
        Command::Dashboard { bind } => serve::dashboard(bind, cli.port, &client::base_url(&cli)),
        Command::Status { format } => client::status(&client::base_url(&cli), *format),
        Command::Kick { agent } => client::kick(&client::base_url(&cli), agent),
        Command::Switch { agent, backend } => client::switch(&client::base_url(&cli), agent, backend),
        Command::Add { repo, title, kind } => client::add(&client::base_url(&cli), repo, title, kind),
        Command::Reopen { id, reason } => client::reopen(&client::base_url(&cli), id, reason),
        Command::Sim { scenario, out } => sim::run(scenario, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("hive: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
