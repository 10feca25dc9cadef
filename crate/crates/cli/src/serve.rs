//! Long-running commands: the supervisor and the standalone dashboard.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use hive_core::clock::{SharedClock, SystemClock};
use hive_core::kernel::{KernelConfig, StartupError};
use hive_gateway::{proxy_router, serve, Gateway};
use tokio::net::TcpListener;

use crate::Failure;

const DASHBOARD_PORT: u16 = 3002;

fn init_logging() {
    use tracing_subscriber::filter::LevelFilter;
    let level = std::env::var("HIVE_LOG").ok().and_then(|v| v.parse().ok()).unwrap_or(LevelFilter::INFO);
    let _ = tracing_subscriber::fmt().with_max_level(level).with_writer(std::io::stderr).try_init();
}

fn startup(e: StartupError) -> Failure {
    match e.component {
        "config" | "fleet" | "governor" | "notifier" => Failure::Validation(e.to_string()),
        _ => Failure::Internal(e.to_string()),
    }
}

fn runtime() -> Result<tokio::runtime::Runtime, Failure> {
    tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(|e| Failure::Internal(e.to_string()))
}

async fn bind(host: &str, port: u16) -> Result<TcpListener, Failure> {
    TcpListener::bind((host, port)).await.map_err(|e| Failure::Connectivity(format!("[gateway] bind {host}:{port}: {e}")))
}

async fn terminated() {
    use tokio::signal::unix::{signal, SignalKind};
    let mut term = signal(SignalKind::terminate()).expect("SIGTERM handler");
    tokio::select! {
        _ = term.recv() => {}
        _ = tokio::signal::ctrl_c() => {}
    }
}

fn announce(what: &str, addr: std::net::SocketAddr) {
    use std::io::Write;
    println!("hive {what} listening on http://{addr}");
    let _ = std::io::stdout().flush();
}

pub fn supervisor(config: &Path, overrides: BTreeMap<String, String>, host: &str) -> Result<(), Failure> {
    init_logging();
    let cfg = KernelConfig::load(config, &overrides).map_err(startup)?;
    let clock = Arc::new(SystemClock::new());
    let shared: SharedClock = clock.clone();
    let kernel = cfg.assemble(shared).map_err(startup)?;
    let rt = runtime()?;
    let result = rt.block_on(async {
        // Bind before anything starts so a busy port leaves nothing to undo.
        let listener = bind(host, cfg.port).await?;
        let addr = listener.local_addr().map_err(|e| Failure::Internal(e.to_string()))?;
        let gateway = Gateway::new(kernel.clone());
        let k = kernel.clone();
        tokio::task::spawn_blocking(move || k.start()).await.map_err(|e| Failure::Internal(e.to_string()))?;
        announce("supervisor", addr);

        let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
        let server = tokio::spawn(serve(listener, gateway.router(), async {
            let _ = stopped.await;
        }));
        terminated().await;
        tracing::info!("shutting down");
        gateway.close();
        let _ = stop.send(());
        let served = server.await;
        let k = kernel.clone();
        tokio::task::spawn_blocking(move || k.shutdown()).await.map_err(|e| Failure::Internal(e.to_string()))?;
        match served {
            Ok(Ok(())) => Ok(()),
            Ok(Err(e)) => Err(Failure::Internal(format!("[gateway] {e}"))),
            Err(e) => Err(Failure::Internal(e.to_string())),
        }
    });
    clock.shutdown();
    result
}

pub fn dashboard(host: &str, port: Option<u16>, upstream: &str) -> Result<(), Failure> {
    init_logging();
    let rt = runtime()?;
    rt.block_on(async {
        let listener = bind(host, port.unwrap_or(DASHBOARD_PORT)).await?;
        let addr = listener.local_addr().map_err(|e| Failure::Internal(e.to_string()))?;
        announce("dashboard", addr);
        tracing::info!(%upstream, "forwarding /api to the supervisor");
        serve(listener, proxy_router(upstream), terminated()).await.map_err(|e| Failure::Internal(e.to_string()))
    })
}
