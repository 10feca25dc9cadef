//! Operator commands: thin calls against a running supervisor.

use std::collections::BTreeMap;
use std::time::Duration;

use reqwest::blocking::{Client, RequestBuilder};
use reqwest::StatusCode;
use serde_json::{json, Value};

use hive_core::kernel::{KernelConfig, DEFAULT_PORT};

use crate::{Cli, Failure, Format};

pub fn base_url(cli: &Cli) -> String {
    if let Some(url) = &cli.url {
        return url.trim_end_matches('/').to_string();
    }
    let port = cli.port.unwrap_or_else(|| {
        KernelConfig::load(&cli.config, &BTreeMap::new()).map(|c| c.port).unwrap_or(DEFAULT_PORT)
    });
    format!("http://127.0.0.1:{port}")
}

fn client() -> Client {
    Client::builder().timeout(Duration::from_secs(10)).build().expect("http client")
}

/// Sends the request and returns the response body, mapping failures onto
/// exit classes.
fn send(req: RequestBuilder) -> Result<String, Failure> {
    let resp = req.send().map_err(|e| {
        if e.is_connect() || e.is_timeout() {
            Failure::Connectivity(format!("supervisor unreachable: {e}"))
        } else {
            Failure::Internal(e.to_string())
        }
    })?;
    let status = resp.status();
    let body = resp.text().map_err(|e| Failure::Connectivity(e.to_string()))?;
    if status.is_success() {
        return Ok(body);
    }
    let message = serde_json::from_str::<Value>(&body)
        .ok()
        .and_then(|v| v["error"].as_str().map(str::to_string))
        .unwrap_or_else(|| format!("{status}: {body}"));
    Err(match status {
        StatusCode::BAD_GATEWAY | StatusCode::SERVICE_UNAVAILABLE => Failure::Connectivity(message),
        s if s.is_client_error() => Failure::Validation(message),
        _ => Failure::Internal(message),
    })
}

fn json_body(body: &str) -> Result<Value, Failure> {
    serde_json::from_str(body).map_err(|e| Failure::Internal(format!("unexpected response: {e}")))
}

pub fn status(base: &str, format: Format) -> Result<(), Failure> {
    let body = send(client().get(format!("{base}/api/status")))?;
    match format {
        Format::Raw => println!("{body}"),
        Format::Table => print!("{}", status_table(&json_body(&body)?)),
    }
    Ok(())
}

fn status_table(doc: &Value) -> String {
    let gov = &doc["governor"];
    let mut out = format!(
        "mode {}  queue {}  intensity {:.2}\n\n",
        gov["mode"].as_str().unwrap_or("?"),
        gov["queue_size"],
        doc["intensity"].as_f64().unwrap_or(0.0)
    );
    out.push_str(&format!(
        "{:<14} {:<10} {:<10} {:<11} {:>9} {:>8}\n",
        "AGENT", "ROLE", "BACKEND", "STATE", "HEARTBEAT", "RESTARTS"
    ));
    for a in doc["agents"].as_array().into_iter().flatten() {
        let backend = match a["pinned"].as_bool() {
            Some(true) => format!("{}*", a["backend_id"].as_str().unwrap_or("")),
            _ => a["backend_id"].as_str().unwrap_or("").to_string(),
        };
        let heartbeat = a["heartbeat_age"].as_u64().map_or("-".to_string(), |s| format!("{s}s"));
        out.push_str(&format!(
            "{:<14} {:<10} {:<10} {:<11} {:>9} {:>8}\n",
            a["name"].as_str().unwrap_or(""),
            a["role"].as_str().unwrap_or(""),
            backend,
            a["session_state"].as_str().unwrap_or(""),
            heartbeat,
            a["respawn_count"]
        ));
    }
    out
}

pub fn kick(base: &str, agent: &str) -> Result<(), Failure> {
    let doc = json_body(&send(client().post(format!("{base}/api/agents/{agent}/kick")))?)?;
    let s = |k: &str| doc[k].as_str().unwrap_or("").to_string();
    match s("result").as_str() {
        "delivered" => println!("delivered ({})", s("kick_id")),
        "skipped" => println!("skipped: {}", s("reason")),
        "unavailable" => println!("unavailable: {}", s("state")),
        other => return Err(Failure::Internal(format!("unexpected kick result {other:?}"))),
    }
    Ok(())
}

pub fn switch(base: &str, agent: &str, backend: &str) -> Result<(), Failure> {
    let req = client().post(format!("{base}/api/agents/{agent}/backend")).json(&json!({ "backend_id": backend }));
    let doc = json_body(&send(req)?)?;
    let target = doc["backend_id"].as_str().unwrap_or(backend);
    if doc["deferred"].as_bool() == Some(true) {
        println!("pinned to {target} (applies when {agent} is next idle)");
    } else {
        println!("pinned to {target}");
    }
    Ok(())
}

pub fn add(base: &str, repo: &str, title: &str, kind: &str) -> Result<(), Failure> {
    let req = client().post(format!("{base}/api/ledger")).json(&json!({ "repo": repo, "kind": kind, "title": title }));
    let doc = json_body(&send(req)?)?;
    println!("added {}", doc["id"].as_str().unwrap_or("?"));
    Ok(())
}

pub fn reopen(base: &str, id: &str, reason: &str) -> Result<(), Failure> {
    let req = client().post(format!("{base}/api/ledger/{id}/reopen")).json(&json!({ "reason": reason }));
    let doc = json_body(&send(req)?)?;
    println!("reopened {} ({})", doc["id"].as_str().unwrap_or(id), doc["status"].as_str().unwrap_or("?"));
    Ok(())
}
