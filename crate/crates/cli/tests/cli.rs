use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

const HIVE: &str = env!("CARGO_BIN_EXE_hive");

fn hive(args: &[&str]) -> Output {
    Command::new(HIVE).args(args).env_remove("HIVE_CONFIG").env_remove("HIVE_PORT").env_remove("HIVE_URL").output().unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn write(dir: &Path, name: &str, body: &str) {
    let path = dir.join(name);
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    std::fs::write(path, body).unwrap();
}

fn site() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(d, "hive.conf", "AGENTS_CONF=agents.conf\nPORT=0\n");
    write(
        d,
        "agents.conf",
        "SCANNER_ROLE=scanner\nREVIEWER_ROLE=reviewer\nARCHITECT_ROLE=architect\nOUTREACH_ROLE=outreach\n",
    );
    for a in ["scanner", "reviewer", "architect", "outreach"] {
        write(d, &format!("policies/{a}.md"), "work\n");
    }
    write(d, "notify.conf", "CHANNEL_LOG_KIND=stdout\nCHANNEL_LOG_MIN_SEVERITY=page\n");
    dir
}

struct Supervisor {
    child: Child,
    url: String,
}

impl Supervisor {
    fn start(dir: &Path) -> Supervisor {
        let mut child = Command::new(HIVE)
            .args(["supervisor", "--config"])
            .arg(dir.join("hive.conf"))
            .env("HIVE_LOG", "warn")
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .unwrap();
        let mut line = String::new();
        BufReader::new(child.stdout.as_mut().unwrap()).read_line(&mut line).unwrap();
        let url = line.trim().rsplit(' ').next().unwrap().to_string();
        assert!(url.starts_with("http://127.0.0.1:"), "{line:?}");
        Supervisor { child, url }
    }

    fn run(&self, args: &[&str]) -> Output {
        let mut all = vec!["--url", self.url.as_str()];
        all.extend_from_slice(args);
        hive(&all)
    }

    fn terminate(mut self) -> i32 {
        unsafe {
            libc::kill(self.child.id() as libc::pid_t, libc::SIGTERM);
        }
        let deadline = Instant::now() + Duration::from_secs(20);
        loop {
            if let Some(status) = self.child.try_wait().unwrap() {
                return status.code().unwrap_or(-1);
            }
            assert!(Instant::now() < deadline, "supervisor ignored SIGTERM");
            std::thread::sleep(Duration::from_millis(50));
        }
    }
}

impl Drop for Supervisor {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[test]
fn supervisor_serves_commands_and_stops_cleanly_on_sigterm() {
    let dir = site();
    let sup = Supervisor::start(dir.path());

    let out = sup.run(&["status"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let table = text(&out.stdout);
    assert!(table.starts_with("mode IDLE  queue 0"), "{table}");
    for a in ["scanner", "reviewer", "architect", "outreach"] {
        assert!(table.lines().any(|l| l.starts_with(a)), "{table}");
    }

    let out = sup.run(&["status", "--format", "raw"]);
    let doc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(doc["agents"].as_array().unwrap().len(), 4);

    let out = sup.run(&["add", "console", "broken link"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert_eq!(text(&out.stdout).trim(), "added wi-000001");

    sup.run(&["kick", "scanner"]);
    let out = sup.run(&["kick", "scanner"]);
    assert!(out.status.success());
    assert_eq!(text(&out.stdout).trim(), "skipped: busy");

    let out = sup.run(&["kick", "nobody"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("nobody"));

    let out = sup.run(&["switch", "architect", "sim"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(text(&out.stdout).starts_with("pinned to sim"));
    let out = sup.run(&["switch", "architect", "gpt"]);
    assert_eq!(out.status.code(), Some(1));

    let out = sup.run(&["reopen", "wi-000001"]);
    assert_eq!(out.status.code(), Some(1));

    assert_eq!(sup.terminate(), 0);
    let events = std::fs::read_to_string(dir.path().join("run/ledger/ledger.events")).unwrap();
    assert!(events.contains("broken link"));
    assert!(dir.path().join("run/pins.json").exists());
}

#[test]
fn missing_policy_file_fails_startup_naming_it() {
    let dir = site();
    std::fs::remove_file(dir.path().join("policies/outreach.md")).unwrap();
    let conf = dir.path().join("hive.conf");
    let out = hive(&["supervisor", "--config", conf.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = text(&out.stderr);
    assert!(err.contains("[fleet]") && err.contains("outreach.md"), "{err}");
}

#[test]
fn client_commands_without_a_supervisor_report_connectivity() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let out = hive(&["--port", &port.to_string(), "status"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("unreachable"));
}

#[test]
fn sim_writes_reports_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let run = hive(&["sim", "burst", "--out", out.to_str().unwrap()]);
        assert!(run.status.success(), "{}", text(&run.stderr));
        assert!(text(&run.stdout).contains("replay ok, invariants ok"));
    }
    let report = std::fs::read_to_string(a.join("report.json")).unwrap();
    assert!(report.contains("\"SURGE\""));
    assert_eq!(report, std::fs::read_to_string(b.join("report.json")).unwrap());
    for f in ["mode_trace.csv", "items.csv", "ledger.events"] {
        assert!(a.join(f).exists(), "{f}");
    }
}

#[test]
fn sim_rejects_malformed_scenarios() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{ "seed": 1, "horizon": -5, "agents": [] }"#).unwrap();
    let out = hive(&["sim", bad.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("bad.json"));

    let out = hive(&["sim", "no-such-scenario"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("bundled: burst"));
}
