use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use hive_core::clock::{Duration, Instant, VirtualClock};
use hive_core::notifier::{ChannelConfig, ChannelKind, Notification, Notifier, Severity};

/// Minimal HTTP endpoint answering every request with `status`, recording
/// headers and bodies.
fn endpoint(status: u16) -> (String, Arc<AtomicUsize>, Arc<Mutex<Vec<(String, String)>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/hook", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let seen = Arc::new(Mutex::new(Vec::new()));
    let (h, s) = (hits.clone(), seen.clone());
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut head = String::new();
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap_or(0);
                }
                head.push_str(&line);
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            h.fetch_add(1, Ordering::SeqCst);
            s.lock().unwrap().push((head, String::from_utf8_lossy(&body).into_owned()));
            let reason = if status == 200 { "OK" } else { "Error" };
            let _ = write!(stream, "HTTP/1.1 {status} {reason}\r\nContent-Length: 0\r\nConnection: close\r\n\r\n");
        }
    });
    (url, hits, seen)
}

fn page() -> Notification {
    Notification {
        severity: Severity::Page,
        title: "scanner: manual intervention needed".into(),
        body: "respawned 3 times".into(),
        source: "fleet/scanner".into(),
        dedupe_key: "respawn_cap:scanner".into(),
        at: Instant::EPOCH,
    }
}

#[test]
fn failing_webhook_is_tried_three_times_without_blocking() {
    let (url, hits, _) = endpoint(500);
    let channel = ChannelConfig { kind: ChannelKind::Slack, url: Some(url), min_severity: Severity::Info };
    let notifier = Notifier::new(VirtualClock::new().shared(), vec![channel])
        .with_backoff(Duration::from_millis(20))
        .start_background();
    let t0 = std::time::Instant::now();
    notifier.enqueue(page());
    assert!(t0.elapsed() < Duration::from_millis(20));
    notifier.flush();
    assert_eq!(hits.load(Ordering::SeqCst), 3);
    let report = &notifier.reports()[0];
    assert_eq!(report.channels[0].attempts, 3);
    assert!(!report.channels[0].delivered);
}

#[test]
fn ntfy_gets_title_header_and_plain_body() {
    let (url, hits, seen) = endpoint(200);
    let channel = ChannelConfig { kind: ChannelKind::Ntfy, url: Some(url), min_severity: Severity::Warn };
    let notifier = Notifier::new(VirtualClock::new().shared(), vec![channel]);
    let report = notifier.notify(page());
    assert!(report.channels[0].delivered);
    assert_eq!(hits.load(Ordering::SeqCst), 1);
    let (head, body) = seen.lock().unwrap()[0].clone();
    assert!(head.to_ascii_lowercase().contains("title: scanner: manual intervention needed"), "{head}");
    assert_eq!(body, "respawned 3 times");
}
