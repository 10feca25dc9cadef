use std::path::Path;

use hive_core::simharness::{self, bundled, bundled_scenario, Scenario, SimReport};

use crate::Failure;

fn load(arg: &str) -> Result<Scenario, Failure> {
    let path = Path::new(arg);
    if path.exists() {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Validation(format!("{arg}: {e}")))?;
        return Scenario::from_json(&text).map_err(|e| Failure::Validation(format!("{arg}: {e}")));
    }
    bundled_scenario(arg).ok_or_else(|| {
        let names: Vec<&str> = bundled().into_iter().map(|(n, _)| n).collect();
        Failure::Validation(format!("{arg}: no such file or bundled scenario (bundled: {})", names.join(", ")))
    })
}

fn summary(r: &SimReport) -> String {
    let c = &r.counts;
    let mut out = format!(
        "scenario {} seed {}: {} arrived, {} done, {} skip, {} escalated, {} open, {} in progress\n",
        r.scenario, r.seed, c.arrived, c.done, c.skip, c.escalated, c.open, c.in_progress
    );
    let mut changes = Vec::new();
    let mut last = None;
    for p in &r.mode_trace {
        if last != Some(p.mode) {
            changes.push(format!("{}@{}s", p.mode, p.at.as_millis() / 1000));
            last = Some(p.mode);
        }
    }
    out.push_str(&format!("modes: {}\n", changes.join(" ")));
    if let Some(f) = &r.fix_time {
        out.push_str(&format!("time to done: median {:.0}s, p90 {:.0}s over {} items\n", f.median_secs, f.p90_secs, f.count));
    }
    let delivered: Vec<String> = r.kicks.delivered.iter().map(|(role, n)| format!("{role} {n}")).collect();
    out.push_str(&format!(
        "kicks: {}; skipped busy {}, unavailable {}\n",
        delivered.join(", "),
        r.kicks.skipped_busy,
        r.kicks.unavailable
    ));
    out.push_str(&format!("notifications: {}\n", r.notifications.len()));
    out
}

pub fn run(arg: &str, out: &Path) -> Result<(), Failure> {
    let scenario = load(arg)?;
    let run = simharness::run(&scenario).map_err(|e| Failure::Validation(e.to_string()))?;
    let report = &run.report;
    let replayed = simharness::replay(report, &run.ledger_lines);
    let invariants = report.invariants_hold();

    std::fs::create_dir_all(out).map_err(|e| Failure::Internal(format!("{}: {e}", out.display())))?;
    let mut ledger = run.ledger_lines.join("\n");
    ledger.push('\n');
    let files = [
        ("report.json", report.to_json()),
        ("mode_trace.csv", report.mode_trace_csv()),
        ("items.csv", report.items_csv()),
        ("ledger.events", ledger),
    ];
    for (name, text) in &files {
        let path = out.join(name);
        std::fs::write(&path, text).map_err(|e| Failure::Internal(format!("{}: {e}", path.display())))?;
    }

    print!("{}", summary(report));
    println!("replay {}, invariants {}", ok(replayed), ok(invariants));
    println!("wrote {}", out.display());
    if replayed && invariants {
        Ok(())
    } else {
        Err(Failure::Validation("scenario invariants did not hold".into()))
    }
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "FAILED"
    }
}
