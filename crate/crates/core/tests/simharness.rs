use hive_core::governor::Mode;
use hive_core::ledger::ItemStatus;
use hive_core::notifier::Severity;
use hive_core::simharness::{self, bundled_scenario, Scenario, ScenarioError};

fn scenario(json: &str) -> Scenario {
    Scenario::from_json(json).unwrap()
}

#[test]
fn same_seed_gives_identical_reports() {
    for name in ["burst", "steady", "flaky", "quiet"] {
        let s = bundled_scenario(name).unwrap();
        let a = simharness::run(&s).unwrap();
        let b = simharness::run(&s).unwrap();
        assert_eq!(a.report.to_json(), b.report.to_json(), "{name}");
        assert_eq!(a.ledger_lines, b.ledger_lines, "{name}");
    }
}

#[test]
fn different_seeds_change_poisson_arrivals() {
    let base = bundled_scenario("steady").unwrap();
    let mut other = base.clone();
    other.seed += 1;
    let a = simharness::run(&base).unwrap().report;
    let b = simharness::run(&other).unwrap().report;
    assert_ne!(a.items_csv(), b.items_csv());
}

#[test]
fn every_bundled_run_conserves_items_and_replays() {
    for name in ["burst", "steady", "flaky", "quiet"] {
        let run = simharness::run(&bundled_scenario(name).unwrap()).unwrap();
        assert!(run.report.invariants_hold(), "{name}");
        assert!(simharness::replay(&run.report, &run.ledger_lines), "{name}");
    }
}

#[test]
fn hopeless_category_is_skipped_after_three_attempts_with_one_page_each() {
    let s = scenario(
        r#"{
            "seed": 5, "horizon": 14400,
            "arrivals": [
                { "at": 0, "repo": "console", "title": "operator docs", "count": 2 },
                { "at": 0, "repo": "console", "title": "ally label", "count": 2 }
            ],
            "agents": [ { "role": "scanner", "count": 2, "behavior": {
                "service_time": 300,
                "success_overrides": [ { "title_contains": "operator", "p": 0.0 } ]
            } } ]
        }"#,
    );
    let report = simharness::run(&s).unwrap().report;
    for item in &report.items {
        if item.title.starts_with("operator") {
            assert_eq!(item.status, ItemStatus::Skip, "{}", item.id);
            assert_eq!(item.fix_attempts, 3);
            let pages = report
                .notifications
                .iter()
                .filter(|n| n.severity == Severity::Page && n.dedupe_key == format!("skipped:{}", item.id))
                .count();
            assert_eq!(pages, 1, "{}", item.id);
        } else {
            assert_eq!(item.status, ItemStatus::Done);
        }
    }
    let tuning = report.tuning.iter().find(|r| r.category == "console").unwrap();
    assert_eq!(tuning.merged, 2);
    assert_eq!(tuning.closed, 6);
}

#[test]
fn certain_success_finishes_everything_without_pages() {
    let s = scenario(
        r#"{
            "seed": 1, "horizon": 21600,
            "arrivals": [ { "at": 0, "repo": "console", "count": 8 }, { "at": 900, "repo": "docs", "kind": "pr", "count": 4 } ],
            "agents": [ { "role": "scanner", "count": 2 }, { "role": "reviewer" } ]
        }"#,
    );
    let report = simharness::run(&s).unwrap().report;
    assert_eq!(report.counts.done, 12);
    assert!(report.notifications.iter().all(|n| n.severity != Severity::Page));
    assert_eq!(report.fix_time.as_ref().unwrap().count, 12);
}

#[test]
fn burst_opens_in_surge() {
    let report = simharness::run(&bundled_scenario("burst").unwrap()).unwrap().report;
    assert_eq!(report.mode_trace[0].mode, Mode::Surge);
    assert_eq!(report.mode_trace[0].queue, 25);
    assert_eq!(report.mode_trace.last().unwrap().mode, Mode::Idle);
}

#[test]
fn invalid_scenarios_name_the_field() {
    let err = Scenario::from_json(
        r#"{ "seed": 1, "horizon": 600, "arrivals": [ { "at": 900, "repo": "console" } ], "agents": [] }"#,
    )
    .unwrap_err();
    let ScenarioError::Invalid(fields) = err else { panic!("{err:?}") };
    assert!(fields.iter().any(|f| f.starts_with("arrivals[0].at")), "{fields:?}");

    let err = Scenario::from_json(r#"{ "seed": 1, "horizon": 600, "agents": [], "speed": 2 }"#).unwrap_err();
    assert!(matches!(err, ScenarioError::Parse(_)));
}

#[test]
fn csv_exports_have_one_row_per_entry() {
    let report = simharness::run(&bundled_scenario("burst").unwrap()).unwrap().report;
    assert_eq!(report.items_csv().lines().count(), 26);
    assert_eq!(report.mode_trace_csv().lines().count(), report.mode_trace.len() + 1);
    assert!(report.mode_trace_csv().lines().nth(1).unwrap().starts_with("0,SURGE,25"));
}
