mod common;

use common::{corpus_rows, CORPUS_COUNTS};
use ovinet_core::detector::DetectorConfig;
use ovinet_core::scenario::{table_iii, table_iv, validate_corpus, ScenarioError, ScriptedAction, ScriptedEvent};
use ovinet_core::synthgen::{scene_corpus, GeneratorParams};
use ovinet_core::time::sim_epoch;
use ovinet_core::Scenario;

fn zero_day() -> Scenario {
    let mut s = Scenario::poc28();
    s.duration_days = 1;
    s.periods.clear();
    s.overrides.clear();
    s.devices[0].counts = vec![0];
    s.devices[0].config.tx_per_day = 1;
    s
}

#[test]
fn same_seed_same_report() {
    let scn = Scenario::poc28();
    let a = scn.run(42).unwrap();
    let b = scn.run(42).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    assert_eq!(table_iv(&a), table_iv(&b));
    let other = scn.run(7).unwrap();
    assert_eq!(other.measured_totals, a.measured_totals);
}

#[test]
fn one_quiet_day() {
    let r = zero_day().run(1).unwrap();
    assert_eq!(r.accuracy_pct, 100.0);
    assert_eq!(r.readings_stored, 4);
    assert_eq!(r.communications, 1);
    assert!(r.alarms.is_empty());
}

#[test]
fn mid_day_scene_change_splits_the_columns() {
    let mut s = zero_day();
    s.devices[0].counts = vec![6];
    s.events.push(ScriptedEvent {
        device: s.devices[0].config.device_id.clone(),
        day: 1,
        hour: 13.0,
        action: ScriptedAction::Scene { count: 2 },
    });
    let r = s.run(3).unwrap();
    assert_eq!(r.rows[0].measured, vec![6, 6, 6, 2]);
    assert!(!r.rows[0].matches());
    assert!(table_iv(&r).contains('✗'));
}

#[test]
fn invalid_scenarios_fail_before_running() {
    let mut s = zero_day();
    s.devices[0].counts.clear();
    s.devices[0].config.tx_per_day = 5;
    let err = Scenario::from_toml(&s.to_toml()).unwrap_err();
    let ScenarioError::Invalid(p) = err else { panic!("{err}") };
    assert_eq!(p.len(), 2, "{p:?}");
    assert!(matches!(Scenario::from_toml("version = 1"), Err(ScenarioError::Parse(_))));
}

#[test]
fn validation_table_has_one_line_per_egg() {
    let scenes = scene_corpus(&corpus_rows(), &GeneratorParams::with_seed(2023)).unwrap();
    let v = validate_corpus(&scenes, &DetectorConfig::default(), sim_epoch()).unwrap();
    let text = table_iii(&v);
    let lines: Vec<&str> = text.lines().collect();
    // Header, one line per egg, totals.
    assert_eq!(lines.len(), 1 + 67 + 1);
    assert!(lines[0].contains("Existing") && lines[0].contains("Confidence"));
    assert!(lines.last().unwrap().starts_with("Totals"));
    assert!(lines.last().unwrap().contains("67"));
    assert_eq!(text.matches('✓').count(), 67);
    let first_ids: Vec<_> = v.rows[0].eggs.iter().map(|e| e.0.as_str()).collect();
    assert_eq!(first_ids.len(), CORPUS_COUNTS[0]);
    assert!(first_ids.iter().all(|id| id.starts_with("1.")));
}
