use super::*;
use crate::time::sim_epoch;

fn one_day_zero() -> Scenario {
    let mut s = Scenario::poc28();
    s.name = "zero".into();
    s.duration_days = 1;
    s.periods.clear();
    s.overrides.clear();
    s.devices[0].counts = vec![0];
    s.devices[0].config.tx_per_day = 1;
    s
}

#[test]
fn poc_round_trips_through_toml() {
    let s = Scenario::poc28();
    s.validate().unwrap();
    let text = s.to_toml();
    assert_eq!(Scenario::from_toml(&text).unwrap(), s);
    let truth: u32 = s.devices[0].counts.iter().sum();
    assert_eq!(truth, 129);
    assert_eq!(s.period_label(16), Some("PC"));
}

#[test]
fn validation_lists_every_problem() {
    let mut s = Scenario::poc28();
    s.version = 2;
    s.devices[0].counts.pop();
    s.overrides[0].day = 40;
    s.events.push(ScriptedEvent {
        device: "nobody".into(),
        day: 1,
        hour: 25.0,
        action: ScriptedAction::Lid { open: true },
    });
    let ScenarioError::Invalid(p) = s.validate().unwrap_err() else {
        panic!()
    };
    assert_eq!(p.len(), 5, "{p:?}");
}

#[test]
fn scripted_events_parse() {
    let mut text = one_day_zero().to_toml();
    text.push_str(
        "\n[[events]]\ndevice = \"mosquiot-01\"\nday = 1\nhour = 12.5\nkind = \"tilt\"\nstate = \"overturned\"\n\
         \n[[events]]\ndevice = \"mosquiot-01\"\nday = 1\nkind = \"rpc\"\ncommand = { kind = \"read_on_demand\" }\n",
    );
    let s = Scenario::from_toml(&text).unwrap();
    assert_eq!(s.events.len(), 2);
    assert_eq!(s.event_time(&s.events[0]), sim_epoch() + chrono::Duration::minutes(750));
    assert!(matches!(s.events[1].action, ScriptedAction::Rpc { .. }));
}

#[test]
fn one_day_zero_eggs() {
    let s = one_day_zero();
    let r = s.run(1).unwrap();
    assert_eq!(r.rows.len(), 1);
    assert_eq!(r.rows[0].measured, vec![0, 0, 0, 0]);
    assert_eq!(r.communications, 1);
    assert_eq!(r.accuracy_pct, 100.0);
    let table = table_iv(&r);
    assert!(table.contains("≈ 100.00 %"));
}

#[test]
fn empty_tables_are_headers_only() {
    let mut r = one_day_zero().run(1).unwrap();
    r.rows.clear();
    assert_eq!(table_iv(&r).lines().count(), 1);
    let v = ValidationReport {
        threshold: 0.8,
        rows: vec![],
    };
    assert_eq!(table_iii(&v).lines().count(), 1);
}

#[test]
fn accuracy_matches_column_ratio() {
    assert!((report::accuracy_pct(129, &[126, 126, 126, 126]) - 100.0 * 126.0 / 129.0).abs() < 1e-12);
    assert_eq!(report::accuracy_pct(0, &[0]), 100.0);
}
