mod common;

use chrono::Duration;
use common::brute_force_alarms;
use ovinet_core::device::DeviceConfig;
use ovinet_core::lpp::{GeoPoint, LinkKind, TelemetryEvent, TelemetryReading, TiltState};
use ovinet_core::platform::{default_rules, Metric, PlatformError};
use ovinet_core::time::sim_epoch;
use ovinet_core::{Platform, Scenario, Simulation};
use proptest::prelude::*;

fn run(scn: &Scenario, seed: u64) -> Simulation {
    let mut sim = Simulation::from_scenario(scn, seed).unwrap();
    sim.run_until(scn.end() - Duration::milliseconds(1)).unwrap();
    sim
}

/// Brute force: bucket stored points by day, keep each day's maximum, sum.
fn week_total(p: &Platform, id: &str, from: chrono::DateTime<chrono::Utc>) -> f64 {
    let mut best = [None::<f64>; 7];
    for pt in p.series().all(id, Metric::EggCount) {
        for (d, slot) in best.iter_mut().enumerate() {
            let lo = from + Duration::days(d as i64);
            if pt.ts >= lo && pt.ts < lo + Duration::days(1) {
                let v = pt.value.as_f64().unwrap();
                *slot = Some(slot.map_or(v, |b: f64| b.max(v)));
            }
        }
    }
    best.iter().flatten().sum()
}

#[test]
fn risk_map_over_the_rising_period() {
    let mut scn = Scenario::poc28();
    scn.overrides.clear();
    let sim = run(&scn, 42);
    let p = sim.platform();
    let id = &scn.devices[0].config.device_id;
    let cells = p.risk_map(scn.day_start(8), 1000.0);
    assert_eq!(cells.len(), 1);
    let oracle = week_total(p, id, scn.start);
    let truth: u32 = scn.devices[0].counts[..7].iter().sum();
    assert_eq!(truth, 42);
    assert_eq!(oracle, 42.0);
    assert_eq!(cells[0].eggs_per_trap, oracle);
    assert_eq!(cells[0].positive_trap_fraction, 1.0);
    assert_eq!(cells[0].trap_count, 1);
    // The empty second period has no positive reading.
    let quiet = p.risk_map(scn.day_start(15), 1000.0);
    assert_eq!(quiet[0].eggs_per_trap, 0.0);
    assert_eq!(quiet[0].positive_trap_fraction, 0.0);
    assert_eq!(quiet[0].trap_count, 1);
}

#[test]
fn risk_map_reflects_scripted_misses_and_is_deterministic() {
    let scn = Scenario::poc28();
    let sim = run(&scn, 42);
    let p = sim.platform();
    let id = &scn.devices[0].config.device_id;
    let cells = p.risk_map(scn.day_start(8), 1000.0);
    assert_eq!(cells[0].eggs_per_trap, week_total(p, id, scn.start));
    assert_eq!(cells[0].eggs_per_trap, 41.0);
    assert_eq!(cells, p.risk_map(scn.day_start(8), 1000.0));
}

#[test]
fn two_traps_one_positive() {
    let mut p = Platform::new();
    let a = DeviceConfig::example_wifi("a");
    let mut b = DeviceConfig::example_wifi("b");
    b.gps.lon += 0.0001;
    p.register(&a, sim_epoch()).unwrap();
    p.register(&b, sim_epoch()).unwrap();
    for (id, eggs) in [("a", 4), ("b", 0)] {
        let ts = sim_epoch() + Duration::hours(30);
        let ev = event(id, ts, eggs, 25.0);
        p.ingest(&ev, ts).unwrap();
    }
    let cells = p.risk_map(sim_epoch() + Duration::days(7), 1000.0);
    assert_eq!(cells.len(), 1);
    assert_eq!(cells[0].positive_trap_fraction, 0.5);
    assert_eq!(cells[0].eggs_per_trap, 2.0);
    assert_eq!(cells[0].trap_count, 2);
}

#[test]
fn conservation_and_replay_after_the_poc() {
    let scn = Scenario::poc28();
    let sim = run(&scn, 42);
    let r = ovinet_core::scenario::Report::build(&scn, &sim, 42);
    assert_eq!(r.emitted_egg_sum, r.stored_egg_sum);
    let export = sim.platform().export_jsonl();
    let back = Platform::replay(&export, default_rules()).unwrap();
    assert_eq!(back.export_jsonl(), export);
    assert_eq!(back.alarms(), sim.platform().alarms());
}

#[test]
fn full_range_holds_112_counts() {
    let scn = Scenario::poc28();
    let sim = run(&scn, 42);
    let id = &scn.devices[0].config.device_id;
    let p = sim.platform();
    let pts = p.query_series(id, Metric::EggCount, scn.start, scn.end()).unwrap();
    assert_eq!(pts.len(), 112);
    assert!(pts.windows(2).all(|w| w[0].ts < w[1].ts));
    assert_eq!(pts, p.query_series(id, Metric::EggCount, scn.start, scn.end()).unwrap());
    assert!(p.query_series(id, Metric::EggCount, scn.end(), scn.end()).unwrap().is_empty());
    assert!(matches!(
        p.query_series(id, Metric::EggCount, scn.end(), scn.start),
        Err(PlatformError::InvalidRange { .. })
    ));
    assert!(matches!(
        p.query_series("nope", Metric::EggCount, scn.start, scn.end()),
        Err(PlatformError::UnknownDevice(_))
    ));
}

fn event(id: &str, ts: chrono::DateTime<chrono::Utc>, eggs: u32, temp: f64) -> TelemetryEvent {
    TelemetryEvent {
        device_id: id.into(),
        ts,
        readings: vec![TelemetryReading {
            ts,
            egg_count: eggs,
            confidences: vec![],
        }],
        temperature_c: temp,
        humidity_pct: 60.0,
        water_present: true,
        tilt: TiltState::WellPositioned,
        lid_open: false,
        battery_pct: 80.0,
        link: LinkKind::WifiMqtt,
        signal_level: -70.0,
        gps: GeoPoint {
            lat: -37.3217,
            lon: -59.1332,
        },
        camera: None,
        fw_version: "1.2".into(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// An alarm exists iff a stored point crossed a rule edge, also when
    /// every event is delivered twice.
    #[test]
    fn alarms_match_brute_force(
        temps in prop::collection::vec(-5.0f64..50.0, 1..40),
        dup in any::<bool>(),
    ) {
        let mut p = Platform::new();
        p.register(&DeviceConfig::example_wifi("t"), sim_epoch()).unwrap();
        let mut evs: Vec<_> = temps
            .iter()
            .enumerate()
            .map(|(i, t)| event("t", sim_epoch() + Duration::hours(i as i64), 0, *t))
            .collect();
        if dup {
            evs.extend(evs.clone());
        }
        for ev in &evs {
            p.ingest(ev, ev.ts + Duration::milliseconds(50)).unwrap();
        }
        let mut points = Vec::new();
        for m in Metric::ALL {
            points.extend(p.series().all("t", m));
        }
        let want = brute_force_alarms(&points, p.rules());
        let mut got: Vec<_> = p.alarms().iter().map(|a| (a.rule_id.clone(), a.device_id.clone(), a.ts)).collect();
        got.sort();
        prop_assert_eq!(got, want);
    }
}
