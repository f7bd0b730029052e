#![allow(dead_code)]

use std::collections::BTreeMap;

use chrono::Duration;
use ovinet_core::device::{DeviceConfig, DeviceMessage, EmitCause, SceneSource};
use ovinet_core::lpp::TelemetryEvent;
use ovinet_core::netlink::Network;
use ovinet_core::platform::{AlarmRule, Condition, PointValue, TimeSeriesPoint};
use ovinet_core::raster::Raster;
use ovinet_core::scenario::ScriptedScenes;
use ovinet_core::synthgen::{CorpusRow, GeneratorParams};
use ovinet_core::time::{sim_epoch, Timestamp};
use ovinet_core::{DeviceSim, Simulation};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Per-scene egg counts of the validation corpus.
pub const CORPUS_COUNTS: [usize; 10] = [3, 10, 2, 8, 10, 7, 9, 4, 5, 9];
pub const CORPUS_DISTRACTORS: usize = 2;

pub fn corpus_rows() -> Vec<CorpusRow> {
    CORPUS_COUNTS
        .iter()
        .enumerate()
        .map(|(i, n)| CorpusRow::new(format!("{:02}", i + 1), *n, CORPUS_DISTRACTORS))
        .collect()
}

/// A simulation with one provisioned device over a fixed egg count.
pub fn single_device(cfg: DeviceConfig, eggs: u32, seed: u64) -> Simulation {
    let mut sim = Simulation::new(sim_epoch(), Network::new(seed));
    let mut scenes = ScriptedScenes::new(GeneratorParams::with_seed(seed), 0, "t");
    scenes.set(sim_epoch(), eggs);
    sim.add_scripted_device("SN-1", scenes);
    sim.bring_up("SN-1", cfg).unwrap();
    sim
}

/// A started device with nothing attached, driven by hand.
pub fn bare_device(cfg: DeviceConfig, scene: impl SceneSource + 'static, start: Timestamp) -> DeviceSim {
    let mut d = DeviceSim::new("SN-1", Box::new(scene), start);
    d.apply_provisioning(start, cfg).unwrap();
    d.start(start).unwrap();
    d
}

pub fn drive(d: &mut DeviceSim, until: Timestamp) -> Vec<DeviceMessage> {
    let mut out = Vec::new();
    while let Some(t) = d.next_due().filter(|t| *t <= until) {
        out.extend(d.advance(t));
    }
    out.extend(d.advance(until));
    out
}

pub fn scheduled_events(msgs: &[DeviceMessage]) -> Vec<&TelemetryEvent> {
    msgs.iter()
        .filter_map(|m| match m {
            DeviceMessage::Telemetry {
                event,
                cause: EmitCause::Scheduled,
            } => Some(event),
            _ => None,
        })
        .collect()
}

fn holds(c: &Condition, v: &PointValue) -> bool {
    match (c, v) {
        (Condition::Above(t), PointValue::Number(x)) => x > t,
        (Condition::Below(t), PointValue::Number(x)) => x < t,
        (Condition::Equals(want), v) => serde_json::to_value(want).unwrap() == serde_json::to_value(v).unwrap(),
        _ => false,
    }
}

/// Re-derives every alarm edge from the full series: for each rule and
/// device, walk the points in time order and emit one alarm whenever the
/// condition turns from false (or unseen) to true.
pub fn brute_force_alarms(points: &[TimeSeriesPoint], rules: &[AlarmRule]) -> Vec<(String, String, Timestamp)> {
    let mut by_series: BTreeMap<(String, String), Vec<&TimeSeriesPoint>> = BTreeMap::new();
    for p in points {
        by_series
            .entry((p.device_id.clone(), p.key.as_str().to_string()))
            .or_default()
            .push(p);
    }
    let mut out = Vec::new();
    for ((device, key), mut series) in by_series {
        series.sort_by_key(|p| p.ts);
        for rule in rules.iter().filter(|r| r.metric.as_str() == key) {
            let mut prev = false;
            for p in &series {
                let now = holds(&rule.condition, &p.value);
                if now && !prev {
                    out.push((rule.rule_id.clone(), device.clone(), p.ts));
                }
                prev = now;
            }
        }
    }
    out.sort();
    out
}

/// A random 512×512 frame: noisy background with dark spots of random size.
pub fn random_frame(seed: u64) -> Raster {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = 512;
    let bg: f32 = rng.random_range(0.0..1.0);
    let noise: f32 = rng.random_range(0.0..0.3);
    let mut px: Vec<f32> = (0..side * side)
        .map(|_| (bg + rng.random_range(-noise..=noise)).clamp(0.0, 1.0))
        .collect();
    for _ in 0..rng.random_range(0..40) {
        let (cx, cy) = (rng.random_range(0..side) as i64, rng.random_range(0..side) as i64);
        let r = rng.random_range(1..20i64);
        let level: f32 = rng.random_range(0.0..0.5);
        for y in (cy - r).max(0)..(cy + r).min(side as i64) {
            for x in (cx - r).max(0)..(cx + r).min(side as i64) {
                if (x - cx).pow(2) + (y - cy).pow(2) <= r * r {
                    px[y as usize * side + x as usize] = level;
                }
            }
        }
    }
    Raster::from_normalized(side, &px)
}

pub fn hours(h: i64) -> Duration {
    Duration::hours(h)
}

pub mod events {
    use ovinet_core::lpp::{GeoPoint, LinkKind, TelemetryEvent, TelemetryReading, TiltState};
    use ovinet_core::time::sim_epoch;
    use proptest::prelude::*;

    prop_compose! {
        fn arb_status()(
            temperature_c in -40.0f64..85.0,
            humidity_pct in 0.0f64..=100.0,
            water_present in any::<bool>(),
            overturned in any::<bool>(),
            lid_open in any::<bool>(),
            battery_pct in 0.0f64..=100.0,
            signal_level in -150.0f64..0.0,
            lat in -90.0f64..=90.0,
            lon in -180.0f64..=180.0,
            fw in (0u16..=326, 0u16..100),
            secs in 0i64..400_000_000,
        ) -> TelemetryEvent {
            TelemetryEvent {
                device_id: "trap-x".into(),
                ts: sim_epoch() + chrono::Duration::seconds(secs),
                readings: Vec::new(),
                temperature_c,
                humidity_pct,
                water_present,
                tilt: if overturned { TiltState::Overturned } else { TiltState::WellPositioned },
                lid_open,
                battery_pct,
                link: LinkKind::Lorawan,
                signal_level,
                gps: GeoPoint { lat, lon },
                camera: None,
                fw_version: format!("{}.{}", fw.0, fw.1),
            }
        }
    }

    prop_compose! {
        /// A valid event carrying one reading, as sent over LoRaWAN.
        pub fn arb_single()(mut ev in arb_status(), eggs in 0u32..=327, conf in 0.0f32..=1.0) -> TelemetryEvent {
            ev.readings = vec![TelemetryReading { ts: ev.ts, egg_count: eggs, confidences: vec![conf; eggs as usize] }];
            ev
        }
    }

    prop_compose! {
        /// A valid event carrying one to four readings six hours apart.
        pub fn arb_batch()(mut ev in arb_status(), counts in prop::collection::vec(0u32..50, 1..=4)) -> TelemetryEvent {
            let n = counts.len() as i64;
            ev.readings = counts
                .iter()
                .enumerate()
                .map(|(i, c)| TelemetryReading {
                    ts: ev.ts - chrono::Duration::hours(6 * (n - 1 - i as i64)),
                    egg_count: *c,
                    confidences: vec![0.9; *c as usize],
                })
                .collect();
            ev
        }
    }
}
