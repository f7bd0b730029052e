use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::detector::{Detector, DetectorConfig, DetectorError};
use crate::lpp::LinkKind;
use crate::platform::{Alarm, Metric};
use crate::synthgen::DepressorScene;
use crate::time::{as_seconds, FixedClock, Timestamp};

use super::{Scenario, Simulation};

/// One trap-day: scripted truth against what the platform stored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DayRow {
    pub device_id: String,
    pub day: u32,
    pub period: Option<String>,
    pub truth: u32,
    /// Stored egg counts for the day in time order (M1, M2, ...).
    pub measured: Vec<u32>,
}

impl DayRow {
    pub fn matches(&self) -> bool {
        !self.measured.is_empty() && self.measured.iter().all(|m| *m == self.truth)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub scenario: String,
    pub seed: u64,
    pub start: Timestamp,
    pub duration_days: u32,
    pub rows: Vec<DayRow>,
    pub truth_total: u64,
    /// Column sums of the measurement table.
    pub measured_totals: Vec<u64>,
    /// Mean column total over the truth total, in percent.
    pub accuracy_pct: f64,
    /// Platform ingestions (accepted telemetry events).
    pub communications: u64,
    pub readings_stored: usize,
    pub max_lag_s: f64,
    pub max_wifi_lag_s: Option<f64>,
    pub emitted_egg_sum: u64,
    pub stored_egg_sum: u64,
    pub alarms: Vec<Alarm>,
}

impl Report {
    pub fn build(scn: &Scenario, sim: &Simulation, seed: u64) -> Self {
        let p = sim.platform();
        let mut rows = Vec::new();
        for d in &scn.devices {
            let id = &d.config.device_id;
            let points = p.series().range(id, Metric::EggCount, scn.start, scn.end());
            for day in 1..=scn.duration_days {
                let (from, to) = (scn.day_start(day), scn.day_start(day + 1));
                let measured = points
                    .iter()
                    .filter(|pt| pt.ts >= from && pt.ts < to)
                    .map(|pt| pt.value.as_f64().unwrap_or(0.0) as u32)
                    .collect();
                rows.push(DayRow {
                    device_id: id.clone(),
                    day,
                    period: scn.period_label(day).map(str::to_string),
                    truth: d.counts[day as usize - 1],
                    measured,
                });
            }
        }
        let truth_total: u64 = rows.iter().map(|r| r.truth as u64).sum();
        let columns = rows.iter().map(|r| r.measured.len()).max().unwrap_or(0);
        let measured_totals: Vec<u64> = (0..columns)
            .map(|k| rows.iter().map(|r| r.measured.get(k).copied().unwrap_or(0) as u64).sum())
            .collect();
        let accuracy_pct = accuracy_pct(truth_total, &measured_totals);

        let mut max_lag_s: f64 = 0.0;
        let mut max_wifi: Option<f64> = None;
        for (ev, receipt) in p.events() {
            let lag = as_seconds(receipt - ev.ts);
            max_lag_s = max_lag_s.max(lag);
            if ev.link == LinkKind::WifiMqtt {
                max_wifi = Some(max_wifi.map_or(lag, |m| m.max(lag)));
            }
        }

        let mut emitted: Vec<(&str, Timestamp, u32)> = sim
            .emitted()
            .iter()
            .map(|(id, r)| (id.as_str(), r.ts, r.egg_count))
            .collect();
        emitted.sort();
        emitted.dedup();
        let emitted_egg_sum = emitted.iter().map(|e| e.2 as u64).sum();
        let stored: Vec<u32> = p
            .devices()
            .flat_map(|d| p.series().all(&d.info.device_id, Metric::EggCount))
            .map(|pt| pt.value.as_f64().unwrap_or(0.0) as u32)
            .collect();

        Self {
            scenario: scn.name.clone(),
            seed,
            start: scn.start,
            duration_days: scn.duration_days,
            truth_total,
            measured_totals,
            accuracy_pct,
            communications: p.ingestion_count(),
            readings_stored: stored.len(),
            max_lag_s,
            max_wifi_lag_s: max_wifi,
            emitted_egg_sum,
            stored_egg_sum: stored.iter().map(|c| *c as u64).sum(),
            alarms: p.alarms().to_vec(),
            rows,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Σ measured over Σ truth, per measurement column, averaged over columns.
/// A run with no eggs and none reported is fully accurate.
pub fn accuracy_pct(truth_total: u64, measured_totals: &[u64]) -> f64 {
    if measured_totals.is_empty() {
        return if truth_total == 0 { 100.0 } else { 0.0 };
    }
    let mean = measured_totals.iter().sum::<u64>() as f64 / measured_totals.len() as f64;
    if truth_total == 0 {
        return if mean == 0.0 { 100.0 } else { 0.0 };
    }
    100.0 * mean / truth_total as f64
}

/// The proof-of-concept layout: one row per trap-day with M1..Mn columns.
pub fn table_iv(r: &Report) -> String {
    let cols = r.measured_totals.len().max(4);
    let mut out = String::new();
    let _ = write!(out, "{:<12} {:>4} {:<6} {:>10}", "Depressor", "Day", "Period", "Microscope");
    for k in 1..=cols {
        let _ = write!(out, " {:>4}", format!("M{k}"));
    }
    out.push_str(" Result\n");
    if r.rows.is_empty() {
        return out;
    }
    for row in &r.rows {
        let _ = write!(
            out,
            "{:<12} {:>4} {:<6} {:>10}",
            row.device_id,
            row.day,
            row.period.as_deref().unwrap_or(""),
            row.truth
        );
        for k in 0..cols {
            match row.measured.get(k) {
                Some(v) => {
                    let _ = write!(out, " {v:>4}");
                }
                None => out.push_str("    -"),
            }
        }
        out.push_str(if row.matches() { " ✓\n" } else { " ✗\n" });
    }
    let _ = write!(out, "{:<12} {:>4} {:<6} {:>10}", "Totals", "", "", r.truth_total);
    for k in 0..cols {
        match r.measured_totals.get(k) {
            Some(v) => {
                let _ = write!(out, " {v:>4}");
            }
            None => out.push_str("    -"),
        }
    }
    let _ = writeln!(out, " ≈ {:.2} %", r.accuracy_pct);
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRow {
    pub scene_id: String,
    pub existing: u32,
    pub read: u32,
    /// (egg id, averaged confidence) per reported egg.
    pub eggs: Vec<(String, f32)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub threshold: f32,
    pub rows: Vec<ValidationRow>,
}

impl ValidationReport {
    pub fn all_counts_match(&self) -> bool {
        self.rows.iter().all(|r| r.read == r.existing)
    }

    pub fn min_confidence(&self) -> Option<f32> {
        self.rows
            .iter()
            .flat_map(|r| r.eggs.iter().map(|e| e.1))
            .reduce(f32::min)
    }

    pub fn totals(&self) -> (u32, u32) {
        (
            self.rows.iter().map(|r| r.existing).sum(),
            self.rows.iter().map(|r| r.read).sum(),
        )
    }
}

/// Reads every scene once, numbering readings from 1 so egg ids follow the
/// `scene.egg` pattern.
pub fn validate_corpus(scenes: &[DepressorScene], cfg: &DetectorConfig, at: Timestamp) -> Result<ValidationReport, DetectorError> {
    let mut det = Detector::new(cfg.clone())?;
    let mut rows = Vec::with_capacity(scenes.len());
    for s in scenes {
        let r = det.run(&s.snapshots(cfg.snapshots_per_reading as u32), &FixedClock(at))?;
        rows.push(ValidationRow {
            scene_id: s.scene_id.clone(),
            existing: s.egg_count() as u32,
            read: r.egg_count,
            eggs: r.eggs.iter().map(|e| (e.egg_id.clone(), e.avg_confidence)).collect(),
        });
    }
    Ok(ValidationReport {
        threshold: cfg.confidence_threshold,
        rows,
    })
}

/// The validation layout: one line per reported egg under its scene.
pub fn table_iii(v: &ValidationReport) -> String {
    let mut out = format!(
        "{:<14} {:>8} {:>6} {:>7} {:>10}\n",
        "Depressor", "Existing", "Read", "Egg ID", "Confidence"
    );
    for (i, row) in v.rows.iter().enumerate() {
        let label = format!("{:02}", i + 1);
        if row.eggs.is_empty() {
            let _ = writeln!(out, "{label:<14} {:>8} {:>6} {:>7} {:>10}", row.existing, row.read, "-", "-");
        }
        for (k, (id, c)) in row.eggs.iter().enumerate() {
            let mark = if *c >= v.threshold { "✓" } else { "✗" };
            if k == 0 {
                let _ = write!(out, "{label:<14} {:>8} {:>6}", row.existing, row.read);
            } else {
                let _ = write!(out, "{:<14} {:>8} {:>6}", "", "", "");
            }
            let _ = writeln!(out, " {id:>7} {c:>8.2} {mark}");
        }
    }
    if !v.rows.is_empty() {
        let (existing, read) = v.totals();
        let _ = writeln!(out, "{:<14} {existing:>8} {read:>6}", "Totals");
    }
    out
}
