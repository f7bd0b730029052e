use std::collections::BTreeMap;

use chrono::Duration;
use serde::{Deserialize, Serialize};

use crate::lpp::GeoPoint;
use crate::time::Timestamp;

use super::series::{Metric, SeriesStore};

const METERS_PER_DEGREE: f64 = 111_320.0;
pub const RISK_WINDOW_DAYS: i64 = 7;

/// Aggregated surveillance indices for one grid square.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskCell {
    pub cell_id: String,
    pub window_start: Timestamp,
    pub window_end: Timestamp,
    /// Positive traps over reporting traps; 0 when none reported.
    pub positive_trap_fraction: f64,
    /// Mean over reporting traps of the summed daily maximum egg counts.
    pub eggs_per_trap: f64,
    /// Traps that reported at least one egg count in the window.
    pub trap_count: usize,
    pub registered_traps: usize,
    pub traps: Vec<String>,
    pub center: GeoPoint,
}

/// Grid square containing `p`, using an equirectangular projection.
pub fn cell_index(p: GeoPoint, grid_size_m: f64) -> (i64, i64) {
    let y = p.lat * METERS_PER_DEGREE;
    let x = p.lon * METERS_PER_DEGREE * p.lat.to_radians().cos();
    ((x / grid_size_m).floor() as i64, (y / grid_size_m).floor() as i64)
}

pub fn cell_id(grid_size_m: f64, ix: i64, iy: i64) -> String {
    format!("g{grid_size_m}:{ix}:{iy}")
}

/// Sum of per-day maxima of egg counts in `[start, start + days)`.
pub fn daily_max_sum(series: &SeriesStore, device_id: &str, start: Timestamp, days: i64) -> Option<f64> {
    let end = start + Duration::days(days);
    let points = series.range(device_id, Metric::EggCount, start, end);
    let mut per_day: BTreeMap<i64, f64> = BTreeMap::new();
    for p in points.iter().filter(|p| p.ts < end) {
        let day = (p.ts - start).num_days();
        let v = p.value.as_f64().unwrap_or(0.0);
        let slot = per_day.entry(day).or_insert(v);
        *slot = slot.max(v);
    }
    (!per_day.is_empty()).then(|| per_day.values().sum())
}

pub fn compute(
    series: &SeriesStore,
    traps: &[(String, GeoPoint)],
    window_end: Timestamp,
    grid_size_m: f64,
) -> Vec<RiskCell> {
    let window_start = window_end - Duration::days(RISK_WINDOW_DAYS);
    let mut cells: BTreeMap<(i64, i64), Vec<&(String, GeoPoint)>> = BTreeMap::new();
    for t in traps {
        cells.entry(cell_index(t.1, grid_size_m)).or_default().push(t);
    }
    cells
        .into_iter()
        .map(|((ix, iy), members)| {
            let mut reporting = 0usize;
            let mut positive = 0usize;
            let mut total = 0.0;
            for (id, _) in &members {
                if let Some(sum) = daily_max_sum(series, id, window_start, RISK_WINDOW_DAYS) {
                    reporting += 1;
                    total += sum;
                    if sum > 0.0 {
                        positive += 1;
                    }
                }
            }
            let n = members.len() as f64;
            let center = GeoPoint {
                lat: members.iter().map(|m| m.1.lat).sum::<f64>() / n,
                lon: members.iter().map(|m| m.1.lon).sum::<f64>() / n,
            };
            RiskCell {
                cell_id: cell_id(grid_size_m, ix, iy),
                window_start,
                window_end,
                positive_trap_fraction: if reporting == 0 {
                    0.0
                } else {
                    positive as f64 / reporting as f64
                },
                eggs_per_trap: if reporting == 0 { 0.0 } else { total / reporting as f64 },
                trap_count: reporting,
                registered_traps: members.len(),
                traps: members.iter().map(|m| m.0.clone()).collect(),
                center,
            }
        })
        .collect()
}
