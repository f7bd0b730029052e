use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::time::Timestamp;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    EggCount,
    TemperatureC,
    HumidityPct,
    Water,
    Tilt,
    Lid,
    BatteryPct,
    Rssi,
    IngestLagS,
}

impl Metric {
    pub const ALL: [Metric; 9] = [
        Self::EggCount,
        Self::TemperatureC,
        Self::HumidityPct,
        Self::Water,
        Self::Tilt,
        Self::Lid,
        Self::BatteryPct,
        Self::Rssi,
        Self::IngestLagS,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::EggCount => "egg_count",
            Self::TemperatureC => "temperature_c",
            Self::HumidityPct => "humidity_pct",
            Self::Water => "water",
            Self::Tilt => "tilt",
            Self::Lid => "lid",
            Self::BatteryPct => "battery_pct",
            Self::Rssi => "rssi",
            Self::IngestLagS => "ingest_lag_s",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown metric {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PointValue {
    Flag(bool),
    Number(f64),
    State(String),
}

impl PointValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Self::Number(v) => Some(*v),
            _ => None,
        }
    }
}

impl fmt::Display for PointValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Flag(b) => write!(f, "{b}"),
            Self::Number(v) => write!(f, "{v}"),
            Self::State(s) => f.write_str(s),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesPoint {
    pub device_id: String,
    pub key: Metric,
    pub ts: Timestamp,
    pub value: PointValue,
}

/// Points indexed by device and metric, unique on `(device, key, ts)`.
#[derive(Clone, Debug, Default)]
pub struct SeriesStore {
    index: BTreeMap<(String, Metric), BTreeMap<Timestamp, PointValue>>,
    len: usize,
}

impl SeriesStore {
    /// Inserts unless a point already exists at that key; returns whether it was new.
    pub fn insert(&mut self, p: &TimeSeriesPoint) -> bool {
        let series = self.index.entry((p.device_id.clone(), p.key)).or_default();
        if series.contains_key(&p.ts) {
            return false;
        }
        series.insert(p.ts, p.value.clone());
        self.len += 1;
        true
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Points with `from <= ts <= to`, ascending.
    pub fn range(&self, device_id: &str, key: Metric, from: Timestamp, to: Timestamp) -> Vec<TimeSeriesPoint> {
        self.index
            .get(&(device_id.to_string(), key))
            .map(|s| {
                s.range(from..=to)
                    .map(|(ts, v)| TimeSeriesPoint {
                        device_id: device_id.to_string(),
                        key,
                        ts: *ts,
                        value: v.clone(),
                    })
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn all(&self, device_id: &str, key: Metric) -> Vec<TimeSeriesPoint> {
        self.index
            .get(&(device_id.to_string(), key))
            .map(|s| {
                s.iter()
                    .map(|(ts, v)| TimeSeriesPoint {
                        device_id: device_id.to_string(),
                        key,
                        ts: *ts,
                        value: v.clone(),
                    })
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn latest(&self, device_id: &str, key: Metric) -> Option<TimeSeriesPoint> {
        let (ts, v) = self.index.get(&(device_id.to_string(), key))?.iter().next_back()?;
        Some(TimeSeriesPoint {
            device_id: device_id.to_string(),
            key,
            ts: *ts,
            value: v.clone(),
        })
    }
}
