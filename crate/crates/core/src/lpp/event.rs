use serde::{Deserialize, Serialize};

use crate::detector::{CameraContext, ReadingResult};
use crate::time::Timestamp;

use super::CodecError;

/// Accelerometer state as reported by the trap.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TiltState {
    WellPositioned,
    Overturned,
}

impl TiltState {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::WellPositioned => "well_positioned",
            Self::Overturned => "overturned",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkKind {
    WifiMqtt,
    Lorawan,
}

impl LinkKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::WifiMqtt => "wifi_mqtt",
            Self::Lorawan => "lorawan",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

/// One egg-count measurement carried in a telemetry event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TelemetryReading {
    pub ts: Timestamp,
    pub egg_count: u32,
    /// Averaged per-egg confidences. Empty when the transport dropped them.
    pub confidences: Vec<f32>,
}

impl From<&ReadingResult> for TelemetryReading {
    fn from(r: &ReadingResult) -> Self {
        Self {
            ts: r.timestamp,
            egg_count: r.egg_count,
            confidences: r.confidences(),
        }
    }
}

/// Canonical device-to-platform report.
///
/// Field names follow the JSON document sent on the WiFi path; serialization
/// order is the declaration order below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TelemetryEvent {
    pub device_id: String,
    /// Device clock when the event was emitted.
    pub ts: Timestamp,
    pub readings: Vec<TelemetryReading>,
    #[serde(rename = "temp_c")]
    pub temperature_c: f64,
    #[serde(rename = "hum_pct")]
    pub humidity_pct: f64,
    #[serde(rename = "water")]
    pub water_present: bool,
    pub tilt: TiltState,
    pub lid_open: bool,
    pub battery_pct: f64,
    pub link: LinkKind,
    #[serde(rename = "rssi_dbm")]
    pub signal_level: f64,
    pub gps: GeoPoint,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera: Option<CameraContext>,
    pub fw_version: String,
}

pub const MAX_READINGS: usize = 4;

impl TelemetryEvent {
    /// Checks the event invariants, reporting every violation at once.
    pub fn validate(&self) -> Result<(), CodecError> {
        let mut problems = Vec::new();
        if self.device_id.trim().is_empty() {
            problems.push("device_id is empty".to_string());
        }
        if self.readings.is_empty() || self.readings.len() > MAX_READINGS {
            problems.push(format!("readings has {} entries, expected 1..=4", self.readings.len()));
        }
        for pair in self.readings.windows(2) {
            if pair[1].ts <= pair[0].ts {
                problems.push(format!(
                    "reading timestamps not strictly increasing ({} then {})",
                    pair[0].ts.to_rfc3339(),
                    pair[1].ts.to_rfc3339()
                ));
            }
        }
        for (i, r) in self.readings.iter().enumerate() {
            if !r.confidences.is_empty() && r.confidences.len() != r.egg_count as usize {
                problems.push(format!(
                    "reading {i}: {} confidences for {} eggs",
                    r.confidences.len(),
                    r.egg_count
                ));
            }
            if r.confidences.iter().any(|c| !(0.0..=1.0).contains(c)) {
                problems.push(format!("reading {i}: confidence outside [0,1]"));
            }
        }
        if !self.temperature_c.is_finite() {
            problems.push("temp_c is not finite".into());
        }
        if !(0.0..=100.0).contains(&self.humidity_pct) {
            problems.push(format!("hum_pct {} outside [0,100]", self.humidity_pct));
        }
        if !(0.0..=100.0).contains(&self.battery_pct) {
            problems.push(format!("battery_pct {} outside [0,100]", self.battery_pct));
        }
        if !self.signal_level.is_finite() {
            problems.push("rssi_dbm is not finite".into());
        }
        if !(-90.0..=90.0).contains(&self.gps.lat) || !(-180.0..=180.0).contains(&self.gps.lon) {
            problems.push(format!("gps ({}, {}) out of range", self.gps.lat, self.gps.lon));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CodecError::Invalid(problems))
        }
    }

    pub fn latest_reading(&self) -> Option<&TelemetryReading> {
        self.readings.last()
    }
}

/// Serializes an event as the WiFi-path JSON document.
pub fn encode_json(ev: &TelemetryEvent) -> Result<String, CodecError> {
    ev.validate()?;
    Ok(serde_json::to_string(ev).expect("event serialization is infallible"))
}

pub fn decode_json(text: &str) -> Result<TelemetryEvent, CodecError> {
    let ev: TelemetryEvent = serde_json::from_str(text).map_err(|e| CodecError::Json(e.to_string()))?;
    ev.validate()?;
    Ok(ev)
}
