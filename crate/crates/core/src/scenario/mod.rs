//! Whole-system experiments on a virtual clock.

mod report;
mod scenes;
mod sim;

use std::collections::HashSet;
use std::path::Path;

use chrono::Duration;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device::{DeviceConfig, RpcKind, SensorEvent};
use crate::lpp::TiltState;
use crate::netlink::{LinkProfile, RetryPolicy};
use crate::synthgen::GeneratorParams;
use crate::time::{sim_epoch, Timestamp};

pub use report::{
    accuracy_pct,
    table_iii, table_iv, validate_corpus, DayRow, Report, ValidationReport, ValidationRow,
};
pub use scenes::{ScriptedScenes, SCENE_SEED_STRIDE};
pub use sim::{ControlRequest, ControlResponse, SimError, Simulation};

pub const SCENARIO_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed scenario: {0}")]
    Parse(String),
    #[error("invalid scenario: {}", .0.join("; "))]
    Invalid(Vec<String>),
}

/// A labelled stretch of days, e.g. the four PoC periods.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Period {
    pub label: String,
    pub first_day: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioDevice {
    pub serial: String,
    /// Ground-truth egg count for each day, starting with day 1.
    pub counts: Vec<u32>,
    #[serde(default)]
    pub distractors: usize,
    #[serde(flatten)]
    pub config: DeviceConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScriptedAction {
    Tilt { state: TiltState },
    Lid { open: bool },
    Water { present: bool },
    Climate { temperature_c: f64, humidity_pct: f64 },
    /// Changes the scene from this instant until the next change.
    Scene { count: u32 },
    Reboot,
    Rpc { command: RpcKind },
}

impl ScriptedAction {
    pub fn sensor_event(&self) -> Option<SensorEvent> {
        Some(match *self {
            Self::Tilt { state } => SensorEvent::Tilt(state),
            Self::Lid { open } => SensorEvent::Lid(open),
            Self::Water { present } => SensorEvent::Water(present),
            Self::Climate {
                temperature_c,
                humidity_pct,
            } => SensorEvent::Climate {
                temperature_c,
                humidity_pct,
            },
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptedEvent {
    pub device: String,
    pub day: u32,
    #[serde(default)]
    pub hour: f64,
    #[serde(flatten)]
    pub action: ScriptedAction,
}

/// Removes the `drop` least confident eggs from every reading taken on `day`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectorOverride {
    pub device: String,
    pub day: u32,
    pub drop: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NetworkSettings {
    #[serde(default)]
    pub wifi: Option<LinkProfile>,
    #[serde(default)]
    pub lorawan: Option<LinkProfile>,
    #[serde(default)]
    pub retry: Option<RetryPolicy>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub version: u32,
    pub name: String,
    #[serde(default = "sim_epoch")]
    pub start: Timestamp,
    pub duration_days: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorParams>,
    #[serde(default)]
    pub network: NetworkSettings,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub periods: Vec<Period>,
    pub devices: Vec<ScenarioDevice>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<ScriptedEvent>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub overrides: Vec<DetectorOverride>,
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let s: Self = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    /// Reports every problem at once.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut p = Vec::new();
        if self.version != SCENARIO_VERSION {
            p.push(format!("version {} is not supported (expected {SCENARIO_VERSION})", self.version));
        }
        if self.duration_days == 0 {
            p.push("duration_days must be at least 1".into());
        }
        if self.devices.is_empty() {
            p.push("at least one device is required".into());
        }
        if let Some(g) = &self.generator {
            if let Err(e) = g.validate() {
                p.push(format!("generator: {e}"));
            }
        }
        let mut serials = HashSet::new();
        let mut ids = HashSet::new();
        for (i, d) in self.devices.iter().enumerate() {
            let at = format!("devices[{i}]");
            if !serials.insert(d.serial.as_str()) {
                p.push(format!("{at}: duplicate serial {}", d.serial));
            }
            if !ids.insert(d.config.device_id.as_str()) {
                p.push(format!("{at}: duplicate device_id {}", d.config.device_id));
            }
            for fp in d.config.problems() {
                p.push(format!("{at}.{}: {}", fp.field, fp.message));
            }
            if d.counts.len() != self.duration_days as usize {
                p.push(format!(
                    "{at}.counts: {} entries for {} days",
                    d.counts.len(),
                    self.duration_days
                ));
            }
        }
        let day_ok = |day: u32| (1..=self.duration_days).contains(&day);
        for (i, e) in self.events.iter().enumerate() {
            if !ids.contains(e.device.as_str()) {
                p.push(format!("events[{i}]: unknown device {}", e.device));
            }
            if !day_ok(e.day) {
                p.push(format!("events[{i}]: day {} outside 1..={}", e.day, self.duration_days));
            }
            if !(0.0..24.0).contains(&e.hour) {
                p.push(format!("events[{i}]: hour {} outside [0, 24)", e.hour));
            }
        }
        for (i, o) in self.overrides.iter().enumerate() {
            if !ids.contains(o.device.as_str()) {
                p.push(format!("overrides[{i}]: unknown device {}", o.device));
            }
            if !day_ok(o.day) {
                p.push(format!("overrides[{i}]: day {} outside 1..={}", o.day, self.duration_days));
            }
        }
        for (i, per) in self.periods.iter().enumerate() {
            if !day_ok(per.first_day) {
                p.push(format!("periods[{i}]: first_day {} outside the run", per.first_day));
            }
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(ScenarioError::Invalid(p))
        }
    }

    pub fn end(&self) -> Timestamp {
        self.start + Duration::days(self.duration_days as i64)
    }

    /// Start of 1-based `day`.
    pub fn day_start(&self, day: u32) -> Timestamp {
        self.start + Duration::days(day as i64 - 1)
    }

    pub fn event_time(&self, e: &ScriptedEvent) -> Timestamp {
        self.day_start(e.day) + Duration::milliseconds((e.hour * 3_600_000.0).round() as i64)
    }

    pub fn period_label(&self, day: u32) -> Option<&str> {
        self.periods
            .iter()
            .filter(|p| p.first_day <= day)
            .max_by_key(|p| p.first_day)
            .map(|p| p.label.as_str())
    }

    /// Runs the whole scenario and reports on it.
    pub fn run(&self, seed: u64) -> Result<Report, SimError> {
        let mut sim = Simulation::from_scenario(self, seed)?;
        sim.run_until(self.end() - Duration::milliseconds(1))?;
        Ok(Report::build(self, &sim, seed))
    }

    pub fn device(&self, device_id: &str) -> Option<&ScenarioDevice> {
        self.devices.iter().find(|d| d.config.device_id == device_id)
    }

    /// The 28-day proof of concept: one WiFi trap over four periods, with
    /// one egg missed on days 7, 16 and 17.
    pub fn poc28() -> Self {
        let mut config = DeviceConfig::example_wifi("mosquiot-01");
        config.tx_per_day = 4;
        config.site.address = "Lab bench 1".into();
        config.site.province = "Buenos Aires".into();
        let counts = vec![
            2, 3, 5, 7, 8, 8, 9, // PA
            0, 0, 0, 0, 0, 0, 0, // PB
            9, 10, 10, 5, 4, // PC
            11, 11, 1, 3, 5, 9, 9, 0, 0, // PD
        ];
        let periods = [("PA", 1), ("PB", 8), ("PC", 15), ("PD", 20)]
            .into_iter()
            .map(|(label, first_day)| Period {
                label: label.into(),
                first_day,
            })
            .collect();
        let overrides = [7, 16, 17]
            .into_iter()
            .map(|day| DetectorOverride {
                device: "mosquiot-01".into(),
                day,
                drop: 1,
            })
            .collect();
        Self {
            version: SCENARIO_VERSION,
            name: "poc28".into(),
            start: sim_epoch(),
            duration_days: 28,
            seed: 42,
            generator: None,
            network: NetworkSettings::default(),
            periods,
            devices: vec![ScenarioDevice {
                serial: "MQT-0001".into(),
                counts,
                distractors: 2,
                config,
            }],
            events: Vec::new(),
            overrides,
        }
    }
}

#[cfg(test)]
mod tests;
