//! The monitoring platform: device registry, append-only telemetry store,
//! rule engine, risk map and RPC tracking.

mod riskmap;
mod rpc;
mod rules;
mod series;

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::CameraContext;
use crate::device::{DeviceConfig, FieldProblem, PlaceType, Responsible, RpcKind, RpcOutcome, RpcResponse, Schedule, Site};
use crate::lpp::{GeoPoint, LinkKind, TelemetryEvent, TiltState};
use crate::time::{as_seconds, Timestamp};

pub use riskmap::{cell_id, cell_index, daily_max_sum, RiskCell, RISK_WINDOW_DAYS};
pub use rpc::{RpcRecord, RpcStatus, RpcTimeouts};
pub use rules::{default_rules, evaluate_rules, Alarm, AlarmAction, AlarmRule, Condition, RuleEngine, Severity, WebhookCall};
pub use series::{Metric, PointValue, SeriesStore, TimeSeriesPoint};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlatformError {
    #[error("unknown device {0}")]
    UnknownDevice(String),
    #[error("device {0} is already registered with different metadata")]
    Conflict(String),
    #[error("invalid registration: {}", fmt_problems(.0))]
    Invalid(Vec<FieldProblem>),
    #[error("invalid telemetry: {0}")]
    BadTelemetry(String),
    #[error("invalid range: from {from} is after to {to}")]
    InvalidRange { from: Timestamp, to: Timestamp },
    #[error("device {device_id} is in fault: {reason}")]
    DeviceFault { device_id: String, reason: String },
    #[error("unknown request {0}")]
    UnknownRequest(String),
    #[error("store: {0}")]
    Store(String),
}

fn fmt_problems(p: &[FieldProblem]) -> String {
    p.iter().map(|p| format!("{}: {}", p.field, p.message)).collect::<Vec<_>>().join("; ")
}

/// Registration metadata. Connectivity secrets stay with the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceInfo {
    pub device_id: String,
    pub site: Site,
    pub responsible: Responsible,
    pub place_type: PlaceType,
    pub installer: String,
    pub species: String,
    pub link: LinkKind,
    pub gps: GeoPoint,
    pub reading_period_h: u32,
    pub tx_per_day: u32,
}

impl From<&DeviceConfig> for DeviceInfo {
    fn from(c: &DeviceConfig) -> Self {
        Self {
            device_id: c.device_id.clone(),
            site: c.site.clone(),
            responsible: c.responsible.clone(),
            place_type: c.place_type,
            installer: c.installer.clone(),
            species: c.species.clone(),
            link: c.link(),
            gps: c.gps,
            reading_period_h: c.reading_period_h,
            tx_per_day: c.tx_per_day,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceRecord {
    #[serde(flatten)]
    pub info: DeviceInfo,
    pub registered_at: Timestamp,
    /// Schedule currently in force; changes when a reschedule is answered.
    pub schedule: Schedule,
    #[serde(default)]
    pub last_seen: Option<Timestamp>,
    #[serde(default)]
    pub fw_version: Option<String>,
    #[serde(default)]
    pub camera: Option<CameraContext>,
    #[serde(default)]
    pub fault: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Registration {
    Created,
    Unchanged,
}

#[derive(Clone, Debug, PartialEq)]
pub enum IngestOutcome {
    Stored { points: usize, alarms: Vec<Alarm>, lag_s: f64 },
    Duplicate,
    Quarantined,
}

/// One line of the append-only log. Replaying the log rebuilds the store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogRecord {
    Device { record: DeviceRecord },
    Event { receipt: Timestamp, event: TelemetryEvent },
    Alarm { alarm: Alarm },
    Rpc { record: RpcRecord },
    Quarantine { receipt: Timestamp, event: TelemetryEvent },
}

/// Live notifications for dashboard subscribers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PlatformEvent {
    Device {
        device_id: String,
    },
    Telemetry {
        device_id: String,
        ts: Timestamp,
        egg_count: Option<u32>,
        lag_s: f64,
    },
    Alarm {
        alarm: Alarm,
    },
    Rpc {
        request_id: String,
        device_id: String,
        status: RpcStatus,
        egg_count: Option<u32>,
    },
}

#[derive(Debug, Default)]
pub struct Platform {
    devices: BTreeMap<String, DeviceRecord>,
    series: SeriesStore,
    rules: RuleEngine,
    alarms: Vec<Alarm>,
    webhooks: Vec<WebhookCall>,
    rpcs: BTreeMap<String, RpcRecord>,
    rpc_order: Vec<String>,
    next_rpc: u64,
    timeouts: RpcTimeouts,
    seen: HashSet<(String, Timestamp)>,
    log: Vec<LogRecord>,
    live: Vec<(u64, PlatformEvent)>,
    ingestions: u64,
    quarantined: u64,
}

impl Platform {
    pub fn new() -> Self {
        Self::with_rules(default_rules())
    }

    pub fn with_rules(rules: Vec<AlarmRule>) -> Self {
        Self {
            rules: RuleEngine::new(rules),
            ..Default::default()
        }
    }

    pub fn with_timeouts(mut self, t: RpcTimeouts) -> Self {
        self.timeouts = t;
        self
    }

    pub fn rules(&self) -> &[AlarmRule] {
        self.rules.rules()
    }

    fn emit(&mut self, ev: PlatformEvent) {
        let seq = self.live.last().map_or(1, |(s, _)| s + 1);
        self.live.push((seq, ev));
    }

    /// Live events with a sequence number above `seq`.
    pub fn events_after(&self, seq: u64) -> &[(u64, PlatformEvent)] {
        let i = self.live.partition_point(|(s, _)| *s <= seq);
        &self.live[i..]
    }

    pub fn last_event_seq(&self) -> u64 {
        self.live.last().map_or(0, |(s, _)| *s)
    }

    pub fn register(&mut self, cfg: &DeviceConfig, now: Timestamp) -> Result<Registration, PlatformError> {
        let problems = cfg.problems();
        if !problems.is_empty() {
            return Err(PlatformError::Invalid(problems));
        }
        let info = DeviceInfo::from(cfg);
        if let Some(existing) = self.devices.get(&info.device_id) {
            return if existing.info == info {
                Ok(Registration::Unchanged)
            } else {
                Err(PlatformError::Conflict(info.device_id))
            };
        }
        let record = DeviceRecord {
            schedule: cfg.schedule(),
            info,
            registered_at: now,
            last_seen: None,
            fw_version: None,
            camera: None,
            fault: None,
        };
        self.insert_device(record);
        Ok(Registration::Created)
    }

    fn insert_device(&mut self, record: DeviceRecord) {
        let id = record.info.device_id.clone();
        log::info!("registered {id}");
        self.log.push(LogRecord::Device { record: record.clone() });
        self.devices.insert(id.clone(), record);
        self.emit(PlatformEvent::Device { device_id: id });
    }

    pub fn device(&self, id: &str) -> Option<&DeviceRecord> {
        self.devices.get(id)
    }

    pub fn devices(&self) -> impl Iterator<Item = &DeviceRecord> {
        self.devices.values()
    }

    /// Marks a device as faulty, e.g. when it stops answering.
    pub fn set_fault(&mut self, id: &str, reason: Option<String>) -> Result<(), PlatformError> {
        let d = self
            .devices
            .get_mut(id)
            .ok_or_else(|| PlatformError::UnknownDevice(id.into()))?;
        d.fault = reason;
        Ok(())
    }

    /// Stores one telemetry event. Duplicates (same device and event time)
    /// are ignored; events from unknown devices are quarantined.
    pub fn ingest(&mut self, ev: &TelemetryEvent, receipt: Timestamp) -> Result<IngestOutcome, PlatformError> {
        ev.validate().map_err(|e| PlatformError::BadTelemetry(e.to_string()))?;
        if !self.devices.contains_key(&ev.device_id) {
            log::warn!("quarantined event from unknown device {}", ev.device_id);
            self.quarantined += 1;
            self.log.push(LogRecord::Quarantine {
                receipt,
                event: ev.clone(),
            });
            return Ok(IngestOutcome::Quarantined);
        }
        if !self.seen.insert((ev.device_id.clone(), ev.ts)) {
            log::debug!("duplicate event {} at {}", ev.device_id, ev.ts);
            return Ok(IngestOutcome::Duplicate);
        }
        self.ingestions += 1;
        self.log.push(LogRecord::Event {
            receipt,
            event: ev.clone(),
        });
        let lag_s = as_seconds(receipt - ev.ts);
        let id = ev.device_id.clone();
        let mut points: Vec<TimeSeriesPoint> = ev
            .readings
            .iter()
            .map(|r| TimeSeriesPoint {
                device_id: id.clone(),
                key: Metric::EggCount,
                ts: r.ts,
                value: PointValue::Number(r.egg_count as f64),
            })
            .collect();
        let status = [
            (Metric::TemperatureC, PointValue::Number(ev.temperature_c)),
            (Metric::HumidityPct, PointValue::Number(ev.humidity_pct)),
            (Metric::Water, PointValue::Flag(ev.water_present)),
            (Metric::Tilt, PointValue::State(ev.tilt.as_str().into())),
            (Metric::Lid, PointValue::Flag(ev.lid_open)),
            (Metric::BatteryPct, PointValue::Number(ev.battery_pct)),
            (Metric::Rssi, PointValue::Number(ev.signal_level)),
            (Metric::IngestLagS, PointValue::Number(lag_s)),
        ];
        points.extend(status.into_iter().map(|(key, value)| TimeSeriesPoint {
            device_id: id.clone(),
            key,
            ts: ev.ts,
            value,
        }));

        let mut stored = 0;
        let mut alarms = Vec::new();
        for p in &points {
            if !self.series.insert(p) {
                continue;
            }
            stored += 1;
            for (alarm, action) in self.rules.evaluate(p) {
                if let AlarmAction::Webhook { url } = action {
                    self.webhooks.push(WebhookCall {
                        url,
                        alarm_id: alarm.alarm_id,
                        body: serde_json::to_string(&alarm).expect("alarm serializes"),
                    });
                }
                log::warn!("alarm {} on {}: {}", alarm.rule_id, alarm.device_id, alarm.message);
                alarms.push(alarm);
            }
        }

        let d = self.devices.get_mut(&id).expect("checked above");
        d.last_seen = Some(d.last_seen.map_or(receipt, |t| t.max(receipt)));
        d.fw_version = Some(ev.fw_version.clone());
        if ev.camera.is_some() {
            d.camera.clone_from(&ev.camera);
        }
        d.fault = if ev.tilt == TiltState::Overturned {
            Some("overturned".into())
        } else if ev.battery_pct <= 0.0 {
            Some("battery depleted".into())
        } else {
            None
        };

        self.emit(PlatformEvent::Telemetry {
            device_id: id,
            ts: ev.ts,
            egg_count: ev.latest_reading().map(|r| r.egg_count),
            lag_s,
        });
        for a in &alarms {
            self.alarms.push(a.clone());
            self.log.push(LogRecord::Alarm { alarm: a.clone() });
            self.emit(PlatformEvent::Alarm { alarm: a.clone() });
        }
        Ok(IngestOutcome::Stored {
            points: stored,
            alarms,
            lag_s,
        })
    }

    pub fn ingestion_count(&self) -> u64 {
        self.ingestions
    }

    pub fn quarantined_count(&self) -> u64 {
        self.quarantined
    }

    pub fn point_count(&self) -> usize {
        self.series.len()
    }

    pub fn series(&self) -> &SeriesStore {
        &self.series
    }

    /// Points in `[from, to]`, ascending by time.
    pub fn query_series(
        &self,
        device_id: &str,
        key: Metric,
        from: Timestamp,
        to: Timestamp,
    ) -> Result<Vec<TimeSeriesPoint>, PlatformError> {
        if from > to {
            return Err(PlatformError::InvalidRange { from, to });
        }
        if !self.devices.contains_key(device_id) {
            return Err(PlatformError::UnknownDevice(device_id.into()));
        }
        Ok(self.series.range(device_id, key, from, to))
    }

    /// Every accepted event in arrival order.
    pub fn events(&self) -> impl Iterator<Item = (&TelemetryEvent, Timestamp)> {
        self.log.iter().filter_map(|r| match r {
            LogRecord::Event { receipt, event } => Some((event, *receipt)),
            _ => None,
        })
    }

    pub fn alarms(&self) -> &[Alarm] {
        &self.alarms
    }

    pub fn alarms_between(&self, from: Timestamp, to: Timestamp) -> Result<Vec<&Alarm>, PlatformError> {
        if from > to {
            return Err(PlatformError::InvalidRange { from, to });
        }
        Ok(self.alarms.iter().filter(|a| a.ts >= from && a.ts <= to).collect())
    }

    pub fn drain_webhooks(&mut self) -> Vec<WebhookCall> {
        std::mem::take(&mut self.webhooks)
    }

    /// Indices for the seven days before `window_end`, one cell per occupied
    /// grid square.
    pub fn risk_map(&self, window_end: Timestamp, grid_size_m: f64) -> Vec<RiskCell> {
        let traps: Vec<(String, GeoPoint)> = self
            .devices
            .values()
            .map(|d| (d.info.device_id.clone(), d.info.gps))
            .collect();
        riskmap::compute(&self.series, &traps, window_end, grid_size_m)
    }

    /// Records a new command; the caller hands the returned record's
    /// command to the network.
    pub fn dispatch_rpc(&mut self, now: Timestamp, device_id: &str, kind: RpcKind) -> Result<RpcRecord, PlatformError> {
        let d = self
            .devices
            .get(device_id)
            .ok_or_else(|| PlatformError::UnknownDevice(device_id.into()))?;
        if let Some(reason) = &d.fault {
            return Err(PlatformError::DeviceFault {
                device_id: device_id.into(),
                reason: reason.clone(),
            });
        }
        if let RpcKind::Reschedule {
            tx_per_day,
            reading_period_h,
        } = kind
        {
            let mut problems = Vec::new();
            Schedule {
                reading_period_h,
                tx_per_day,
            }
            .check(d.info.link, &mut problems);
            if !problems.is_empty() {
                return Err(PlatformError::Invalid(problems));
            }
        }
        self.next_rpc += 1;
        let record = RpcRecord {
            request_id: format!("rpc-{}", self.next_rpc),
            device_id: device_id.into(),
            kind,
            status: RpcStatus::Pending,
            issued_at: now,
            deadline: now + self.timeouts.for_link(d.info.link),
            updated_at: now,
            response: None,
            detail: None,
        };
        self.store_rpc(record.clone());
        Ok(record)
    }

    fn store_rpc(&mut self, record: RpcRecord) {
        if let RpcStatus::Answered = record.status {
            if let Some(RpcOutcome::Rescheduled {
                tx_per_day,
                reading_period_h,
            }) = record.response.as_ref().map(|r| &r.outcome)
            {
                if let Some(d) = self.devices.get_mut(&record.device_id) {
                    d.schedule = Schedule {
                        reading_period_h: *reading_period_h,
                        tx_per_day: *tx_per_day,
                    };
                }
            }
        }
        if let Some(n) = record.request_id.strip_prefix("rpc-").and_then(|n| n.parse().ok()) {
            self.next_rpc = self.next_rpc.max(n);
        }
        if !self.rpcs.contains_key(&record.request_id) {
            self.rpc_order.push(record.request_id.clone());
        }
        self.log.push(LogRecord::Rpc { record: record.clone() });
        self.emit(PlatformEvent::Rpc {
            request_id: record.request_id.clone(),
            device_id: record.device_id.clone(),
            status: record.status,
            egg_count: record.egg_count(),
        });
        self.rpcs.insert(record.request_id.clone(), record);
    }

    fn update_rpc(
        &mut self,
        request_id: &str,
        f: impl FnOnce(&mut RpcRecord) -> bool,
    ) -> Result<RpcStatus, PlatformError> {
        let mut r = self
            .rpcs
            .get(request_id)
            .cloned()
            .ok_or_else(|| PlatformError::UnknownRequest(request_id.into()))?;
        if f(&mut r) {
            let status = r.status;
            self.store_rpc(r);
            Ok(status)
        } else {
            Ok(r.status)
        }
    }

    pub fn mark_delivered(&mut self, request_id: &str, at: Timestamp) -> Result<RpcStatus, PlatformError> {
        self.update_rpc(request_id, |r| {
            if r.status != RpcStatus::Pending {
                return false;
            }
            r.status = RpcStatus::Delivered;
            r.updated_at = at;
            true
        })
    }

    /// Records the device's answer. Repeats of an answer are ignored, as are
    /// answers arriving after the command was closed.
    pub fn record_response(&mut self, resp: &RpcResponse, at: Timestamp) -> Result<RpcStatus, PlatformError> {
        self.update_rpc(&resp.request_id, |r| {
            if r.status.is_terminal() {
                if r.status != RpcStatus::Answered {
                    log::warn!("late answer for {} ({})", r.request_id, r.status.as_str());
                }
                return false;
            }
            r.status = match resp.outcome {
                RpcOutcome::Rejected { .. } => RpcStatus::Rejected,
                _ => RpcStatus::Answered,
            };
            r.updated_at = at;
            r.response = Some(resp.clone());
            true
        })
    }

    pub fn close_rpc(
        &mut self,
        request_id: &str,
        status: RpcStatus,
        at: Timestamp,
        detail: &str,
    ) -> Result<RpcStatus, PlatformError> {
        self.update_rpc(request_id, |r| {
            if r.status.is_terminal() {
                return false;
            }
            r.status = status;
            r.updated_at = at;
            r.detail = Some(detail.into());
            true
        })
    }

    pub fn rpc(&self, request_id: &str) -> Option<&RpcRecord> {
        self.rpcs.get(request_id)
    }

    pub fn rpcs(&self) -> impl Iterator<Item = &RpcRecord> {
        self.rpc_order.iter().map(|id| &self.rpcs[id])
    }

    /// Earliest deadline of an open command.
    pub fn next_due(&self) -> Option<Timestamp> {
        self.rpcs
            .values()
            .filter(|r| !r.status.is_terminal())
            .map(|r| r.deadline)
            .min()
    }

    /// Times out open commands whose deadline has passed.
    pub fn expire(&mut self, now: Timestamp) -> Vec<String> {
        let due: Vec<String> = self
            .rpc_order
            .iter()
            .filter(|id| {
                let r = &self.rpcs[*id];
                !r.status.is_terminal() && r.deadline <= now
            })
            .cloned()
            .collect();
        for id in &due {
            let _ = self.close_rpc(id, RpcStatus::Timeout, now, "no answer before deadline");
        }
        due
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    /// The append-only log as JSON lines.
    pub fn export_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.log {
            out.push_str(&serde_json::to_string(r).expect("log record serializes"));
            out.push('\n');
        }
        out
    }

    /// Rebuilds a platform by replaying an exported log. Alarm lines are
    /// re-derived from the events rather than copied.
    pub fn replay(text: &str, rules: Vec<AlarmRule>) -> Result<Self, PlatformError> {
        let mut p = Self::with_rules(rules);
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rec: LogRecord =
                serde_json::from_str(line).map_err(|e| PlatformError::Store(format!("line {}: {e}", n + 1)))?;
            match rec {
                LogRecord::Device { record } => p.insert_device(record),
                LogRecord::Event { receipt, event } | LogRecord::Quarantine { receipt, event } => {
                    p.ingest(&event, receipt)?;
                }
                LogRecord::Alarm { .. } => {}
                LogRecord::Rpc { record } => p.store_rpc(record),
            }
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<(), PlatformError> {
        std::fs::write(path, self.export_jsonl()).map_err(|e| PlatformError::Store(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, PlatformError> {
        let text = std::fs::read_to_string(path).map_err(|e| PlatformError::Store(e.to_string()))?;
        Self::replay(&text, default_rules())
    }
}
