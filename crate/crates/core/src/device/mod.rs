//! Simulated ovitrap device.
//!
//! A [`DeviceSim`] is a sequential state machine with its own queue of timed
//! actions. The owner asks for [`DeviceSim::next_due`], moves time forward and
//! calls [`DeviceSim::advance`]; everything the device sends comes back as
//! [`DeviceMessage`] values.

mod config;
mod power;
mod rpc;

use std::collections::BTreeMap;
use std::fmt;

use chrono::Duration;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{reading_latency, Detector, DetectorConfig, DetectorError, ReadingResult};
use crate::lpp::{LinkKind, TelemetryEvent, TelemetryReading, TiltState, MAX_READINGS};
use crate::raster::Raster;
use crate::synthgen::DepressorScene;
use crate::time::{seconds, FixedClock, Timestamp};

pub use config::{
    ConfigError, Connectivity, DeviceConfig, FieldProblem, JoinCredentials, PlaceType, Responsible, Schedule, Site,
    SPECIES,
};
pub use power::{battery_model, battery_model_raw, PowerProfile};
pub use rpc::{RpcCommand, RpcKind, RpcOutcome, RpcResponse};

pub const FIRMWARE_VERSION: &str = "1.2";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Unprovisioned,
    Provisioned,
    Operating,
    Fault,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Unprovisioned => "unprovisioned",
            Self::Provisioned => "provisioned",
            Self::Operating => "operating",
            Self::Fault => "fault",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum DeviceError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("device is {0}, command requires an operating device")]
    NotOperating(Phase),
    #[error("device is not provisioned")]
    NotProvisioned,
    #[error("device is in fault")]
    Fault,
    #[error("no water in the trap; the device cannot start operating")]
    NoWater,
    #[error("unknown command {0:?}")]
    UnknownCommand(String),
    #[error(transparent)]
    Detector(#[from] DetectorError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorState {
    pub tilt: TiltState,
    pub lid_open: bool,
    pub water_present: bool,
    pub temperature_c: f64,
    pub humidity_pct: f64,
    pub signal_dbm: f64,
}

impl Default for SensorState {
    fn default() -> Self {
        Self {
            tilt: TiltState::WellPositioned,
            lid_open: false,
            water_present: true,
            temperature_c: 26.0,
            humidity_pct: 70.0,
            signal_dbm: -67.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "sensor", content = "value", rename_all = "snake_case")]
pub enum SensorEvent {
    Tilt(TiltState),
    Lid(bool),
    Water(bool),
    Climate { temperature_c: f64, humidity_pct: f64 },
    Signal(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlertKind {
    Tilt,
    Lid,
    Water,
}

/// Why a telemetry event was sent.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmitCause {
    Scheduled,
    Alert(AlertKind),
    OnDemand(String),
    Assay(u32),
}

/// Outcome of an installer test reading, returned over the control channel.
#[derive(Clone, Debug, PartialEq)]
pub struct AssayResult {
    pub assay_id: u32,
    pub egg_count: u32,
    pub ts: Timestamp,
    pub lid_open: bool,
    pub reading: ReadingResult,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DeviceMessage {
    Telemetry { event: TelemetryEvent, cause: EmitCause },
    /// `status` is the device state at answer time, without readings.
    Rpc { response: RpcResponse, status: TelemetryEvent },
    Assay(AssayResult),
}

/// Supplies the images the camera would capture at a given instant.
pub trait SceneSource: Send {
    fn snapshots(&mut self, at: Timestamp, n: u32) -> Vec<Raster>;
}

impl SceneSource for DepressorScene {
    fn snapshots(&mut self, _at: Timestamp, n: u32) -> Vec<Raster> {
        DepressorScene::snapshots(self, n)
    }
}

/// Post-processing applied to every reading before it is used.
pub type ReadingHook = Box<dyn FnMut(&mut ReadingResult) + Send>;

/// Device flash: survives [`DeviceSim::reboot`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NvStore {
    pub config: Option<DeviceConfig>,
    /// Instant of the first scheduled reading; later readings follow every
    /// `reading_period_h`.
    pub anchor: Option<Timestamp>,
    pub readings_taken: u32,
    pub assays_taken: u32,
    pub dev_nonce: u16,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogLine {
    pub ts: Timestamp,
    pub device_id: String,
    pub phase: Phase,
    pub event: String,
    pub detail: String,
}

impl fmt::Display for LogLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {} {}",
            self.ts.to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            self.device_id,
            self.phase,
            self.event,
            self.detail
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Purpose {
    Scheduled { transmit: bool },
    OnDemand(String),
    Assay(u32),
}

struct InFlight {
    purpose: Purpose,
    images: Vec<Raster>,
}

pub struct DeviceSim {
    serial: String,
    phase: Phase,
    sensors: SensorState,
    battery_mah: f64,
    battery_at: Timestamp,
    pending: Vec<ReadingResult>,
    last_reading: Option<ReadingResult>,
    next_slot: u64,
    in_flight: BTreeMap<(Timestamp, u64), InFlight>,
    seq: u64,
    session: Option<String>,
    store: NvStore,
    power: PowerProfile,
    detector: Detector,
    scene: Box<dyn SceneSource>,
    hook: Option<ReadingHook>,
    log: Vec<LogLine>,
    readings_done: u64,
}

impl fmt::Debug for DeviceSim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DeviceSim")
            .field("id", &self.device_id())
            .field("phase", &self.phase)
            .field("battery_mah", &self.battery_mah)
            .field("pending", &self.pending.len())
            .finish()
    }
}

impl DeviceSim {
    /// A factory-fresh device. `serial` identifies it until provisioning
    /// assigns a device id.
    pub fn new(serial: impl Into<String>, scene: Box<dyn SceneSource>, now: Timestamp) -> Self {
        let power = PowerProfile::default();
        Self {
            serial: serial.into(),
            phase: Phase::Unprovisioned,
            sensors: SensorState::default(),
            battery_mah: power.capacity_mah,
            battery_at: now,
            pending: Vec::new(),
            last_reading: None,
            next_slot: 0,
            in_flight: BTreeMap::new(),
            seq: 0,
            session: None,
            store: NvStore::default(),
            power,
            detector: Detector::new(DetectorConfig::default()).expect("default detector config is valid"),
            scene,
            hook: None,
            log: Vec::new(),
            readings_done: 0,
        }
    }

    /// Rebuilds a device from a saved flash image, as after a power cycle.
    pub fn from_store(
        serial: impl Into<String>,
        scene: Box<dyn SceneSource>,
        store: NvStore,
        battery_mah: f64,
        now: Timestamp,
    ) -> Self {
        let mut dev = Self::new(serial, scene, now);
        dev.battery_mah = battery_mah.clamp(0.0, dev.power.capacity_mah);
        dev.store = store;
        dev.restore_from_store(now);
        dev
    }

    pub fn with_power(mut self, power: PowerProfile) -> Self {
        self.battery_mah = power.capacity_mah;
        self.power = power;
        self
    }

    pub fn with_detector(mut self, detector: Detector) -> Self {
        self.detector = detector;
        self.detector.resume_numbering(self.store.readings_taken);
        self
    }

    pub fn with_sensors(mut self, sensors: SensorState) -> Self {
        self.sensors = sensors;
        self
    }

    pub fn with_hook(mut self, hook: ReadingHook) -> Self {
        self.hook = Some(hook);
        self
    }

    pub fn device_id(&self) -> &str {
        self.store.config.as_ref().map_or(&self.serial, |c| &c.device_id)
    }

    pub fn serial(&self) -> &str {
        &self.serial
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn config(&self) -> Option<&DeviceConfig> {
        self.store.config.as_ref()
    }

    pub fn sensors(&self) -> &SensorState {
        &self.sensors
    }

    pub fn battery_mah(&self) -> f64 {
        self.battery_mah
    }

    pub fn battery_pct(&self) -> f64 {
        100.0 * self.battery_mah / self.power.capacity_mah
    }

    pub fn power(&self) -> &PowerProfile {
        &self.power
    }

    pub fn pending_readings(&self) -> &[ReadingResult] {
        &self.pending
    }

    pub fn last_reading(&self) -> Option<&ReadingResult> {
        self.last_reading.as_ref()
    }

    /// Readings completed since power-on.
    pub fn readings_done(&self) -> u64 {
        self.readings_done
    }

    pub fn store(&self) -> &NvStore {
        &self.store
    }

    pub fn log(&self) -> &[LogLine] {
        &self.log
    }

    pub fn session(&self) -> Option<&str> {
        self.session.as_deref()
    }

    pub fn attach_session(&mut self, handle: impl Into<String>) {
        self.session = Some(handle.into());
    }

    /// Next OTAA dev-nonce; the counter lives in flash so a nonce is never reused.
    pub fn next_dev_nonce(&mut self) -> u16 {
        self.store.dev_nonce = self.store.dev_nonce.wrapping_add(1);
        self.store.dev_nonce
    }

    pub fn link(&self) -> Option<LinkKind> {
        self.config().map(DeviceConfig::link)
    }

    fn latency(&self) -> Duration {
        seconds(reading_latency(&self.detector.config))
    }

    fn record(&mut self, ts: Timestamp, event: &str, detail: impl Into<String>) {
        let line = LogLine {
            ts,
            device_id: self.device_id().to_string(),
            phase: self.phase,
            event: event.to_string(),
            detail: detail.into(),
        };
        log::debug!("{line}");
        self.log.push(line);
    }

    fn slot_time(&self, slot: u64) -> Option<Timestamp> {
        let anchor = self.store.anchor?;
        let period = self.config()?.reading_period_h as i64;
        Some(anchor + Duration::hours(period * slot as i64))
    }

    fn death_time(&self) -> Option<Timestamp> {
        if self.phase == Phase::Fault || self.power.idle_ma <= 0.0 {
            return None;
        }
        let secs = self.battery_mah / self.power.idle_ma * 3600.0;
        Some(self.battery_at + seconds(secs))
    }

    /// Earliest instant at which the device has something to do.
    pub fn next_due(&self) -> Option<Timestamp> {
        if self.phase == Phase::Fault {
            return None;
        }
        let mut due = self.in_flight.keys().next().map(|k| k.0);
        if self.phase == Phase::Operating {
            due = min_opt(due, self.slot_time(self.next_slot));
        }
        if self.phase != Phase::Unprovisioned {
            due = min_opt(due, self.death_time());
        }
        due
    }

    /// Runs every action due at or before `now`.
    pub fn advance(&mut self, now: Timestamp) -> Vec<DeviceMessage> {
        let mut out = Vec::new();
        while let Some(t) = self.next_due().filter(|t| *t <= now) {
            if !self.drain_to(t) {
                break;
            }
            let first_flight = self.in_flight.keys().next().copied();
            match first_flight {
                Some(key) if key.0 == t => {
                    let job = self.in_flight.remove(&key).expect("key present");
                    self.complete(t, job, &mut out);
                }
                _ if self.phase == Phase::Operating && self.slot_time(self.next_slot) == Some(t) => {
                    self.start_slot(t);
                }
                _ => {}
            }
        }
        if self.phase != Phase::Fault {
            self.drain_to(now);
        }
        out
    }

    /// Applies idle drain up to `t`. Returns false if the battery died.
    fn drain_to(&mut self, t: Timestamp) -> bool {
        if self.phase == Phase::Fault {
            return false;
        }
        if t > self.battery_at {
            let secs = crate::time::as_seconds(t - self.battery_at);
            self.battery_mah -= self.power.idle_mah(secs);
            self.battery_at = t;
        }
        self.check_battery(t)
    }

    fn debit(&mut self, t: Timestamp, mah: f64) -> bool {
        self.battery_mah -= mah;
        self.check_battery(t)
    }

    fn check_battery(&mut self, t: Timestamp) -> bool {
        if self.battery_mah > 1e-9 {
            return true;
        }
        self.battery_mah = 0.0;
        self.phase = Phase::Fault;
        self.in_flight.clear();
        self.record(t, "battery_dead", "no further emissions");
        false
    }

    fn start_slot(&mut self, t: Timestamp) {
        let slot = self.next_slot;
        self.next_slot += 1;
        let per_tx = self.config().map_or(1, |c| c.schedule().readings_per_tx()) as u64;
        let transmit = (slot + 1).is_multiple_of(per_tx);
        if self.sensors.tilt == TiltState::Overturned {
            self.record(t, "reading_skipped", format!("slot={slot} overturned"));
            return;
        }
        self.begin_reading(t, Purpose::Scheduled { transmit });
    }

    fn begin_reading(&mut self, t: Timestamp, purpose: Purpose) {
        if !self.debit(t, self.power.reading_mah()) {
            return;
        }
        let n = self.detector.config.snapshots_per_reading as u32;
        let images = self.scene.snapshots(t, n);
        self.seq += 1;
        self.record(t, "reading_started", format!("{purpose:?}"));
        self.in_flight.insert((t + self.latency(), self.seq), InFlight { purpose, images });
    }

    fn complete(&mut self, t: Timestamp, job: InFlight, out: &mut Vec<DeviceMessage>) {
        let mut reading = match self.detector.run(&job.images, &FixedClock(t)) {
            Ok(r) => r,
            Err(e) => {
                self.record(t, "reading_failed", e.to_string());
                return;
            }
        };
        if let Some(hook) = self.hook.as_mut() {
            hook(&mut reading);
        }
        self.store.readings_taken = self.detector.readings_taken();
        self.readings_done += 1;
        self.last_reading = Some(reading.clone());
        self.record(
            t,
            "reading_done",
            format!("no={} eggs={}", reading.reading_no, reading.egg_count),
        );
        match job.purpose {
            Purpose::Scheduled { transmit } => {
                if self.pending.len() == MAX_READINGS {
                    let dropped = self.pending.remove(0);
                    self.record(t, "buffer_full", format!("dropped reading {}", dropped.reading_no));
                }
                self.pending.push(reading);
                if transmit && self.sensors.tilt == TiltState::WellPositioned {
                    let readings: Vec<TelemetryReading> = self.pending.iter().map(Into::into).collect();
                    if self.transmit(t, readings, EmitCause::Scheduled, out) {
                        self.pending.clear();
                    }
                }
            }
            Purpose::OnDemand(request_id) => {
                let response = RpcResponse {
                    device_id: self.device_id().to_string(),
                    request_id: request_id.clone(),
                    ts: t,
                    outcome: RpcOutcome::Reading {
                        reading: (&reading).into(),
                    },
                };
                self.push_rpc(t, response, out);
                self.transmit(t, vec![(&reading).into()], EmitCause::OnDemand(request_id), out);
            }
            Purpose::Assay(assay_id) => {
                out.push(DeviceMessage::Assay(AssayResult {
                    assay_id,
                    egg_count: reading.egg_count,
                    ts: t,
                    lid_open: self.sensors.lid_open,
                    reading: reading.clone(),
                }));
                self.transmit(t, vec![(&reading).into()], EmitCause::Assay(assay_id), out);
            }
        }
    }

    /// Builds the telemetry event the device would send right now.
    pub fn build_event(&self, t: Timestamp, readings: Vec<TelemetryReading>) -> Option<TelemetryEvent> {
        let cfg = self.config()?;
        Some(TelemetryEvent {
            device_id: cfg.device_id.clone(),
            ts: t,
            readings,
            temperature_c: self.sensors.temperature_c,
            humidity_pct: self.sensors.humidity_pct,
            water_present: self.sensors.water_present,
            tilt: self.sensors.tilt,
            lid_open: self.sensors.lid_open,
            battery_pct: (self.battery_pct() * 100.0).round() / 100.0,
            link: cfg.link(),
            signal_level: self.sensors.signal_dbm,
            gps: cfg.gps,
            camera: match cfg.link() {
                LinkKind::WifiMqtt => Some(self.detector.camera.clone()),
                LinkKind::Lorawan => None,
            },
            fw_version: FIRMWARE_VERSION.into(),
        })
    }

    fn transmit(
        &mut self,
        t: Timestamp,
        readings: Vec<TelemetryReading>,
        cause: EmitCause,
        out: &mut Vec<DeviceMessage>,
    ) -> bool {
        let Some(link) = self.link() else { return false };
        if !self.debit(t, self.power.tx_mah(link)) {
            return false;
        }
        let Some(event) = self.build_event(t, readings) else {
            return false;
        };
        self.record(
            t,
            "tx",
            format!("{} readings={} cause={cause:?}", link.as_str(), event.readings.len()),
        );
        out.push(DeviceMessage::Telemetry { event, cause });
        true
    }

    fn push_rpc(&self, t: Timestamp, response: RpcResponse, out: &mut Vec<DeviceMessage>) {
        if let Some(status) = self.build_event(t, Vec::new()) {
            out.push(DeviceMessage::Rpc { response, status });
        }
    }

    /// Writes a configuration to flash.
    ///
    /// An identical configuration is a no-op. A different one stops the
    /// schedule and leaves the device provisioned; buffered readings are kept.
    pub fn apply_provisioning(&mut self, now: Timestamp, cfg: DeviceConfig) -> Result<Vec<DeviceMessage>, DeviceError> {
        let out = self.advance(now);
        if self.phase == Phase::Fault {
            return Err(DeviceError::Fault);
        }
        cfg.validate()?;
        if self.store.config.as_ref() == Some(&cfg) {
            self.record(now, "provisioned", "unchanged");
            return Ok(out);
        }
        let link_changed = self.link() != Some(cfg.link());
        self.store.config = Some(cfg);
        self.store.anchor = None;
        self.in_flight.retain(|_, job| !matches!(job.purpose, Purpose::Scheduled { .. }));
        if link_changed {
            self.session = None;
        }
        self.phase = Phase::Provisioned;
        let detail = format!("config persisted, {} pending readings kept", self.pending.len());
        self.record(now, "provisioned", detail);
        Ok(out)
    }

    /// Begins the reading schedule with a first reading at `now`.
    pub fn start(&mut self, now: Timestamp) -> Result<Vec<DeviceMessage>, DeviceError> {
        let out = self.advance(now);
        match self.phase {
            Phase::Fault => return Err(DeviceError::Fault),
            Phase::Unprovisioned => return Err(DeviceError::NotProvisioned),
            Phase::Operating => return Ok(out),
            Phase::Provisioned => {}
        }
        if !self.sensors.water_present {
            self.record(now, "start_refused", "water absent");
            return Err(DeviceError::NoWater);
        }
        self.store.anchor = Some(now);
        self.next_slot = 0;
        self.phase = Phase::Operating;
        self.record(now, "operating", "schedule anchored");
        Ok(out)
    }

    /// Power cycle: volatile state is lost, flash is kept, and an operating
    /// device resumes on its original reading grid.
    pub fn reboot(&mut self, now: Timestamp) -> Vec<DeviceMessage> {
        let out = self.advance(now);
        if self.phase == Phase::Fault {
            return out;
        }
        self.pending.clear();
        self.in_flight.clear();
        self.last_reading = None;
        self.session = None;
        self.restore_from_store(now);
        self.record(now, "reboot", format!("resumed as {}", self.phase));
        out
    }

    fn restore_from_store(&mut self, now: Timestamp) {
        self.detector.resume_numbering(self.store.readings_taken);
        self.phase = match (&self.store.config, self.store.anchor) {
            (None, _) => Phase::Unprovisioned,
            (Some(_), None) => Phase::Provisioned,
            (Some(_), Some(_)) => Phase::Operating,
        };
        self.battery_at = now;
        if self.phase == Phase::Operating {
            let mut slot = 0;
            while self.slot_time(slot).is_some_and(|t| t < now) {
                slot += 1;
            }
            self.next_slot = slot;
        }
    }

    /// Applies a change in the physical environment. Tilt, lid and water
    /// changes on an operating device produce an immediate alert event.
    pub fn sensor_event(&mut self, now: Timestamp, ev: SensorEvent) -> Vec<DeviceMessage> {
        let mut out = self.advance(now);
        let alert = match ev {
            SensorEvent::Tilt(v) if v != self.sensors.tilt => {
                self.sensors.tilt = v;
                Some(AlertKind::Tilt)
            }
            SensorEvent::Lid(v) if v != self.sensors.lid_open => {
                self.sensors.lid_open = v;
                Some(AlertKind::Lid)
            }
            SensorEvent::Water(v) if v != self.sensors.water_present => {
                self.sensors.water_present = v;
                Some(AlertKind::Water)
            }
            SensorEvent::Climate {
                temperature_c,
                humidity_pct,
            } => {
                self.sensors.temperature_c = temperature_c;
                self.sensors.humidity_pct = humidity_pct;
                None
            }
            SensorEvent::Signal(dbm) => {
                self.sensors.signal_dbm = dbm;
                None
            }
            _ => None,
        };
        let Some(kind) = alert else { return out };
        self.record(now, "sensor", format!("{ev:?}"));
        if self.phase != Phase::Operating {
            return out;
        }
        match self.last_reading.as_ref().map(TelemetryReading::from) {
            Some(r) => {
                self.transmit(now, vec![r], EmitCause::Alert(kind), &mut out);
            }
            None => self.record(now, "alert_suppressed", "no reading yet"),
        }
        out
    }

    /// Executes a platform command. On-demand reads answer after the sensing
    /// latency; reschedules answer at once.
    pub fn handle_rpc(&mut self, now: Timestamp, cmd: &RpcCommand) -> Result<Vec<DeviceMessage>, DeviceError> {
        let mut out = self.advance(now);
        if self.phase != Phase::Operating {
            return Err(DeviceError::NotOperating(self.phase));
        }
        self.record(now, "rpc", format!("{} {}", cmd.kind.name(), cmd.request_id));
        match cmd.kind {
            RpcKind::ReadOnDemand => self.begin_reading(now, Purpose::OnDemand(cmd.request_id.clone())),
            RpcKind::Reschedule {
                tx_per_day,
                reading_period_h,
            } => {
                let schedule = Schedule {
                    reading_period_h,
                    tx_per_day,
                };
                let mut problems = Vec::new();
                let link = self.link().expect("operating implies configured");
                schedule.check(link, &mut problems);
                let outcome = if problems.is_empty() {
                    let cfg = self.store.config.as_mut().expect("operating implies configured");
                    cfg.reading_period_h = reading_period_h;
                    cfg.tx_per_day = tx_per_day;
                    self.store.anchor = Some(now + Duration::hours(reading_period_h as i64));
                    self.next_slot = 0;
                    self.record(now, "rescheduled", format!("tx_per_day={tx_per_day} period_h={reading_period_h}"));
                    RpcOutcome::Rescheduled {
                        tx_per_day,
                        reading_period_h,
                    }
                } else {
                    let reason = problems.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ");
                    RpcOutcome::Rejected { reason }
                };
                let response = RpcResponse {
                    device_id: self.device_id().to_string(),
                    request_id: cmd.request_id.clone(),
                    ts: now,
                    outcome,
                };
                self.push_rpc(now, response, &mut out);
            }
        }
        Ok(out)
    }

    /// Starts an installer test reading; the result arrives as
    /// [`DeviceMessage::Assay`] after the sensing latency.
    pub fn test_reading(&mut self, now: Timestamp) -> Result<(u32, Vec<DeviceMessage>), DeviceError> {
        let out = self.advance(now);
        match self.phase {
            Phase::Fault => return Err(DeviceError::Fault),
            Phase::Unprovisioned => return Err(DeviceError::NotProvisioned),
            _ => {}
        }
        self.store.assays_taken += 1;
        let id = self.store.assays_taken;
        self.begin_reading(now, Purpose::Assay(id));
        if self.phase == Phase::Fault {
            return Err(DeviceError::Fault);
        }
        Ok((id, out))
    }
}

fn min_opt(a: Option<Timestamp>, b: Option<Timestamp>) -> Option<Timestamp> {
    match (a, b) {
        (Some(a), Some(b)) => Some(a.min(b)),
        (a, None) => a,
        (None, b) => b,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_scene, GeneratorParams};
    use crate::time::sim_epoch;

    fn device(cfg: DeviceConfig, eggs: usize) -> DeviceSim {
        let scene = generate_scene(&GeneratorParams::with_seed(3), eggs, 0).unwrap();
        let mut d = DeviceSim::new("SN-1", Box::new(scene), sim_epoch());
        d.apply_provisioning(sim_epoch(), cfg).unwrap();
        d.start(sim_epoch()).unwrap();
        d
    }

    fn run(d: &mut DeviceSim, until: Timestamp) -> Vec<DeviceMessage> {
        let mut out = Vec::new();
        while let Some(t) = d.next_due().filter(|t| *t <= until) {
            out.extend(d.advance(t));
        }
        out.extend(d.advance(until));
        out
    }

    fn events(msgs: &[DeviceMessage]) -> Vec<&TelemetryEvent> {
        msgs.iter()
            .filter_map(|m| match m {
                DeviceMessage::Telemetry { event, .. } => Some(event),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn wifi_day_is_one_event_of_four() {
        let mut d = device(DeviceConfig::example_wifi("w"), 2);
        let out = run(&mut d, sim_epoch() + Duration::days(1) - Duration::seconds(1));
        let ev = events(&out);
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].readings.len(), 4);
        for pair in ev[0].readings.windows(2) {
            assert_eq!(pair[1].ts - pair[0].ts, Duration::hours(6));
        }
        assert!(ev[0].readings.iter().all(|r| r.egg_count == 2));
    }

    #[test]
    fn lorawan_day_is_four_single_events() {
        let mut d = device(DeviceConfig::example_lorawan("l"), 1);
        let out = run(&mut d, sim_epoch() + Duration::days(1) - Duration::seconds(1));
        let ev = events(&out);
        assert_eq!(ev.len(), 4);
        assert!(ev.iter().all(|e| e.readings.len() == 1 && e.camera.is_none()));
    }

    #[test]
    fn cannot_start_dry() {
        let scene = generate_scene(&GeneratorParams::with_seed(3), 0, 0).unwrap();
        let mut d = DeviceSim::new("SN", Box::new(scene), sim_epoch()).with_sensors(SensorState {
            water_present: false,
            ..SensorState::default()
        });
        assert_eq!(d.start(sim_epoch()), Err(DeviceError::NotProvisioned));
        d.apply_provisioning(sim_epoch(), DeviceConfig::example_wifi("w")).unwrap();
        assert_eq!(d.start(sim_epoch()), Err(DeviceError::NoWater));
        assert_eq!(d.phase(), Phase::Provisioned);
    }

    #[test]
    fn invalid_config_rejected() {
        let scene = generate_scene(&GeneratorParams::with_seed(3), 0, 0).unwrap();
        let mut d = DeviceSim::new("SN", Box::new(scene), sim_epoch());
        let mut cfg = DeviceConfig::example_wifi("");
        cfg.installer.clear();
        match d.apply_provisioning(sim_epoch(), cfg) {
            Err(DeviceError::Config(e)) => assert_eq!(e.fields(), vec!["device_id", "installer"]),
            other => panic!("{other:?}"),
        }
        assert_eq!(d.phase(), Phase::Unprovisioned);
    }

    #[test]
    fn on_demand_read_answers_after_ten_seconds() {
        let mut d = device(DeviceConfig::example_wifi("w"), 3);
        let t0 = sim_epoch() + Duration::hours(1);
        let cmd = RpcCommand {
            request_id: "r1".into(),
            kind: RpcKind::ReadOnDemand,
            issued_at: t0,
        };
        assert!(d.handle_rpc(t0, &cmd).unwrap().is_empty());
        assert_eq!(d.next_due(), Some(t0 + Duration::seconds(10)));
        let out = d.advance(t0 + Duration::seconds(10));
        match &out[0] {
            DeviceMessage::Rpc { response: r, .. } => {
                assert_eq!(r.egg_count(), Some(3));
                assert_eq!(r.ts, t0 + Duration::seconds(10));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(&out[1], DeviceMessage::Telemetry { cause: EmitCause::OnDemand(id), .. } if id == "r1"));
    }

    #[test]
    fn rpc_requires_operating() {
        let scene = generate_scene(&GeneratorParams::with_seed(3), 0, 0).unwrap();
        let mut d = DeviceSim::new("SN", Box::new(scene), sim_epoch());
        let cmd = RpcCommand {
            request_id: "r1".into(),
            kind: RpcKind::ReadOnDemand,
            issued_at: sim_epoch(),
        };
        assert_eq!(
            d.handle_rpc(sim_epoch(), &cmd),
            Err(DeviceError::NotOperating(Phase::Unprovisioned))
        );
    }

    #[test]
    fn reschedule_persists() {
        let mut d = device(DeviceConfig::example_wifi("w"), 0);
        let cmd = RpcCommand {
            request_id: "r2".into(),
            kind: RpcKind::Reschedule {
                tx_per_day: 4,
                reading_period_h: 6,
            },
            issued_at: sim_epoch(),
        };
        let out = d.handle_rpc(sim_epoch() + Duration::minutes(1), &cmd).unwrap();
        assert!(matches!(&out[0], DeviceMessage::Rpc { response: RpcResponse { outcome: RpcOutcome::Rescheduled { .. }, .. }, .. }));
        assert_eq!(d.store().config.as_ref().unwrap().tx_per_day, 4);
        d.reboot(sim_epoch() + Duration::hours(2));
        assert_eq!(d.config().unwrap().tx_per_day, 4);
        assert_eq!(d.phase(), Phase::Operating);
    }

    #[test]
    fn overturned_device_goes_quiet() {
        let mut d = device(DeviceConfig::example_lorawan("l"), 1);
        run(&mut d, sim_epoch() + Duration::hours(1));
        let out = d.sensor_event(sim_epoch() + Duration::hours(2), SensorEvent::Tilt(TiltState::Overturned));
        let ev = events(&out);
        assert_eq!(ev.len(), 1);
        assert_eq!(ev[0].tilt, TiltState::Overturned);
        let later = run(&mut d, sim_epoch() + Duration::days(2));
        assert!(later.is_empty());
    }

    #[test]
    fn battery_death_is_fault() {
        let power = PowerProfile {
            capacity_mah: 5.0,
            ..PowerProfile::default()
        };
        let scene = generate_scene(&GeneratorParams::with_seed(3), 0, 0).unwrap();
        let mut d = DeviceSim::new("SN", Box::new(scene), sim_epoch()).with_power(power);
        d.apply_provisioning(sim_epoch(), DeviceConfig::example_wifi("w")).unwrap();
        d.start(sim_epoch()).unwrap();
        let out = run(&mut d, sim_epoch() + Duration::days(1));
        assert!(out.is_empty());
        assert_eq!(d.phase(), Phase::Fault);
        assert_eq!(d.battery_mah(), 0.0);
        assert_eq!(d.next_due(), None);
    }

    #[test]
    fn log_line_format() {
        let d = device(DeviceConfig::example_wifi("trap-7"), 0);
        let line = d.log().last().unwrap().to_string();
        assert_eq!(line, "2023-03-01T00:00:00.000Z trap-7 operating operating schedule anchored");
    }
}
