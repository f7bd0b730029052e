use std::collections::{BTreeMap, HashMap};

use chrono::Duration;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::ReadingResult;
use crate::device::{
    AssayResult, Connectivity, DeviceConfig, DeviceError, DeviceMessage, DeviceSim, Phase, RpcKind, SceneSource,
    SensorState, FIRMWARE_VERSION,
};
use crate::lpp::{LinkKind, TelemetryReading};
use crate::netlink::{Dispatch, NetError, NetOutput, Network};
use crate::platform::{Platform, PlatformError, RpcRecord, RpcStatus, WebhookCall};
use crate::synthgen::GeneratorParams;
use crate::time::{seconds, Clock, Timestamp, VirtualClock};

use super::{Scenario, ScriptedAction, ScriptedScenes};

/// How long after a test reading completes the control channel waits for
/// the platform to confirm ingestion.
const ASSAY_SETTLE_S: f64 = 30.0;
const TRACE_TAIL: usize = 20;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invariant violated at {at}: {detail}\n{}", trace.join("\n"))]
    Invariant {
        at: Timestamp,
        detail: String,
        trace: Vec<String>,
    },
    #[error("unknown device {0}")]
    UnknownDevice(String),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Platform(#[from] PlatformError),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Requests on the local control channel between the installer's tool and a
/// device.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum ControlRequest {
    Hello,
    WriteConfig { config: Box<DeviceConfig> },
    Start,
    TestReading,
    Status,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ControlResponse {
    Hello {
        serial: String,
        device_id: Option<String>,
        phase: Phase,
        fw_version: String,
    },
    ConfigAck {
        device_id: String,
        changed: bool,
    },
    Started {
        device_id: String,
        at: Timestamp,
    },
    Assay {
        assay_id: u32,
        egg_count: u32,
        ts: Timestamp,
        lid_open: bool,
        confidences: Vec<f32>,
    },
    Status {
        device_id: Option<String>,
        phase: Phase,
        battery_pct: f64,
        readings_done: u64,
        pending_readings: usize,
        last_reading: Option<(Timestamp, u32)>,
        sensors: SensorState,
    },
    Error {
        code: String,
        message: String,
    },
}

impl ControlResponse {
    fn error(code: &str, message: impl Into<String>) -> Self {
        Self::Error {
            code: code.into(),
            message: message.into(),
        }
    }
}

enum Action {
    Scripted { serial: String, action: ScriptedAction },
}

/// The discrete-event loop: devices, network and platform share one
/// virtual clock and are stepped in timestamp order.
pub struct Simulation {
    clock: VirtualClock,
    devices: BTreeMap<String, DeviceSim>,
    by_id: HashMap<String, String>,
    network: Network,
    platform: Platform,
    script: BTreeMap<(Timestamp, u64), Action>,
    script_seq: u64,
    assays: Vec<(String, AssayResult)>,
    emitted: Vec<(String, TelemetryReading)>,
    webhooks: Vec<WebhookCall>,
    trace: Vec<String>,
}

impl Simulation {
    pub fn new(start: Timestamp, network: Network) -> Self {
        Self {
            clock: VirtualClock::new(start),
            devices: BTreeMap::new(),
            by_id: HashMap::new(),
            network,
            platform: Platform::new(),
            script: BTreeMap::new(),
            script_seq: 0,
            assays: Vec::new(),
            emitted: Vec::new(),
            webhooks: Vec::new(),
            trace: Vec::new(),
        }
    }

    /// Builds the fleet from a scenario: every device is provisioned,
    /// registered, attached to its link and started at the scenario start.
    pub fn from_scenario(scn: &Scenario, seed: u64) -> Result<Self, SimError> {
        let net = &scn.network;
        let mut network = Network::new(seed);
        if let Some(w) = &net.wifi {
            network.wifi = w.clone();
        }
        if let Some(l) = &net.lorawan {
            network.lora = l.clone();
        }
        if let Some(r) = net.retry {
            network.retry = r;
        }
        let mut sim = Self::new(scn.start, network);
        let base = scn.generator.clone().unwrap_or_default();
        for (i, d) in scn.devices.iter().enumerate() {
            let params = GeneratorParams {
                seed: seed.wrapping_mul(1_000_003).wrapping_add((i as u64) << 32),
                ..base.clone()
            };
            let mut scenes = ScriptedScenes::new(params, d.distractors, d.config.device_id.clone());
            for (day, count) in d.counts.iter().enumerate() {
                scenes.set(scn.day_start(day as u32 + 1), *count);
            }
            for e in scn.events.iter().filter(|e| e.device == d.config.device_id) {
                if let ScriptedAction::Scene { count } = e.action {
                    scenes.set(scn.event_time(e), count);
                }
            }
            let mut drops: HashMap<i64, usize> = HashMap::new();
            for o in scn.overrides.iter().filter(|o| o.device == d.config.device_id) {
                *drops.entry(o.day as i64 - 1).or_default() += o.drop;
            }
            let start = scn.start;
            let mut dev = DeviceSim::new(d.serial.clone(), Box::new(scenes), scn.start);
            if !drops.is_empty() {
                dev = dev.with_hook(Box::new(move |r: &mut ReadingResult| {
                    let day = (r.timestamp - start).num_days();
                    if let Some(n) = drops.get(&day) {
                        r.drop_weakest(*n);
                    }
                }));
            }
            sim.add_device(dev);
            sim.bring_up(&d.serial, d.config.clone())?;
        }
        for e in &scn.events {
            if matches!(e.action, ScriptedAction::Scene { .. }) {
                continue;
            }
            let serial = sim.serial_of(&e.device)?.to_string();
            sim.schedule(scn.event_time(e), serial, e.action.clone());
        }
        Ok(sim)
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    pub fn clock(&self) -> &VirtualClock {
        &self.clock
    }

    pub fn platform(&self) -> &Platform {
        &self.platform
    }

    pub fn platform_mut(&mut self) -> &mut Platform {
        &mut self.platform
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn device(&self, serial: &str) -> Option<&DeviceSim> {
        self.devices.get(serial)
    }

    pub fn device_by_id(&self, device_id: &str) -> Option<&DeviceSim> {
        self.by_id.get(device_id).and_then(|s| self.devices.get(s))
    }

    pub fn devices(&self) -> impl Iterator<Item = &DeviceSim> {
        self.devices.values()
    }

    pub fn assays(&self) -> &[(String, AssayResult)] {
        &self.assays
    }

    /// Every reading a device put on the air, in emission order.
    pub fn emitted(&self) -> &[(String, TelemetryReading)] {
        &self.emitted
    }

    pub fn webhooks(&self) -> &[WebhookCall] {
        &self.webhooks
    }

    pub fn trace(&self) -> &[String] {
        &self.trace
    }

    fn serial_of(&self, device_id: &str) -> Result<&str, SimError> {
        self.by_id
            .get(device_id)
            .map(String::as_str)
            .ok_or_else(|| SimError::UnknownDevice(device_id.into()))
    }

    fn note(&mut self, t: Timestamp, what: impl AsRef<str>) {
        let line = format!("{} {}", t.to_rfc3339_opts(chrono::SecondsFormat::Millis, true), what.as_ref());
        log::debug!("{line}");
        self.trace.push(line);
    }

    /// Adds an unprovisioned device.
    pub fn add_device(&mut self, dev: DeviceSim) {
        let serial = dev.serial().to_string();
        if let Some(cfg) = dev.config() {
            self.by_id.insert(cfg.device_id.clone(), serial.clone());
        }
        self.devices.insert(serial, dev);
    }

    /// Convenience for tests and the server: a device over a scripted scene.
    pub fn add_scripted_device(&mut self, serial: &str, scenes: ScriptedScenes) {
        let dev = DeviceSim::new(serial, Box::new(scenes) as Box<dyn SceneSource>, self.now());
        self.add_device(dev);
    }

    pub fn schedule(&mut self, at: Timestamp, serial: String, action: ScriptedAction) {
        self.script_seq += 1;
        self.script.insert((at, self.script_seq), Action::Scripted { serial, action });
    }

    /// Provisions, registers, attaches and starts a device in one go.
    pub fn bring_up(&mut self, serial: &str, cfg: DeviceConfig) -> Result<(), SimError> {
        self.write_config(serial, cfg.clone())?;
        self.platform.register(&cfg, self.now())?;
        self.start_device(serial)?;
        Ok(())
    }

    fn write_config(&mut self, serial: &str, cfg: DeviceConfig) -> Result<bool, SimError> {
        let now = self.now();
        let dev = self
            .devices
            .get_mut(serial)
            .ok_or_else(|| SimError::UnknownDevice(serial.into()))?;
        let before = dev.config().cloned();
        let out = dev.apply_provisioning(now, cfg.clone())?;
        let changed = before.as_ref() != Some(&cfg);
        if let Some(old) = before.filter(|o| o.device_id != cfg.device_id) {
            self.by_id.remove(&old.device_id);
        }
        self.by_id.insert(cfg.device_id.clone(), serial.to_string());
        self.route(now, serial, out);
        if changed {
            self.attach(serial)?;
        }
        Ok(changed)
    }

    /// Connects the device to its link: broker session or OTAA join.
    fn attach(&mut self, serial: &str) -> Result<(), SimError> {
        let now = self.now();
        let dev = self.devices.get_mut(serial).expect("caller checked");
        let cfg = dev.config().cloned().ok_or(DeviceError::NotProvisioned)?;
        match &cfg.connectivity {
            Connectivity::WifiMqtt { network, .. } => {
                self.network.connect_wifi(&cfg.device_id);
                dev.attach_session(format!("mqtt:{network}"));
            }
            Connectivity::Lorawan(creds) => {
                self.network.register_lora(&cfg.device_id, creds.clone());
                let nonce = dev.next_dev_nonce();
                let s = self.network.join(now, &cfg.device_id, creds, nonce)?;
                dev.attach_session(format!("lora:{:08X}", s.dev_addr));
            }
        }
        self.note(now, format!("{} attached {}", cfg.device_id, cfg.link().as_str()));
        Ok(())
    }

    fn start_device(&mut self, serial: &str) -> Result<Timestamp, SimError> {
        let now = self.now();
        let dev = self
            .devices
            .get_mut(serial)
            .ok_or_else(|| SimError::UnknownDevice(serial.into()))?;
        let out = dev.start(now)?;
        self.route(now, serial, out);
        Ok(now)
    }

    /// Hands device output to the network.
    fn route(&mut self, now: Timestamp, serial: &str, msgs: Vec<DeviceMessage>) {
        if msgs.is_empty() {
            return;
        }
        let Some(dev) = self.devices.get(serial) else { return };
        let Some(link) = dev.link() else { return };
        let id = dev.device_id().to_string();
        for m in &msgs {
            match m {
                DeviceMessage::Telemetry { event, cause } => {
                    self.emitted
                        .extend(event.readings.iter().map(|r| (id.clone(), r.clone())));
                    self.note(now, format!("{id} emit {cause:?} readings={}", event.readings.len()));
                }
                DeviceMessage::Rpc { response, .. } => {
                    self.note(now, format!("{id} answer {}", response.request_id));
                }
                DeviceMessage::Assay(a) => {
                    self.note(now, format!("{id} assay {} eggs={}", a.assay_id, a.egg_count));
                    self.assays.push((serial.to_string(), a.clone()));
                }
            }
        }
        for e in self.network.device_uplink(now, &id, link, &msgs) {
            self.note(now, format!("{id} uplink error: {e}"));
        }
    }

    /// Issues a platform command and hands it to the device's link.
    pub fn dispatch_rpc(&mut self, device_id: &str, kind: RpcKind) -> Result<RpcRecord, SimError> {
        let now = self.now();
        let record = self.platform.dispatch_rpc(now, device_id, kind)?;
        let link = self.platform.device(device_id).map(|d| d.info.link).expect("registered");
        self.note(now, format!("{device_id} rpc {} issued", record.request_id));
        match self.network.send_rpc(now, device_id, link, record.command()) {
            Ok(Dispatch::Queued(q)) => {
                if let Some(old) = q.superseded {
                    let _ = self.platform.close_rpc(&old, RpcStatus::Superseded, now, "replaced by a newer downlink");
                }
            }
            Ok(_) => {}
            Err(e) => {
                self.platform
                    .close_rpc(&record.request_id, RpcStatus::Timeout, now, &e.to_string())?;
            }
        }
        Ok(self.platform.rpc(&record.request_id).cloned().expect("just stored"))
    }

    fn next_due(&self) -> Option<Timestamp> {
        let dev = self.devices.values().filter_map(DeviceSim::next_due).min();
        let script = self.script.keys().next().map(|k| k.0);
        [dev, script, self.network.next_due(), self.platform.next_due()]
            .into_iter()
            .flatten()
            .min()
    }

    /// Runs every event up to and including `until`.
    pub fn run_until(&mut self, until: Timestamp) -> Result<(), SimError> {
        while let Some(t) = self.next_due().filter(|t| *t <= until) {
            self.step(t)?;
        }
        if until > self.now() {
            self.clock.advance_to(until);
            let serials: Vec<String> = self.devices.keys().cloned().collect();
            for s in serials {
                let out = self.devices.get_mut(&s).expect("listed").advance(until);
                self.route(until, &s, out);
            }
        }
        Ok(())
    }

    pub fn run_for(&mut self, d: Duration) -> Result<(), SimError> {
        self.run_until(self.now() + d)
    }

    fn step(&mut self, t: Timestamp) -> Result<(), SimError> {
        self.clock.advance_to(t);
        while let Some(entry) = self.script.first_entry().filter(|e| e.key().0 <= t) {
            let Action::Scripted { serial, action } = entry.remove();
            self.apply_scripted(t, &serial, action)?;
        }
        let due: Vec<String> = self
            .devices
            .iter()
            .filter(|(_, d)| d.next_due().is_some_and(|n| n <= t))
            .map(|(s, _)| s.clone())
            .collect();
        for s in due {
            let out = self.devices.get_mut(&s).expect("listed").advance(t);
            self.route(t, &s, out);
        }
        for (at, o) in self.network.poll(t) {
            self.handle(at, o);
        }
        for id in self.platform.expire(t) {
            self.note(t, format!("rpc {id} timed out"));
        }
        self.webhooks.extend(self.platform.drain_webhooks());
        self.check_invariants(t)
    }

    fn apply_scripted(&mut self, t: Timestamp, serial: &str, action: ScriptedAction) -> Result<(), SimError> {
        self.note(t, format!("script {serial} {action:?}"));
        if let ScriptedAction::Rpc { command } = action {
            let id = self.devices[serial].device_id().to_string();
            if let Err(e) = self.dispatch_rpc(&id, command) {
                self.note(t, format!("scripted rpc to {id} refused: {e}"));
            }
            return Ok(());
        }
        let dev = self
            .devices
            .get_mut(serial)
            .ok_or_else(|| SimError::UnknownDevice(serial.into()))?;
        let out = match (action.sensor_event(), action) {
            (Some(ev), _) => dev.sensor_event(t, ev),
            (None, ScriptedAction::Reboot) => {
                let out = dev.reboot(t);
                if dev.phase() != Phase::Unprovisioned {
                    self.route(t, serial, out);
                    self.attach(serial)?;
                    return Ok(());
                }
                out
            }
            _ => Vec::new(),
        };
        self.route(t, serial, out);
        Ok(())
    }

    fn handle(&mut self, t: Timestamp, o: NetOutput) {
        match o {
            NetOutput::Telemetry { event, receipt } => match self.platform.ingest(&event, receipt) {
                Ok(r) => self.note(t, format!("{} ingest {r:?}", event.device_id)),
                Err(e) => self.note(t, format!("{} ingest refused: {e}", event.device_id)),
            },
            NetOutput::RpcResponse { response, receipt } => {
                if let Err(e) = self.platform.record_response(&response, receipt) {
                    self.note(t, format!("{} response refused: {e}", response.device_id));
                }
            }
            NetOutput::CommandDelivered { request_id, .. } => {
                let _ = self.platform.mark_delivered(&request_id, t);
            }
            NetOutput::Command { device_id, cmd } => {
                let Some(serial) = self.by_id.get(&device_id).cloned() else { return };
                let dev = self.devices.get_mut(&serial).expect("indexed");
                match dev.handle_rpc(t, &cmd) {
                    Ok(out) => self.route(t, &serial, out),
                    Err(e) => self.note(t, format!("{device_id} refused {}: {e}", cmd.request_id)),
                }
            }
            NetOutput::DeliveryFailed {
                device_id,
                request_id,
                detail,
            } => {
                self.note(t, format!("{device_id} delivery failed: {detail}"));
                if let Some(id) = request_id {
                    let _ = self.platform.close_rpc(&id, RpcStatus::Timeout, t, &detail);
                }
            }
        }
    }

    fn check_invariants(&self, t: Timestamp) -> Result<(), SimError> {
        for d in self.devices.values() {
            let cap = d.power().capacity_mah;
            let problem = if !(0.0..=cap).contains(&d.battery_mah()) {
                Some(format!("{} battery {} mAh outside [0, {cap}]", d.serial(), d.battery_mah()))
            } else if d.pending_readings().len() > crate::lpp::MAX_READINGS {
                Some(format!("{} buffers {} readings", d.serial(), d.pending_readings().len()))
            } else {
                None
            };
            if let Some(detail) = problem {
                let from = self.trace.len().saturating_sub(TRACE_TAIL);
                return Err(SimError::Invariant {
                    at: t,
                    detail,
                    trace: self.trace[from..].to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Serves one request on a device's local control channel.
    pub fn control(&mut self, serial: &str, req: ControlRequest) -> ControlResponse {
        if !self.devices.contains_key(serial) {
            return ControlResponse::error("unreachable", format!("no device with serial {serial}"));
        }
        match req {
            ControlRequest::Hello => {
                let d = &self.devices[serial];
                ControlResponse::Hello {
                    serial: serial.into(),
                    device_id: d.config().map(|c| c.device_id.clone()),
                    phase: d.phase(),
                    fw_version: FIRMWARE_VERSION.into(),
                }
            }
            ControlRequest::WriteConfig { config } => {
                let id = config.device_id.clone();
                match self.write_config(serial, *config) {
                    Ok(changed) => ControlResponse::ConfigAck { device_id: id, changed },
                    Err(e) => device_error(e),
                }
            }
            ControlRequest::Start => match self.start_device(serial) {
                Ok(at) => ControlResponse::Started {
                    device_id: self.devices[serial].device_id().to_string(),
                    at,
                },
                Err(e) => device_error(e),
            },
            ControlRequest::TestReading => self.test_reading(serial),
            ControlRequest::Status => {
                let d = &self.devices[serial];
                ControlResponse::Status {
                    device_id: d.config().map(|c| c.device_id.clone()),
                    phase: d.phase(),
                    battery_pct: d.battery_pct(),
                    readings_done: d.readings_done(),
                    pending_readings: d.pending_readings().len(),
                    last_reading: d.last_reading().map(|r| (r.timestamp, r.egg_count)),
                    sensors: d.sensors().clone(),
                }
            }
        }
    }

    fn test_reading(&mut self, serial: &str) -> ControlResponse {
        let now = self.now();
        let dev = self.devices.get_mut(serial).expect("checked");
        let latency = crate::detector::reading_latency(&crate::detector::DetectorConfig::default());
        let (id, out) = match dev.test_reading(now) {
            Ok(r) => r,
            Err(e) => return device_error(SimError::Device(e)),
        };
        self.route(now, serial, out);
        if let Err(e) = self.run_until(now + seconds(latency + ASSAY_SETTLE_S)) {
            return ControlResponse::error("fault", e.to_string());
        }
        match self.assays.iter().rev().find(|(s, a)| s == serial && a.assay_id == id) {
            Some((_, a)) => ControlResponse::Assay {
                assay_id: a.assay_id,
                egg_count: a.egg_count,
                ts: a.ts,
                lid_open: a.lid_open,
                confidences: a.reading.confidences(),
            },
            None => ControlResponse::error("timeout", format!("assay {id} did not complete")),
        }
    }

    /// Link of a registered device, if any.
    pub fn link_of(&self, device_id: &str) -> Option<LinkKind> {
        self.device_by_id(device_id).and_then(DeviceSim::link)
    }
}

fn device_error(e: SimError) -> ControlResponse {
    let code = match &e {
        SimError::Device(DeviceError::Config(_)) => "validation",
        SimError::Device(DeviceError::Fault | DeviceError::NotProvisioned | DeviceError::NoWater) => "fault",
        SimError::UnknownDevice(_) => "unreachable",
        _ => "error",
    };
    ControlResponse::error(code, e.to_string())
}
