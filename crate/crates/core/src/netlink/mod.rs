//! Simulated transports between devices and the platform.
//!
//! WiFi devices publish JSON documents to an MQTT-style [`Broker`]. LoRaWAN
//! devices send LPP frames through a Class-A [`NetworkServer`] whose uplinks
//! a [`Middleware`] decodes for the platform. [`Network`] wires both paths to
//! a discrete-event queue.

pub mod broker;
pub mod lorawan;
pub mod middleware;

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device::{DeviceMessage, EmitCause, JoinCredentials, RpcCommand, RpcOutcome, RpcResponse};
use crate::lpp::{decode_json, encode_json, encode_lpp, encode_lpp_ack, ChannelMap, CodecError, LinkKind, TelemetryEvent};
use crate::time::{seconds, Timestamp};

pub use broker::{
    parse_topic, rpc_request_topic, rpc_response_topic, telemetry_topic, topic_matches, Broker, Envelope,
    PublishOutcome, TopicKind,
};
pub use lorawan::{
    decode_downlink, encode_downlink, local_request_id, parse_local_request_id, DownlinkMessage, JoinSession,
    JoinState, NetworkServer, QueuedDownlink, RxWindow, SecurityEntry, UplinkReceipt, AIRTIME_S,
};
pub use middleware::{frame_hash, Forwarded, Middleware, QuarantineRecord, Rejection};

/// Broker client id used by the platform.
pub const PLATFORM_CLIENT: &str = "platform";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("payload of {len} bytes exceeds the {max}-byte limit")]
    PayloadTooLarge { len: usize, max: usize },
    #[error("payload of {len} bytes is below the {min}-byte minimum")]
    PayloadTooSmall { len: usize, min: usize },
    #[error("device {0} has no joined session")]
    NotJoined(String),
    #[error("client {0} is not connected")]
    NotConnected(String),
    #[error("no subscriber for topic {0}")]
    NoSubscriber(String),
    #[error("join rejected for {0}: bad credentials")]
    BadCredentials(String),
    #[error("join rejected for {device_id}: dev_nonce {nonce} already used")]
    ReplayedNonce { device_id: String, nonce: u16 },
    #[error("duty-cycle limit: {device_id} may transmit again at {retry_at}")]
    DutyCycle { device_id: String, retry_at: Timestamp },
    #[error("unknown downlink opcode 0x{0:02X}")]
    UnknownOpcode(u8),
    #[error("malformed downlink: {0}")]
    MalformedDownlink(String),
    #[error("device {0} is not known to the network")]
    UnknownDevice(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// Transport characteristics of one link type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkProfile {
    pub kind: LinkKind,
    pub latency_ms: f64,
    /// Latency is uniform in `latency_ms ± jitter_ms`.
    pub jitter_ms: f64,
    pub loss_rate: f64,
    pub max_payload_bytes: Option<usize>,
    pub duty_cycle_limit: Option<f64>,
    pub rssi_dbm: f64,
    /// Stands in for TLS on the broker connection.
    pub secure: bool,
}

impl LinkProfile {
    pub fn wifi() -> Self {
        Self {
            kind: LinkKind::WifiMqtt,
            latency_ms: 50.0,
            jitter_ms: 20.0,
            loss_rate: 0.0,
            max_payload_bytes: None,
            duty_cycle_limit: None,
            rssi_dbm: -67.0,
            secure: true,
        }
    }

    /// Backhaul latency from gateway to network server; airtime is separate.
    pub fn lorawan() -> Self {
        Self {
            kind: LinkKind::Lorawan,
            latency_ms: 120.0,
            jitter_ms: 40.0,
            loss_rate: 0.0,
            max_payload_bytes: Some(crate::lpp::LORAWAN_MAX_PAYLOAD),
            duty_cycle_limit: None,
            rssi_dbm: -97.0,
            secure: true,
        }
    }

    pub fn sample_latency_s<R: Rng>(&self, rng: &mut R) -> f64 {
        let jitter = if self.jitter_ms > 0.0 {
            rng.random_range(-self.jitter_ms..=self.jitter_ms)
        } else {
            0.0
        };
        (self.latency_ms + jitter).max(0.0) / 1000.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_s: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 5,
            base_s: 1.0,
        }
    }
}

impl RetryPolicy {
    /// Wait after failed attempt `attempt` (1-based).
    pub fn backoff_s(&self, attempt: u32) -> f64 {
        self.base_s * 2f64.powi(attempt.saturating_sub(1) as i32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceLine {
    pub ts: Timestamp,
    pub kind: &'static str,
    pub device_id: String,
    pub detail: String,
}

impl fmt::Display for TraceLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {}",
            self.ts.to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            self.kind,
            self.device_id,
            self.detail
        )
    }
}

/// Something the network hands to the platform or to a device.
#[derive(Clone, Debug, PartialEq)]
pub enum NetOutput {
    Telemetry { event: TelemetryEvent, receipt: Timestamp },
    RpcResponse { response: RpcResponse, receipt: Timestamp },
    /// A platform command reached the device.
    CommandDelivered { device_id: String, request_id: String },
    /// The command as the device sees it.
    Command { device_id: String, cmd: RpcCommand },
    DeliveryFailed { device_id: String, request_id: Option<String>, detail: String },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Dispatch {
    Sent,
    Queued(QueuedDownlink),
    Failed,
}

enum Pending {
    LoraTxEnd {
        device_id: String,
        payload: Vec<u8>,
        tx_start: Timestamp,
    },
    Output(NetOutput),
}

pub struct Network {
    pub wifi: LinkProfile,
    pub lora: LinkProfile,
    pub retry: RetryPolicy,
    broker: Broker,
    ns: NetworkServer,
    middleware: Middleware,
    rng: ChaCha8Rng,
    queue: BTreeMap<(Timestamp, u64), Pending>,
    seq: u64,
    radio_free: HashMap<String, Timestamp>,
    trace: Vec<TraceLine>,
    rejected: Vec<(Timestamp, String, NetError)>,
}

impl fmt::Debug for Network {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Network")
            .field("queued", &self.queue.len())
            .field("trace", &self.trace.len())
            .finish()
    }
}

impl Network {
    pub fn new(seed: u64) -> Self {
        Self::with_profiles(seed, LinkProfile::wifi(), LinkProfile::lorawan(), RetryPolicy::default())
    }

    pub fn with_profiles(seed: u64, wifi: LinkProfile, lora: LinkProfile, retry: RetryPolicy) -> Self {
        let mut broker = Broker::new();
        broker.connect(PLATFORM_CLIENT);
        for filter in ["v1/devices/+/telemetry", "v1/devices/+/rpc/response"] {
            broker.subscribe(PLATFORM_CLIENT, filter).expect("platform is connected");
        }
        Self {
            wifi,
            lora,
            retry,
            broker,
            ns: NetworkServer::new(),
            middleware: Middleware::new(ChannelMap::default()),
            rng: ChaCha8Rng::seed_from_u64(seed),
            queue: BTreeMap::new(),
            seq: 0,
            radio_free: HashMap::new(),
            trace: Vec::new(),
            rejected: Vec::new(),
        }
    }

    pub fn broker(&self) -> &Broker {
        &self.broker
    }

    pub fn network_server(&self) -> &NetworkServer {
        &self.ns
    }

    pub fn middleware(&self) -> &Middleware {
        &self.middleware
    }

    pub fn trace(&self) -> &[TraceLine] {
        &self.trace
    }

    /// Uplinks refused by the network server after transmission.
    pub fn rejected(&self) -> &[(Timestamp, String, NetError)] {
        &self.rejected
    }

    fn note(&mut self, ts: Timestamp, kind: &'static str, device_id: &str, detail: impl Into<String>) {
        self.trace.push(TraceLine {
            ts,
            kind,
            device_id: device_id.to_string(),
            detail: detail.into(),
        });
    }

    fn push(&mut self, at: Timestamp, p: Pending) {
        self.seq += 1;
        self.queue.insert((at, self.seq), p);
    }

    /// Connects a WiFi device to the broker and subscribes it to its commands.
    pub fn connect_wifi(&mut self, device_id: &str) {
        self.broker.connect(device_id);
        self.broker
            .subscribe(device_id, &rpc_request_topic(device_id))
            .expect("just connected");
    }

    pub fn disconnect_wifi(&mut self, device_id: &str) {
        self.broker.disconnect(device_id);
    }

    /// Makes a LoRaWAN device known to the network server.
    pub fn register_lora(&mut self, device_id: &str, creds: JoinCredentials) {
        self.ns.register(device_id, creds);
    }

    pub fn join(
        &mut self,
        now: Timestamp,
        device_id: &str,
        creds: &JoinCredentials,
        dev_nonce: u16,
    ) -> Result<JoinSession, NetError> {
        let r = self.ns.otaa_join(now, device_id, creds, dev_nonce, &mut self.rng);
        match &r {
            Ok(s) => self.note(now, "join", device_id, format!("dev_addr={:08X} dev_nonce={dev_nonce}", s.dev_addr)),
            Err(e) => self.note(now, "join_rejected", device_id, e.to_string()),
        }
        r
    }

    pub fn next_due(&self) -> Option<Timestamp> {
        let q = self.queue.keys().next().map(|k| k.0);
        match (q, self.broker.next_due()) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    /// Sends what a device emitted at `now` over its link.
    pub fn device_uplink(
        &mut self,
        now: Timestamp,
        device_id: &str,
        link: LinkKind,
        msgs: &[DeviceMessage],
    ) -> Vec<NetError> {
        match link {
            LinkKind::WifiMqtt => self.wifi_uplink(now, device_id, msgs),
            LinkKind::Lorawan => self.lora_uplink(now, device_id, msgs),
        }
    }

    fn publish(&mut self, now: Timestamp, client: &str, device_id: &str, topic: &str, payload: String, request_id: Option<String>) -> Result<Dispatch, NetError> {
        let profile = self.wifi.clone();
        let out = self
            .broker
            .publish(now, client, topic, payload, &profile, &self.retry, &mut self.rng)?;
        match out {
            PublishOutcome::Accepted { message_id, copies } => {
                self.note(now, "publish", device_id, format!("{topic} msg={message_id} copies={copies}"));
                Ok(Dispatch::Sent)
            }
            PublishOutcome::Failed { message_id, attempts } => {
                let detail = format!("{topic} msg={message_id} lost after {attempts} attempts");
                self.note(now, "publish_failed", device_id, detail.clone());
                self.push(
                    now,
                    Pending::Output(NetOutput::DeliveryFailed {
                        device_id: device_id.to_string(),
                        request_id,
                        detail,
                    }),
                );
                Ok(Dispatch::Failed)
            }
        }
    }

    fn wifi_uplink(&mut self, now: Timestamp, device_id: &str, msgs: &[DeviceMessage]) -> Vec<NetError> {
        let mut errors = Vec::new();
        for m in msgs {
            let r = match m {
                DeviceMessage::Telemetry { event, .. } => encode_json(event)
                    .map_err(NetError::from)
                    .and_then(|doc| self.publish(now, device_id, device_id, &telemetry_topic(device_id), doc, None)),
                DeviceMessage::Rpc { response, .. } => {
                    let doc = serde_json::to_string(response).expect("response serializes");
                    let id = Some(response.request_id.clone());
                    self.publish(now, device_id, device_id, &rpc_response_topic(device_id), doc, id)
                }
                DeviceMessage::Assay(_) => continue,
            };
            if let Err(e) = r {
                self.note(now, "uplink_error", device_id, e.to_string());
                errors.push(e);
            }
        }
        errors
    }

    fn lora_frames(&self, device_id: &str, msgs: &[DeviceMessage]) -> (Vec<Vec<u8>>, Vec<NetError>) {
        let map = &self.middleware.map;
        let mut frames = Vec::new();
        let mut errors = Vec::new();
        let mut acks: HashMap<&str, u8> = HashMap::new();
        for m in msgs {
            let frame = match m {
                DeviceMessage::Rpc { response, status } => {
                    let Some(seq) = parse_local_request_id(&response.request_id) else {
                        log::warn!("{device_id}: response {} has no downlink seq", response.request_id);
                        continue;
                    };
                    match &response.outcome {
                        RpcOutcome::Reading { .. } => {
                            acks.insert(response.request_id.as_str(), seq);
                            continue;
                        }
                        RpcOutcome::Rejected { reason } => {
                            log::warn!("{device_id}: rejected command not acknowledged over LoRaWAN: {reason}");
                            continue;
                        }
                        RpcOutcome::Rescheduled { .. } => encode_lpp_ack(status, map, seq),
                    }
                }
                DeviceMessage::Telemetry { event, cause } => match cause {
                    EmitCause::OnDemand(id) if acks.contains_key(id.as_str()) => encode_lpp_ack(event, map, acks[id.as_str()]),
                    _ => encode_lpp(event, map),
                },
                DeviceMessage::Assay(_) => continue,
            };
            match frame {
                Ok(f) => frames.push(f.bytes().to_vec()),
                Err(e) => errors.push(NetError::Codec(e)),
            }
        }
        (frames, errors)
    }

    fn lora_uplink(&mut self, now: Timestamp, device_id: &str, msgs: &[DeviceMessage]) -> Vec<NetError> {
        let (frames, errors) = self.lora_frames(device_id, msgs);
        for payload in frames {
            let mut start = now.max(self.radio_free.get(device_id).copied().unwrap_or(now));
            if let Some(t) = self.ns.earliest_tx(device_id, &self.lora) {
                start = start.max(t);
            }
            let end = start + seconds(AIRTIME_S);
            self.radio_free.insert(device_id.to_string(), end);
            self.note(start, "lora_tx", device_id, format!("{} bytes {}", payload.len(), hex::encode_upper(&payload)));
            self.push(
                end,
                Pending::LoraTxEnd {
                    device_id: device_id.to_string(),
                    payload,
                    tx_start: start,
                },
            );
        }
        for e in &errors {
            self.note(now, "uplink_error", device_id, e.to_string());
        }
        errors
    }

    /// Injects a raw frame as if a gateway had received it, bypassing the
    /// device radio model.
    pub fn inject_lora_frame(&mut self, now: Timestamp, device_id: &str, payload: Vec<u8>) {
        self.push(
            now + seconds(AIRTIME_S),
            Pending::LoraTxEnd {
                device_id: device_id.to_string(),
                payload,
                tx_start: now,
            },
        );
    }

    /// Hands a platform command to the device's link.
    pub fn send_rpc(&mut self, now: Timestamp, device_id: &str, link: LinkKind, cmd: RpcCommand) -> Result<Dispatch, NetError> {
        match link {
            LinkKind::WifiMqtt => {
                let doc = serde_json::to_string(&cmd).expect("command serializes");
                let id = Some(cmd.request_id.clone());
                self.publish(now, PLATFORM_CLIENT, device_id, &rpc_request_topic(device_id), doc, id)
            }
            LinkKind::Lorawan => {
                let q = self.ns.schedule_downlink(now, device_id, cmd.clone())?;
                self.note(now, "downlink_queued", device_id, format!("{} seq={}", cmd.request_id, q.seq));
                if let Some(old) = &q.superseded {
                    self.note(now, "downlink_superseded", device_id, old.clone());
                }
                Ok(Dispatch::Queued(q))
            }
        }
    }

    /// Processes everything due at or before `now`, returning outputs in time order.
    pub fn poll(&mut self, now: Timestamp) -> Vec<(Timestamp, NetOutput)> {
        let mut out = Vec::new();
        while let Some(t) = self.next_due().filter(|t| *t <= now) {
            let from_queue = self.queue.keys().next().is_some_and(|k| k.0 == t);
            if from_queue {
                let (_, p) = self.queue.pop_first().expect("non-empty");
                match p {
                    Pending::Output(o) => out.push((t, o)),
                    Pending::LoraTxEnd {
                        device_id,
                        payload,
                        tx_start,
                    } => self.lora_received(tx_start, &device_id, &payload),
                }
            } else {
                for env in self.broker.poll(t) {
                    if let Some(o) = self.envelope(env) {
                        out.push((t, o));
                    }
                }
            }
        }
        out
    }

    fn envelope(&mut self, env: Envelope) -> Option<NetOutput> {
        let (device_id, kind) = parse_topic(&env.topic)?;
        let device_id = device_id.to_string();
        self.note(env.delivered_at, "deliver", &device_id, format!("{} -> {} attempt={}", env.topic, env.subscriber, env.attempt));
        match kind {
            TopicKind::Telemetry => match decode_json(&env.payload) {
                Ok(event) => Some(NetOutput::Telemetry {
                    event,
                    receipt: env.delivered_at,
                }),
                Err(e) => {
                    self.middleware
                        .hold(&device_id, env.delivered_at, env.payload.as_bytes(), e.to_string());
                    None
                }
            },
            TopicKind::RpcResponse => match serde_json::from_str::<RpcResponse>(&env.payload) {
                Ok(response) => Some(NetOutput::RpcResponse {
                    response,
                    receipt: env.delivered_at,
                }),
                Err(e) => {
                    self.middleware
                        .hold(&device_id, env.delivered_at, env.payload.as_bytes(), e.to_string());
                    None
                }
            },
            TopicKind::RpcRequest => match serde_json::from_str::<RpcCommand>(&env.payload) {
                Ok(cmd) => {
                    self.push(
                        env.delivered_at,
                        Pending::Output(NetOutput::CommandDelivered {
                            device_id: device_id.clone(),
                            request_id: cmd.request_id.clone(),
                        }),
                    );
                    Some(NetOutput::Command { device_id, cmd })
                }
                Err(e) => {
                    log::warn!("{device_id}: undecodable command: {e}");
                    None
                }
            },
        }
    }

    fn lora_received(&mut self, tx_start: Timestamp, device_id: &str, payload: &[u8]) {
        let receipt = match self.ns.uplink(tx_start, device_id, payload, &self.lora, &mut self.rng) {
            Ok(r) => r,
            Err(e) => {
                self.note(tx_start, "uplink_rejected", device_id, e.to_string());
                self.rejected.push((tx_start, device_id.to_string(), e));
                return;
            }
        };
        self.note(
            receipt.received_at,
            "lora_rx",
            device_id,
            format!("fcnt={} {} bytes", receipt.fcnt, payload.len()),
        );
        if let Some(dl) = &receipt.downlink {
            self.note(dl.delivered_at, "downlink_sent", device_id, format!("{} seq={} rx1", dl.request_id, dl.seq));
            match decode_downlink(&dl.payload) {
                Ok((seq, kind)) => {
                    self.push(
                        dl.delivered_at,
                        Pending::Output(NetOutput::CommandDelivered {
                            device_id: device_id.to_string(),
                            request_id: dl.request_id.clone(),
                        }),
                    );
                    self.push(
                        dl.delivered_at,
                        Pending::Output(NetOutput::Command {
                            device_id: device_id.to_string(),
                            cmd: RpcCommand {
                                request_id: local_request_id(seq),
                                kind,
                                issued_at: dl.delivered_at,
                            },
                        }),
                    );
                }
                Err(e) => log::warn!("{device_id}: undecodable downlink: {e}"),
            }
        }
        match self
            .middleware
            .forward(&mut self.ns, device_id, payload, receipt.received_at, receipt.rssi_dbm)
        {
            Ok(fwd) => {
                if let Some(response) = fwd.rpc {
                    self.push(
                        receipt.received_at,
                        Pending::Output(NetOutput::RpcResponse {
                            response,
                            receipt: receipt.received_at,
                        }),
                    );
                }
                if let Some(event) = fwd.event {
                    self.push(
                        receipt.received_at,
                        Pending::Output(NetOutput::Telemetry {
                            event,
                            receipt: receipt.received_at,
                        }),
                    );
                }
            }
            Err(r) => self.note(receipt.received_at, "middleware_rejected", device_id, format!("{r:?}")),
        }
    }
}
