//! Bridges LoRaWAN uplinks to the platform: decodes LPP frames into
//! telemetry and RPC answers, quarantines what cannot be decoded.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::device::{RpcKind, RpcOutcome, RpcResponse};
use crate::lpp::{decode_lpp, ChannelMap, GeoPoint, LinkKind, LppTelemetry, TelemetryEvent, TelemetryReading};
use crate::time::Timestamp;

use super::lorawan::NetworkServer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuarantineRecord {
    pub hash: String,
    pub device_id: String,
    pub received_at: Timestamp,
    pub payload_hex: String,
    pub reason: String,
}

pub fn frame_hash(payload: &[u8]) -> String {
    hex::encode(Sha256::digest(payload))
}

/// What the middleware hands to the platform for one uplink.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Forwarded {
    pub event: Option<TelemetryEvent>,
    pub rpc: Option<RpcResponse>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Rejection {
    Unjoined,
    Quarantined(String),
}

#[derive(Debug, Default)]
pub struct Middleware {
    pub map: ChannelMap,
    quarantine: BTreeMap<String, QuarantineRecord>,
}

impl Middleware {
    pub fn new(map: ChannelMap) -> Self {
        Self {
            map,
            quarantine: BTreeMap::new(),
        }
    }

    pub fn quarantined(&self, hash: &str) -> Option<&QuarantineRecord> {
        self.quarantine.get(hash)
    }

    pub fn quarantine_records(&self) -> impl Iterator<Item = &QuarantineRecord> {
        self.quarantine.values()
    }

    pub(crate) fn hold(&mut self, device_id: &str, received_at: Timestamp, payload: &[u8], reason: String) -> Rejection {
        let hash = frame_hash(payload);
        log::warn!("quarantined frame {hash} from {device_id}: {reason}");
        self.quarantine.insert(
            hash.clone(),
            QuarantineRecord {
                hash: hash.clone(),
                device_id: device_id.to_string(),
                received_at,
                payload_hex: hex::encode_upper(payload),
                reason,
            },
        );
        Rejection::Quarantined(hash)
    }

    /// Normalizes one uplink. Event and reading timestamps are the gateway
    /// receipt time, since LPP frames carry no clock.
    pub fn forward(
        &mut self,
        ns: &mut NetworkServer,
        device_id: &str,
        payload: &[u8],
        received_at: Timestamp,
        rssi_dbm: f64,
    ) -> Result<Forwarded, Rejection> {
        if !ns.is_joined(device_id) {
            ns.security_event(received_at, device_id, "frame from device without a session");
            return Err(Rejection::Unjoined);
        }
        let t = match decode_lpp(payload, &self.map) {
            Ok(t) => t,
            Err(e) => return Err(self.hold(device_id, received_at, payload, e.to_string())),
        };
        if !t.has_status() {
            return Err(self.hold(device_id, received_at, payload, "frame lacks sensor status channels".into()));
        }
        let reading = t.egg_count.map(|egg_count| TelemetryReading {
            ts: received_at,
            egg_count,
            confidences: Vec::new(),
        });
        let mut out = Forwarded::default();
        if let Some(seq) = t.rpc_ack {
            match ns.sent_command(device_id, seq) {
                Some(cmd) => {
                    let outcome = match (cmd.kind, &reading) {
                        (RpcKind::ReadOnDemand, Some(r)) => RpcOutcome::Reading { reading: r.clone() },
                        (RpcKind::ReadOnDemand, None) => RpcOutcome::Rejected {
                            reason: "acknowledged without a reading".into(),
                        },
                        (
                            RpcKind::Reschedule {
                                tx_per_day,
                                reading_period_h,
                            },
                            _,
                        ) => RpcOutcome::Rescheduled {
                            tx_per_day,
                            reading_period_h,
                        },
                    };
                    out.rpc = Some(RpcResponse {
                        device_id: device_id.to_string(),
                        request_id: cmd.request_id.clone(),
                        ts: received_at,
                        outcome,
                    });
                }
                None => log::warn!("{device_id}: acknowledgement for unknown downlink seq {seq}"),
            }
        }
        if let Some(r) = reading {
            out.event = Some(to_event(device_id, &t, r, received_at, rssi_dbm));
        }
        Ok(out)
    }
}

fn to_event(device_id: &str, t: &LppTelemetry, reading: TelemetryReading, ts: Timestamp, rssi: f64) -> TelemetryEvent {
    let (lat, lon, _) = t.gps.expect("status checked");
    TelemetryEvent {
        device_id: device_id.to_string(),
        ts,
        readings: vec![reading],
        temperature_c: t.temperature_c.expect("status checked"),
        humidity_pct: t.humidity_pct.expect("status checked"),
        water_present: t.water_present.expect("status checked"),
        tilt: t.tilt.expect("status checked"),
        lid_open: t.lid_open.expect("status checked"),
        battery_pct: t.battery_pct.expect("status checked"),
        link: LinkKind::Lorawan,
        signal_level: rssi,
        gps: GeoPoint { lat, lon },
        camera: None,
        fw_version: t.fw_version.clone().expect("status checked"),
    }
}
