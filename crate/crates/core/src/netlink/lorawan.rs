//! Class-A LoRaWAN network server: OTAA joins, uplink checks and a
//! one-slot downlink queue per device.

use std::collections::{BTreeMap, BTreeSet};

use chrono::Duration;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::device::{JoinCredentials, RpcCommand, RpcKind};
use crate::lpp::{LORAWAN_MAX_PAYLOAD, LORAWAN_MIN_PAYLOAD};
use crate::time::{seconds, Timestamp};

use super::{LinkProfile, NetError};

pub const UPLINK_PORT: u8 = 1;
pub const DOWNLINK_PORT: u8 = 2;
/// Fixed airtime charged to every uplink.
pub const AIRTIME_S: f64 = 3.0;
pub const RX1_DELAY_S: i64 = 1;
pub const RX2_DELAY_S: i64 = 2;

pub const OP_READ_ON_DEMAND: u8 = 0x01;
pub const OP_RESCHEDULE: u8 = 0x02;

/// Downlink command: `[opcode, seq, operands...]`.
pub fn encode_downlink(kind: &RpcKind, seq: u8) -> Result<Vec<u8>, NetError> {
    match *kind {
        RpcKind::ReadOnDemand => Ok(vec![OP_READ_ON_DEMAND, seq]),
        RpcKind::Reschedule {
            tx_per_day,
            reading_period_h,
        } => {
            let tx = u8::try_from(tx_per_day).map_err(|_| NetError::MalformedDownlink("tx_per_day > 255".into()))?;
            let period = u8::try_from(reading_period_h)
                .map_err(|_| NetError::MalformedDownlink("reading_period_h > 255".into()))?;
            Ok(vec![OP_RESCHEDULE, seq, tx, period])
        }
    }
}

pub fn decode_downlink(bytes: &[u8]) -> Result<(u8, RpcKind), NetError> {
    match bytes {
        [OP_READ_ON_DEMAND, seq] => Ok((*seq, RpcKind::ReadOnDemand)),
        [OP_RESCHEDULE, seq, tx, period] => Ok((
            *seq,
            RpcKind::Reschedule {
                tx_per_day: *tx as u32,
                reading_period_h: *period as u32,
            },
        )),
        [OP_READ_ON_DEMAND | OP_RESCHEDULE, ..] => {
            Err(NetError::MalformedDownlink(format!("bad length {}", bytes.len())))
        }
        [op, ..] => Err(NetError::UnknownOpcode(*op)),
        [] => Err(NetError::MalformedDownlink("empty".into())),
    }
}

/// Request id a device assigns to a command that arrived with sequence `seq`.
pub fn local_request_id(seq: u8) -> String {
    format!("lora:{seq}")
}

pub fn parse_local_request_id(id: &str) -> Option<u8> {
    id.strip_prefix("lora:")?.parse().ok()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JoinState {
    Idle,
    Joining,
    Joined,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinSession {
    pub device_id: String,
    pub dev_addr: u32,
    pub join_nonce: u32,
    pub dev_nonce: u16,
    pub nwk_s_key: String,
    pub app_s_key: String,
    pub state: JoinState,
    pub fcnt_up: u32,
    pub joined_at: Timestamp,
}

fn derive_key(app_key: &str, label: u8, join_nonce: u32, dev_nonce: u16) -> String {
    let mut h = Sha256::new();
    h.update([label]);
    h.update(app_key.as_bytes());
    h.update(join_nonce.to_be_bytes());
    h.update(dev_nonce.to_be_bytes());
    hex::encode_upper(&h.finalize()[..16])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RxWindow {
    Rx1,
    Rx2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DownlinkMessage {
    pub device_id: String,
    pub port: u8,
    pub payload: Vec<u8>,
    pub seq: u8,
    pub request_id: String,
    pub enqueued_at: Timestamp,
    pub delivered_at: Timestamp,
    pub window: RxWindow,
    /// End of the uplink that opened the window.
    pub after_uplink_end: Timestamp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UplinkReceipt {
    pub device_id: String,
    pub fcnt: u32,
    pub tx_start: Timestamp,
    pub tx_end: Timestamp,
    pub received_at: Timestamp,
    pub rssi_dbm: f64,
    pub rx1: Timestamp,
    pub rx2: Timestamp,
    pub downlink: Option<DownlinkMessage>,
}

#[derive(Clone, Debug)]
struct PendingDownlink {
    cmd: RpcCommand,
    seq: u8,
    payload: Vec<u8>,
    enqueued_at: Timestamp,
}

/// Result of queueing a command.
#[derive(Clone, Debug, PartialEq)]
pub struct QueuedDownlink {
    pub seq: u8,
    /// The command this one displaced, if any.
    pub superseded: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SecurityEntry {
    pub ts: Timestamp,
    pub device_id: String,
    pub reason: String,
}

#[derive(Debug, Default)]
pub struct NetworkServer {
    credentials: BTreeMap<String, JoinCredentials>,
    sessions: BTreeMap<String, JoinSession>,
    used_nonces: BTreeMap<String, BTreeSet<u16>>,
    join_counter: u32,
    pending: BTreeMap<String, PendingDownlink>,
    sent: BTreeMap<(String, u8), RpcCommand>,
    next_seq: BTreeMap<String, u8>,
    last_tx_end: BTreeMap<String, Timestamp>,
    uplink_ends: Vec<(String, Timestamp)>,
    downlinks: Vec<DownlinkMessage>,
    security: Vec<SecurityEntry>,
    warnings: Vec<String>,
}

impl NetworkServer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, device_id: &str, creds: JoinCredentials) {
        self.credentials.insert(device_id.to_string(), creds);
    }

    pub fn is_registered(&self, device_id: &str) -> bool {
        self.credentials.contains_key(device_id)
    }

    pub fn session(&self, device_id: &str) -> Option<&JoinSession> {
        self.sessions.get(device_id)
    }

    pub fn is_joined(&self, device_id: &str) -> bool {
        self.sessions
            .get(device_id)
            .is_some_and(|s| s.state == JoinState::Joined)
    }

    pub fn security_log(&self) -> &[SecurityEntry] {
        &self.security
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn downlinks(&self) -> &[DownlinkMessage] {
        &self.downlinks
    }

    /// Ends of every accepted uplink, in acceptance order.
    pub fn uplink_ends(&self) -> &[(String, Timestamp)] {
        &self.uplink_ends
    }

    pub(crate) fn security_event(&mut self, ts: Timestamp, device_id: &str, reason: impl Into<String>) {
        let entry = SecurityEntry {
            ts,
            device_id: device_id.to_string(),
            reason: reason.into(),
        };
        log::warn!("security: {} {} {}", entry.ts, entry.device_id, entry.reason);
        self.security.push(entry);
    }

    /// OTAA join. A rejected join leaves the device without a session.
    pub fn otaa_join<R: Rng>(
        &mut self,
        now: Timestamp,
        device_id: &str,
        creds: &JoinCredentials,
        dev_nonce: u16,
        rng: &mut R,
    ) -> Result<JoinSession, NetError> {
        match self.credentials.get(device_id) {
            Some(known) if known == creds => {}
            _ => {
                self.security_event(now, device_id, "join with bad credentials");
                return Err(NetError::BadCredentials(device_id.to_string()));
            }
        }
        let used = self.used_nonces.entry(device_id.to_string()).or_default();
        if !used.insert(dev_nonce) {
            self.security_event(now, device_id, format!("replayed dev_nonce {dev_nonce}"));
            return Err(NetError::ReplayedNonce {
                device_id: device_id.to_string(),
                nonce: dev_nonce,
            });
        }
        self.join_counter += 1;
        let join_nonce = self.join_counter;
        let session = JoinSession {
            device_id: device_id.to_string(),
            dev_addr: rng.random::<u32>() & 0x01FF_FFFF,
            join_nonce,
            dev_nonce,
            nwk_s_key: derive_key(&creds.app_key, 0x01, join_nonce, dev_nonce),
            app_s_key: derive_key(&creds.app_key, 0x02, join_nonce, dev_nonce),
            state: JoinState::Joined,
            fcnt_up: 0,
            joined_at: now,
        };
        self.sessions.insert(device_id.to_string(), session.clone());
        Ok(session)
    }

    /// Earliest start of the next uplink allowed by the duty-cycle limit.
    pub fn earliest_tx(&self, device_id: &str, profile: &LinkProfile) -> Option<Timestamp> {
        let limit = profile.duty_cycle_limit?;
        let end = *self.last_tx_end.get(device_id)?;
        Some(end + seconds(AIRTIME_S * (1.0 / limit - 1.0)))
    }

    /// Accepts an uplink that started at `tx_start`. If a command is
    /// waiting, it is released in the RX1 window that follows.
    pub fn uplink<R: Rng>(
        &mut self,
        tx_start: Timestamp,
        device_id: &str,
        payload: &[u8],
        profile: &LinkProfile,
        rng: &mut R,
    ) -> Result<UplinkReceipt, NetError> {
        if !self.is_joined(device_id) {
            self.security_event(tx_start, device_id, "uplink without a joined session");
            return Err(NetError::NotJoined(device_id.to_string()));
        }
        let max = profile.max_payload_bytes.unwrap_or(LORAWAN_MAX_PAYLOAD);
        if payload.len() > max {
            return Err(NetError::PayloadTooLarge { len: payload.len(), max });
        }
        if payload.len() < LORAWAN_MIN_PAYLOAD {
            return Err(NetError::PayloadTooSmall {
                len: payload.len(),
                min: LORAWAN_MIN_PAYLOAD,
            });
        }
        if let Some(allowed) = self.earliest_tx(device_id, profile) {
            if tx_start < allowed {
                return Err(NetError::DutyCycle {
                    device_id: device_id.to_string(),
                    retry_at: allowed,
                });
            }
        }
        let tx_end = tx_start + seconds(AIRTIME_S);
        self.last_tx_end.insert(device_id.to_string(), tx_end);
        self.uplink_ends.push((device_id.to_string(), tx_end));
        let session = self.sessions.get_mut(device_id).expect("joined");
        session.fcnt_up += 1;
        let fcnt = session.fcnt_up;
        let rx1 = tx_end + Duration::seconds(RX1_DELAY_S);
        let downlink = self.pending.remove(device_id).map(|p| {
            let msg = DownlinkMessage {
                device_id: device_id.to_string(),
                port: DOWNLINK_PORT,
                payload: p.payload,
                seq: p.seq,
                request_id: p.cmd.request_id.clone(),
                enqueued_at: p.enqueued_at,
                delivered_at: rx1,
                window: RxWindow::Rx1,
                after_uplink_end: tx_end,
            };
            self.sent.insert((device_id.to_string(), p.seq), p.cmd);
            self.downlinks.push(msg.clone());
            msg
        });
        Ok(UplinkReceipt {
            device_id: device_id.to_string(),
            fcnt,
            tx_start,
            tx_end,
            received_at: tx_end + seconds(profile.sample_latency_s(rng)),
            rssi_dbm: profile.rssi_dbm,
            rx1,
            rx2: tx_end + Duration::seconds(RX2_DELAY_S),
            downlink,
        })
    }

    /// Holds a command for the device's next RX window. Only one command
    /// waits per device; a newer one replaces it.
    pub fn schedule_downlink(&mut self, now: Timestamp, device_id: &str, cmd: RpcCommand) -> Result<QueuedDownlink, NetError> {
        if !self.is_registered(device_id) {
            return Err(NetError::UnknownDevice(device_id.to_string()));
        }
        let seq_slot = self.next_seq.entry(device_id.to_string()).or_insert(0);
        let seq = *seq_slot;
        *seq_slot = seq.wrapping_add(1);
        let payload = encode_downlink(&cmd.kind, seq)?;
        let superseded = self
            .pending
            .insert(
                device_id.to_string(),
                PendingDownlink {
                    cmd,
                    seq,
                    payload,
                    enqueued_at: now,
                },
            )
            .map(|old| {
                let w = format!("{now} {device_id}: downlink {} superseded by a newer command", old.cmd.request_id);
                log::warn!("{w}");
                self.warnings.push(w);
                old.cmd.request_id
            });
        Ok(QueuedDownlink { seq, superseded })
    }

    pub fn pending_downlink(&self, device_id: &str) -> Option<&str> {
        self.pending.get(device_id).map(|p| p.cmd.request_id.as_str())
    }

    /// The command that went out with `seq`, for matching acknowledgements.
    pub fn sent_command(&self, device_id: &str, seq: u8) -> Option<&RpcCommand> {
        self.sent.get(&(device_id.to_string(), seq))
    }

    /// Downlinks delivered anywhere other than 1 s or 2 s after the end of
    /// an uplink from the same device.
    pub fn window_violations(&self) -> Vec<&DownlinkMessage> {
        self.downlinks
            .iter()
            .filter(|d| {
                let opened = self
                    .uplink_ends
                    .iter()
                    .any(|(id, end)| id == &d.device_id && *end == d.after_uplink_end);
                let offset = d.delivered_at - d.after_uplink_end;
                !opened || !(offset == Duration::seconds(RX1_DELAY_S) || offset == Duration::seconds(RX2_DELAY_S))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::DeviceConfig;
    use crate::device::Connectivity;
    use crate::time::sim_epoch;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn creds() -> JoinCredentials {
        match DeviceConfig::example_lorawan("l").connectivity {
            Connectivity::Lorawan(c) => c,
            _ => unreachable!(),
        }
    }

    fn joined() -> (NetworkServer, ChaCha8Rng) {
        let mut ns = NetworkServer::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        ns.register("l", creds());
        ns.otaa_join(sim_epoch(), "l", &creds(), 1, &mut rng).unwrap();
        (ns, rng)
    }

    #[test]
    fn downlink_codec() {
        assert_eq!(encode_downlink(&RpcKind::ReadOnDemand, 9).unwrap(), vec![0x01, 9]);
        let r = RpcKind::Reschedule {
            tx_per_day: 4,
            reading_period_h: 6,
        };
        let bytes = encode_downlink(&r, 3).unwrap();
        assert_eq!(bytes, vec![0x02, 3, 4, 6]);
        assert_eq!(decode_downlink(&bytes).unwrap(), (3, r));
        assert_eq!(decode_downlink(&[0x07, 1]), Err(NetError::UnknownOpcode(7)));
        assert!(matches!(decode_downlink(&[0x02, 1]), Err(NetError::MalformedDownlink(_))));
        assert_eq!(parse_local_request_id(&local_request_id(200)), Some(200));
    }

    #[test]
    fn join_rules() {
        let (mut ns, mut rng) = joined();
        assert!(ns.is_joined("l"));
        assert!(matches!(
            ns.otaa_join(sim_epoch(), "l", &creds(), 1, &mut rng),
            Err(NetError::ReplayedNonce { nonce: 1, .. })
        ));
        let mut wrong = creds();
        wrong.app_key = "00".repeat(16);
        assert!(matches!(
            ns.otaa_join(sim_epoch(), "l", &wrong, 2, &mut rng),
            Err(NetError::BadCredentials(_))
        ));
        let second = ns.otaa_join(sim_epoch(), "l", &creds(), 2, &mut rng).unwrap();
        assert_eq!(second.join_nonce, 2);
        assert_eq!(ns.security_log().len(), 2);
    }

    #[test]
    fn payload_bounds() {
        let (mut ns, mut rng) = joined();
        let p = LinkProfile::lorawan();
        assert!(ns.uplink(sim_epoch(), "l", &[0u8; 40], &p, &mut rng).is_ok());
        assert_eq!(
            ns.uplink(sim_epoch(), "l", &[0u8; 300], &p, &mut rng),
            Err(NetError::PayloadTooLarge { len: 300, max: 242 })
        );
        assert!(matches!(
            ns.uplink(sim_epoch(), "l", &[0u8; 4], &p, &mut rng),
            Err(NetError::PayloadTooSmall { .. })
        ));
        assert!(matches!(ns.uplink(sim_epoch(), "x", &[0u8; 40], &p, &mut rng), Err(NetError::NotJoined(_))));
    }

    #[test]
    fn downlink_waits_for_uplink_and_newest_wins() {
        let (mut ns, mut rng) = joined();
        let cmd = |id: &str| RpcCommand {
            request_id: id.into(),
            kind: RpcKind::ReadOnDemand,
            issued_at: sim_epoch(),
        };
        ns.schedule_downlink(sim_epoch(), "l", cmd("a")).unwrap();
        let q = ns.schedule_downlink(sim_epoch(), "l", cmd("b")).unwrap();
        assert_eq!(q.superseded.as_deref(), Some("a"));
        assert_eq!(ns.warnings().len(), 1);
        let t = sim_epoch() + Duration::hours(1);
        let receipt = ns.uplink(t, "l", &[0u8; 20], &LinkProfile::lorawan(), &mut rng).unwrap();
        let dl = receipt.downlink.unwrap();
        assert_eq!(dl.request_id, "b");
        assert_eq!(dl.delivered_at, t + Duration::seconds(4));
        assert!(ns.window_violations().is_empty());
        assert_eq!(ns.sent_command("l", q.seq).unwrap().request_id, "b");
    }

    #[test]
    fn duty_cycle_limit() {
        let (mut ns, mut rng) = joined();
        let p = LinkProfile {
            duty_cycle_limit: Some(0.01),
            ..LinkProfile::lorawan()
        };
        ns.uplink(sim_epoch(), "l", &[0u8; 20], &p, &mut rng).unwrap();
        let err = ns.uplink(sim_epoch() + Duration::seconds(60), "l", &[0u8; 20], &p, &mut rng);
        match err {
            Err(NetError::DutyCycle { retry_at, .. }) => assert_eq!(retry_at, sim_epoch() + Duration::seconds(300)),
            other => panic!("{other:?}"),
        }
    }
}
