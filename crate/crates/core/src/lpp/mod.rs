//! Telemetry events and their two wire encodings.
//!
//! The WiFi path carries the whole [`TelemetryEvent`] as JSON. The LoRaWAN
//! path carries the latest reading and sensor state as a Cayenne LPP frame
//! laid out by a [`ChannelMap`].

mod event;
mod frame;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use event::{
    decode_json, encode_json, GeoPoint, LinkKind, TelemetryEvent, TelemetryReading, TiltState, MAX_READINGS,
};
pub use frame::{LppFrame, LppRecord, LppType, LppValue};

/// Smallest LoRaWAN application payload in the AU915 plan.
pub const LORAWAN_MIN_PAYLOAD: usize = 11;
/// Largest LoRaWAN application payload in the AU915 plan.
pub const LORAWAN_MAX_PAYLOAD: usize = 242;
/// Budget for a complete trap event.
pub const EVENT_BUDGET: usize = 110;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("invalid event: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error("malformed JSON document: {0}")]
    Json(String),
    #[error("LoRaWAN events carry exactly one reading, got {0}")]
    TooManyReadings(usize),
    #[error("value out of range: {0}")]
    Range(String),
    #[error("frame truncated at byte {offset}")]
    Truncated { offset: usize },
    #[error("frame of {0} bytes exceeds the 242-byte maximum")]
    TooLong(usize),
    #[error("unknown LPP type 0x{byte:02X} at byte {offset}")]
    UnknownType { offset: usize, byte: u8 },
    #[error("channel {0} appears more than once")]
    DuplicateChannel(u8),
    #[error("channel {0} is not assigned")]
    UnknownChannel(u8),
    #[error("channel {channel} carries {found:?}, expected {expected:?}")]
    ChannelType {
        channel: u8,
        expected: LppType,
        found: LppType,
    },
    #[error("channel {channel}: {message}")]
    BadValue { channel: u8, message: String },
    #[error("invalid channel map: {0}")]
    InvalidMap(String),
}

/// Quantities carried on the LoRaWAN path.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    Temperature,
    Humidity,
    WaterPresent,
    Tilt,
    LidOpen,
    Battery,
    EggCount,
    SignalLevel,
    Gps,
    FwVersion,
    RpcAck,
}

impl Quantity {
    pub const ALL: [Quantity; 11] = [
        Self::Temperature,
        Self::Humidity,
        Self::WaterPresent,
        Self::Tilt,
        Self::LidOpen,
        Self::Battery,
        Self::EggCount,
        Self::SignalLevel,
        Self::Gps,
        Self::FwVersion,
        Self::RpcAck,
    ];

    pub fn lpp_type(self) -> LppType {
        match self {
            Self::Temperature => LppType::Temperature,
            Self::Humidity => LppType::Humidity,
            Self::WaterPresent | Self::Tilt | Self::LidOpen => LppType::DigitalInput,
            Self::Battery | Self::EggCount | Self::SignalLevel | Self::FwVersion => LppType::AnalogInput,
            Self::Gps => LppType::Gps,
            Self::RpcAck => LppType::DigitalOutput,
        }
    }
}

/// Channel assignment for each quantity.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelMap {
    pub temperature: u8,
    pub humidity: u8,
    pub water_present: u8,
    pub tilt: u8,
    pub lid_open: u8,
    pub battery: u8,
    pub egg_count: u8,
    pub signal_level: u8,
    pub gps: u8,
    pub fw_version: u8,
    /// Echoes the sequence byte of the downlink command being answered.
    pub rpc_ack: u8,
}

impl Default for ChannelMap {
    fn default() -> Self {
        Self {
            temperature: 1,
            humidity: 2,
            water_present: 3,
            tilt: 4,
            lid_open: 5,
            battery: 6,
            egg_count: 7,
            signal_level: 8,
            gps: 9,
            fw_version: 10,
            rpc_ack: 11,
        }
    }
}

impl ChannelMap {
    pub fn channel(&self, q: Quantity) -> u8 {
        match q {
            Quantity::Temperature => self.temperature,
            Quantity::Humidity => self.humidity,
            Quantity::WaterPresent => self.water_present,
            Quantity::Tilt => self.tilt,
            Quantity::LidOpen => self.lid_open,
            Quantity::Battery => self.battery,
            Quantity::EggCount => self.egg_count,
            Quantity::SignalLevel => self.signal_level,
            Quantity::Gps => self.gps,
            Quantity::FwVersion => self.fw_version,
            Quantity::RpcAck => self.rpc_ack,
        }
    }

    pub fn quantity(&self, channel: u8) -> Option<Quantity> {
        Quantity::ALL.into_iter().find(|&q| self.channel(q) == channel)
    }

    /// The mapping must be one-to-one.
    pub fn validate(&self) -> Result<(), CodecError> {
        let mut seen = std::collections::BTreeMap::new();
        for q in Quantity::ALL {
            if let Some(prev) = seen.insert(self.channel(q), q) {
                return Err(CodecError::InvalidMap(format!(
                    "channel {} assigned to both {prev:?} and {q:?}",
                    self.channel(q)
                )));
            }
        }
        Ok(())
    }
}

/// Firmware versions travel as `MAJOR.MINOR` packed into a 0.01 analog value.
pub fn fw_tag(version: &str) -> Result<f64, CodecError> {
    let bad = || CodecError::Range(format!("fw_version {version:?} is not MAJOR.MINOR with MINOR < 100 and a tag below 327.68"));
    let (major, minor) = version.split_once('.').ok_or_else(bad)?;
    let major: u16 = major.parse().map_err(|_| bad())?;
    let minor: u16 = minor.parse().map_err(|_| bad())?;
    if minor >= 100 || major as u32 * 100 + minor as u32 > i16::MAX as u32 {
        return Err(bad());
    }
    Ok(major as f64 + minor as f64 / 100.0)
}

fn fw_from_tag(tag: f64) -> String {
    let raw = (tag * 100.0).round() as i64;
    format!("{}.{}", raw / 100, raw % 100)
}

/// Values recovered from an LPP frame. Absent channels are `None`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LppTelemetry {
    pub temperature_c: Option<f64>,
    pub humidity_pct: Option<f64>,
    pub water_present: Option<bool>,
    pub tilt: Option<TiltState>,
    pub lid_open: Option<bool>,
    pub battery_pct: Option<f64>,
    pub egg_count: Option<u32>,
    pub signal_level: Option<f64>,
    pub gps: Option<(f64, f64, f64)>,
    pub fw_version: Option<String>,
    pub rpc_ack: Option<u8>,
}

impl LppTelemetry {
    /// True when every sensor channel of a trap event is present.
    pub fn has_status(&self) -> bool {
        self.temperature_c.is_some()
            && self.humidity_pct.is_some()
            && self.water_present.is_some()
            && self.tilt.is_some()
            && self.lid_open.is_some()
            && self.battery_pct.is_some()
            && self.signal_level.is_some()
            && self.gps.is_some()
            && self.fw_version.is_some()
    }
}

fn status_records(ev: &TelemetryEvent, map: &ChannelMap) -> Result<Vec<LppRecord>, CodecError> {
    Ok(vec![
        LppRecord::temperature(map.temperature, ev.temperature_c)?,
        LppRecord::humidity(map.humidity, ev.humidity_pct)?,
        LppRecord::digital_input(map.water_present, ev.water_present as u8),
        LppRecord::digital_input(map.tilt, (ev.tilt == TiltState::Overturned) as u8),
        LppRecord::digital_input(map.lid_open, ev.lid_open as u8),
        LppRecord::analog_input(map.battery, ev.battery_pct)?,
    ])
}

fn tail_records(ev: &TelemetryEvent, map: &ChannelMap) -> Result<Vec<LppRecord>, CodecError> {
    Ok(vec![
        LppRecord::analog_input(map.signal_level, ev.signal_level)?,
        LppRecord::gps(map.gps, ev.gps.lat, ev.gps.lon, 0.0)?,
        LppRecord::analog_input(map.fw_version, fw_tag(&ev.fw_version)?)?,
    ])
}

fn egg_record(count: u32, map: &ChannelMap) -> Result<LppRecord, CodecError> {
    LppRecord::analog_input(map.egg_count, count as f64)
}

/// Encodes a single-reading event as an LPP frame.
pub fn encode_lpp(ev: &TelemetryEvent, map: &ChannelMap) -> Result<LppFrame, CodecError> {
    if ev.readings.len() != 1 {
        return Err(CodecError::TooManyReadings(ev.readings.len()));
    }
    map.validate()?;
    let mut records = status_records(ev, map)?;
    records.push(egg_record(ev.readings[0].egg_count, map)?);
    records.extend(tail_records(ev, map)?);
    LppFrame::from_records(records)
}

/// Encodes an RPC answer: the event's status, its reading if it has one, and
/// the acknowledged command sequence byte.
pub fn encode_lpp_ack(ev: &TelemetryEvent, map: &ChannelMap, seq: u8) -> Result<LppFrame, CodecError> {
    if ev.readings.len() > 1 {
        return Err(CodecError::TooManyReadings(ev.readings.len()));
    }
    map.validate()?;
    let mut records = status_records(ev, map)?;
    if let Some(r) = ev.readings.first() {
        records.push(egg_record(r.egg_count, map)?);
    }
    records.extend(tail_records(ev, map)?);
    records.push(LppRecord::digital_output(map.rpc_ack, seq));
    LppFrame::from_records(records)
}

/// Decodes a frame through the channel map.
pub fn decode_lpp(bytes: &[u8], map: &ChannelMap) -> Result<LppTelemetry, CodecError> {
    if bytes.len() > LORAWAN_MAX_PAYLOAD {
        return Err(CodecError::TooLong(bytes.len()));
    }
    let frame = LppFrame::parse(bytes)?;
    let mut out = LppTelemetry::default();
    let mut seen = std::collections::BTreeSet::new();
    for r in frame.records() {
        if !seen.insert(r.channel) {
            return Err(CodecError::DuplicateChannel(r.channel));
        }
        let q = map.quantity(r.channel).ok_or(CodecError::UnknownChannel(r.channel))?;
        if q.lpp_type() != r.lpp_type {
            return Err(CodecError::ChannelType {
                channel: r.channel,
                expected: q.lpp_type(),
                found: r.lpp_type,
            });
        }
        let flag = |v: u8| match v {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(CodecError::BadValue {
                channel: r.channel,
                message: format!("digital value {other} is not 0 or 1"),
            }),
        };
        match (q, r.value()) {
            (Quantity::Temperature, LppValue::Temperature(t)) => out.temperature_c = Some(t),
            (Quantity::Humidity, LppValue::Humidity(h)) => out.humidity_pct = Some(h),
            (Quantity::WaterPresent, LppValue::Digital(v)) => out.water_present = Some(flag(v)?),
            (Quantity::Tilt, LppValue::Digital(v)) => {
                out.tilt = Some(if flag(v)? { TiltState::Overturned } else { TiltState::WellPositioned })
            }
            (Quantity::LidOpen, LppValue::Digital(v)) => out.lid_open = Some(flag(v)?),
            (Quantity::Battery, LppValue::Analog(v)) => out.battery_pct = Some(v),
            (Quantity::EggCount, LppValue::Analog(v)) => {
                let raw = (v * 100.0).round() as i64;
                if raw < 0 || raw % 100 != 0 {
                    return Err(CodecError::BadValue {
                        channel: r.channel,
                        message: format!("egg count {v} is not a non-negative integer"),
                    });
                }
                out.egg_count = Some((raw / 100) as u32);
            }
            (Quantity::SignalLevel, LppValue::Analog(v)) => out.signal_level = Some(v),
            (Quantity::Gps, LppValue::Gps { lat, lon, alt }) => out.gps = Some((lat, lon, alt)),
            (Quantity::FwVersion, LppValue::Analog(v)) => {
                if v < 0.0 {
                    return Err(CodecError::BadValue {
                        channel: r.channel,
                        message: format!("firmware tag {v} is negative"),
                    });
                }
                out.fw_version = Some(fw_from_tag(v))
            }
            (Quantity::RpcAck, LppValue::Digital(v)) => out.rpc_ack = Some(v),
            (q, v) => unreachable!("type checked above: {q:?} {v:?}"),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::sim_epoch;

    pub(crate) fn sample_event() -> TelemetryEvent {
        TelemetryEvent {
            device_id: "trap-001".into(),
            ts: sim_epoch(),
            readings: vec![TelemetryReading {
                ts: sim_epoch(),
                egg_count: 9,
                confidences: vec![0.9; 9],
            }],
            temperature_c: 25.3,
            humidity_pct: 61.5,
            water_present: true,
            tilt: TiltState::WellPositioned,
            lid_open: false,
            battery_pct: 87.25,
            link: LinkKind::Lorawan,
            signal_level: -97.0,
            gps: GeoPoint {
                lat: -37.3217,
                lon: -59.1332,
            },
            camera: None,
            fw_version: "1.2".into(),
        }
    }

    #[test]
    fn full_event_fits_budget() {
        let frame = encode_lpp(&sample_event(), &ChannelMap::default()).unwrap();
        assert_eq!(frame.len(), 43);
        assert!(frame.len() <= EVENT_BUDGET && frame.len() >= LORAWAN_MIN_PAYLOAD);
    }

    #[test]
    fn decode_single_temperature() {
        let t = decode_lpp(&[0x01, 0x67, 0x00, 0xFD], &ChannelMap::default()).unwrap();
        assert!((t.temperature_c.unwrap() - 25.3).abs() < 1e-9);
        assert!(t.humidity_pct.is_none());
        assert!(!t.has_status());
    }

    #[test]
    fn decode_full_event() {
        let map = ChannelMap::default();
        let ev = sample_event();
        let t = decode_lpp(encode_lpp(&ev, &map).unwrap().bytes(), &map).unwrap();
        assert!(t.has_status());
        assert_eq!(t.egg_count, Some(9));
        assert_eq!(t.fw_version.as_deref(), Some("1.2"));
        assert_eq!(t.tilt, Some(TiltState::WellPositioned));
        assert_eq!(t.rpc_ack, None);
    }

    #[test]
    fn multi_reading_event_rejected() {
        let mut ev = sample_event();
        let mut second = ev.readings[0].clone();
        second.ts = ev.ts + chrono::Duration::hours(6);
        ev.readings.push(second);
        assert_eq!(encode_lpp(&ev, &ChannelMap::default()), Err(CodecError::TooManyReadings(2)));
    }

    #[test]
    fn ack_frame_without_reading() {
        let map = ChannelMap::default();
        let mut ev = sample_event();
        ev.readings.clear();
        let frame = encode_lpp_ack(&ev, &map, 42).unwrap();
        assert_eq!(frame.len(), 43 - 4 + 3);
        let t = decode_lpp(frame.bytes(), &map).unwrap();
        assert_eq!(t.rpc_ack, Some(42));
        assert_eq!(t.egg_count, None);
    }

    #[test]
    fn decode_errors() {
        let map = ChannelMap::default();
        assert!(matches!(decode_lpp(&[], &map), Err(CodecError::Truncated { .. })));
        assert!(matches!(decode_lpp(&[0x30, 0x67, 0, 1], &map), Err(CodecError::UnknownChannel(0x30))));
        assert!(matches!(decode_lpp(&[0x01, 0x68, 0], &map), Err(CodecError::ChannelType { .. })));
        assert!(matches!(
            decode_lpp(&[0x01, 0x67, 0, 1, 0x01, 0x67, 0, 2], &map),
            Err(CodecError::DuplicateChannel(1))
        ));
        assert!(matches!(decode_lpp(&[0x03, 0x00, 7], &map), Err(CodecError::BadValue { .. })));
        assert!(matches!(decode_lpp(&[0u8; 300], &map), Err(CodecError::TooLong(300))));
    }

    #[test]
    fn fw_tags() {
        assert_eq!(fw_tag("1.2").unwrap(), 1.02);
        assert_eq!(fw_from_tag(fw_tag("3.14").unwrap()), "3.14");
        assert!(fw_tag("1.2.3").is_err());
        assert!(fw_tag("327.67").is_ok());
        assert!(fw_tag("327.68").is_err());
        assert!(fw_tag("v1").is_err());
    }

    #[test]
    fn channel_map_must_be_bijective() {
        let map = ChannelMap {
            humidity: 1,
            ..ChannelMap::default()
        };
        assert!(matches!(map.validate(), Err(CodecError::InvalidMap(_))));
        assert!(ChannelMap::default().validate().is_ok());
    }

    #[test]
    fn json_key_order_is_fixed() {
        let mut ev = sample_event();
        ev.link = LinkKind::WifiMqtt;
        let doc = encode_json(&ev).unwrap();
        let keys = [
            "\"device_id\"", "\"ts\"", "\"readings\"", "\"temp_c\"", "\"hum_pct\"", "\"water\"", "\"tilt\"",
            "\"lid_open\"", "\"battery_pct\"", "\"link\"", "\"rssi_dbm\"", "\"gps\"", "\"fw_version\"",
        ];
        let positions: Vec<usize> = keys.iter().map(|k| doc.find(k).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]), "{doc}");
        assert!(doc.contains("\"tilt\":\"well_positioned\""));
        assert!(doc.contains("\"link\":\"wifi_mqtt\""));
    }

    #[test]
    fn json_round_trip_and_validation() {
        let ev = sample_event();
        assert_eq!(decode_json(&encode_json(&ev).unwrap()).unwrap(), ev);
        let mut bad = ev.clone();
        let mut earlier = bad.readings[0].clone();
        earlier.ts = bad.readings[0].ts - chrono::Duration::hours(1);
        bad.readings.push(earlier);
        match encode_json(&bad) {
            Err(CodecError::Invalid(problems)) => {
                assert!(problems.iter().any(|p| p.contains("strictly increasing")))
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(decode_json("{"), Err(CodecError::Json(_))));
    }
}
