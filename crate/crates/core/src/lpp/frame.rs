//! Cayenne LPP framing: `channel | type | fixed-width big-endian data`.

use std::fmt;

use super::CodecError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum LppType {
    DigitalInput = 0x00,
    DigitalOutput = 0x01,
    AnalogInput = 0x02,
    AnalogOutput = 0x03,
    Illuminance = 0x65,
    Presence = 0x66,
    Temperature = 0x67,
    Humidity = 0x68,
    Accelerometer = 0x71,
    Barometer = 0x73,
    Gyrometer = 0x86,
    Gps = 0x88,
}

impl LppType {
    pub fn from_byte(b: u8) -> Option<Self> {
        use LppType::*;
        Some(match b {
            0x00 => DigitalInput,
            0x01 => DigitalOutput,
            0x02 => AnalogInput,
            0x03 => AnalogOutput,
            0x65 => Illuminance,
            0x66 => Presence,
            0x67 => Temperature,
            0x68 => Humidity,
            0x71 => Accelerometer,
            0x73 => Barometer,
            0x86 => Gyrometer,
            0x88 => Gps,
            _ => return None,
        })
    }

    /// Data width in bytes.
    pub fn width(self) -> usize {
        use LppType::*;
        match self {
            DigitalInput | DigitalOutput | Presence | Humidity => 1,
            AnalogInput | AnalogOutput | Illuminance | Temperature | Barometer => 2,
            Accelerometer | Gyrometer => 6,
            Gps => 9,
        }
    }
}

/// One `channel, type, data` triple.
#[derive(Clone, PartialEq, Eq)]
pub struct LppRecord {
    pub channel: u8,
    pub lpp_type: LppType,
    data: Vec<u8>,
}

impl fmt::Debug for LppRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "LppRecord(ch{} {:?} {})", self.channel, self.lpp_type, hex::encode(&self.data))
    }
}

fn scaled(value: f64, resolution: f64, min: i64, max: i64, what: &str) -> Result<i64, CodecError> {
    let raw = (value / resolution).round();
    if !raw.is_finite() || raw < min as f64 || raw > max as f64 {
        return Err(CodecError::Range(format!(
            "{what} {value} not representable (raw {raw}, allowed {min}..={max})"
        )));
    }
    Ok(raw as i64)
}

fn i24_bytes(v: i64) -> [u8; 3] {
    let b = (v as i32).to_be_bytes();
    [b[1], b[2], b[3]]
}

fn i24_from(b: &[u8]) -> i32 {
    let v = i32::from_be_bytes([0, b[0], b[1], b[2]]);
    (v << 8) >> 8
}

impl LppRecord {
    pub fn new(channel: u8, lpp_type: LppType, data: Vec<u8>) -> Result<Self, CodecError> {
        if data.len() != lpp_type.width() {
            return Err(CodecError::Range(format!(
                "{:?} expects {} data bytes, got {}",
                lpp_type,
                lpp_type.width(),
                data.len()
            )));
        }
        Ok(Self { channel, lpp_type, data })
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn encoded_len(&self) -> usize {
        2 + self.data.len()
    }

    pub fn digital_input(channel: u8, value: u8) -> Self {
        Self {
            channel,
            lpp_type: LppType::DigitalInput,
            data: vec![value],
        }
    }

    pub fn digital_output(channel: u8, value: u8) -> Self {
        Self {
            channel,
            lpp_type: LppType::DigitalOutput,
            data: vec![value],
        }
    }

    /// Analog input: signed 16-bit, 0.01 per unit.
    pub fn analog_input(channel: u8, value: f64) -> Result<Self, CodecError> {
        let raw = scaled(value, 0.01, i16::MIN as i64, i16::MAX as i64, "analog value")?;
        Ok(Self {
            channel,
            lpp_type: LppType::AnalogInput,
            data: (raw as i16).to_be_bytes().to_vec(),
        })
    }

    /// Temperature: signed 16-bit, 0.1 °C per unit.
    pub fn temperature(channel: u8, celsius: f64) -> Result<Self, CodecError> {
        let raw = scaled(celsius, 0.1, i16::MIN as i64, i16::MAX as i64, "temperature")?;
        Ok(Self {
            channel,
            lpp_type: LppType::Temperature,
            data: (raw as i16).to_be_bytes().to_vec(),
        })
    }

    /// Relative humidity: unsigned 8-bit, 0.5 % per unit.
    pub fn humidity(channel: u8, pct: f64) -> Result<Self, CodecError> {
        let raw = scaled(pct, 0.5, 0, u8::MAX as i64, "humidity")?;
        Ok(Self {
            channel,
            lpp_type: LppType::Humidity,
            data: vec![raw as u8],
        })
    }

    /// GPS: three signed 24-bit fields, latitude and longitude at 1e-4°, altitude at 0.01 m.
    pub fn gps(channel: u8, lat: f64, lon: f64, alt_m: f64) -> Result<Self, CodecError> {
        const I24: (i64, i64) = (-(1 << 23), (1 << 23) - 1);
        let lat = scaled(lat, 1e-4, I24.0, I24.1, "latitude")?;
        let lon = scaled(lon, 1e-4, I24.0, I24.1, "longitude")?;
        let alt = scaled(alt_m, 0.01, I24.0, I24.1, "altitude")?;
        let mut data = Vec::with_capacity(9);
        data.extend(i24_bytes(lat));
        data.extend(i24_bytes(lon));
        data.extend(i24_bytes(alt));
        Ok(Self {
            channel,
            lpp_type: LppType::Gps,
            data,
        })
    }

    pub fn value(&self) -> LppValue {
        let d = &self.data;
        let i16_at = |o: usize| i16::from_be_bytes([d[o], d[o + 1]]) as f64;
        let u16_at = |o: usize| u16::from_be_bytes([d[o], d[o + 1]]) as f64;
        match self.lpp_type {
            LppType::DigitalInput | LppType::DigitalOutput | LppType::Presence => LppValue::Digital(d[0]),
            LppType::AnalogInput | LppType::AnalogOutput => LppValue::Analog(i16_at(0) * 0.01),
            LppType::Illuminance => LppValue::Illuminance(u16_at(0)),
            LppType::Temperature => LppValue::Temperature(i16_at(0) * 0.1),
            LppType::Humidity => LppValue::Humidity(d[0] as f64 * 0.5),
            LppType::Barometer => LppValue::Barometer(u16_at(0) * 0.1),
            LppType::Accelerometer => LppValue::Vector([i16_at(0) * 0.001, i16_at(2) * 0.001, i16_at(4) * 0.001]),
            LppType::Gyrometer => LppValue::Vector([i16_at(0) * 0.01, i16_at(2) * 0.01, i16_at(4) * 0.01]),
            LppType::Gps => LppValue::Gps {
                lat: i24_from(&d[0..3]) as f64 * 1e-4,
                lon: i24_from(&d[3..6]) as f64 * 1e-4,
                alt: i24_from(&d[6..9]) as f64 * 0.01,
            },
        }
    }
}

/// Decoded value of a record.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LppValue {
    Digital(u8),
    Analog(f64),
    Illuminance(f64),
    Temperature(f64),
    Humidity(f64),
    Barometer(f64),
    Vector([f64; 3]),
    Gps { lat: f64, lon: f64, alt: f64 },
}

/// An ordered sequence of records and its byte encoding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LppFrame {
    records: Vec<LppRecord>,
    bytes: Vec<u8>,
}

impl LppFrame {
    /// Builds a frame, rejecting a repeated `(channel, type)` pair.
    pub fn from_records(records: Vec<LppRecord>) -> Result<Self, CodecError> {
        let mut seen = std::collections::BTreeSet::new();
        let mut bytes = Vec::with_capacity(records.iter().map(LppRecord::encoded_len).sum());
        for r in &records {
            if !seen.insert((r.channel, r.lpp_type)) {
                return Err(CodecError::DuplicateChannel(r.channel));
            }
            bytes.push(r.channel);
            bytes.push(r.lpp_type as u8);
            bytes.extend_from_slice(&r.data);
        }
        Ok(Self { records, bytes })
    }

    /// Splits raw bytes into records. Empty input and partial trailing
    /// records are truncation errors.
    pub fn parse(bytes: &[u8]) -> Result<Self, CodecError> {
        if bytes.is_empty() {
            return Err(CodecError::Truncated { offset: 0 });
        }
        let mut records = Vec::new();
        let mut i = 0;
        while i < bytes.len() {
            if i + 2 > bytes.len() {
                return Err(CodecError::Truncated { offset: i });
            }
            let channel = bytes[i];
            let lpp_type = LppType::from_byte(bytes[i + 1]).ok_or(CodecError::UnknownType {
                offset: i + 1,
                byte: bytes[i + 1],
            })?;
            let end = i + 2 + lpp_type.width();
            if end > bytes.len() {
                return Err(CodecError::Truncated { offset: i });
            }
            records.push(LppRecord {
                channel,
                lpp_type,
                data: bytes[i + 2..end].to_vec(),
            });
            i = end;
        }
        Self::from_records(records)
    }

    pub fn records(&self) -> &[LppRecord] {
        &self.records
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn hex(&self) -> String {
        hex::encode_upper(&self.bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn temperature_record_bytes() {
        let f = LppFrame::from_records(vec![LppRecord::temperature(1, 25.3).unwrap()]).unwrap();
        assert_eq!(f.bytes(), &[0x01, 0x67, 0x00, 0xFD]);
        let f = LppFrame::from_records(vec![LppRecord::temperature(1, -4.1).unwrap()]).unwrap();
        assert_eq!(f.bytes(), &[0x01, 0x67, 0xFF, 0xD7]);
    }

    #[test]
    fn humidity_record_bytes() {
        let f = LppFrame::from_records(vec![LppRecord::humidity(2, 50.0).unwrap()]).unwrap();
        assert_eq!(f.bytes(), &[0x02, 0x68, 0x64]);
    }

    #[test]
    fn gps_record_round_trip() {
        let r = LppRecord::gps(9, -37.3217, -59.1332, 180.25).unwrap();
        assert_eq!(r.encoded_len(), 11);
        match r.value() {
            LppValue::Gps { lat, lon, alt } => {
                assert!((lat + 37.3217).abs() < 1e-9);
                assert!((lon + 59.1332).abs() < 1e-9);
                assert!((alt - 180.25).abs() < 1e-9);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn temperature_out_of_range() {
        assert!(LppRecord::temperature(1, 3276.7).is_ok());
        assert!(matches!(LppRecord::temperature(1, 3276.8), Err(CodecError::Range(_))));
        assert!(matches!(LppRecord::temperature(1, f64::NAN), Err(CodecError::Range(_))));
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(LppFrame::parse(&[]), Err(CodecError::Truncated { offset: 0 })));
        assert!(matches!(LppFrame::parse(&[0x01, 0x67, 0x00]), Err(CodecError::Truncated { .. })));
        assert!(matches!(
            LppFrame::parse(&[0x01, 0x42, 0x00]),
            Err(CodecError::UnknownType { byte: 0x42, .. })
        ));
        assert!(matches!(
            LppFrame::parse(&[0x01, 0x00, 0x01, 0x01, 0x00, 0x00]),
            Err(CodecError::DuplicateChannel(1))
        ));
    }
}
