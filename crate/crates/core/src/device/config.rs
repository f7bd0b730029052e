use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lpp::{GeoPoint, LinkKind, MAX_READINGS};

pub const SPECIES: &str = "Aedes aegypti";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlaceType {
    Home,
    Business,
    PublicBuilding,
    Factory,
    Field,
}

impl PlaceType {
    pub const ALL: [PlaceType; 5] = [
        Self::Home,
        Self::Business,
        Self::PublicBuilding,
        Self::Factory,
        Self::Field,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Home => "home",
            Self::Business => "business",
            Self::PublicBuilding => "public_building",
            Self::Factory => "factory",
            Self::Field => "field",
        }
    }
}

impl fmt::Display for PlaceType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PlaceType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace([' ', '-'], "_");
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == norm)
            .ok_or_else(|| format!("{s:?} is not one of home, business, public_building, factory, field"))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Site {
    pub address: String,
    pub province: String,
    pub country: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Responsible {
    pub name: String,
    pub contact: String,
}

/// OTAA join credentials, hex encoded.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinCredentials {
    pub dev_eui: String,
    pub app_eui: String,
    pub app_key: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Connectivity {
    WifiMqtt { network: String, secret: String },
    Lorawan(JoinCredentials),
}

impl Connectivity {
    pub fn kind(&self) -> LinkKind {
        match self {
            Self::WifiMqtt { .. } => LinkKind::WifiMqtt,
            Self::Lorawan(_) => LinkKind::Lorawan,
        }
    }
}

/// How often the device reads and how often it transmits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub reading_period_h: u32,
    pub tx_per_day: u32,
}

impl Schedule {
    pub fn readings_per_day(&self) -> u32 {
        24 / self.reading_period_h.max(1)
    }

    /// Readings carried by each transmission.
    pub fn readings_per_tx(&self) -> u32 {
        self.readings_per_day() / self.tx_per_day.max(1)
    }

    pub fn check(&self, link: LinkKind, problems: &mut Vec<FieldProblem>) {
        if self.reading_period_h == 0 || 24 % self.reading_period_h != 0 {
            problems.push(FieldProblem::new(
                "reading_period_h",
                format!("{} does not divide a day into whole readings", self.reading_period_h),
            ));
            return;
        }
        let per_day = self.readings_per_day();
        if self.tx_per_day == 0 || !per_day.is_multiple_of(self.tx_per_day) {
            problems.push(FieldProblem::new(
                "tx_per_day",
                format!("{} transmissions cannot evenly carry {per_day} readings per day", self.tx_per_day),
            ));
            return;
        }
        let per_tx = self.readings_per_tx() as usize;
        if per_tx > MAX_READINGS {
            problems.push(FieldProblem::new(
                "tx_per_day",
                format!("each transmission would carry {per_tx} readings, at most {MAX_READINGS} fit"),
            ));
        }
        if link == LinkKind::Lorawan && per_tx != 1 {
            problems.push(FieldProblem::new(
                "tx_per_day",
                format!("LoRaWAN uplinks carry one reading, so tx_per_day must equal {per_day}"),
            ));
        }
    }
}

/// Installation parameters written to the device during provisioning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceConfig {
    pub device_id: String,
    pub site: Site,
    pub responsible: Responsible,
    pub place_type: PlaceType,
    pub installer: String,
    pub species: String,
    pub connectivity: Connectivity,
    pub gps: GeoPoint,
    pub reading_period_h: u32,
    pub tx_per_day: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldProblem {
    pub field: String,
    pub message: String,
}

impl FieldProblem {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for FieldProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
#[error("invalid configuration: {}", .problems.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
pub struct ConfigError {
    pub problems: Vec<FieldProblem>,
}

impl ConfigError {
    pub fn fields(&self) -> Vec<&str> {
        self.problems.iter().map(|p| p.field.as_str()).collect()
    }
}

pub(crate) fn valid_device_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

fn check_hex(field: &str, value: &str, bytes: usize, problems: &mut Vec<FieldProblem>) {
    if value.is_empty() {
        problems.push(FieldProblem::new(field, "missing"));
    } else if value.len() != bytes * 2 || hex::decode(value).is_err() {
        problems.push(FieldProblem::new(field, format!("expected {} hex digits", bytes * 2)));
    }
}

impl DeviceConfig {
    pub fn schedule(&self) -> Schedule {
        Schedule {
            reading_period_h: self.reading_period_h,
            tx_per_day: self.tx_per_day,
        }
    }

    pub fn link(&self) -> LinkKind {
        self.connectivity.kind()
    }

    /// Collects every violated rule rather than stopping at the first.
    pub fn problems(&self) -> Vec<FieldProblem> {
        let mut p = Vec::new();
        if self.device_id.is_empty() {
            p.push(FieldProblem::new("device_id", "missing"));
        } else if !valid_device_id(&self.device_id) {
            p.push(FieldProblem::new("device_id", "use letters, digits, '-' or '_' (at most 64)"));
        }
        for (field, value) in [
            ("site.address", &self.site.address),
            ("site.province", &self.site.province),
            ("site.country", &self.site.country),
            ("responsible.name", &self.responsible.name),
            ("installer", &self.installer),
        ] {
            if value.trim().is_empty() {
                p.push(FieldProblem::new(field, "missing"));
            }
        }
        if self.species != SPECIES {
            p.push(FieldProblem::new("species", format!("only {SPECIES:?} is monitored")));
        }
        match &self.connectivity {
            Connectivity::WifiMqtt { network, secret } => {
                if network.trim().is_empty() {
                    p.push(FieldProblem::new("connectivity.network", "missing"));
                }
                if secret.is_empty() {
                    p.push(FieldProblem::new("connectivity.secret", "missing"));
                }
            }
            Connectivity::Lorawan(c) => {
                check_hex("connectivity.dev_eui", &c.dev_eui, 8, &mut p);
                check_hex("connectivity.app_eui", &c.app_eui, 8, &mut p);
                check_hex("connectivity.app_key", &c.app_key, 16, &mut p);
            }
        }
        if !(-90.0..=90.0).contains(&self.gps.lat) {
            p.push(FieldProblem::new("gps.lat", format!("{} outside [-90, 90]", self.gps.lat)));
        }
        if !(-180.0..=180.0).contains(&self.gps.lon) {
            p.push(FieldProblem::new("gps.lon", format!("{} outside [-180, 180]", self.gps.lon)));
        }
        self.schedule().check(self.link(), &mut p);
        p
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError { problems })
        }
    }

    /// A complete WiFi configuration for tests and examples.
    pub fn example_wifi(device_id: &str) -> Self {
        Self {
            device_id: device_id.into(),
            site: Site {
                address: "Av. Espana 1200".into(),
                province: "Buenos Aires".into(),
                country: "Argentina".into(),
            },
            responsible: Responsible {
                name: "Field team".into(),
                contact: "field@example.org".into(),
            },
            place_type: PlaceType::Home,
            installer: "installer".into(),
            species: SPECIES.into(),
            connectivity: Connectivity::WifiMqtt {
                network: "ovitrap-net".into(),
                secret: "changeme".into(),
            },
            gps: GeoPoint {
                lat: -37.3217,
                lon: -59.1332,
            },
            reading_period_h: 6,
            tx_per_day: 1,
        }
    }

    /// A complete LoRaWAN configuration for tests and examples.
    pub fn example_lorawan(device_id: &str) -> Self {
        Self {
            connectivity: Connectivity::Lorawan(JoinCredentials {
                dev_eui: "70B3D57ED0051F01".into(),
                app_eui: "0000000000000001".into(),
                app_key: "2B7E151628AED2A6ABF7158809CF4F3C".into(),
            }),
            tx_per_day: 4,
            ..Self::example_wifi(device_id)
        }
    }
}
