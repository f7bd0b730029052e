//! Installer-side provisioning: validates a form, writes it to a device over
//! the local control channel, registers the device and runs a test reading.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use chrono::Duration;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device::{
    Connectivity, DeviceConfig, FieldProblem, JoinCredentials, Phase, PlaceType, Responsible, Site, SPECIES,
};
use crate::lpp::GeoPoint;
use crate::platform::{DeviceRecord, Metric, Platform, PlatformError, Registration, TimeSeriesPoint};
use crate::scenario::{ControlRequest, ControlResponse, Scenario, Simulation};
use crate::time::Timestamp;

/// Window after an assay in which the platform must have stored it.
pub const INGEST_CHECK_S: i64 = 60;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProvisionError {
    #[error("device unreachable: {0}")]
    Unreachable(String),
    #[error("invalid form: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Validation(Vec<FieldProblem>),
    #[error("registry conflict: {0} is already registered with different metadata")]
    Conflict(String),
    #[error("device fault: {0}")]
    DeviceFault(String),
    #[error("timed out: {0}")]
    Timeout(String),
    #[error("registry error: {0}")]
    Registry(String),
    #[error("unexpected reply: {0}")]
    Protocol(String),
}

impl ProvisionError {
    pub fn fields(&self) -> Vec<&str> {
        match self {
            Self::Validation(p) => p.iter().map(|p| p.field.as_str()).collect(),
            _ => Vec::new(),
        }
    }

    fn from_reply(code: &str, message: String) -> Self {
        match code {
            "unreachable" => Self::Unreachable(message),
            "validation" => Self::Validation(vec![FieldProblem::new("device", message)]),
            "fault" => Self::DeviceFault(message),
            "timeout" => Self::Timeout(message),
            _ => Self::Protocol(message),
        }
    }
}

impl From<PlatformError> for ProvisionError {
    fn from(e: PlatformError) -> Self {
        match e {
            PlatformError::Conflict(id) => Self::Conflict(id),
            PlatformError::Invalid(p) => Self::Validation(p),
            other => Self::Registry(other.to_string()),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SiteForm {
    pub address: Option<String>,
    pub province: Option<String>,
    pub country: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResponsibleForm {
    pub name: Option<String>,
    pub contact: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConnectivityForm {
    pub kind: Option<String>,
    pub network: Option<String>,
    pub secret: Option<String>,
    pub dev_eui: Option<String>,
    pub app_eui: Option<String>,
    pub app_key: Option<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GpsSource {
    #[default]
    Manual,
    ScenarioFile,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GpsForm {
    #[serde(default)]
    pub source: GpsSource,
    pub lat: Option<f64>,
    pub lon: Option<f64>,
    /// Scenario file holding the coordinates, relative to the form.
    pub path: Option<PathBuf>,
    /// Device to look up in the scenario; defaults to the form's device_id.
    pub device: Option<String>,
}

/// What the installer fills in. Every field may be absent so that all
/// omissions can be reported together.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProvisioningForm {
    pub device_id: Option<String>,
    #[serde(default)]
    pub site: SiteForm,
    #[serde(default)]
    pub responsible: ResponsibleForm,
    pub place_type: Option<String>,
    pub installer: Option<String>,
    pub species: Option<String>,
    #[serde(default)]
    pub connectivity: ConnectivityForm,
    #[serde(default)]
    pub gps: GpsForm,
    pub reading_period_h: Option<u32>,
    pub tx_per_day: Option<u32>,
}

fn text(v: &Option<String>) -> String {
    v.clone().unwrap_or_default()
}

impl ProvisioningForm {
    pub fn from_toml(s: &str) -> Result<Self, ProvisionError> {
        toml::from_str(s).map_err(|e| ProvisionError::Validation(vec![FieldProblem::new("form", e.to_string())]))
    }

    pub fn load(path: &Path) -> Result<Self, ProvisionError> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| ProvisionError::Validation(vec![FieldProblem::new("form", format!("{}: {e}", path.display()))]))?;
        Self::from_toml(&s)
    }

    pub fn from_config(cfg: &DeviceConfig) -> Self {
        let mut conn = ConnectivityForm::default();
        match &cfg.connectivity {
            Connectivity::WifiMqtt { network, secret } => {
                conn.kind = Some("wifi_mqtt".into());
                conn.network = Some(network.clone());
                conn.secret = Some(secret.clone());
            }
            Connectivity::Lorawan(c) => {
                conn.kind = Some("lorawan".into());
                conn.dev_eui = Some(c.dev_eui.clone());
                conn.app_eui = Some(c.app_eui.clone());
                conn.app_key = Some(c.app_key.clone());
            }
        }
        Self {
            device_id: Some(cfg.device_id.clone()),
            site: SiteForm {
                address: Some(cfg.site.address.clone()),
                province: Some(cfg.site.province.clone()),
                country: Some(cfg.site.country.clone()),
            },
            responsible: ResponsibleForm {
                name: Some(cfg.responsible.name.clone()),
                contact: Some(cfg.responsible.contact.clone()),
            },
            place_type: Some(cfg.place_type.as_str().into()),
            installer: Some(cfg.installer.clone()),
            species: Some(cfg.species.clone()),
            connectivity: conn,
            gps: GpsForm {
                source: GpsSource::Manual,
                lat: Some(cfg.gps.lat),
                lon: Some(cfg.gps.lon),
                path: None,
                device: None,
            },
            reading_period_h: Some(cfg.reading_period_h),
            tx_per_day: Some(cfg.tx_per_day),
        }
    }

    fn gps(&self, base_dir: &Path, p: &mut Vec<FieldProblem>) -> GeoPoint {
        match self.gps.source {
            GpsSource::Manual => {
                if self.gps.lat.is_none() {
                    p.push(FieldProblem::new("gps.lat", "missing"));
                }
                if self.gps.lon.is_none() {
                    p.push(FieldProblem::new("gps.lon", "missing"));
                }
                GeoPoint {
                    lat: self.gps.lat.unwrap_or(0.0),
                    lon: self.gps.lon.unwrap_or(0.0),
                }
            }
            GpsSource::ScenarioFile => {
                let Some(rel) = &self.gps.path else {
                    p.push(FieldProblem::new("gps.path", "missing"));
                    return GeoPoint { lat: 0.0, lon: 0.0 };
                };
                let who = self.gps.device.clone().or_else(|| self.device_id.clone()).unwrap_or_default();
                match Scenario::load(&base_dir.join(rel)) {
                    Ok(s) => match s.device(&who) {
                        Some(d) => d.config.gps,
                        None => {
                            p.push(FieldProblem::new("gps.device", format!("{who:?} not in {}", rel.display())));
                            GeoPoint { lat: 0.0, lon: 0.0 }
                        }
                    },
                    Err(e) => {
                        p.push(FieldProblem::new("gps.path", e.to_string()));
                        GeoPoint { lat: 0.0, lon: 0.0 }
                    }
                }
            }
        }
    }

    /// Builds the device configuration, reporting every missing or invalid
    /// field. `base_dir` resolves a scenario-file GPS source.
    pub fn to_config(&self, base_dir: &Path) -> Result<DeviceConfig, ProvisionError> {
        let mut p = Vec::new();
        let place_type = match &self.place_type {
            None => {
                p.push(FieldProblem::new("place_type", "missing"));
                PlaceType::Home
            }
            Some(s) => s.parse().unwrap_or_else(|e: String| {
                p.push(FieldProblem::new("place_type", e));
                PlaceType::Home
            }),
        };
        let c = &self.connectivity;
        let connectivity = match c.kind.as_deref() {
            Some("wifi_mqtt" | "wifi") => Connectivity::WifiMqtt {
                network: text(&c.network),
                secret: text(&c.secret),
            },
            Some("lorawan") => Connectivity::Lorawan(JoinCredentials {
                dev_eui: text(&c.dev_eui),
                app_eui: text(&c.app_eui),
                app_key: text(&c.app_key),
            }),
            other => {
                let msg = match other {
                    None => "missing".to_string(),
                    Some(k) => format!("{k:?} is not one of wifi_mqtt, lorawan"),
                };
                p.push(FieldProblem::new("connectivity.kind", msg));
                Connectivity::WifiMqtt {
                    network: "-".into(),
                    secret: "-".into(),
                }
            }
        };
        let gps = self.gps(base_dir, &mut p);
        let mut number = |field: &str, v: Option<u32>| {
            v.unwrap_or_else(|| {
                p.push(FieldProblem::new(field, "missing"));
                0
            })
        };
        let reading_period_h = number("reading_period_h", self.reading_period_h);
        let tx_per_day = number("tx_per_day", self.tx_per_day);
        let cfg = DeviceConfig {
            device_id: text(&self.device_id),
            site: Site {
                address: text(&self.site.address),
                province: text(&self.site.province),
                country: text(&self.site.country),
            },
            responsible: Responsible {
                name: text(&self.responsible.name),
                contact: text(&self.responsible.contact),
            },
            place_type,
            installer: text(&self.installer),
            species: self.species.clone().unwrap_or_else(|| SPECIES.into()),
            connectivity,
            gps,
            reading_period_h,
            tx_per_day,
        };
        let schedule_missing = p.iter().any(|x| x.field == "reading_period_h" || x.field == "tx_per_day");
        for q in cfg.problems() {
            let is_schedule = q.field == "reading_period_h" || q.field == "tx_per_day";
            if (schedule_missing && is_schedule) || p.iter().any(|x| x.field == q.field) {
                continue;
            }
            p.push(q);
        }
        if p.is_empty() {
            Ok(cfg)
        } else {
            Err(ProvisionError::Validation(p))
        }
    }
}

/// The local link to one device, standing in for BLE.
pub trait ControlChannel {
    fn request(&mut self, req: ControlRequest) -> Result<ControlResponse, ProvisionError>;
}

/// The platform's registry as seen by the installer.
pub trait RegistryApi {
    fn register(&mut self, cfg: &DeviceConfig) -> Result<Registration, ProvisionError>;
    fn device(&mut self, device_id: &str) -> Result<Option<DeviceRecord>, ProvisionError>;
    fn egg_counts(
        &mut self,
        device_id: &str,
        from: Timestamp,
        to: Timestamp,
    ) -> Result<Vec<TimeSeriesPoint>, ProvisionError>;
}

fn expect(resp: ControlResponse) -> Result<ControlResponse, ProvisionError> {
    match resp {
        ControlResponse::Error { code, message } => Err(ProvisionError::from_reply(&code, message)),
        other => Ok(other),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Confirmation {
    pub device_id: String,
    pub serial: String,
    pub registered: bool,
    pub config_changed: bool,
    pub started_at: Timestamp,
}

/// Registers the device, writes the configuration and starts the schedule.
/// Running it again with the same form changes nothing.
pub fn provision(
    form: &ProvisioningForm,
    base_dir: &Path,
    ctl: &mut dyn ControlChannel,
    registry: &mut dyn RegistryApi,
) -> Result<Confirmation, ProvisionError> {
    let cfg = form.to_config(base_dir)?;
    let serial = match expect(ctl.request(ControlRequest::Hello)?)? {
        ControlResponse::Hello { serial, .. } => serial,
        other => return Err(ProvisionError::Protocol(format!("{other:?}"))),
    };
    let registration = registry.register(&cfg)?;
    let config_changed = match expect(ctl.request(ControlRequest::WriteConfig {
        config: Box::new(cfg.clone()),
    })?)? {
        ControlResponse::ConfigAck { changed, .. } => changed,
        other => return Err(ProvisionError::Protocol(format!("{other:?}"))),
    };
    let started_at = match expect(ctl.request(ControlRequest::Start)?)? {
        ControlResponse::Started { at, .. } => at,
        other => return Err(ProvisionError::Protocol(format!("{other:?}"))),
    };
    Ok(Confirmation {
        device_id: cfg.device_id,
        serial,
        registered: registration == Registration::Created,
        config_changed,
        started_at,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub device_id: String,
    pub assay_id: u32,
    pub egg_count: u32,
    pub ts: Timestamp,
    pub confidences: Vec<f32>,
    pub warnings: Vec<String>,
    /// The platform stored the assay's follow-up telemetry.
    pub delivered: bool,
}

/// Runs a calibration reading and checks that the platform received it.
pub fn test_reading(ctl: &mut dyn ControlChannel, registry: &mut dyn RegistryApi) -> Result<TestReport, ProvisionError> {
    let device_id = match expect(ctl.request(ControlRequest::Status)?)? {
        ControlResponse::Status {
            device_id: Some(id),
            phase,
            ..
        } if phase != Phase::Unprovisioned && phase != Phase::Fault => id,
        ControlResponse::Status { phase, .. } => {
            return Err(ProvisionError::DeviceFault(format!("device is {phase}")));
        }
        other => return Err(ProvisionError::Protocol(format!("{other:?}"))),
    };
    let (assay_id, egg_count, ts, lid_open, confidences) = match expect(ctl.request(ControlRequest::TestReading)?)? {
        ControlResponse::Assay {
            assay_id,
            egg_count,
            ts,
            lid_open,
            confidences,
        } => (assay_id, egg_count, ts, lid_open, confidences),
        other => return Err(ProvisionError::Protocol(format!("{other:?}"))),
    };
    let mut warnings = Vec::new();
    if lid_open {
        warnings.push("lid is open; oviposition will not take place".to_string());
    }
    let points = registry.egg_counts(&device_id, ts, ts + Duration::seconds(INGEST_CHECK_S))?;
    let delivered = points
        .iter()
        .any(|p| p.value.as_f64() == Some(egg_count as f64));
    if !delivered {
        warnings.push("the platform has not stored this reading yet".to_string());
    }
    Ok(TestReport {
        device_id,
        assay_id,
        egg_count,
        ts,
        confidences,
        warnings,
        delivered,
    })
}

impl RegistryApi for Platform {
    fn register(&mut self, cfg: &DeviceConfig) -> Result<Registration, ProvisionError> {
        let now = self
            .devices()
            .map(|d| d.registered_at)
            .max()
            .unwrap_or_else(crate::time::sim_epoch);
        Ok(Platform::register(self, cfg, now)?)
    }

    fn device(&mut self, device_id: &str) -> Result<Option<DeviceRecord>, ProvisionError> {
        Ok(Platform::device(self, device_id).cloned())
    }

    fn egg_counts(&mut self, device_id: &str, from: Timestamp, to: Timestamp) -> Result<Vec<TimeSeriesPoint>, ProvisionError> {
        Ok(self.query_series(device_id, Metric::EggCount, from, to)?)
    }
}

/// In-process access to a shared simulation.
#[derive(Clone)]
pub struct LocalLink {
    pub sim: Arc<Mutex<Simulation>>,
    pub serial: String,
}

impl ControlChannel for LocalLink {
    fn request(&mut self, req: ControlRequest) -> Result<ControlResponse, ProvisionError> {
        let mut sim = self.sim.lock().map_err(|e| ProvisionError::Unreachable(e.to_string()))?;
        match sim.control(&self.serial, req) {
            ControlResponse::Error { code, message } if code == "unreachable" => Err(ProvisionError::Unreachable(message)),
            other => Ok(other),
        }
    }
}

#[derive(Clone)]
pub struct LocalRegistry {
    pub sim: Arc<Mutex<Simulation>>,
}

impl RegistryApi for LocalRegistry {
    fn register(&mut self, cfg: &DeviceConfig) -> Result<Registration, ProvisionError> {
        let mut sim = self.sim.lock().map_err(|e| ProvisionError::Registry(e.to_string()))?;
        let now = sim.now();
        Ok(sim.platform_mut().register(cfg, now)?)
    }

    fn device(&mut self, device_id: &str) -> Result<Option<DeviceRecord>, ProvisionError> {
        let sim = self.sim.lock().map_err(|e| ProvisionError::Registry(e.to_string()))?;
        Ok(sim.platform().device(device_id).cloned())
    }

    fn egg_counts(&mut self, device_id: &str, from: Timestamp, to: Timestamp) -> Result<Vec<TimeSeriesPoint>, ProvisionError> {
        let sim = self.sim.lock().map_err(|e| ProvisionError::Registry(e.to_string()))?;
        Ok(sim.platform().query_series(device_id, Metric::EggCount, from, to)?)
    }
}
