//! Blocking REST client for the platform registry.

use std::time::Duration;

use reqwest::blocking::{Client, Response};
use reqwest::StatusCode;

use ovinet_core::device::DeviceConfig;
use ovinet_core::platform::{DeviceRecord, Registration, TimeSeriesPoint};
use ovinet_core::provisioner::{ProvisionError, RegistryApi};
use ovinet_core::Timestamp;

use crate::api::ErrorBody;

pub struct HttpRegistry {
    base: String,
    client: Client,
}

impl HttpRegistry {
    pub fn new(base: &str, timeout: Duration) -> Result<Self, ProvisionError> {
        let client = Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ProvisionError::Registry(e.to_string()))?;
        let base = base.trim_end_matches('/');
        let base = if base.contains("://") {
            base.to_string()
        } else {
            format!("http://{base}")
        };
        Ok(Self { base, client })
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }
}

fn transport(e: reqwest::Error) -> ProvisionError {
    if e.is_timeout() {
        ProvisionError::Timeout(format!("platform: {e}"))
    } else {
        ProvisionError::Registry(format!("platform unreachable: {e}"))
    }
}

fn failure(resp: Response) -> ProvisionError {
    let status = resp.status();
    let body: Option<ErrorBody> = resp.json().ok();
    match (status, body) {
        (StatusCode::BAD_REQUEST, Some(b)) if !b.fields.is_empty() => ProvisionError::Validation(b.fields),
        (_, Some(b)) => ProvisionError::Registry(format!("{status}: {}", b.message)),
        (_, None) => ProvisionError::Registry(status.to_string()),
    }
}

impl RegistryApi for HttpRegistry {
    fn register(&mut self, cfg: &DeviceConfig) -> Result<Registration, ProvisionError> {
        let resp = self
            .client
            .post(self.url("/devices"))
            .json(cfg)
            .send()
            .map_err(transport)?;
        match resp.status() {
            StatusCode::CREATED => Ok(Registration::Created),
            StatusCode::OK => Ok(Registration::Unchanged),
            StatusCode::CONFLICT => Err(ProvisionError::Conflict(cfg.device_id.clone())),
            _ => Err(failure(resp)),
        }
    }

    fn device(&mut self, device_id: &str) -> Result<Option<DeviceRecord>, ProvisionError> {
        let resp = self
            .client
            .get(self.url(&format!("/devices/{device_id}")))
            .send()
            .map_err(transport)?;
        match resp.status() {
            StatusCode::OK => resp.json().map(Some).map_err(|e| ProvisionError::Protocol(e.to_string())),
            StatusCode::NOT_FOUND => Ok(None),
            _ => Err(failure(resp)),
        }
    }

    fn egg_counts(&mut self, device_id: &str, from: Timestamp, to: Timestamp) -> Result<Vec<TimeSeriesPoint>, ProvisionError> {
        let resp = self
            .client
            .get(self.url(&format!("/devices/{device_id}/series")))
            .query(&[
                ("key", "egg_count".to_string()),
                ("from", from.to_rfc3339()),
                ("to", to.to_rfc3339()),
            ])
            .send()
            .map_err(transport)?;
        match resp.status() {
            StatusCode::OK => resp.json().map_err(|e| ProvisionError::Protocol(e.to_string())),
            _ => Err(failure(resp)),
        }
    }
}
