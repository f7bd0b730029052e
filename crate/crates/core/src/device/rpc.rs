use serde::{Deserialize, Serialize};

use crate::lpp::TelemetryReading;
use crate::time::Timestamp;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RpcKind {
    ReadOnDemand,
    Reschedule { tx_per_day: u32, reading_period_h: u32 },
}

impl RpcKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::ReadOnDemand => "read_on_demand",
            Self::Reschedule { .. } => "reschedule",
        }
    }
}

/// A platform-to-device command.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RpcCommand {
    pub request_id: String,
    #[serde(flatten)]
    pub kind: RpcKind,
    pub issued_at: Timestamp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RpcOutcome {
    Reading { reading: TelemetryReading },
    Rescheduled { tx_per_day: u32, reading_period_h: u32 },
    Rejected { reason: String },
}

/// The device's answer, correlated by `request_id`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RpcResponse {
    pub device_id: String,
    pub request_id: String,
    pub ts: Timestamp,
    #[serde(flatten)]
    pub outcome: RpcOutcome,
}

impl RpcResponse {
    pub fn egg_count(&self) -> Option<u32> {
        match &self.outcome {
            RpcOutcome::Reading { reading } => Some(reading.egg_count),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::sim_epoch;

    #[test]
    fn command_json_shape() {
        let cmd = RpcCommand {
            request_id: "rpc-7".into(),
            kind: RpcKind::Reschedule {
                tx_per_day: 4,
                reading_period_h: 6,
            },
            issued_at: sim_epoch(),
        };
        let text = serde_json::to_string(&cmd).unwrap();
        assert_eq!(
            text,
            r#"{"request_id":"rpc-7","kind":"reschedule","tx_per_day":4,"reading_period_h":6,"issued_at":"2023-03-01T00:00:00Z"}"#
        );
        assert_eq!(serde_json::from_str::<RpcCommand>(&text).unwrap(), cmd);
    }
}
