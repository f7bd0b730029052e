use chrono::Duration;
use serde::{Deserialize, Serialize};

use crate::device::{RpcCommand, RpcKind, RpcResponse};
use crate::lpp::LinkKind;
use crate::time::Timestamp;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RpcStatus {
    Pending,
    Delivered,
    Answered,
    Rejected,
    Superseded,
    Timeout,
}

impl RpcStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, Self::Answered | Self::Rejected | Self::Superseded | Self::Timeout)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Pending => "pending",
            Self::Delivered => "delivered",
            Self::Answered => "answered",
            Self::Rejected => "rejected",
            Self::Superseded => "superseded",
            Self::Timeout => "timeout",
        }
    }
}

/// How long a command may stay unanswered. LoRaWAN commands wait for the
/// device's next uplink, which can be a full day away.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RpcTimeouts {
    pub wifi_s: i64,
    pub lorawan_s: i64,
}

impl Default for RpcTimeouts {
    fn default() -> Self {
        Self {
            wifi_s: 60,
            lorawan_s: 25 * 3600,
        }
    }
}

impl RpcTimeouts {
    pub fn for_link(&self, link: LinkKind) -> Duration {
        Duration::seconds(match link {
            LinkKind::WifiMqtt => self.wifi_s,
            LinkKind::Lorawan => self.lorawan_s,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RpcRecord {
    pub request_id: String,
    pub device_id: String,
    #[serde(flatten)]
    pub kind: RpcKind,
    pub status: RpcStatus,
    pub issued_at: Timestamp,
    pub deadline: Timestamp,
    pub updated_at: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<RpcResponse>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl RpcRecord {
    pub fn command(&self) -> RpcCommand {
        RpcCommand {
            request_id: self.request_id.clone(),
            kind: self.kind,
            issued_at: self.issued_at,
        }
    }

    pub fn egg_count(&self) -> Option<u32> {
        self.response.as_ref().and_then(RpcResponse::egg_count)
    }
}
