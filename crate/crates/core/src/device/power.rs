use serde::{Deserialize, Serialize};

use crate::lpp::LinkKind;

use super::config::Schedule;

/// Current draw of each activity. The idle draw is continuous; activity
/// draws are charged on top of it for their duration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerProfile {
    pub capacity_mah: f64,
    pub idle_ma: f64,
    pub reading_ma: f64,
    pub reading_s: f64,
    pub wifi_tx_ma: f64,
    pub wifi_tx_s: f64,
    pub lora_tx_ma: f64,
    pub lora_tx_s: f64,
}

impl Default for PowerProfile {
    fn default() -> Self {
        Self {
            capacity_mah: 10_000.0,
            idle_ma: 2.0,
            reading_ma: 300.0,
            reading_s: 10.0,
            wifi_tx_ma: 200.0,
            wifi_tx_s: 5.0,
            lora_tx_ma: 120.0,
            lora_tx_s: 3.0,
        }
    }
}

impl PowerProfile {
    pub fn reading_mah(&self) -> f64 {
        self.reading_ma * self.reading_s / 3600.0
    }

    pub fn tx_mah(&self, link: LinkKind) -> f64 {
        match link {
            LinkKind::WifiMqtt => self.wifi_tx_ma * self.wifi_tx_s / 3600.0,
            LinkKind::Lorawan => self.lora_tx_ma * self.lora_tx_s / 3600.0,
        }
    }

    pub fn idle_mah(&self, seconds: f64) -> f64 {
        self.idle_ma * seconds / 3600.0
    }

    /// Charge used per day at a given activity level.
    pub fn daily_mah(&self, link: LinkKind, readings_per_day: f64, tx_per_day: f64) -> f64 {
        self.idle_ma * 24.0 + readings_per_day * self.reading_mah() + tx_per_day * self.tx_mah(link)
    }
}

/// Days a full battery lasts on the given schedule.
pub fn battery_model(link: LinkKind, schedule: Schedule, power: &PowerProfile) -> f64 {
    battery_model_raw(link, schedule.readings_per_day() as f64, schedule.tx_per_day as f64, power)
}

pub fn battery_model_raw(link: LinkKind, readings_per_day: f64, tx_per_day: f64, power: &PowerProfile) -> f64 {
    power.capacity_mah / power.daily_mah(link, readings_per_day, tx_per_day)
}
