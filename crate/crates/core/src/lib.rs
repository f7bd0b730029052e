//! Desk-scale digital twin of an IoT ovitrap surveillance network.
//!
//! The crate is organised bottom-up:
//!
//! * [`synthgen`] renders synthetic tongue-depressor scenes with exact ground truth.
//! * [`detector`] counts eggs with a grid heat map and centroid extraction.
//! * [`lpp`] defines the telemetry event and its JSON and Cayenne LPP encodings.
//! * [`device`] simulates the trap firmware: schedules, sensors, battery, RPC.
//! * [`netlink`] simulates the WiFi-MQTT broker and the Class-A LoRaWAN path.
//! * [`platform`] ingests telemetry, raises alarms and builds risk maps.
//! * [`provisioner`] configures devices the way the installer app does.
//! * [`scenario`] replays whole-fleet experiments on a virtual clock.

pub mod detector;
pub mod device;
pub mod lpp;
pub mod netlink;
pub mod platform;
pub mod provisioner;
pub mod raster;
pub mod scenario;
pub mod synthgen;
pub mod time;

pub use detector::{DetectorConfig, ReadingResult};
pub use device::{DeviceConfig, DeviceSim};
pub use lpp::{ChannelMap, LppFrame, TelemetryEvent};
pub use platform::Platform;
pub use raster::Raster;
pub use scenario::{Scenario, Simulation};
pub use time::{Clock, Timestamp, VirtualClock};
