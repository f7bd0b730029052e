//! Server and client plumbing behind the `ovinet` binary.

pub mod api;
pub mod client;
pub mod control;

use std::net::SocketAddr;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use ovinet_core::netlink::Network;
use ovinet_core::provisioner::ProvisionError;
use ovinet_core::scenario::{ScriptedScenes, SimError};
use ovinet_core::synthgen::GeneratorParams;
use ovinet_core::time::sim_epoch;
use ovinet_core::{Scenario, Simulation};

pub use api::{router, AppState, SharedSim};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_UNREACHABLE: i32 = 3;
pub const EXIT_TIMEOUT: i32 = 4;

/// Process exit status for a provisioning failure.
pub fn exit_code(e: &ProvisionError) -> i32 {
    match e {
        ProvisionError::Validation(_) | ProvisionError::Conflict(_) => EXIT_VALIDATION,
        ProvisionError::Unreachable(_) => EXIT_UNREACHABLE,
        ProvisionError::Timeout(_) => EXIT_TIMEOUT,
        ProvisionError::DeviceFault(_) | ProvisionError::Registry(_) | ProvisionError::Protocol(_) => EXIT_OTHER,
    }
}

/// An unprovisioned device staged on the server, written `SERIAL` or
/// `SERIAL:EGGS`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlankDevice {
    pub serial: String,
    pub eggs: u32,
}

impl FromStr for BlankDevice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (serial, eggs) = match s.split_once(':') {
            Some((a, b)) => (a, b.parse().map_err(|_| format!("bad egg count in {s:?}"))?),
            None => (s, 0),
        };
        if serial.is_empty() {
            return Err("empty serial".into());
        }
        Ok(Self {
            serial: serial.into(),
            eggs,
        })
    }
}

/// Builds the fleet the server hosts: the scenario's devices, already
/// operating, plus blank devices waiting to be provisioned.
pub fn build_sim(scenario: Option<&Scenario>, seed: u64, blanks: &[BlankDevice]) -> Result<Simulation, SimError> {
    let mut sim = match scenario {
        Some(s) => Simulation::from_scenario(s, seed)?,
        None => Simulation::new(sim_epoch(), Network::new(seed)),
    };
    let params = scenario.and_then(|s| s.generator.clone()).unwrap_or_default();
    for (i, b) in blanks.iter().enumerate() {
        let p = GeneratorParams {
            seed: seed ^ (0xb1a0_0000 + i as u64),
            ..params.clone()
        };
        let mut scenes = ScriptedScenes::new(p, 1, b.serial.clone());
        scenes.set(sim.now(), b.eggs);
        sim.add_scripted_device(&b.serial, scenes);
    }
    Ok(sim)
}

pub fn shared(sim: Simulation) -> SharedSim {
    Arc::new(Mutex::new(sim))
}

/// Addresses a running server ended up bound to.
#[derive(Clone, Copy, Debug)]
pub struct Bound {
    pub http: SocketAddr,
    pub control: SocketAddr,
}

/// Binds both listeners and serves until either fails. `speed` is
/// simulated seconds per wall second; zero leaves the clock to
/// `POST /sim/advance`.
pub async fn serve(
    sim: SharedSim,
    http: SocketAddr,
    control: SocketAddr,
    speed: f64,
    ready: impl FnOnce(Bound),
) -> std::io::Result<()> {
    let http_l = tokio::net::TcpListener::bind(http).await?;
    let ctl_l = tokio::net::TcpListener::bind(control).await?;
    ready(Bound {
        http: http_l.local_addr()?,
        control: ctl_l.local_addr()?,
    });
    if speed > 0.0 {
        tokio::spawn(api::pace(sim.clone(), speed));
    }
    let app = router(AppState::new(sim.clone()));
    tokio::select! {
        r = axum::serve(http_l, app) => r,
        r = control::serve(ctl_l, sim) => r,
    }
}

/// Runs a server on loopback ephemeral ports in a background thread.
pub fn spawn_local(sim: SharedSim, speed: f64) -> std::io::Result<Bound> {
    let (tx, rx) = std::sync::mpsc::channel();
    let any: SocketAddr = "127.0.0.1:0".parse().expect("literal address");
    std::thread::spawn(move || {
        let rt = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
            Ok(rt) => rt,
            Err(e) => {
                let _ = tx.send(Err(e));
                return;
            }
        };
        let err_tx = tx.clone();
        let res = rt.block_on(serve(sim, any, any, speed, move |b| {
            let _ = tx.send(Ok(b));
        }));
        if let Err(e) = res {
            let _ = err_tx.send(Err(e));
        }
    });
    rx.recv().map_err(std::io::Error::other)?
}
