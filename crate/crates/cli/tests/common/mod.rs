#![allow(dead_code)]

use std::net::{SocketAddr, TcpListener};
use std::path::PathBuf;
use std::time::Duration;

use reqwest::blocking::Client;

use ovinet_cli::{build_sim, shared, spawn_local, BlankDevice, Bound, SharedSim};
use ovinet_core::Scenario;

pub struct Server {
    pub sim: SharedSim,
    pub addr: Bound,
    pub http: Client,
}

impl Server {
    pub fn start(scenario: Option<&Scenario>, blanks: &[&str]) -> Self {
        let blanks: Vec<BlankDevice> = blanks.iter().map(|b| b.parse().unwrap()).collect();
        let seed = scenario.map_or(11, |s| s.seed);
        let sim = shared(build_sim(scenario, seed, &blanks).unwrap());
        let addr = spawn_local(sim.clone(), 0.0).unwrap();
        let http = Client::builder().timeout(Duration::from_secs(30)).build().unwrap();
        Self { sim, addr, http }
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{path}", self.addr.http)
    }

    pub fn platform(&self) -> String {
        format!("http://{}", self.addr.http)
    }

    pub fn control(&self) -> String {
        self.addr.control.to_string()
    }

    pub fn advance(&self, seconds: f64) {
        let r = self
            .http
            .post(self.url(&format!("/sim/advance?seconds={seconds}")))
            .send()
            .unwrap();
        assert!(r.status().is_success(), "advance failed: {}", r.status());
    }
}

pub fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

/// An address nothing listens on.
pub fn closed_port() -> SocketAddr {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    l.local_addr().unwrap()
}

/// A listener that accepts connections and never answers.
pub fn silent_port() -> SocketAddr {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = l.local_addr().unwrap();
    std::thread::spawn(move || {
        let mut held = Vec::new();
        for s in l.incoming().flatten() {
            held.push(s);
        }
    });
    addr
}
