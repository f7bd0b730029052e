//! Loopback control channel: one JSON request per line, one JSON reply per
//! line.

use std::io::{self, BufRead, BufReader, ErrorKind, Write};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader as AsyncBufReader};
use tokio::net::TcpListener;

use ovinet_core::provisioner::{ControlChannel, ProvisionError};
use ovinet_core::scenario::{ControlRequest, ControlResponse};

use crate::api::SharedSim;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub device: String,
    pub request: ControlRequest,
}

/// Accepts control sessions until the listener fails.
pub async fn serve(listener: TcpListener, sim: SharedSim) -> io::Result<()> {
    loop {
        let (sock, peer) = listener.accept().await?;
        let sim = sim.clone();
        tokio::spawn(async move {
            if let Err(e) = session(sock, sim).await {
                log::warn!("control session {peer}: {e}");
            }
        });
    }
}

async fn session(sock: tokio::net::TcpStream, sim: SharedSim) -> io::Result<()> {
    let (rd, mut wr) = sock.into_split();
    let mut lines = AsyncBufReader::new(rd).lines();
    while let Some(line) = lines.next_line().await? {
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<Envelope>(&line) {
            Ok(env) => {
                let sim = sim.clone();
                tokio::task::spawn_blocking(move || match sim.lock() {
                    Ok(mut s) => s.control(&env.device, env.request),
                    Err(_) => error_reply("fault", "simulation lock poisoned"),
                })
                .await
                .unwrap_or_else(|e| error_reply("fault", e.to_string()))
            }
            Err(e) => error_reply("protocol", format!("malformed request: {e}")),
        };
        let mut out = serde_json::to_string(&reply).map_err(io::Error::other)?;
        out.push('\n');
        wr.write_all(out.as_bytes()).await?;
    }
    Ok(())
}

fn error_reply(code: &str, message: impl Into<String>) -> ControlResponse {
    ControlResponse::Error {
        code: code.into(),
        message: message.into(),
    }
}

/// Client side of the control channel for one device.
pub struct TcpControl {
    addr: SocketAddr,
    serial: String,
    timeout: Duration,
    conn: Option<BufReader<TcpStream>>,
}

impl TcpControl {
    pub fn new(addr: &str, serial: &str, timeout: Duration) -> Result<Self, ProvisionError> {
        let addr = addr
            .to_socket_addrs()
            .map_err(|e| ProvisionError::Unreachable(format!("{addr}: {e}")))?
            .next()
            .ok_or_else(|| ProvisionError::Unreachable(format!("{addr}: no address")))?;
        Ok(Self {
            addr,
            serial: serial.into(),
            timeout,
            conn: None,
        })
    }

    fn connect(&mut self) -> Result<&mut BufReader<TcpStream>, ProvisionError> {
        if self.conn.is_none() {
            let s = TcpStream::connect_timeout(&self.addr, self.timeout)
                .map_err(|e| ProvisionError::Unreachable(format!("{}: {e}", self.addr)))?;
            s.set_read_timeout(Some(self.timeout))
                .and_then(|_| s.set_write_timeout(Some(self.timeout)))
                .map_err(|e| ProvisionError::Unreachable(e.to_string()))?;
            self.conn = Some(BufReader::new(s));
        }
        Ok(self.conn.as_mut().expect("connected"))
    }

    fn exchange(&mut self, line: &str) -> Result<String, ProvisionError> {
        let timeout = self.timeout;
        let conn = self.connect()?;
        let io_err = |e: io::Error| match e.kind() {
            ErrorKind::WouldBlock | ErrorKind::TimedOut => {
                ProvisionError::Timeout(format!("no reply within {:.1} s", timeout.as_secs_f64()))
            }
            _ => ProvisionError::Unreachable(e.to_string()),
        };
        conn.get_mut().write_all(line.as_bytes()).map_err(io_err)?;
        let mut reply = String::new();
        let n = conn.read_line(&mut reply).map_err(io_err)?;
        if n == 0 {
            return Err(ProvisionError::Unreachable("control channel closed".into()));
        }
        Ok(reply)
    }
}

impl ControlChannel for TcpControl {
    fn request(&mut self, req: ControlRequest) -> Result<ControlResponse, ProvisionError> {
        let env = Envelope {
            device: self.serial.clone(),
            request: req,
        };
        let mut line = serde_json::to_string(&env).map_err(|e| ProvisionError::Protocol(e.to_string()))?;
        line.push('\n');
        let reply = self.exchange(&line).inspect_err(|_| self.conn = None)?;
        match serde_json::from_str(&reply).map_err(|e| ProvisionError::Protocol(format!("bad reply: {e}")))? {
            ControlResponse::Error { code, message } if code == "unreachable" => Err(ProvisionError::Unreachable(message)),
            other => Ok(other),
        }
    }
}
