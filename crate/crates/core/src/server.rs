//! Location server: ingests `OBS` lines over TCP and answers `QUERY` with
//! the fix for the target's latest completed window.
//!
//! A window is complete once the latest target timestamp seen for that
//! target has reached its end, so replaying a file gives the same answers
//! no matter how fast it is sent. Duplicate observations, keyed by
//! `(receiver, source, seqno)`, keep the earliest timestamp, which makes
//! ingestion order irrelevant.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, ErrorKind, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use crate::error::Result;
use crate::io::{FixRecord, WireMessage};
use crate::model::{AnchorId, BeaconObservation, LocationFix, NodeId, SolverParams, TargetId, TestbedConfig};
use crate::trilateration::locate;
use crate::window::{window_observations_with_origins, ObservationWindow, WINDOW_EDGE_EPS};

const POLL_INTERVAL: Duration = Duration::from_millis(50);

type ObsKey = (NodeId, AnchorId, u64);

/// Deduplicated observations plus the per-target window grid.
#[derive(Debug)]
pub struct WindowStore {
    config: TestbedConfig,
    params: SolverParams,
    window_length: f64,
    /// Observations older than this, relative to the newest timestamp from
    /// the same receiver, are dropped. `None` keeps everything.
    retention: Option<f64>,
    observations: BTreeMap<ObsKey, BeaconObservation>,
    origins: BTreeMap<TargetId, f64>,
    latest_by_receiver: BTreeMap<NodeId, f64>,
}

impl WindowStore {
    pub fn new(config: TestbedConfig, params: SolverParams, window_length: f64) -> Self {
        WindowStore {
            config,
            params,
            window_length,
            retention: None,
            observations: BTreeMap::new(),
            origins: BTreeMap::new(),
            latest_by_receiver: BTreeMap::new(),
        }
    }

    pub fn with_retention(mut self, seconds: f64) -> Self {
        self.retention = Some(seconds);
        self
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn config(&self) -> &TestbedConfig {
        &self.config
    }

    pub fn insert(&mut self, obs: BeaconObservation) {
        self.observations
            .entry(obs.key())
            .and_modify(|o| {
                if obs.timestamp < o.timestamp {
                    *o = obs;
                }
            })
            .or_insert(obs);
        if let Some(t) = obs.target() {
            self.origins
                .entry(t)
                .and_modify(|v| *v = v.min(obs.timestamp))
                .or_insert(obs.timestamp);
        }
        let latest = self.latest_by_receiver.entry(obs.receiver).or_insert(obs.timestamp);
        *latest = latest.max(obs.timestamp);
        if let Some(keep) = self.retention {
            let cutoff = *latest - keep;
            if obs.timestamp >= cutoff {
                let rx = obs.receiver;
                self.observations.retain(|k, o| k.0 != rx || o.timestamp >= cutoff);
            }
        }
    }

    /// Windows of `target` whose end is at or before its latest timestamp.
    pub fn completed_windows(&self, target: TargetId) -> Vec<ObservationWindow> {
        let Some(&origin) = self.origins.get(&target) else {
            return Vec::new();
        };
        let latest = self.latest_by_receiver[&NodeId::Target(target)];
        let mut stream: Vec<BeaconObservation> = self
            .observations
            .values()
            .filter(|o| o.target().is_none_or(|t| t == target))
            .copied()
            .collect();
        stream.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp).then(a.key().cmp(&b.key())));
        let origins = BTreeMap::from([(target, origin)]);
        window_observations_with_origins(&stream, self.window_length, &origins)
            .into_iter()
            .filter(|w| w.end() <= latest + WINDOW_EDGE_EPS)
            .collect()
    }

    /// Fixes for every completed window of `target`, in window order.
    pub fn completed_fixes(&self, target: TargetId) -> Vec<LocationFix> {
        self.completed_windows(target)
            .iter()
            .filter_map(|w| locate(w, &self.config, &self.params))
            .collect()
    }

    /// Fix of the latest completed window that yields one.
    pub fn latest_fix(&self, target: TargetId) -> Option<LocationFix> {
        self.completed_windows(target)
            .iter()
            .rev()
            .find_map(|w| locate(w, &self.config, &self.params))
    }

    /// Applies one protocol line; returns the reply, if any.
    pub fn handle_line(&mut self, line: &str) -> Option<String> {
        if line.trim().is_empty() {
            return None;
        }
        let reply = match WireMessage::parse(line) {
            Ok(WireMessage::Obs(o)) => {
                self.insert(o);
                return None;
            }
            Ok(WireMessage::Query(t)) => match self.latest_fix(t) {
                Some(fix) => WireMessage::Fix(FixRecord::from_fix(&fix, self.config.dimension)),
                None => WireMessage::NoFix(t),
            },
            Ok(other) => WireMessage::Err(format!("clients may only send OBS or QUERY, got {}", kind(&other))),
            Err(msg) => WireMessage::Err(msg),
        };
        Some(reply.to_string())
    }
}

fn kind(m: &WireMessage) -> &'static str {
    match m {
        WireMessage::Obs(_) => "OBS",
        WireMessage::Query(_) => "QUERY",
        WireMessage::Fix(_) => "FIX",
        WireMessage::NoFix(_) => "NOFIX",
        WireMessage::Err(_) => "ERR",
    }
}

pub struct Server {
    listener: TcpListener,
    store: Arc<Mutex<WindowStore>>,
    shutdown: Arc<AtomicBool>,
}

impl Server {
    pub fn bind<A: ToSocketAddrs>(addr: A, store: WindowStore) -> Result<Self> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        Ok(Server { listener, store: Arc::new(Mutex::new(store)), shutdown: Arc::new(AtomicBool::new(false)) })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    /// Setting the flag makes [`Server::run`] return and closes connections.
    pub fn shutdown_handle(&self) -> Arc<AtomicBool> {
        Arc::clone(&self.shutdown)
    }

    pub fn store(&self) -> Arc<Mutex<WindowStore>> {
        Arc::clone(&self.store)
    }

    /// Accepts connections until shutdown, one thread per connection.
    pub fn run(self) -> Result<()> {
        let mut workers = Vec::new();
        while !self.shutdown.load(Ordering::SeqCst) {
            match self.listener.accept() {
                Ok((stream, peer)) => {
                    log::debug!("connection from {peer}");
                    let store = Arc::clone(&self.store);
                    let stop = Arc::clone(&self.shutdown);
                    workers.push(std::thread::spawn(move || {
                        if let Err(e) = serve_connection(stream, &store, &stop) {
                            log::warn!("connection {peer}: {e}");
                        }
                    }));
                    workers.retain(|w| !w.is_finished());
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => std::thread::sleep(POLL_INTERVAL),
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        for w in workers {
            let _ = w.join();
        }
        log::info!("server stopped");
        Ok(())
    }
}

fn serve_connection(stream: TcpStream, store: &Mutex<WindowStore>, stop: &AtomicBool) -> std::io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_read_timeout(Some(POLL_INTERVAL))?;
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    let mut buf = Vec::new();
    loop {
        if stop.load(Ordering::SeqCst) {
            return Ok(());
        }
        match reader.read_until(b'\n', &mut buf) {
            Ok(0) => {
                if !buf.is_empty() {
                    respond(&mut writer, store, &buf)?;
                }
                return Ok(());
            }
            Ok(_) if buf.ends_with(b"\n") => {
                respond(&mut writer, store, &buf)?;
                buf.clear();
            }
            Ok(_) => {}
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut | ErrorKind::Interrupted) => {}
            Err(e) => return Err(e),
        }
    }
}

fn respond(writer: &mut TcpStream, store: &Mutex<WindowStore>, raw: &[u8]) -> std::io::Result<()> {
    let reply = match std::str::from_utf8(raw) {
        Ok(line) => store.lock().expect("store lock poisoned").handle_line(line),
        Err(_) => Some(WireMessage::Err("message is not valid UTF-8".into()).to_string()),
    };
    if let Some(r) = reply {
        writer.write_all(r.as_bytes())?;
        writer.write_all(b"\n")?;
        writer.flush()?;
    }
    Ok(())
}
