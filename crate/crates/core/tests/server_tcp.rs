use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::sync::atomic::Ordering;
use std::thread::JoinHandle;

use tdoa_core::io::{format_observation, WireMessage};
use tdoa_core::server::{Server, WindowStore};
use tdoa_core::sim::{office_schedule, office_targets, office_testbed, simulate, NoiseModel, SimScenario};
use tdoa_core::{BeaconObservation, SolverParams};

struct Running {
    addr: std::net::SocketAddr,
    stop: std::sync::Arc<std::sync::atomic::AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl Drop for Running {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.handle.take() {
            h.join().unwrap();
        }
    }
}

fn start() -> Running {
    let tb = office_testbed();
    let p = SolverParams::for_dimension(tb.dimension);
    let server = Server::bind("127.0.0.1:0", WindowStore::new(tb, p, 18.0)).unwrap();
    let addr = server.local_addr().unwrap();
    let stop = server.shutdown_handle();
    let handle = std::thread::spawn(move || server.run().unwrap());
    Running { addr, stop, handle: Some(handle) }
}

struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Client {
    fn connect(r: &Running) -> Self {
        let s = TcpStream::connect(r.addr).unwrap();
        Client { writer: s.try_clone().unwrap(), reader: BufReader::new(s) }
    }

    fn send(&mut self, line: &str) {
        writeln!(self.writer, "{line}").unwrap();
    }

    fn ask(&mut self, line: &str) -> String {
        self.send(line);
        let mut reply = String::new();
        self.reader.read_line(&mut reply).unwrap();
        reply.trim_end().to_string()
    }
}

fn stream() -> Vec<BeaconObservation> {
    let sc = SimScenario {
        testbed: office_testbed(),
        targets: office_targets()[..1].to_vec(),
        schedule: office_schedule(),
        noise: NoiseModel { timestamp_jitter_sigma: 20e-6, ..NoiseModel::noiseless() },
        seed: 21,
        duration: 54.0,
    };
    simulate(&sc).unwrap().0
}

#[test]
fn query_before_any_data_is_nofix() {
    let r = start();
    let mut c = Client::connect(&r);
    assert_eq!(c.ask("QUERY target 0"), "NOFIX target 0");
}

#[test]
fn errors_keep_the_connection_open() {
    let r = start();
    let mut c = Client::connect(&r);
    assert!(c.ask("HELLO").starts_with("ERR "));
    assert!(c.ask("OBS target 0 src 1 seq 0").starts_with("ERR "));
    assert!(c.ask("FIX target 0").starts_with("ERR "));
    assert_eq!(c.ask("QUERY target 3"), "NOFIX target 3");
}

#[test]
fn duplicates_do_not_change_the_answer() {
    let obs = stream();
    let r = start();
    let mut c = Client::connect(&r);
    for o in &obs {
        c.send(&format_observation(o));
    }
    let first = c.ask("QUERY target 0");
    assert!(matches!(WireMessage::parse(&first), Ok(WireMessage::Fix(_))), "{first}");

    let mut other = Client::connect(&r);
    for o in obs.iter().rev() {
        other.send(&format_observation(o));
    }
    assert_eq!(other.ask("QUERY target 0"), first);
    assert_eq!(c.ask("QUERY target 0"), first);
}
