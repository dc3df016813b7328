//! Network front end for the session protocol.
//!
//! Two transports share one state machine:
//!
//! * a TCP listener speaking newline-delimited JSON, one session per
//!   connection, with auto-stepping and search cancellation;
//! * an HTTP listener (`POST /connections`, `POST /connections/{id}`,
//!   `DELETE /connections/{id}`) for clients that cannot hold a stream.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use stepstone::session::{ClientBody, ClientMessage, Endpoint, EndpointConfig, ReplayEntry, ServerEvent, PROTOCOL_VERSION};

#[derive(Clone, Default)]
pub struct ServerConfig {
    pub endpoint: EndpointConfig,
    /// Each TCP connection writes `conn-<n>.replay.jsonl` and
    /// `conn-<n>.events.jsonl` here.
    pub record_dir: Option<PathBuf>,
}

struct Shared {
    config: ServerConfig,
    stop: AtomicBool,
    next_conn: AtomicU64,
    /// Cancel flags of every live TCP connection.
    cancels: Mutex<HashMap<u64, Arc<Mutex<Arc<AtomicBool>>>>>,
    http_conns: Mutex<HashMap<u64, Arc<Mutex<Endpoint>>>>,
}

/// A running server. Dropping it without `shutdown` leaves the threads
/// running until the process exits.
pub struct Server {
    shared: Arc<Shared>,
    tcp_addr: SocketAddr,
    http_addr: Option<SocketAddr>,
    http: Option<Arc<tiny_http::Server>>,
    threads: Vec<JoinHandle<()>>,
    conn_threads: Arc<Mutex<Vec<JoinHandle<()>>>>,
}

impl Server {
    /// Binds the TCP listener and, when given, the HTTP listener. Port 0
    /// picks a free port; see `tcp_addr` and `http_addr`.
    pub fn start(tcp: impl ToSocketAddrs, http: Option<&str>, config: ServerConfig) -> io::Result<Server> {
        if let Some(dir) = &config.record_dir {
            std::fs::create_dir_all(dir)?;
        }
        let listener = TcpListener::bind(tcp)?;
        let tcp_addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            config,
            stop: AtomicBool::new(false),
            next_conn: AtomicU64::new(1),
            cancels: Mutex::new(HashMap::new()),
            http_conns: Mutex::new(HashMap::new()),
        });
        let conn_threads = Arc::new(Mutex::new(Vec::new()));
        let mut threads = Vec::new();
        {
            let shared = shared.clone();
            let conn_threads = conn_threads.clone();
            threads.push(thread::spawn(move || accept_loop(listener, shared, conn_threads)));
        }
        let (http, http_addr) = match http {
            Some(addr) => {
                let server = Arc::new(tiny_http::Server::http(addr).map_err(io::Error::other)?);
                let addr = server.server_addr().to_ip();
                let s = server.clone();
                let shared = shared.clone();
                threads.push(thread::spawn(move || http_loop(s, shared)));
                (Some(server), addr)
            }
            None => (None, None),
        };
        Ok(Server { shared, tcp_addr, http_addr, http, threads, conn_threads })
    }

    pub fn tcp_addr(&self) -> SocketAddr {
        self.tcp_addr
    }

    pub fn http_addr(&self) -> Option<SocketAddr> {
        self.http_addr
    }

    /// Stops accepting, cancels every in-flight search and waits for the
    /// connection threads to finish their current message.
    pub fn shutdown(mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        for flag in self.shared.cancels.lock().unwrap().values() {
            flag.lock().unwrap().store(true, Ordering::SeqCst);
        }
        // Wakes the blocking accept.
        let _ = TcpStream::connect(self.tcp_addr);
        if let Some(h) = &self.http {
            h.unblock();
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        let conns: Vec<_> = self.conn_threads.lock().unwrap().drain(..).collect();
        for t in conns {
            let _ = t.join();
        }
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>, conn_threads: Arc<Mutex<Vec<JoinHandle<()>>>>) {
    for stream in listener.incoming() {
        if shared.stop.load(Ordering::SeqCst) {
            break;
        }
        let Ok(stream) = stream else { continue };
        let id = shared.next_conn.fetch_add(1, Ordering::SeqCst);
        let shared = shared.clone();
        let t = thread::spawn(move || {
            if let Err(e) = serve_connection(id, stream, &shared) {
                eprintln!("connection {id}: {e}");
            }
            shared.cancels.lock().unwrap().remove(&id);
        });
        let mut threads = conn_threads.lock().unwrap();
        threads.retain(|t| !t.is_finished());
        threads.push(t);
    }
}

enum Frame {
    Message(ClientMessage),
    Malformed(String),
}

struct Recorder {
    start: Instant,
    messages: BufWriter<File>,
    events: BufWriter<File>,
}

impl Recorder {
    fn open(dir: &std::path::Path, id: u64) -> io::Result<Self> {
        Ok(Self {
            start: Instant::now(),
            messages: BufWriter::new(File::create(dir.join(format!("conn-{id}.replay.jsonl")))?),
            events: BufWriter::new(File::create(dir.join(format!("conn-{id}.events.jsonl")))?),
        })
    }

    fn message(&mut self, msg: &ClientMessage) -> io::Result<()> {
        let entry = ReplayEntry { t_ms: self.start.elapsed().as_secs_f64() * 1e3, message: msg.clone() };
        writeln!(self.messages, "{}", serde_json::to_string(&entry)?)?;
        self.messages.flush()
    }

    fn events(&mut self, events: &[ServerEvent]) -> io::Result<()> {
        for e in events {
            writeln!(self.events, "{}", serde_json::to_string(e)?)?;
        }
        self.events.flush()
    }
}

fn serve_connection(id: u64, stream: TcpStream, shared: &Shared) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream.try_clone()?);
    let current = Arc::new(Mutex::new(Arc::new(AtomicBool::new(false))));
    shared.cancels.lock().unwrap().insert(id, current.clone());
    // Replanning messages received but not yet handled.
    let queued = Arc::new(AtomicUsize::new(0));
    let (tx, rx) = mpsc::channel::<Frame>();

    let reader_thread = {
        let current = current.clone();
        let queued = queued.clone();
        thread::spawn(move || {
            for line in reader.lines() {
                let Ok(line) = line else { break };
                if line.trim().is_empty() {
                    continue;
                }
                let frame = match serde_json::from_str::<ClientMessage>(&line) {
                    Ok(msg) => {
                        if msg.body.replans() {
                            queued.fetch_add(1, Ordering::SeqCst);
                            current.lock().unwrap().store(true, Ordering::SeqCst);
                        }
                        Frame::Message(msg)
                    }
                    Err(_) => Frame::Malformed(line),
                };
                if tx.send(frame).is_err() {
                    break;
                }
            }
        })
    };

    let mut endpoint = Endpoint::new(shared.config.endpoint.clone());
    let mut recorder = match &shared.config.record_dir {
        Some(dir) => Some(Recorder::open(dir, id)?),
        None => None,
    };
    let mut next_tick: Option<Instant> = None;
    let result = loop {
        if shared.stop.load(Ordering::SeqCst) {
            break Ok(());
        }
        let wait = match next_tick {
            Some(t) => t.saturating_duration_since(Instant::now()).min(Duration::from_millis(50)),
            None => Duration::from_millis(50),
        };
        let (events, close) = match rx.recv_timeout(wait) {
            Ok(Frame::Message(msg)) => {
                let flag = Arc::new(AtomicBool::new(false));
                if msg.body.replans() {
                    // Another replanning message is already waiting, so this
                    // search would be thrown away.
                    if queued.fetch_sub(1, Ordering::SeqCst) > 1 {
                        flag.store(true, Ordering::SeqCst);
                    }
                }
                *current.lock().unwrap() = flag.clone();
                if let Some(r) = recorder.as_mut() {
                    r.message(&msg)?;
                }
                let hello = matches!(msg.body, ClientBody::Hello { .. });
                let events = endpoint.handle_with(msg, Some(&flag));
                (events, hello && !endpoint.greeted())
            }
            Ok(Frame::Malformed(line)) => (endpoint.handle_line(&line, None), false),
            Err(RecvTimeoutError::Timeout) => {
                let due = next_tick.is_some_and(|t| Instant::now() >= t);
                if !due {
                    next_tick = schedule(&endpoint, next_tick);
                    continue;
                }
                let flag = Arc::new(AtomicBool::new(false));
                *current.lock().unwrap() = flag.clone();
                if let Some(r) = recorder.as_mut() {
                    // Timer steps replay as unsequenced step messages.
                    r.message(&ClientMessage { seq: None, body: ClientBody::Step })?;
                }
                next_tick = None;
                (endpoint.tick(Some(&flag)), false)
            }
            Err(RecvTimeoutError::Disconnected) => break Ok(()),
        };
        if let Some(r) = recorder.as_mut() {
            r.events(&events)?;
        }
        if let Err(e) = write_events(&mut writer, &events) {
            break Err(e);
        }
        if close {
            break Ok(());
        }
        next_tick = schedule(&endpoint, next_tick);
    };
    let _ = stream.shutdown(Shutdown::Both);
    let _ = reader_thread.join();
    result
}

fn schedule(endpoint: &Endpoint, current: Option<Instant>) -> Option<Instant> {
    let period = endpoint.auto_period()?;
    Some(current.unwrap_or_else(|| Instant::now() + Duration::from_secs_f64(period)))
}

fn write_events(w: &mut impl Write, events: &[ServerEvent]) -> io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut *w, e)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

fn http_loop(server: Arc<tiny_http::Server>, shared: Arc<Shared>) {
    for request in server.incoming_requests() {
        if shared.stop.load(Ordering::SeqCst) {
            break;
        }
        let shared = shared.clone();
        thread::spawn(move || respond(request, &shared));
    }
}

fn json_header() -> tiny_http::Header {
    tiny_http::Header::from_bytes("Content-Type", "application/json").unwrap()
}

fn respond(mut request: tiny_http::Request, shared: &Shared) {
    let mut body = String::new();
    let (status, payload) = match request.as_reader().read_to_string(&mut body) {
        Err(e) => (400, serde_json::json!({ "error": e.to_string() }).to_string()),
        Ok(_) => route(request.method(), request.url(), &body, shared),
    };
    let response = tiny_http::Response::from_string(payload)
        .with_status_code(status)
        .with_header(json_header())
        .with_header(tiny_http::Header::from_bytes("Access-Control-Allow-Origin", "*").unwrap())
        .with_header(tiny_http::Header::from_bytes("Access-Control-Allow-Methods", "GET, POST, DELETE, OPTIONS").unwrap())
        .with_header(tiny_http::Header::from_bytes("Access-Control-Allow-Headers", "Content-Type").unwrap());
    let _ = request.respond(response);
}

fn route(method: &tiny_http::Method, url: &str, body: &str, shared: &Shared) -> (u16, String) {
    use tiny_http::Method;
    let path: Vec<&str> = url.split('?').next().unwrap_or("").split('/').filter(|s| !s.is_empty()).collect();
    let not_found = (404, serde_json::json!({ "error": "not found" }).to_string());
    match (method, path.as_slice()) {
        (Method::Options, _) => (204, String::new()),
        (Method::Get, ["health"]) => (200, serde_json::json!({ "version": PROTOCOL_VERSION }).to_string()),
        (Method::Post, ["connections"]) => {
            let id = shared.next_conn.fetch_add(1, Ordering::SeqCst);
            let ep = Endpoint::new(shared.config.endpoint.clone());
            shared.http_conns.lock().unwrap().insert(id, Arc::new(Mutex::new(ep)));
            (201, serde_json::json!({ "connection": id }).to_string())
        }
        (Method::Post, ["connections", id]) => {
            let Some(ep) = id.parse().ok().and_then(|id: u64| shared.http_conns.lock().unwrap().get(&id).cloned()) else {
                return not_found;
            };
            let mut ep = ep.lock().unwrap();
            // One message per line; the reply holds every event in order.
            let mut events = Vec::new();
            for line in body.lines().filter(|l| !l.trim().is_empty()) {
                events.extend(ep.handle_line(line, None));
            }
            (200, serde_json::to_string(&events).expect("events serialize"))
        }
        (Method::Delete, ["connections", id]) => match id.parse().ok().and_then(|id: u64| shared.http_conns.lock().unwrap().remove(&id)) {
            Some(_) => (204, String::new()),
            None => not_found,
        },
        _ => not_found,
    }
}
