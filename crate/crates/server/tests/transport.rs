use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::time::{Duration, Instant};

use stepstone::search::SearchParams;
use stepstone::session::{self, ClientBody, ClientMessage, EndpointConfig, EventBody, ServerEvent, SessionParams, SessionStatus, PROTOCOL_VERSION};
use stepstone::terrain::TerrainGenParams;
use stepstone_server::{Server, ServerConfig};

struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    seq: u64,
}

impl Client {
    fn connect(addr: SocketAddr) -> Client {
        let s = TcpStream::connect(addr).unwrap();
        s.set_read_timeout(Some(Duration::from_secs(30))).unwrap();
        Client { reader: BufReader::new(s.try_clone().unwrap()), writer: s, seq: 0 }
    }

    fn send(&mut self, body: ClientBody) -> u64 {
        self.seq += 1;
        let line = serde_json::to_string(&ClientMessage::new(self.seq, body)).unwrap();
        writeln!(self.writer, "{line}").unwrap();
        self.seq
    }

    fn next(&mut self) -> Option<ServerEvent> {
        let mut line = String::new();
        match self.reader.read_line(&mut line) {
            Ok(0) | Err(_) => None,
            Ok(_) => Some(serde_json::from_str(&line).unwrap()),
        }
    }

    /// Sends `body` followed by a get_state barrier and returns every
    /// event up to the barrier's reply.
    fn call(&mut self, body: ClientBody) -> Vec<ServerEvent> {
        self.send(body);
        let barrier = self.send(ClientBody::GetState);
        let mut out = Vec::new();
        loop {
            let e = self.next().expect("connection closed");
            let done = e.seq == Some(barrier);
            out.push(e);
            if done {
                return out;
            }
        }
    }

    fn hello(&mut self) {
        let ev = self.call(ClientBody::Hello { version: PROTOCOL_VERSION });
        assert!(matches!(ev[0].body, EventBody::Welcome { .. }));
    }
}

fn params() -> SessionParams {
    SessionParams {
        terrain: TerrainGenParams { grid_nx: 7, grid_ny: 7, n_removed: 0, ..Default::default() },
        search: SearchParams { max_iterations: 2000, ..Default::default() },
        replan_deadline_ms: None,
        ..Default::default()
    }
}

fn start(config: ServerConfig) -> Server {
    Server::start("127.0.0.1:0", Some("127.0.0.1:0"), config).unwrap()
}

fn last_state(events: &[ServerEvent]) -> &stepstone::session::StateView {
    events
        .iter()
        .rev()
        .find_map(|e| match &e.body {
            EventBody::State(v) => Some(v.as_ref()),
            _ => None,
        })
        .unwrap()
}

#[test]
fn version_mismatch_closes_the_connection() {
    let server = start(ServerConfig::default());
    let mut c = Client::connect(server.tcp_addr());
    c.send(ClientBody::Hello { version: PROTOCOL_VERSION + 1 });
    let e = c.next().unwrap();
    assert!(matches!(e.body, EventBody::Error { code: session::ErrorCode::VersionMismatch, .. }));
    assert!(c.next().is_none());
    server.shutdown();
}

#[test]
fn sessions_on_two_connections_are_isolated() {
    let server = start(ServerConfig::default());
    let mut a = Client::connect(server.tcp_addr());
    let mut b = Client::connect(server.tcp_addr());
    a.hello();
    b.hello();
    a.call(ClientBody::CreateSession { seed: 4, params: Some(params()) });
    b.call(ClientBody::CreateSession { seed: 4, params: Some(params()) });
    let ea = a.call(ClientBody::RemoveStone { id: 10 });
    let eb = b.call(ClientBody::GetState);
    let dead = |v: &stepstone::session::StateView| v.terrain.stones.iter().filter(|s| !s.alive).map(|s| s.id).collect::<Vec<_>>();
    assert!(dead(last_state(&ea)).contains(&10));
    assert!(!dead(last_state(&eb)).contains(&10));
    // Revisions count per connection.
    let revs: Vec<u64> = eb.iter().map(|e| e.revision).collect();
    assert_eq!(revs, (5..5 + revs.len() as u64).collect::<Vec<_>>());
    server.shutdown();
}

#[test]
fn auto_mode_steps_on_a_timer() {
    let server = start(ServerConfig::default());
    let mut c = Client::connect(server.tcp_addr());
    c.hello();
    c.call(ClientBody::CreateSession { seed: 2, params: Some(params()) });
    c.call(ClientBody::SetGoal { stone_ids: None, point: None });
    c.send(ClientBody::Auto { on: true });
    let t = Instant::now();
    let mut finished = false;
    while !finished && t.elapsed() < Duration::from_secs(20) {
        let Some(e) = c.next() else { break };
        if let EventBody::StepResult { finished: f, .. } = e.body {
            assert_eq!(e.seq, None);
            finished = f;
        }
    }
    assert!(finished);
    let ev = c.call(ClientBody::GetState);
    assert_eq!(last_state(&ev).status, SessionStatus::Finished);
    server.shutdown();
}

#[test]
fn recorded_sessions_replay_to_the_same_events() {
    let dir = tempfile::tempdir().unwrap();
    let server = start(ServerConfig { record_dir: Some(dir.path().to_path_buf()), ..Default::default() });
    let mut c = Client::connect(server.tcp_addr());
    c.hello();
    let mut p = params();
    p.adversary_k = 2;
    c.call(ClientBody::CreateSession { seed: 6, params: Some(p) });
    c.call(ClientBody::SetGoal { stone_ids: None, point: None });
    c.call(ClientBody::RemoveStone { id: 24 });
    for _ in 0..6 {
        c.call(ClientBody::Step);
    }
    drop(c);
    server.shutdown();

    let files: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().path()).collect();
    let find = |suffix: &str| files.iter().find(|p| p.to_string_lossy().ends_with(suffix)).unwrap().clone();
    let entries = session::read_replay(BufReader::new(std::fs::File::open(find(".replay.jsonl")).unwrap())).unwrap();
    let logged = session::read_events(BufReader::new(std::fs::File::open(find(".events.jsonl")).unwrap())).unwrap();
    assert!(entries.windows(2).all(|w| w[0].t_ms <= w[1].t_ms));
    assert_eq!(session::replay(&entries, EndpointConfig::default()), logged);
}

fn http(addr: SocketAddr, method: &str, path: &str, body: &str) -> (u16, String) {
    let mut s = TcpStream::connect(addr).unwrap();
    write!(s, "{method} {path} HTTP/1.1\r\nHost: x\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}", body.len()).unwrap();
    let mut raw = String::new();
    s.read_to_string(&mut raw).unwrap();
    let status = raw[9..12].parse().unwrap();
    let body = raw.split_once("\r\n\r\n").map(|(_, b)| b.to_string()).unwrap_or_default();
    (status, body)
}

#[test]
fn request_response_endpoints() {
    let server = start(ServerConfig::default());
    let addr = server.http_addr().unwrap();
    let (code, body) = http(addr, "POST", "/connections", "");
    assert_eq!(code, 201);
    let id = serde_json::from_str::<serde_json::Value>(&body).unwrap()["connection"].as_u64().unwrap();
    let msgs = [
        ClientMessage::new(1, ClientBody::Hello { version: PROTOCOL_VERSION }),
        ClientMessage::new(2, ClientBody::CreateSession { seed: 1, params: Some(params()) }),
        ClientMessage::new(3, ClientBody::SetGoal { stone_ids: None, point: None }),
    ];
    let lines: Vec<String> = msgs.iter().map(|m| serde_json::to_string(m).unwrap()).collect();
    let (code, body) = http(addr, "POST", &format!("/connections/{id}"), &lines.join("\n"));
    assert_eq!(code, 200);
    let events: Vec<ServerEvent> = serde_json::from_str(&body).unwrap();
    assert!(matches!(events[0].body, EventBody::Welcome { .. }));
    assert!(events.iter().any(|e| e.body.kind() == "plan" || e.body.kind() == "plan_unavailable"));
    let step = serde_json::to_string(&ClientMessage::new(4, ClientBody::Step)).unwrap();
    let (_, body) = http(addr, "POST", &format!("/connections/{id}"), &step);
    let events: Vec<ServerEvent> = serde_json::from_str(&body).unwrap();
    assert!(events.iter().all(|e| e.seq == Some(4)));
    assert_eq!(http(addr, "DELETE", &format!("/connections/{id}"), "").0, 204);
    assert_eq!(http(addr, "POST", &format!("/connections/{id}"), &step).0, 404);
    server.shutdown();
}

#[test]
fn shutdown_cancels_a_running_search() {
    let server = start(ServerConfig::default());
    let mut c = Client::connect(server.tcp_addr());
    c.hello();
    let mut p = params();
    p.terrain = TerrainGenParams::default();
    p.search.max_iterations = 50_000_000;
    p.search.keep_paths = usize::MAX;
    c.call(ClientBody::CreateSession { seed: 1, params: Some(p) });
    // Collecting every plan keeps the search busy until cancelled.
    c.send(ClientBody::SetGoal { stone_ids: None, point: None });
    std::thread::sleep(Duration::from_millis(300));
    let t = Instant::now();
    server.shutdown();
    assert!(t.elapsed() < Duration::from_secs(3), "{:?}", t.elapsed());
}

#[test]
fn a_newer_mutation_cancels_the_search_in_flight() {
    let server = start(ServerConfig::default());
    let mut c = Client::connect(server.tcp_addr());
    c.hello();
    let mut p = params();
    p.terrain = TerrainGenParams::default();
    p.search.max_iterations = 50_000_000;
    p.search.keep_paths = usize::MAX;
    p.replan_deadline_ms = Some(3000.0);
    c.call(ClientBody::CreateSession { seed: 1, params: Some(p) });
    c.send(ClientBody::SetGoal { stone_ids: None, point: None });
    std::thread::sleep(Duration::from_millis(200));
    c.send(ClientBody::RemoveStone { id: 70 });
    let t = Instant::now();
    loop {
        let e = c.next().expect("connection closed");
        if let EventBody::SearchProgress { cancelled, .. } = e.body {
            assert!(cancelled);
            assert_eq!(e.seq, Some(c.seq - 1));
            break;
        }
    }
    // The deadline alone would have ended it almost three seconds later.
    assert!(t.elapsed() < Duration::from_millis(1500), "{:?}", t.elapsed());
    server.shutdown();
}
