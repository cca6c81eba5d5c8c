use std::sync::Arc;
use std::time::Duration;

use flood_cli::service::{run_session, serve_tcp, serve_ws, ServiceContext, SessionSettings};
use flood_core::{DenoiserConfig, DenoiserParams};
use futures::{SinkExt, StreamExt};
use serde_json::{json, Value};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc;
use tokio::time::timeout;

const LIMIT: Duration = Duration::from_secs(60);

fn ctx() -> ServiceContext {
    let cfg = DenoiserConfig {
        hidden: 16,
        ffn: 24,
        max_context: 32,
        ..DenoiserConfig::toy(2, 2)
    };
    ServiceContext {
        model: Arc::new(DenoiserParams::init(&cfg, 5).unwrap()),
        n_s: 2.0,
        defaults: SessionSettings {
            steps_per_unit: 8,
            window_state_every: 3,
            ..SessionSettings::default()
        },
    }
}

struct Client {
    tx: mpsc::Sender<String>,
    rx: mpsc::Receiver<String>,
}

impl Client {
    fn open(ctx: ServiceContext) -> Self {
        let (tx, in_rx) = mpsc::channel(64);
        let (out_tx, rx) = mpsc::channel(64);
        tokio::spawn(run_session(ctx, in_rx, out_tx));
        Self { tx, rx }
    }

    async fn send(&self, v: Value) {
        self.tx.send(v.to_string()).await.unwrap();
    }

    async fn next(&mut self) -> Value {
        let line = timeout(LIMIT, self.rx.recv()).await.expect("reply in time").expect("session open");
        assert!(!line.contains('\n'));
        serde_json::from_str(&line).unwrap()
    }

    async fn next_of(&mut self, kind: &str) -> Value {
        loop {
            let v = self.next().await;
            if v["type"] == kind {
                return v;
            }
        }
    }

    /// Collects everything up to and including `ended`.
    async fn until_end(&mut self) -> Vec<Value> {
        let mut all = Vec::new();
        loop {
            let v = self.next().await;
            let done = v["type"] == "ended";
            all.push(v);
            if done {
                return all;
            }
        }
    }
}

fn frames(msgs: &[Value]) -> Vec<Value> {
    msgs.iter().filter(|m| m["type"] == "frame").cloned().collect()
}

async fn run_to_end(start: Value) -> Vec<Value> {
    let mut c = Client::open(ctx());
    c.send(start).await;
    c.until_end().await
}

#[tokio::test]
async fn bounded_session_is_gap_free_and_deterministic() {
    let msgs = run_to_end(json!({"type": "start", "seed": 3, "max_frames": 12})).await;
    let end = msgs.last().unwrap();
    assert_eq!(end, &json!({"type": "ended", "reason": "max_frames", "frames": 12}));
    let fr = frames(&msgs);
    assert_eq!(fr.len(), 12);
    for (k, f) in fr.iter().enumerate() {
        assert_eq!(f["frame_index"], k);
        assert_eq!(f["step_index"], 8 + 4 * k);
        assert_eq!(f["control_id"], 0);
        assert_eq!(f["values"].as_array().unwrap().len(), 2);
        assert_eq!(f["alpha_snapshot"][0], 1.0);
    }
    assert_eq!(run_to_end(json!({"type": "start", "seed": 3, "max_frames": 12})).await, msgs);
    let other = run_to_end(json!({"type": "start", "seed": 4, "max_frames": 12})).await;
    assert_ne!(frames(&other), fr);
}

#[tokio::test]
async fn window_state_stays_inside_the_window() {
    let msgs = run_to_end(json!({"type": "start", "max_frames": 10, "control_schedule": [[4, 1]]})).await;
    let states: Vec<&Value> = msgs.iter().filter(|m| m["type"] == "window_state").collect();
    assert!(states.len() >= 10);
    for s in states {
        let m = s["m"].as_u64().unwrap();
        let n = s["n"].as_u64().unwrap();
        assert!(n - m <= 2, "{s}");
        let pending = s["pending_controls"].as_array().unwrap();
        assert!(pending.len() as u64 <= n - m && pending.len() as u64 + 1 >= n - m, "{s}");
        for (i, c) in pending.iter().enumerate() {
            assert_eq!(c.as_u64().unwrap(), u64::from(m + i as u64 >= 4), "{s}");
        }
    }
}

#[tokio::test]
async fn live_switch_replays_exactly() {
    let mut live = Client::open(ctx());
    live.send(json!({"type": "start", "seed": 9, "max_frames": 30, "step_delay_ms": 3})).await;
    loop {
        let v = live.next_of("frame").await;
        if v["frame_index"] == 5 {
            break;
        }
    }
    live.send(json!({"type": "set_control", "control_id": 1})).await;
    let ack = live.next_of("control_ack").await;
    assert_eq!(ack["control_id"], 1);
    let effective = ack["effective_frame"].as_u64().unwrap() as usize;
    assert!(effective > 5);
    let rest = live.until_end().await;
    assert_eq!(rest.last().unwrap()["reason"], "max_frames");
    let live_frames: Vec<Value> = frames(&rest);
    let tail_start = live_frames[0]["frame_index"].as_u64().unwrap() as usize;

    let replay = run_to_end(json!({
        "type": "start", "seed": 9, "max_frames": 30, "control_schedule": [[effective, 1]]
    }))
    .await;
    let replay_frames = frames(&replay);
    assert_eq!(&replay_frames[tail_start..], &live_frames[..]);
    for f in &replay_frames {
        let k = f["frame_index"].as_u64().unwrap() as usize;
        assert_eq!(f["control_id"], u64::from(k >= effective));
    }

    // Frames finalized before the switched frame was activated are untouched.
    let baseline = frames(&run_to_end(json!({"type": "start", "seed": 9, "max_frames": 30})).await);
    let untouched = effective + 1 - 2;
    assert_eq!(&baseline[..untouched], &replay_frames[..untouched]);
    assert_ne!(baseline[effective..], replay_frames[effective..]);
}

#[tokio::test]
async fn protocol_errors_keep_the_session_alive() {
    let mut c = Client::open(ctx());
    c.send(json!({"type": "set_control", "control_id": 1})).await;
    assert!(c.next().await["message"].as_str().unwrap().contains("after start"));
    c.tx.send("{not json".into()).await.unwrap();
    assert_eq!(c.next().await["type"], "error");
    c.send(json!({"type": "dance"})).await;
    assert_eq!(c.next().await["type"], "error");
    c.send(json!({"type": "stop"})).await;
    assert_eq!(c.next().await["type"], "error");
    c.send(json!({"type": "configure", "seed": 1, "volume": 11})).await;
    assert_eq!(c.next().await["type"], "error");
    c.send(json!({"type": "configure", "steps_per_unit": 0})).await;
    assert_eq!(c.next().await["type"], "error");
    c.send(json!({"type": "start", "default_control": 2})).await;
    assert_eq!(c.next().await["type"], "error");

    c.send(json!({"type": "configure", "seed": 1, "step_delay_ms": 2})).await;
    c.send(json!({"type": "start"})).await;
    assert_eq!(c.next_of("frame").await["frame_index"], 0);
    c.send(json!({"type": "start"})).await;
    assert!(c.next_of("error").await["message"].as_str().unwrap().contains("already started"));
    c.send(json!({"type": "set_control", "control_id": 7})).await;
    c.next_of("error").await;
    c.send(json!({"type": "configure", "seed": 2})).await;
    c.next_of("error").await;
    c.send(json!({"type": "stop"})).await;
    let end = c.next_of("ended").await;
    assert_eq!(end["reason"], "stopped");
    assert!(end["frames"].as_u64().unwrap() >= 1);
}

#[tokio::test]
async fn configure_then_start_matches_inline_start() {
    let mut c = Client::open(ctx());
    c.send(json!({"type": "configure", "seed": 12, "max_frames": 6})).await;
    c.send(json!({"type": "start", "cfg_scale": 2.0})).await;
    let a = c.until_end().await;
    let b = run_to_end(json!({"type": "start", "seed": 12, "max_frames": 6, "cfg_scale": 2.0})).await;
    assert_eq!(a, b);
}

async fn tcp_session(addr: std::net::SocketAddr, start: Value) -> Vec<String> {
    let stream = TcpStream::connect(addr).await.unwrap();
    let (read, mut write) = stream.into_split();
    write.write_all(format!("{start}\n").as_bytes()).await.unwrap();
    let mut lines = BufReader::new(read).lines();
    let mut out = Vec::new();
    while let Some(line) = timeout(LIMIT, lines.next_line()).await.unwrap().unwrap() {
        let done = line.contains("\"ended\"");
        out.push(line);
        if done {
            break;
        }
    }
    out
}

#[tokio::test]
async fn concurrent_tcp_sessions_are_independent() {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(serve_tcp(listener, ctx()));
    let a = json!({"type": "start", "seed": 1, "max_frames": 15});
    let b = json!({"type": "start", "seed": 2, "max_frames": 15, "control_schedule": [[3, 1]]});
    let (ra, rb) = tokio::join!(tcp_session(addr, a.clone()), tcp_session(addr, b.clone()));
    assert_eq!(ra.last().unwrap(), r#"{"type":"ended","reason":"max_frames","frames":15}"#);
    assert_ne!(ra, rb);
    assert_eq!(tcp_session(addr, a).await, ra);
    assert_eq!(tcp_session(addr, b).await, rb);
}

#[tokio::test]
async fn websocket_sessions_speak_the_same_protocol() {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(serve_ws(listener, ctx()));
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/ws")).await.unwrap();
    let start = json!({"type": "start", "seed": 1, "max_frames": 15});
    ws.send(tokio_tungstenite::tungstenite::Message::Text(start.to_string())).await.unwrap();
    let mut lines = Vec::new();
    while let Some(msg) = timeout(LIMIT, ws.next()).await.unwrap() {
        let text = msg.unwrap().into_text().unwrap();
        let done = text.contains("\"ended\"");
        lines.push(text);
        if done {
            break;
        }
    }
    let lines: Vec<Value> = lines.iter().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines, run_to_end(start).await);

    let health = http_get(addr, "/health").await;
    assert!(health.starts_with("HTTP/1.1 200"), "{health}");
}

async fn http_get(addr: std::net::SocketAddr, path: &str) -> String {
    let mut s = TcpStream::connect(addr).await.unwrap();
    s.write_all(format!("GET {path} HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n").as_bytes())
        .await
        .unwrap();
    let mut buf = Vec::new();
    tokio::io::AsyncReadExt::read_to_end(&mut s, &mut buf).await.unwrap();
    String::from_utf8_lossy(&buf).into_owned()
}
