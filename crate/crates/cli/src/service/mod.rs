//! Streaming session service: newline-delimited JSON over TCP and the same
//! messages as WebSocket text frames at `/ws`.

pub mod protocol;
pub mod session;

use std::net::SocketAddr;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::Router;
use futures::{SinkExt, StreamExt};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc;

pub use session::{run_session, ServiceContext, SessionSettings};

/// Outbox depth per session; a full outbox blocks the stepping thread.
pub const OUTBOX_CAPACITY: usize = 64;

fn channels() -> (
    mpsc::Sender<String>,
    mpsc::Receiver<String>,
    mpsc::Sender<String>,
    mpsc::Receiver<String>,
) {
    let (in_tx, in_rx) = mpsc::channel(OUTBOX_CAPACITY);
    let (out_tx, out_rx) = mpsc::channel(OUTBOX_CAPACITY);
    (in_tx, in_rx, out_tx, out_rx)
}

async fn handle_tcp(ctx: ServiceContext, stream: TcpStream) {
    let (read, mut write) = stream.into_split();
    let (in_tx, in_rx, out_tx, mut out_rx) = channels();
    let session = tokio::spawn(run_session(ctx, in_rx, out_tx));
    let writer = tokio::spawn(async move {
        while let Some(line) = out_rx.recv().await {
            if write.write_all(line.as_bytes()).await.is_err() || write.write_all(b"\n").await.is_err() {
                break;
            }
        }
    });
    let mut lines = BufReader::new(read).lines();
    while let Ok(Some(line)) = lines.next_line().await {
        if in_tx.send(line).await.is_err() {
            break;
        }
    }
    drop(in_tx);
    let _ = session.await;
    let _ = writer.await;
}

/// Accepts TCP sessions until the listener fails.
pub async fn serve_tcp(listener: TcpListener, ctx: ServiceContext) -> std::io::Result<()> {
    loop {
        let (stream, _) = listener.accept().await?;
        tokio::spawn(handle_tcp(ctx.clone(), stream));
    }
}

async fn handle_ws(ctx: ServiceContext, socket: WebSocket) {
    let (mut sink, mut source) = socket.split();
    let (in_tx, in_rx, out_tx, mut out_rx) = channels();
    let session = tokio::spawn(run_session(ctx, in_rx, out_tx));
    let writer = tokio::spawn(async move {
        while let Some(line) = out_rx.recv().await {
            if sink.send(Message::Text(line)).await.is_err() {
                break;
            }
        }
    });
    while let Some(Ok(msg)) = source.next().await {
        let text = match msg {
            Message::Text(t) => t,
            Message::Binary(b) => String::from_utf8_lossy(&b).into_owned(),
            Message::Close(_) => break,
            _ => continue,
        };
        if in_tx.send(text).await.is_err() {
            break;
        }
    }
    drop(in_tx);
    let _ = session.await;
    let _ = writer.await;
}

async fn ws_upgrade(State(ctx): State<ServiceContext>, ws: WebSocketUpgrade) -> impl IntoResponse {
    ws.on_upgrade(move |socket| handle_ws(ctx, socket))
}

async fn health() -> &'static str {
    "ok"
}

pub fn ws_router(ctx: ServiceContext) -> Router {
    Router::new()
        .route("/ws", get(ws_upgrade))
        .route("/health", get(health))
        .with_state(ctx)
}

/// Serves WebSocket sessions until the listener fails.
pub async fn serve_ws(listener: TcpListener, ctx: ServiceContext) -> std::io::Result<()> {
    axum::serve(listener, ws_router(ctx)).await
}

/// Binds both transports and runs them until either stops.
pub async fn serve(ctx: ServiceContext, tcp: SocketAddr, ws: Option<SocketAddr>) -> anyhow::Result<()> {
    let tcp_listener = TcpListener::bind(tcp).await?;
    eprintln!("tcp sessions on {}", tcp_listener.local_addr()?);
    match ws {
        Some(addr) => {
            let ws_listener = TcpListener::bind(addr).await?;
            eprintln!("websocket sessions on ws://{}/ws", ws_listener.local_addr()?);
            tokio::select! {
                r = serve_tcp(tcp_listener, ctx.clone()) => r?,
                r = serve_ws(ws_listener, ctx) => r?,
            }
        }
        None => serve_tcp(tcp_listener, ctx).await?,
    }
    Ok(())
}
