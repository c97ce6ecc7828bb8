//! WebSocket steering service. Each connection owns one session; the socket
//! handler serialises stepping and message handling for it.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::{Html, IntoResponse};
use axum::routing::get;
use axum::Router;
use condgen_core::agent::Agent;
use condgen_core::env::EnvSpec;
use condgen_core::par::mix_seed;
use condgen_core::session::{ServerMsg, SteerSession, MAX_FRAME_BYTES};
use log::{info, warn};
use tower_http::services::ServeDir;

pub struct ServeOptions {
    pub env: Arc<EnvSpec>,
    pub agent: Arc<dyn Agent>,
    pub bind: String,
    pub static_dir: Option<PathBuf>,
    pub step_interval_ms: u64,
    pub seed: u64,
}

struct Shared {
    env: Arc<EnvSpec>,
    agent: Arc<dyn Agent>,
    step_interval_ms: u64,
    seed: u64,
    next_id: AtomicU64,
}

const FALLBACK_INDEX: &str = "<!doctype html><title>condgen</title>\
<p>Steering service is running. Connect a client to <code>/ws</code>, \
or start the server with <code>--static DIR</code> to serve the UI.</p>";

pub async fn run(opts: ServeOptions) -> anyhow::Result<()> {
    let shared = Arc::new(Shared {
        env: opts.env,
        agent: opts.agent,
        step_interval_ms: opts.step_interval_ms,
        seed: opts.seed,
        next_id: AtomicU64::new(1),
    });
    let mut app = Router::new()
        .route("/ws", get(ws_handler))
        .with_state(shared);
    app = match opts.static_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app.route("/", get(|| async { Html(FALLBACK_INDEX) })),
    };
    let listener = tokio::net::TcpListener::bind(&opts.bind)
        .await
        .with_context(|| format!("binding {}", opts.bind))?;
    let addr: SocketAddr = listener.local_addr()?;
    // tests and scripts read this line to find the port
    println!("listening on {addr}");
    info!("steering service on http://{addr}/ (socket at /ws)");
    axum::serve(listener, app).await?;
    Ok(())
}

async fn ws_handler(ws: WebSocketUpgrade, State(shared): State<Arc<Shared>>) -> impl IntoResponse {
    ws.max_message_size(MAX_FRAME_BYTES)
        .max_frame_size(MAX_FRAME_BYTES)
        .on_upgrade(move |socket| session_loop(socket, shared))
}

async fn send(socket: &mut WebSocket, msg: &ServerMsg) -> bool {
    socket
        .send(Message::Text(msg.to_json().into()))
        .await
        .is_ok()
}

async fn session_loop(mut socket: WebSocket, shared: Arc<Shared>) {
    let id = shared.next_id.fetch_add(1, Ordering::Relaxed);
    let mut session = match SteerSession::new(
        id,
        shared.env.clone(),
        shared.agent.clone(),
        shared.step_interval_ms,
        mix_seed(shared.seed, id),
    ) {
        Ok(s) => s,
        Err(e) => {
            let _ = send(&mut socket, &ServerMsg::error("internal", e.to_string())).await;
            return;
        }
    };
    info!("session {id} opened");
    if !send(&mut socket, &session.hello()).await
        || !send(&mut socket, &session.state_frame()).await
    {
        return;
    }
    let mut next_tick = tokio::time::Instant::now() + Duration::from_millis(session.interval_ms());
    loop {
        tokio::select! {
            incoming = socket.recv() => {
                let text = match incoming {
                    Some(Ok(Message::Text(t))) => t.to_string(),
                    Some(Ok(Message::Close(_))) | None => break,
                    Some(Ok(Message::Binary(_))) => {
                        if !send(&mut socket, &ServerMsg::error("malformed", "expected a text frame")).await {
                            break;
                        }
                        continue;
                    }
                    Some(Ok(_)) => continue,
                    Some(Err(e)) => {
                        warn!("session {id}: {e}");
                        break;
                    }
                };
                let before = session.interval_ms();
                for reply in session.handle_text(&text) {
                    if !send(&mut socket, &reply).await {
                        return;
                    }
                }
                if session.interval_ms() != before {
                    next_tick = tokio::time::Instant::now() + Duration::from_millis(session.interval_ms());
                }
            }
            _ = tokio::time::sleep_until(next_tick) => {
                next_tick += Duration::from_millis(session.interval_ms());
                let now = tokio::time::Instant::now();
                if next_tick < now {
                    next_tick = now + Duration::from_millis(session.interval_ms());
                }
                match session.tick() {
                    Ok(Some(frame)) => {
                        if !send(&mut socket, &frame).await {
                            break;
                        }
                    }
                    Ok(None) => {}
                    Err(e) => {
                        let _ = send(&mut socket, &ServerMsg::error("internal", e.to_string())).await;
                        break;
                    }
                }
            }
        }
    }
    info!("session {id} closed");
}
