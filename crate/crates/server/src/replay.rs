use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use doateleop_core::TrialLog;
use serde_json::json;
use tokio::time::Instant;

use crate::live::{parse_mode, reject, send};
use crate::protocol::{ClientMessage, Hello, MapView, ServerMessage, TelemetryMessage};
use crate::{spawn_router, RunningServer, ServeError};

#[derive(Debug, Clone)]
pub struct ReplayConfig {
    /// Playback rate relative to logged time. 0 selects step mode, where
    /// each `step` message releases one frame.
    pub speed: f64,
    pub debug: bool,
    pub close_grace: Duration,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            speed: 1.0,
            debug: false,
            close_grace: Duration::from_secs(1),
        }
    }
}

struct ReplayState {
    log: TrialLog,
    config: ReplayConfig,
}

/// Serves `log` to every client that connects, each from the beginning.
/// Every logged record is sent once, paced by its timestamp.
pub async fn replay_serve(log: TrialLog, addr: SocketAddr, config: ReplayConfig) -> Result<RunningServer, ServeError> {
    if !(config.speed.is_finite() && config.speed >= 0.0) {
        return Err(ServeError::Config("replay speed must be finite and non-negative".into()));
    }
    log.header
        .scenario
        .validate()
        .map_err(|e| ServeError::Config(format!("logged scenario: {e}")))?;
    let state = Arc::new(ReplayState { log, config });
    let router = Router::new()
        .route("/healthz", get(|| async { Json(json!({ "status": "ok", "replay": true })) }))
        .route("/map/{name}", get(map))
        .route("/session", get(session))
        .with_state(state);
    spawn_router(router, addr).await
}

/// Loads and serves a log file. A corrupt or truncated log is an error and
/// nothing is bound.
pub async fn replay_serve_path(
    path: impl AsRef<std::path::Path>,
    addr: SocketAddr,
    config: ReplayConfig,
) -> Result<RunningServer, ServeError> {
    replay_serve(TrialLog::read(path)?, addr, config).await
}

async fn map(State(app): State<Arc<ReplayState>>, Path(name): Path<String>) -> Response {
    let s = &app.log.header.scenario;
    if s.name == name {
        Json(MapView::of(s)).into_response()
    } else {
        (StatusCode::NOT_FOUND, format!("no scenario named `{name}`")).into_response()
    }
}

async fn session(
    ws: WebSocketUpgrade,
    Query(query): Query<HashMap<String, String>>,
    State(app): State<Arc<ReplayState>>,
) -> Response {
    ws.on_upgrade(move |socket| play(socket, query, app))
}

enum Wait {
    Go,
    Closed,
}

/// Reads client messages until one satisfies `want`. Anything else is
/// ignored, except that malformed text gets an error frame.
async fn wait_for(socket: &mut WebSocket, want: fn(&ClientMessage) -> bool) -> Wait {
    loop {
        let text = match socket.recv().await {
            None | Some(Err(_)) | Some(Ok(Message::Close(_))) => return Wait::Closed,
            Some(Ok(Message::Text(t))) => t,
            Some(Ok(_)) => continue,
        };
        match serde_json::from_str::<ClientMessage>(&text) {
            Ok(m) if want(&m) => return Wait::Go,
            Ok(_) => {}
            Err(e) => {
                let message = format!("malformed message: {e}");
                if !send(socket, &ServerMessage::Error { message }).await {
                    return Wait::Closed;
                }
            }
        }
    }
}

async fn play(mut socket: WebSocket, query: HashMap<String, String>, app: Arc<ReplayState>) {
    let scenario = &app.log.header.scenario;
    let mode = match parse_mode(&query, scenario.interface_mode) {
        Ok(m) => m,
        Err(message) => return reject(socket, message).await,
    };
    let hello = Hello {
        session_id: "replay".into(),
        scenario: scenario.name.clone(),
        mode,
        seed: app.log.header.seed,
        time_limit: scenario.time_limit,
        physics_rate: scenario.physics_rate,
        telemetry_rate: scenario.physics_rate,
        resumed: false,
        replay: true,
    };
    if !send(&mut socket, &ServerMessage::Hello(hello)).await {
        return;
    }
    let speed = app.config.speed;
    let frame = |i: usize| {
        let t = TelemetryMessage::from_record(&app.log.records[i], mode, app.config.debug);
        ServerMessage::Telemetry(Box::new(t))
    };

    if speed == 0.0 {
        for i in 0..app.log.records.len() {
            if let Wait::Closed = wait_for(&mut socket, |m| matches!(m, ClientMessage::Step)).await {
                return;
            }
            if !send(&mut socket, &frame(i)).await {
                return;
            }
        }
    } else {
        if let Wait::Closed = wait_for(&mut socket, |m| matches!(m, ClientMessage::Start)).await {
            return;
        }
        let t0 = Instant::now();
        for (i, r) in app.log.records.iter().enumerate() {
            let due = t0 + Duration::from_secs_f64(r.t.max(0.0) / speed);
            tokio::select! {
                _ = tokio::time::sleep_until(due) => {}
                Wait::Closed = wait_for(&mut socket, |_| false) => return,
            }
            if !send(&mut socket, &frame(i)).await {
                return;
            }
        }
    }
    tokio::time::sleep(app.config.close_grace).await;
    let _ = socket.send(Message::Close(None)).await;
}
