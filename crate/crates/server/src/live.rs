use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use doateleop_core::{FlcCommand, InterfaceMode, Scenario, Session, TickRecord};
use serde_json::json;
use tokio::sync::{mpsc, watch};
use tokio::time::MissedTickBehavior;

use crate::protocol::{encode, ClientMessage, Hello, MapView, ServerMessage, TelemetryMessage};
use crate::{spawn_router, RunningServer, ServeError};

#[derive(Debug, Clone)]
pub struct ServerConfig {
    /// Scenarios selectable with `?scenario=<name>`, keyed by name.
    pub scenarios: BTreeMap<String, Scenario>,
    /// Used when the query names no scenario.
    pub default_scenario: String,
    /// Include ground truth in telemetry.
    pub debug: bool,
    pub telemetry_rate: f64,
    /// Simulated seconds per wall-clock second.
    pub time_scale: f64,
    /// How long a detached session waits for its operator to return.
    pub resume_grace: Duration,
    /// Delay between the final frame and closing the socket.
    pub close_grace: Duration,
    /// Finished and abandoned sessions are written here as `<id>.ndjson`.
    pub log_dir: Option<PathBuf>,
}

impl ServerConfig {
    pub fn new(scenario: Scenario) -> Self {
        let name = scenario.name.clone();
        Self {
            scenarios: BTreeMap::from([(name.clone(), scenario)]),
            default_scenario: name,
            debug: false,
            telemetry_rate: 10.0,
            time_scale: 1.0,
            resume_grace: Duration::from_secs(30),
            close_grace: Duration::from_secs(1),
            log_dir: None,
        }
    }

    pub fn with_scenario(mut self, scenario: Scenario) -> Self {
        self.scenarios.insert(scenario.name.clone(), scenario);
        self
    }

    fn validate(&self) -> Result<(), ServeError> {
        if !self.scenarios.contains_key(&self.default_scenario) {
            return Err(ServeError::Config(format!(
                "default scenario `{}` is not registered",
                self.default_scenario
            )));
        }
        for (key, s) in &self.scenarios {
            s.validate().map_err(|e| ServeError::Config(format!("scenario `{key}`: {e}")))?;
        }
        if !(self.telemetry_rate.is_finite() && self.telemetry_rate > 0.0) {
            return Err(ServeError::Config("telemetry rate must be positive".into()));
        }
        if !(self.time_scale.is_finite() && self.time_scale > 0.0) {
            return Err(ServeError::Config("time scale must be positive".into()));
        }
        if let Some(dir) = &self.log_dir {
            std::fs::create_dir_all(dir).map_err(|e| ServeError::LogDir {
                path: dir.clone(),
                message: e.to_string(),
            })?;
        }
        Ok(())
    }
}

/// Starts the live server on `addr` (port 0 picks a free port).
pub async fn serve(config: ServerConfig, addr: SocketAddr) -> Result<RunningServer, ServeError> {
    config.validate()?;
    let state = Arc::new(AppState {
        config,
        sessions: Mutex::new(HashMap::new()),
        next_id: AtomicU64::new(1),
    });
    let router = Router::new()
        .route("/healthz", get(healthz))
        .route("/map/{name}", get(map))
        .route("/session", get(session))
        .with_state(state);
    spawn_router(router, addr).await
}

enum Input {
    Start,
    Control(FlcCommand),
    Mark(u32),
    Attach,
    Detach,
    Abandon,
}

#[derive(Clone)]
struct Snapshot {
    record: TickRecord,
    collisions: u32,
}

struct Slot {
    attached: bool,
    /// Bumped on every attach so a stale reaper can tell it lost the race.
    generation: u64,
    inbox: mpsc::UnboundedSender<Input>,
    snapshot: watch::Receiver<Snapshot>,
    hello: Hello,
}

struct AppState {
    config: ServerConfig,
    sessions: Mutex<HashMap<String, Slot>>,
    next_id: AtomicU64,
}

async fn healthz(State(app): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let sessions = app.sessions.lock().unwrap().len();
    Json(json!({ "status": "ok", "sessions": sessions }))
}

async fn map(State(app): State<Arc<AppState>>, Path(name): Path<String>) -> Response {
    match app.config.scenarios.get(&name) {
        Some(s) => Json(MapView::of(s)).into_response(),
        None => (StatusCode::NOT_FOUND, format!("no scenario named `{name}`")).into_response(),
    }
}

async fn session(
    ws: WebSocketUpgrade,
    Query(query): Query<HashMap<String, String>>,
    State(app): State<Arc<AppState>>,
) -> Response {
    ws.on_upgrade(move |socket| operate(socket, query, app))
}

pub(crate) async fn send(socket: &mut WebSocket, msg: &ServerMessage) -> bool {
    socket.send(Message::Text(encode(msg).into())).await.is_ok()
}

pub(crate) async fn reject(mut socket: WebSocket, message: String) {
    let _ = send(&mut socket, &ServerMessage::Error { message }).await;
    let _ = socket.send(Message::Close(None)).await;
}

pub(crate) fn parse_mode(query: &HashMap<String, String>, default: InterfaceMode) -> Result<InterfaceMode, String> {
    query.get("mode").map_or(Ok(default), |m| m.parse())
}

impl AppState {
    fn attach(&self, id: &str) -> Result<(Hello, mpsc::UnboundedSender<Input>, watch::Receiver<Snapshot>), String> {
        let mut sessions = self.sessions.lock().unwrap();
        let slot = sessions.get_mut(id).ok_or_else(|| format!("no session `{id}` to resume"))?;
        if slot.attached {
            return Err(format!("session `{id}` already has an operator"));
        }
        slot.attached = true;
        slot.generation += 1;
        let _ = slot.inbox.send(Input::Attach);
        let mut hello = slot.hello.clone();
        hello.resumed = true;
        Ok((hello, slot.inbox.clone(), slot.snapshot.clone()))
    }

    fn create(
        &self,
        query: &HashMap<String, String>,
    ) -> Result<(Hello, mpsc::UnboundedSender<Input>, watch::Receiver<Snapshot>), String> {
        let name = query.get("scenario").unwrap_or(&self.config.default_scenario);
        let mut scenario = self
            .config
            .scenarios
            .get(name)
            .cloned()
            .ok_or_else(|| format!("unknown scenario `{name}`"))?;
        scenario.interface_mode = parse_mode(query, scenario.interface_mode)?;
        let seed = match query.get("seed") {
            Some(s) => s.parse::<u64>().map_err(|_| format!("seed `{s}` is not an unsigned integer"))?,
            None => 0,
        };
        let session = Session::new(scenario, seed).map_err(|e| e.to_string())?;
        let id = format!("session-{}", self.next_id.fetch_add(1, Ordering::Relaxed));
        let s = session.scenario();
        let hello = Hello {
            session_id: id.clone(),
            scenario: s.name.clone(),
            mode: s.interface_mode,
            seed,
            time_limit: s.time_limit,
            physics_rate: s.physics_rate,
            telemetry_rate: self.config.telemetry_rate,
            resumed: false,
            replay: false,
        };
        let (inbox, rx) = mpsc::unbounded_channel();
        let (snap_tx, snapshot) = watch::channel(Snapshot {
            record: session.last_frame().clone(),
            collisions: 0,
        });
        let period = Duration::from_secs_f64(s.dt() / self.config.time_scale);
        let log_path = self.config.log_dir.as_ref().map(|d| d.join(format!("{id}.ndjson")));
        tokio::spawn(engine(session, rx, snap_tx, period, log_path));
        self.sessions.lock().unwrap().insert(
            id,
            Slot {
                attached: true,
                generation: 0,
                inbox: inbox.clone(),
                snapshot: snapshot.clone(),
                hello: hello.clone(),
            },
        );
        Ok((hello, inbox, snapshot))
    }

    fn detach(self: &Arc<Self>, id: &str) {
        let mut sessions = self.sessions.lock().unwrap();
        let Some(slot) = sessions.get_mut(id) else { return };
        slot.attached = false;
        let _ = slot.inbox.send(Input::Detach);
        let generation = slot.generation;
        let app = Arc::clone(self);
        let id = id.to_owned();
        tokio::spawn(async move {
            tokio::time::sleep(app.config.resume_grace).await;
            let mut sessions = app.sessions.lock().unwrap();
            let expired = sessions
                .get(&id)
                .is_some_and(|s| !s.attached && s.generation == generation);
            if expired {
                let slot = sessions.remove(&id).unwrap();
                let _ = slot.inbox.send(Input::Abandon);
            }
        });
    }
}

/// Owns one session. Inputs are applied in arrival order before the next
/// tick; the clock only runs while the session is started and attached.
async fn engine(
    mut session: Session,
    mut rx: mpsc::UnboundedReceiver<Input>,
    snapshot: watch::Sender<Snapshot>,
    period: Duration,
    log_path: Option<PathBuf>,
) {
    let mut cmd = FlcCommand::STOP;
    let (mut started, mut attached) = (false, true);
    let mut clock = tokio::time::interval(period);
    clock.set_missed_tick_behavior(MissedTickBehavior::Burst);
    loop {
        let running = started && attached;
        tokio::select! {
            biased;
            input = rx.recv() => {
                match input {
                    None | Some(Input::Abandon) => break,
                    Some(Input::Start) => started = true,
                    Some(Input::Control(c)) => cmd = c,
                    Some(Input::Mark(id)) => session.mark_found(id),
                    Some(Input::Attach) => attached = true,
                    Some(Input::Detach) => {
                        attached = false;
                        cmd = FlcCommand::STOP;
                    }
                }
                if !running && started && attached {
                    clock.reset();
                }
            }
            _ = clock.tick(), if running => {
                let record = match session.tick(&cmd) {
                    Ok(r) => r,
                    Err(_) => break,
                };
                let done = record.status.is_terminal();
                snapshot.send_replace(Snapshot { record, collisions: session.collision_count() });
                if done {
                    break;
                }
            }
        }
    }
    if let Some(path) = log_path {
        let log = session.log(json!({ "source": "server", "mode": session.scenario().interface_mode }));
        if let Err(e) = log.write(&path) {
            eprintln!("doateleop-server: cannot write {}: {e}", path.display());
        }
    }
}

async fn operate(mut socket: WebSocket, query: HashMap<String, String>, app: Arc<AppState>) {
    let joined = match query.get("resume") {
        Some(id) => app.attach(id),
        None => app.create(&query),
    };
    let (hello, inbox, mut snapshot) = match joined {
        Ok(j) => j,
        Err(message) => return reject(socket, message).await,
    };
    let id = hello.session_id.clone();
    let mode = hello.mode;
    let debug = app.config.debug;
    if !send(&mut socket, &ServerMessage::Hello(hello)).await {
        return app.detach(&id);
    }

    let frame = |s: &Snapshot, collided: bool| {
        let mut t = TelemetryMessage::from_record(&s.record, mode, debug);
        t.collision |= collided;
        ServerMessage::Telemetry(Box::new(t))
    };
    let first = snapshot.borrow_and_update().clone();
    let (mut last_tick, mut last_collisions) = (first.record.tick, first.collisions);
    if !send(&mut socket, &frame(&first, false)).await {
        return app.detach(&id);
    }
    if first.record.status.is_terminal() {
        return finish(socket, &app, &id).await;
    }

    let period = 1.0 / app.config.telemetry_rate / app.config.time_scale;
    let mut telemetry = tokio::time::interval(Duration::from_secs_f64(period));
    telemetry.set_missed_tick_behavior(MissedTickBehavior::Skip);
    loop {
        tokio::select! {
            msg = socket.recv() => {
                let text = match msg {
                    None | Some(Err(_)) | Some(Ok(Message::Close(_))) => break,
                    Some(Ok(Message::Text(t))) => t,
                    Some(Ok(Message::Binary(_))) => {
                        let message = "binary frames are not supported".to_owned();
                        if !send(&mut socket, &ServerMessage::Error { message }).await { break }
                        continue;
                    }
                    Some(Ok(_)) => continue,
                };
                match serde_json::from_str::<ClientMessage>(&text) {
                    Ok(ClientMessage::Start) => { let _ = inbox.send(Input::Start); }
                    Ok(ClientMessage::Control(c)) => {
                        let _ = inbox.send(Input::Control(c.command()));
                        if let Some(id) = c.mark_found {
                            let _ = inbox.send(Input::Mark(id));
                        }
                    }
                    Ok(ClientMessage::Step) => {
                        let message = "step is only accepted by replay servers".to_owned();
                        if !send(&mut socket, &ServerMessage::Error { message }).await { break }
                    }
                    Err(e) => {
                        let message = format!("malformed message: {e}");
                        if !send(&mut socket, &ServerMessage::Error { message }).await { break }
                    }
                }
            }
            _ = telemetry.tick() => {
                let s = snapshot.borrow_and_update().clone();
                if s.record.tick == last_tick {
                    continue;
                }
                let collided = s.collisions > last_collisions;
                last_tick = s.record.tick;
                last_collisions = s.collisions;
                if !send(&mut socket, &frame(&s, collided)).await {
                    break;
                }
                if s.record.status.is_terminal() {
                    return finish(socket, &app, &id).await;
                }
            }
        }
    }
    app.detach(&id);
}

async fn finish(mut socket: WebSocket, app: &AppState, id: &str) {
    app.sessions.lock().unwrap().remove(id);
    tokio::time::sleep(app.config.close_grace).await;
    let _ = socket.send(Message::Close(None)).await;
}
