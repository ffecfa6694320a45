mod common;

use std::time::Duration;

use common::*;
use doateleop_core::{FlcCommand, InterfaceMode, Scenario, Session, TrialLog};
use doateleop_server::{serve, ServerConfig};
use serde_json::{json, Value};

fn config(time_scale: f64) -> ServerConfig {
    let mut c = ServerConfig::new(Scenario::default_maze());
    c.time_scale = time_scale;
    c.close_grace = Duration::from_millis(50);
    c
}

fn control(v_forward: f64, v_lateral: f64, yaw: f64) -> Value {
    json!({"type": "control", "v_forward": v_forward, "v_lateral": v_lateral, "camera_yaw_rate": yaw})
}

#[tokio::test]
async fn health_and_map_endpoints() {
    let server = serve(config(1.0), any_addr()).await.unwrap();
    let addr = server.local_addr();
    let (code, body) = http_get(addr, "/healthz").await;
    assert_eq!(code, 200);
    assert_eq!(serde_json::from_str::<Value>(&body).unwrap()["status"], "ok");

    let (code, body) = http_get(addr, "/map/default-maze").await;
    assert_eq!(code, 200);
    let map: Value = serde_json::from_str(&body).unwrap();
    assert_eq!(map["walls"].as_array().unwrap().len(), Scenario::default_maze().map.walls.len());
    let mut k = Vec::new();
    keys(&map, &mut k);
    assert!(!k.iter().any(|k| k == "ap" || k == "propagation"), "{k:?}");

    assert_eq!(http_get(addr, "/map/nowhere").await.0, 404);
    server.shutdown().await.unwrap();
}

#[tokio::test]
async fn idle_session_times_out_at_the_limit() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(400.0);
    c.log_dir = Some(dir.path().to_owned());
    let server = serve(c, any_addr()).await.unwrap();
    let mut ws = connect(server.local_addr(), "?seed=5").await;
    let hello = recv_type(&mut ws, "hello").await;
    assert_eq!(hello["time_limit"], 180.0);
    let first = recv_type(&mut ws, "telemetry").await;
    assert_eq!(first["tick"], 0);
    send(&mut ws, json!({"type": "start"})).await;

    let mut last = first;
    while let Some(v) = recv(&mut ws).await {
        assert_eq!(v["type"], "telemetry");
        assert!(v["t"].as_f64() >= last["t"].as_f64());
        last = v;
    }
    assert_eq!(last["status"], "TIMEOUT");
    assert!((last["t"].as_f64().unwrap() - 180.0).abs() < 1e-6);
    assert_eq!(last["time_remaining"], 0.0);

    let id = hello["session_id"].as_str().unwrap();
    let log = TrialLog::read(dir.path().join(format!("{id}.ndjson"))).unwrap();
    assert_eq!(log.records.len(), 3600);
    assert_eq!(log.header.seed, 5);
}

#[tokio::test]
async fn oversized_command_is_echoed_clamped() {
    let server = serve(config(1.0), any_addr()).await.unwrap();
    let mut ws = connect(server.local_addr(), "").await;
    recv_type(&mut ws, "telemetry").await;
    send(&mut ws, json!({"type": "start"})).await;
    send(&mut ws, control(3.0, 0.0, -9.0)).await;
    let limits = Scenario::default_maze().vehicle;
    loop {
        let v = recv_type(&mut ws, "telemetry").await;
        if v["tick"].as_u64().unwrap() == 0 {
            continue;
        }
        let cmd: FlcCommand = serde_json::from_value(v["command"].clone()).unwrap();
        assert_eq!(cmd, FlcCommand::new(3.0, 0.0, -9.0).clamped(&limits));
        assert!((cmd.v_forward - limits.v_max).abs() < 1e-12);
        assert!((cmd.camera_yaw_rate + limits.yaw_rate_max).abs() < 1e-12);
        break;
    }
}

#[tokio::test]
async fn malformed_messages_get_an_error_and_keep_the_connection() {
    let server = serve(config(1.0), any_addr()).await.unwrap();
    let mut ws = connect(server.local_addr(), "").await;
    recv_type(&mut ws, "telemetry").await;
    for bad in [
        "{not json",
        r#"{"type":"control","v_forward":1}"#,
        r#"{"type":"teleport","x":3}"#,
        r#"{"type":"step"}"#,
    ] {
        send_raw(&mut ws, bad).await;
        let e = recv_type(&mut ws, "error").await;
        assert!(e["message"].as_str().unwrap().len() > 3);
    }
    send(&mut ws, json!({"type": "start"})).await;
    send(&mut ws, control(0.2, 0.0, 0.0)).await;
    let v = recv_type(&mut ws, "telemetry").await;
    assert_eq!(v["status"], "RUNNING");
}

#[tokio::test]
async fn bad_query_and_second_operator_are_rejected() {
    let server = serve(config(1.0), any_addr()).await.unwrap();
    let addr = server.local_addr();
    for q in ["?scenario=elsewhere", "?mode=hologram", "?seed=-3", "?resume=session-999"] {
        let mut ws = connect(addr, q).await;
        let e = recv(&mut ws).await.unwrap();
        assert_eq!(e["type"], "error", "{q}");
        assert_eq!(recv(&mut ws).await, None, "{q}");
    }

    let mut a = connect(addr, "?mode=bar").await;
    let hello = recv_type(&mut a, "hello").await;
    assert_eq!(hello["mode"], "bar");
    let id = hello["session_id"].as_str().unwrap().to_owned();
    let mut b = connect(addr, &format!("?resume={id}")).await;
    let e = recv(&mut b).await.unwrap();
    assert_eq!(e["type"], "error");
    assert!(e["message"].as_str().unwrap().contains("already has an operator"));
    assert_eq!(recv(&mut b).await, None);

    // The first operator is unaffected.
    send(&mut a, json!({"type": "start"})).await;
    let v = recv_type(&mut a, "telemetry").await;
    assert_eq!(v["status"], "RUNNING");
}

/// Disconnects mid-run, resumes, and checks the server log against a
/// headless session fed the same per-tick commands.
#[tokio::test]
async fn reconnect_within_grace_resumes_the_same_session() {
    let dir = tempfile::tempdir().unwrap();
    let mut scenario = Scenario::default_maze();
    scenario.time_limit = 6.0;
    let mut c = ServerConfig::new(scenario.clone());
    c.time_scale = 4.0;
    c.close_grace = Duration::from_millis(20);
    c.log_dir = Some(dir.path().to_owned());
    let server = serve(c, any_addr()).await.unwrap();
    let addr = server.local_addr();

    let mut ws = connect(addr, "?seed=9").await;
    let id = recv_type(&mut ws, "hello").await["session_id"].as_str().unwrap().to_owned();
    send(&mut ws, json!({"type": "start"})).await;
    send(&mut ws, control(0.3, 0.1, 0.4)).await;
    let mut before = recv_type(&mut ws, "telemetry").await;
    while before["t"].as_f64().unwrap() < 1.0 {
        before = recv_type(&mut ws, "telemetry").await;
    }
    ws.close(None).await.unwrap();
    drop(ws);

    tokio::time::sleep(Duration::from_millis(300)).await;
    let (_, health) = http_get(addr, "/healthz").await;
    assert_eq!(serde_json::from_str::<Value>(&health).unwrap()["sessions"], 1);

    let mut ws = connect(addr, &format!("?resume={id}")).await;
    let hello = recv_type(&mut ws, "hello").await;
    assert_eq!(hello["resumed"], true);
    let resumed = recv_type(&mut ws, "telemetry").await;
    // The clock is held while detached.
    let gap = resumed["t"].as_f64().unwrap() - before["t"].as_f64().unwrap();
    assert!((0.0..0.2).contains(&gap), "gap {gap}");
    // The held command was cleared on disconnect.
    let idle = recv_type(&mut ws, "telemetry").await;
    assert_eq!(idle["command"]["v_forward"], 0.0);

    send(&mut ws, control(-0.2, 0.0, -0.3)).await;
    let mut last = idle;
    while let Some(v) = recv(&mut ws).await {
        last = v;
    }
    assert_eq!(last["status"], "TIMEOUT");

    let log = TrialLog::read(dir.path().join(format!("{id}.ndjson"))).unwrap();
    assert_eq!(log.records.len(), 120);
    let mut headless = Session::new(log.header.scenario.clone(), 9).unwrap();
    for r in &log.records {
        let h = headless.tick(&r.command).unwrap();
        assert_eq!(&h, r, "diverged at tick {}", r.tick);
    }
    let at = before["tick"].as_u64().unwrap() as usize;
    let pose = &log.records[at - 1].odometry.position;
    assert_eq!(before["odometry"]["position"]["x"].as_f64().unwrap(), pose.x);
}

#[tokio::test]
async fn session_is_dropped_after_the_grace_window() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(1.0);
    c.resume_grace = Duration::from_millis(100);
    c.log_dir = Some(dir.path().to_owned());
    let server = serve(c, any_addr()).await.unwrap();
    let addr = server.local_addr();
    let mut ws = connect(addr, "").await;
    let id = recv_type(&mut ws, "hello").await["session_id"].as_str().unwrap().to_owned();
    drop(ws);
    tokio::time::sleep(Duration::from_millis(400)).await;
    let mut again = connect(addr, &format!("?resume={id}")).await;
    assert_eq!(recv(&mut again).await.unwrap()["type"], "error");
    // The abandoned session still leaves a log.
    assert!(TrialLog::read(dir.path().join(format!("{id}.ndjson"))).is_ok());
}

const GROUND_TRUTH_KEYS: [&str; 8] =
    ["truth", "true_pose", "raw", "filtered", "doa_body", "doa_camera", "ap", "gradient"];

async fn capture(debug: bool, mode: InterfaceMode) -> Vec<Value> {
    let mut scenario = Scenario::default_maze();
    scenario.time_limit = 8.0;
    let mut c = ServerConfig::new(scenario);
    c.time_scale = 8.0;
    c.debug = debug;
    c.close_grace = Duration::from_millis(10);
    let server = serve(c, any_addr()).await.unwrap();
    let mode = serde_json::to_value(mode).unwrap();
    let mut ws = connect(server.local_addr(), &format!("?mode={}", mode.as_str().unwrap())).await;
    send(&mut ws, json!({"type": "start"})).await;
    send(&mut ws, control(0.3, 0.0, 0.5)).await;
    let mut out = Vec::new();
    while let Some(v) = recv(&mut ws).await {
        out.push(v);
    }
    out
}

#[tokio::test]
async fn no_ground_truth_without_debug() {
    for mode in [InterfaceMode::Vdoa, InterfaceMode::Bar] {
        let traffic = capture(false, mode).await;
        assert!(traffic.len() > 20);
        let mut k = Vec::new();
        traffic.iter().for_each(|v| keys(v, &mut k));
        for bad in GROUND_TRUTH_KEYS {
            assert!(!k.iter().any(|x| x == bad), "{bad} leaked in {mode:?}");
        }
        let has_bar = k.iter().any(|x| x == "segments");
        assert_eq!(has_bar, mode == InterfaceMode::Vdoa);
    }
    let traffic = capture(true, InterfaceMode::Vdoa).await;
    let mut k = Vec::new();
    traffic.iter().for_each(|v| keys(v, &mut k));
    assert!(k.iter().any(|x| x == "true_pose"));
}

#[tokio::test]
async fn telemetry_is_paced_at_ten_hertz() {
    let mut scenario = Scenario::default_maze();
    scenario.time_limit = 3.0;
    let mut c = ServerConfig::new(scenario);
    c.close_grace = Duration::from_millis(10);
    let server = serve(c, any_addr()).await.unwrap();
    let mut ws = connect(server.local_addr(), "").await;
    send(&mut ws, json!({"type": "start"})).await;
    let mut frames = 0;
    while let Some(v) = recv(&mut ws).await {
        if v["type"] == "telemetry" {
            frames += 1;
        }
    }
    // 3 s at 10 Hz plus the initial frame, with a little slack for timer jitter.
    assert!((28..=33).contains(&frames), "{frames} frames");
}
