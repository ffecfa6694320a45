//! JSON messages exchanged on the `/session` socket.
//!
//! Every message is a single text frame holding one object tagged by
//! `type`. Clients send `start`, `control` and `step`; the server sends
//! `hello`, `telemetry` and `error`.

use doateleop_core::estimation::DoaEstimate;
use doateleop_core::scenario::{Pose, Symbol};
use doateleop_core::{Bounds, ColorBar, FlcCommand, InterfaceMode, Scenario, Status, TickRecord, Vec2};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    /// Starts the session clock. Repeats are ignored.
    Start,
    Control(ControlMessage),
    /// Advances a step-mode replay by one frame.
    Step,
}

/// Operator command in the camera frame. Values outside the vehicle limits
/// are clamped by the engine, and the clamped command is echoed back in
/// telemetry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlMessage {
    pub v_forward: f64,
    pub v_lateral: f64,
    pub camera_yaw_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mark_found: Option<u32>,
    /// Client clock in seconds, informational only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_time: Option<f64>,
}

impl ControlMessage {
    pub fn command(&self) -> FlcCommand {
        FlcCommand::new(self.v_forward, self.v_lateral, self.camera_yaw_rate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Hello(Hello),
    Telemetry(Box<TelemetryMessage>),
    Error { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    /// Pass as `resume=<id>` to reattach after a disconnect.
    pub session_id: String,
    pub scenario: String,
    pub mode: InterfaceMode,
    pub seed: u64,
    pub time_limit: f64,
    pub physics_rate: f64,
    pub telemetry_rate: f64,
    pub resumed: bool,
    pub replay: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdometryPose {
    pub position: Vec2,
    pub heading: f64,
    /// Body-frame velocity (right, forward), m/s.
    pub nu: Vec2,
}

/// Fields only sent when the server runs with the debug flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub true_pose: Pose,
    pub raw: [f64; 5],
    pub filtered: [f64; 5],
    pub doa_body: Option<DoaEstimate>,
    pub doa_camera: Option<DoaEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryMessage {
    pub tick: u64,
    pub t: f64,
    pub status: Status,
    pub odometry: OdometryPose,
    pub camera_yaw: f64,
    pub rss_percent: f64,
    pub bars: u8,
    /// Present in VDOA mode only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bar: Option<ColorBar>,
    pub symbols_found: Vec<u32>,
    pub time_remaining: f64,
    pub collision: bool,
    /// Command applied on this tick, after clamping.
    pub command: FlcCommand,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<GroundTruth>,
}

impl TelemetryMessage {
    pub fn from_record(r: &TickRecord, mode: InterfaceMode, debug: bool) -> Self {
        Self {
            tick: r.tick,
            t: r.t,
            status: r.status,
            odometry: OdometryPose {
                position: r.odometry.position,
                heading: r.odometry.heading,
                nu: r.odometry.nu,
            },
            camera_yaw: r.camera_yaw,
            rss_percent: r.rss_percent,
            bars: r.bars,
            bar: (mode == InterfaceMode::Vdoa).then(|| r.bar.clone()),
            symbols_found: r.symbols_found.clone(),
            time_remaining: r.time_remaining,
            collision: r.collision,
            command: r.command,
            truth: debug.then_some(GroundTruth {
                true_pose: r.true_pose,
                raw: r.raw,
                filtered: r.filtered,
                doa_body: r.doa_body,
                doa_camera: r.doa_camera,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapWall {
    pub a: Vec2,
    pub b: Vec2,
}

/// Static geometry for rendering. Carries no radio information.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapView {
    pub name: String,
    pub bounds: Bounds,
    pub walls: Vec<MapWall>,
    pub symbols: Vec<Symbol>,
    pub spawn: Pose,
}

impl MapView {
    pub fn of(s: &Scenario) -> Self {
        Self {
            name: s.name.clone(),
            bounds: s.map.bounds,
            walls: s.map.walls.iter().map(|w| MapWall { a: w.a, b: w.b }).collect(),
            symbols: s.symbols.clone(),
            spawn: s.spawn,
        }
    }
}

pub(crate) fn encode(msg: &ServerMessage) -> String {
    serde_json::to_string(msg).expect("server messages always serialize")
}

#[cfg(test)]
mod tests {
    use super::*;
    use doateleop_core::Session;

    #[test]
    fn control_parses_with_optional_fields() {
        let m: ClientMessage =
            serde_json::from_str(r#"{"type":"control","v_forward":0.2,"v_lateral":0,"camera_yaw_rate":0.1}"#)
                .unwrap();
        let ClientMessage::Control(c) = m else { panic!() };
        assert_eq!(c.mark_found, None);
        assert_eq!(c.command(), FlcCommand::new(0.2, 0.0, 0.1));
        let m: ClientMessage = serde_json::from_str(
            r#"{"type":"control","v_forward":0,"v_lateral":0,"camera_yaw_rate":0,"mark_found":3,"client_time":12.5}"#,
        )
        .unwrap();
        assert!(matches!(m, ClientMessage::Control(ControlMessage { mark_found: Some(3), .. })));
    }

    #[test]
    fn malformed_control_is_rejected() {
        for bad in [
            r#"{"type":"control","v_forward":0.2}"#,
            r#"{"type":"control","v_forward":"x","v_lateral":0,"camera_yaw_rate":0}"#,
            r#"{"type":"control","v_forward":0,"v_lateral":0,"camera_yaw_rate":0,"speed":1}"#,
            r#"{"type":"warp"}"#,
            "not json",
        ] {
            assert!(serde_json::from_str::<ClientMessage>(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn telemetry_hides_truth_and_bar_by_mode() {
        let s = Session::new(Scenario::default_maze(), 1).unwrap();
        let r = s.last_frame();
        let plain = serde_json::to_value(TelemetryMessage::from_record(r, InterfaceMode::Bar, false)).unwrap();
        assert!(plain.get("truth").is_none() && plain.get("bar").is_none());
        let vdoa = serde_json::to_value(TelemetryMessage::from_record(r, InterfaceMode::Vdoa, false)).unwrap();
        assert!(vdoa.get("bar").is_some());
        let debug = TelemetryMessage::from_record(r, InterfaceMode::Vdoa, true);
        assert_eq!(debug.truth.unwrap().true_pose, r.true_pose);
    }

    #[test]
    fn map_view_has_no_radio_fields() {
        let v = serde_json::to_value(MapView::of(&Scenario::default_maze())).unwrap();
        let text = v.to_string();
        for key in ["\"ap\"", "propagation", "attenuation", "seed"] {
            assert!(!text.contains(key), "{key}");
        }
        assert_eq!(v["walls"].as_array().unwrap().len(), Scenario::default_maze().map.walls.len());
    }
}
