//! Scripted pilots that drive a session headlessly.

use std::f64::consts::FRAC_PI_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::geometry::{wrap_angle, Vec2};
use crate::scenario::Scenario;
use crate::session::TickRecord;
use crate::vehicle::{FlcCommand, VehicleConfig};

const PILOT_STREAM: u64 = 0x9110_7E55_A11D;

/// Follows the estimated direction of arrival.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradientFollowerParams {
    /// m/s
    pub speed: f64,
    /// Standard deviation of the heading jitter added per sample, rad.
    pub turn_noise: f64,
    /// Proportional gain turning the camera toward the DoA, 1/s.
    pub camera_gain: f64,
    /// Hold position once the central receiver reaches this level, dBm.
    pub satisfied_rss: Option<f64>,
    /// How long to back away from a wall after a collision, s.
    pub escape_time: f64,
    pub seed: Option<u64>,
}

impl Default for GradientFollowerParams {
    fn default() -> Self {
        Self {
            speed: 0.3,
            turn_noise: 0.2,
            camera_gain: 0.5,
            satisfied_rss: Some(-50.0),
            escape_time: 1.0,
            seed: None,
        }
    }
}

/// Visits world-frame waypoints in order using the true pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WaypointParams {
    /// m/s
    pub speed: f64,
    pub waypoints: Vec<Vec2>,
    /// Arrival radius, m.
    pub tolerance: f64,
    /// Restart from the first waypoint after the last one.
    pub looped: bool,
    /// Pause at each reached waypoint, s.
    pub dwell: f64,
}

impl Default for WaypointParams {
    fn default() -> Self {
        Self {
            speed: 0.3,
            waypoints: Vec::new(),
            tolerance: 1e-3,
            looped: false,
            dwell: 0.0,
        }
    }
}

/// Wanders with a drifting heading, bouncing off walls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RandomWalkParams {
    /// m/s
    pub speed: f64,
    /// Heading diffusion, rad/√s.
    pub turn_noise: f64,
    pub seed: Option<u64>,
}

impl Default for RandomWalkParams {
    fn default() -> Self {
        Self {
            speed: 0.3,
            turn_noise: 0.8,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PilotPolicy {
    GradientFollower(GradientFollowerParams),
    Waypoint(WaypointParams),
    RandomWalk(RandomWalkParams),
    /// Never moves.
    Idle,
}

impl PilotPolicy {
    pub fn gradient_follower() -> Self {
        PilotPolicy::GradientFollower(GradientFollowerParams::default())
    }

    pub fn waypoints(speed: f64, waypoints: Vec<Vec2>) -> Self {
        PilotPolicy::Waypoint(WaypointParams {
            speed,
            waypoints,
            ..WaypointParams::default()
        })
    }

    pub fn random_walk() -> Self {
        PilotPolicy::RandomWalk(RandomWalkParams::default())
    }

    /// Checks the policy against a scenario.
    pub fn validate(&self, scenario: &Scenario) -> Result<(), String> {
        let speed_ok = |s: f64| {
            if s.is_finite() && s >= 0.0 {
                Ok(())
            } else {
                Err(format!("pilot speed must be finite and >= 0, got {s}"))
            }
        };
        match self {
            PilotPolicy::GradientFollower(p) => {
                speed_ok(p.speed)?;
                if !(p.turn_noise.is_finite() && p.turn_noise >= 0.0) {
                    return Err("turn_noise must be >= 0".into());
                }
                if !(p.camera_gain.is_finite() && p.escape_time.is_finite() && p.escape_time >= 0.0) {
                    return Err("camera_gain and escape_time must be finite".into());
                }
            }
            PilotPolicy::Waypoint(p) => {
                speed_ok(p.speed)?;
                if !(p.tolerance.is_finite() && p.tolerance > 0.0) {
                    return Err("waypoint tolerance must be > 0".into());
                }
                if !(p.dwell.is_finite() && p.dwell >= 0.0) {
                    return Err("waypoint dwell must be >= 0".into());
                }
                if p.waypoints.is_empty() {
                    return Err("waypoint pilot needs at least one waypoint".into());
                }
                if let Some(w) = p.waypoints.iter().find(|w| !scenario.map.bounds.contains(**w)) {
                    return Err(format!("waypoint ({}, {}) lies outside the map", w.x, w.y));
                }
            }
            PilotPolicy::RandomWalk(p) => {
                speed_ok(p.speed)?;
                if !(p.turn_noise.is_finite() && p.turn_noise >= 0.0) {
                    return Err("turn_noise must be >= 0".into());
                }
            }
            PilotPolicy::Idle => {}
        }
        Ok(())
    }

    /// Instantiates the pilot. `seed` is the trial seed, used unless the
    /// policy carries its own.
    pub fn build(&self, scenario: &Scenario, seed: u64) -> Box<dyn Pilot + Send> {
        let rng = |own: Option<u64>| ChaCha8Rng::seed_from_u64(own.unwrap_or(seed) ^ PILOT_STREAM);
        match self {
            PilotPolicy::GradientFollower(p) => Box::new(GradientFollower {
                p: *p,
                rng: rng(p.seed),
                dt: scenario.dt(),
                limits: scenario.vehicle,
                direction: FRAC_PI_2,
                escape_left: 0.0,
                holding: false,
            }),
            PilotPolicy::Waypoint(p) => Box::new(WaypointPilot {
                p: p.clone(),
                dt: scenario.dt(),
                limits: scenario.vehicle,
                next: 0,
                done: false,
                dwell_left: 0.0,
            }),
            PilotPolicy::RandomWalk(p) => Box::new(RandomWalk {
                p: *p,
                rng: rng(p.seed),
                dt: scenario.dt(),
                limits: scenario.vehicle,
                heading: None,
            }),
            PilotPolicy::Idle => Box::new(Idle),
        }
    }
}

/// A pilot turns the latest telemetry frame into the next command.
pub trait Pilot {
    fn command(&mut self, frame: &TickRecord) -> FlcCommand;
}

struct Idle;

impl Pilot for Idle {
    fn command(&mut self, _frame: &TickRecord) -> FlcCommand {
        FlcCommand::STOP
    }
}

/// Camera-frame command moving along world direction `angle`.
fn world_to_command(frame: &TickRecord, angle: f64, speed: f64) -> FlcCommand {
    let camera_heading = frame.true_pose.heading + frame.camera_yaw;
    let v = Vec2::from_angle(angle).rotate(-camera_heading) * speed;
    FlcCommand::new(v.y, v.x, 0.0)
}

struct GradientFollower {
    p: GradientFollowerParams,
    rng: ChaCha8Rng,
    dt: f64,
    limits: VehicleConfig,
    /// Current travel direction in the camera frame (0 = right).
    direction: f64,
    escape_left: f64,
    holding: bool,
}

impl GradientFollower {
    fn jitter(&mut self) -> f64 {
        let n: f64 = StandardNormal.sample(&mut self.rng);
        self.p.turn_noise * n
    }
}

impl Pilot for GradientFollower {
    fn command(&mut self, frame: &TickRecord) -> FlcCommand {
        if frame.collision {
            self.escape_left = self.p.escape_time;
            // Back off roughly opposite the blocked direction.
            self.direction = wrap_angle(self.direction + std::f64::consts::PI + self.jitter());
        }
        if self.escape_left > 0.0 {
            self.escape_left -= self.dt;
            let d = Vec2::from_angle(self.direction) * self.p.speed;
            return FlcCommand::new(d.y, d.x, 0.0).clamped(&self.limits);
        }

        let r_c = frame.filtered[4];
        if let Some(level) = self.p.satisfied_rss {
            // 3 dB hysteresis so noise does not toggle holding.
            if r_c >= level {
                self.holding = true;
            } else if r_c < level - 3.0 {
                self.holding = false;
            }
        }
        if frame.sampled {
            if let Some(d) = frame.doa_camera {
                self.direction = wrap_angle(d.theta + self.jitter());
            }
        }
        let yaw_rate = frame
            .doa_camera
            .map_or(0.0, |d| self.p.camera_gain * wrap_angle(d.theta - FRAC_PI_2));
        if self.holding {
            return FlcCommand::new(0.0, 0.0, yaw_rate).clamped(&self.limits);
        }
        let v = Vec2::from_angle(self.direction) * self.p.speed;
        FlcCommand::new(v.y, v.x, yaw_rate).clamped(&self.limits)
    }
}

struct WaypointPilot {
    p: WaypointParams,
    dt: f64,
    limits: VehicleConfig,
    next: usize,
    done: bool,
    dwell_left: f64,
}

impl Pilot for WaypointPilot {
    fn command(&mut self, frame: &TickRecord) -> FlcCommand {
        if self.done {
            return FlcCommand::STOP;
        }
        if self.dwell_left > 0.0 {
            self.dwell_left -= self.dt;
            return FlcCommand::STOP;
        }
        let pos = frame.true_pose.position;
        let mut target = self.p.waypoints[self.next];
        if pos.distance(target) <= self.p.tolerance && self.p.dwell > 0.0 {
            // Arrived: pause here before heading on.
            self.next = (self.next + 1) % self.p.waypoints.len();
            if self.next == 0 && !self.p.looped {
                self.done = true;
                return FlcCommand::STOP;
            }
            self.dwell_left = self.p.dwell - self.dt;
            return FlcCommand::STOP;
        }
        while pos.distance(target) <= self.p.tolerance {
            self.next += 1;
            if self.next == self.p.waypoints.len() {
                if !self.p.looped {
                    self.done = true;
                    return FlcCommand::STOP;
                }
                self.next = 0;
            }
            target = self.p.waypoints[self.next];
        }
        let to = target - pos;
        // Slow down to land on the waypoint instead of overshooting it.
        let speed = self.p.speed.min(to.norm() / self.dt);
        world_to_command(frame, to.angle(), speed).clamped(&self.limits)
    }
}

struct RandomWalk {
    p: RandomWalkParams,
    rng: ChaCha8Rng,
    dt: f64,
    limits: VehicleConfig,
    heading: Option<f64>,
}

impl Pilot for RandomWalk {
    fn command(&mut self, frame: &TickRecord) -> FlcCommand {
        let mut heading = match self.heading {
            Some(h) => h,
            None => self.rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
        };
        if frame.collision {
            heading += std::f64::consts::PI + self.rng.random_range(-1.0..1.0);
        }
        let n: f64 = StandardNormal.sample(&mut self.rng);
        heading = wrap_angle(heading + self.p.turn_noise * self.dt.sqrt() * n);
        self.heading = Some(heading);
        world_to_command(frame, heading, self.p.speed).clamped(&self.limits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::session::Session;

    fn drive(policy: &PilotPolicy, ticks: usize) -> Vec<TickRecord> {
        let scenario = Scenario::default_maze();
        let mut pilot = policy.build(&scenario, 7);
        let mut session = Session::new(scenario.clone(), 7).unwrap();
        let mut out = Vec::new();
        for _ in 0..ticks {
            let cmd = pilot.command(session.last_frame());
            out.push(session.tick(&cmd).unwrap());
        }
        out
    }

    #[test]
    fn policy_json_shape() {
        let p: PilotPolicy = serde_json::from_str(r#"{"kind":"gradient-follower","speed":0.2}"#).unwrap();
        match p {
            PilotPolicy::GradientFollower(g) => {
                assert_eq!(g.speed, 0.2);
                assert_eq!(g.turn_noise, GradientFollowerParams::default().turn_noise);
            }
            other => panic!("{other:?}"),
        }
        let w: PilotPolicy =
            serde_json::from_str(r#"{"kind":"waypoint","waypoints":[{"x":1,"y":2}]}"#).unwrap();
        assert!(matches!(w, PilotPolicy::Waypoint(_)));
        let i: PilotPolicy = serde_json::from_str(r#"{"kind":"idle"}"#).unwrap();
        assert_eq!(i, PilotPolicy::Idle);
        assert!(serde_json::from_str::<PilotPolicy>(r#"{"kind":"teleport"}"#).is_err());
    }

    #[test]
    fn waypoints_outside_map_rejected() {
        let s = Scenario::default_maze();
        let p = PilotPolicy::waypoints(0.3, vec![Vec2::new(-5.0, 1.0)]);
        assert!(p.validate(&s).is_err());
        assert!(PilotPolicy::waypoints(0.3, vec![]).validate(&s).is_err());
        assert!(PilotPolicy::waypoints(f64::NAN, vec![s.spawn.position]).validate(&s).is_err());
    }

    #[test]
    fn waypoint_pilot_reaches_target() {
        let s = Scenario::default_maze();
        let target = s.spawn.position + Vec2::new(0.5, 0.0);
        let recs = drive(&PilotPolicy::waypoints(0.25, vec![target]), 60);
        let end = recs.last().unwrap().true_pose.position;
        assert!(end.distance(target) < 2e-3, "{end:?}");
    }

    #[test]
    fn commands_stay_within_limits() {
        let s = Scenario::default_maze();
        for policy in [PilotPolicy::gradient_follower(), PilotPolicy::random_walk()] {
            let mut pilot = policy.build(&s, 3);
            let mut session = Session::new(s.clone(), 3).unwrap();
            for _ in 0..400 {
                let cmd = pilot.command(session.last_frame());
                assert!(cmd.is_within(&s.vehicle), "{cmd:?}");
                session.tick(&cmd).unwrap();
            }
        }
    }
}
