//! Omnidirectional UGV with free-look (camera-frame) control.
//!
//! Frame convention used throughout the crate: the body x-axis points to
//! the right of the chassis and the body y-axis points forward. At heading
//! zero the body frame coincides with the world frame, and a positive
//! heading or camera yaw is a counterclockwise rotation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::AntennaPattern;
use crate::geometry::{wrap_angle, Segment, Vec2};

/// Largest accepted integration step, s.
pub const MAX_DT: f64 = 0.2;

/// Distance kept between the chassis center and a wall after contact, m.
const CONTACT_MARGIN: f64 = 1e-3;

const ODOMETRY_STREAM: u64 = 0x0D0E_7E7A_5EED;

#[derive(Debug, Error, PartialEq)]
pub enum VehicleError {
    #[error("time step {0} s outside (0, {MAX_DT}]")]
    InvalidDt(f64),
    #[error("invalid antenna array: {0}")]
    InvalidArray(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    /// World-frame position of the chassis center, m.
    pub position: Vec2,
    /// World angle of the body x-axis, rad.
    pub heading: f64,
    /// Camera yaw relative to the chassis, rad.
    pub camera_yaw: f64,
    /// World-frame velocity, m/s.
    pub velocity: Vec2,
    pub time: f64,
}

impl VehicleState {
    pub fn at_rest(position: Vec2, heading: f64) -> Self {
        Self {
            position,
            heading: wrap_angle(heading),
            camera_yaw: 0.0,
            velocity: Vec2::ZERO,
            time: 0.0,
        }
    }

    /// World angle of the camera's x-axis.
    pub fn camera_heading(&self) -> f64 {
        wrap_angle(self.heading + self.camera_yaw)
    }

    /// World angle the camera looks along (its forward axis).
    pub fn camera_forward(&self) -> f64 {
        wrap_angle(self.camera_heading() + std::f64::consts::FRAC_PI_2)
    }

    /// Velocity expressed in the body frame.
    pub fn body_velocity(&self) -> Vec2 {
        self.velocity.rotate(-self.heading)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleConfig {
    /// Maximum planar speed, m/s.
    pub v_max: f64,
    /// Maximum camera yaw rate, rad/s.
    pub yaw_rate_max: f64,
    /// Rate at which the chassis turns towards the camera while moving, rad/s.
    pub heading_slew_rate: f64,
}

impl Default for VehicleConfig {
    fn default() -> Self {
        Self {
            v_max: 0.5,
            yaw_rate_max: 1.5,
            heading_slew_rate: 1.5,
        }
    }
}

/// Free-look command: translation in the camera frame plus camera yaw rate.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FlcCommand {
    pub v_forward: f64,
    pub v_lateral: f64,
    pub camera_yaw_rate: f64,
}

impl FlcCommand {
    pub const STOP: FlcCommand = FlcCommand {
        v_forward: 0.0,
        v_lateral: 0.0,
        camera_yaw_rate: 0.0,
    };

    pub fn new(v_forward: f64, v_lateral: f64, camera_yaw_rate: f64) -> Self {
        Self {
            v_forward,
            v_lateral,
            camera_yaw_rate,
        }
    }

    /// Clamps every component to the vehicle limits; the planar speed is
    /// additionally capped at `v_max` keeping the direction. Non-finite
    /// components become zero.
    pub fn clamped(&self, cfg: &VehicleConfig) -> FlcCommand {
        let fin = |v: f64| if v.is_finite() { v } else { 0.0 };
        let mut f = fin(self.v_forward).clamp(-cfg.v_max, cfg.v_max);
        let mut l = fin(self.v_lateral).clamp(-cfg.v_max, cfg.v_max);
        let speed = f.hypot(l);
        if speed > cfg.v_max {
            let k = cfg.v_max / speed;
            f *= k;
            l *= k;
        }
        FlcCommand {
            v_forward: f,
            v_lateral: l,
            camera_yaw_rate: fin(self.camera_yaw_rate).clamp(-cfg.yaw_rate_max, cfg.yaw_rate_max),
        }
    }

    pub fn is_within(&self, cfg: &VehicleConfig) -> bool {
        self.clamped(cfg) == *self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub state: VehicleState,
    pub collided: bool,
}

/// Advances the vehicle by `dt` under `cmd`, stopping at the first wall
/// the chassis center would cross.
pub fn step(
    state: &VehicleState,
    cmd: &FlcCommand,
    dt: f64,
    cfg: &VehicleConfig,
    obstacles: &[Segment],
) -> Result<StepOutcome, VehicleError> {
    if !(dt > 0.0 && dt <= MAX_DT) {
        return Err(VehicleError::InvalidDt(dt));
    }
    let cmd = cmd.clamped(cfg);
    let camera_frame = Vec2::new(cmd.v_lateral, cmd.v_forward);
    let velocity = camera_frame.rotate(state.heading + state.camera_yaw);
    let start = state.position;
    let target = start + velocity * dt;

    let mut next = *state;
    next.time = state.time + dt;
    let mut collided = false;
    if velocity != Vec2::ZERO {
        let path = Segment::new(start, target);
        let hit = obstacles
            .iter()
            .filter_map(|o| path.intersect(o))
            .fold(None, |acc: Option<f64>, t| Some(acc.map_or(t, |a| a.min(t))));
        match hit {
            Some(t) => {
                let len = path.length();
                let travel = (t * len - CONTACT_MARGIN).max(0.0);
                next.position = start + (target - start) * (travel / len);
                next.velocity = Vec2::ZERO;
                collided = true;
            }
            None => {
                next.position = target;
                next.velocity = velocity;
            }
        }
    } else {
        next.velocity = Vec2::ZERO;
    }

    next.camera_yaw = wrap_angle(state.camera_yaw + cmd.camera_yaw_rate * dt);
    if camera_frame != Vec2::ZERO {
        // The chassis follows the camera; the camera keeps its world direction.
        let max_turn = cfg.heading_slew_rate * dt;
        let turn = next.camera_yaw.clamp(-max_turn, max_turn);
        next.heading = wrap_angle(state.heading + turn);
        next.camera_yaw = wrap_angle(next.camera_yaw - turn);
    }
    Ok(StepOutcome {
        state: next,
        collided,
    })
}

/// Receiver index within an [`AntennaArray`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Receiver {
    FrontRight,
    FrontLeft,
    BackRight,
    BackLeft,
    Center,
}

impl Receiver {
    pub const ALL: [Receiver; 5] = [
        Receiver::FrontRight,
        Receiver::FrontLeft,
        Receiver::BackRight,
        Receiver::BackLeft,
        Receiver::Center,
    ];
}

/// Four corner receivers on an axis-aligned rectangle plus a central one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AntennaArray {
    /// Right-left separation, m.
    pub delta_sx: f64,
    /// Front-back separation, m.
    pub delta_sy: f64,
    /// Pattern of the corner antennas; `None` means isotropic.
    #[serde(default)]
    pub pattern: Option<AntennaPattern>,
}

impl Default for AntennaArray {
    fn default() -> Self {
        Self {
            delta_sx: 0.4,
            delta_sy: 0.5,
            pattern: None,
        }
    }
}

impl AntennaArray {
    pub fn new(delta_sx: f64, delta_sy: f64) -> Result<Self, VehicleError> {
        let a = Self {
            delta_sx,
            delta_sy,
            pattern: None,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<(), VehicleError> {
        if !(self.delta_sx.is_finite() && self.delta_sx > 0.0) {
            return Err(VehicleError::InvalidArray("delta_sx must be a positive length"));
        }
        if !(self.delta_sy.is_finite() && self.delta_sy > 0.0) {
            return Err(VehicleError::InvalidArray("delta_sy must be a positive length"));
        }
        Ok(())
    }

    /// Body-frame offsets in (FR, FL, BR, BL, C) order.
    pub fn body_offsets(&self) -> [Vec2; 5] {
        let hx = self.delta_sx / 2.0;
        let hy = self.delta_sy / 2.0;
        [
            Vec2::new(hx, hy),
            Vec2::new(-hx, hy),
            Vec2::new(hx, -hy),
            Vec2::new(-hx, -hy),
            Vec2::ZERO,
        ]
    }
}

/// World positions of the five receivers, ordered (FR, FL, BR, BL, C).
pub fn antenna_positions(state: &VehicleState, array: &AntennaArray) -> [Vec2; 5] {
    array
        .body_offsets()
        .map(|o| state.position + o.rotate(state.heading))
}

/// World boresight angles of the corner antennas (pointing outward along
/// their placement diagonal), ordered (FR, FL, BR, BL).
pub fn antenna_boresights(state: &VehicleState, array: &AntennaArray) -> [f64; 4] {
    let o = array.body_offsets();
    [o[0], o[1], o[2], o[3]].map(|v| wrap_angle(v.angle() + state.heading))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OdometryNoise {
    /// Std. dev. of the per-run wheel scale error (fraction of speed).
    #[serde(default)]
    pub velocity_scale_sigma: f64,
    /// Std. dev. of the per-step multiplicative velocity jitter.
    #[serde(default)]
    pub velocity_jitter_sigma: f64,
    /// Heading random-walk intensity, rad/√s.
    #[serde(default)]
    pub heading_drift_sigma: f64,
}

impl OdometryNoise {
    pub const OFF: OdometryNoise = OdometryNoise {
        velocity_scale_sigma: 0.0,
        velocity_jitter_sigma: 0.0,
        heading_drift_sigma: 0.0,
    };

    pub fn is_off(&self) -> bool {
        self.velocity_scale_sigma == 0.0
            && self.velocity_jitter_sigma == 0.0
            && self.heading_drift_sigma == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdometryReading {
    pub position: Vec2,
    pub heading: f64,
    /// Body-frame velocity (right, forward), m/s.
    pub nu: Vec2,
}

/// Dead-reckoning integrator.
#[derive(Debug, Clone)]
pub struct Odometry {
    noise: OdometryNoise,
    rng: ChaCha8Rng,
    scale: Vec2,
    estimate: OdometryReading,
}

impl Odometry {
    pub fn new(initial: &VehicleState, noise: OdometryNoise, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ODOMETRY_STREAM);
        let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
        let scale = Vec2::new(
            1.0 + noise.velocity_scale_sigma * normal(),
            1.0 + noise.velocity_scale_sigma * normal(),
        );
        Self {
            noise,
            rng,
            scale,
            estimate: OdometryReading {
                position: initial.position,
                heading: initial.heading,
                nu: initial.body_velocity(),
            },
        }
    }

    pub fn reading(&self) -> OdometryReading {
        self.estimate
    }

    /// Integrates the transition `prev → next` and returns the new reading.
    pub fn update(&mut self, prev: &VehicleState, next: &VehicleState) -> OdometryReading {
        if self.noise.is_off() {
            self.estimate = OdometryReading {
                position: next.position,
                heading: next.heading,
                nu: next.body_velocity(),
            };
            return self.estimate;
        }
        let dt = next.time - prev.time;
        let truth = next.body_velocity();
        let mut normal = || -> f64 { StandardNormal.sample(&mut self.rng) };
        let jx = self.noise.velocity_jitter_sigma * normal();
        let jy = self.noise.velocity_jitter_sigma * normal();
        let drift = self.noise.heading_drift_sigma * dt.max(0.0).sqrt() * normal();
        let nu = Vec2::new(truth.x * (self.scale.x + jx), truth.y * (self.scale.y + jy));
        let heading = wrap_angle(self.estimate.heading + wrap_angle(next.heading - prev.heading) + drift);
        let position = self.estimate.position + nu.rotate(heading) * dt;
        self.estimate = OdometryReading { position, heading, nu };
        self.estimate
    }
}

/// Stateless reading for a single state, exact when `noise` is off.
pub fn odometry_read(state: &VehicleState, noise: &OdometryNoise, seed: u64) -> OdometryReading {
    let mut odo = Odometry::new(state, *noise, seed);
    if noise.is_off() {
        return odo.reading();
    }
    let mut r = odo.reading();
    let truth = state.body_velocity();
    let mut normal = || -> f64 { StandardNormal.sample(&mut odo.rng) };
    let jx = noise.velocity_jitter_sigma * normal();
    let jy = noise.velocity_jitter_sigma * normal();
    r.nu = Vec2::new(truth.x * (odo.scale.x + jx), truth.y * (odo.scale.y + jy));
    r
}
