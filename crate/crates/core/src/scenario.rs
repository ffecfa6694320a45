//! Scenario documents: maze map, spawn, symbols and all tunables of a trial.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::estimation::{EstimationConfig, EstimationError};
use crate::evaluation::EvalConfig;
use crate::field::{FieldError, MapFile, PropagationParams};
use crate::geometry::{wrap_angle, Segment, Vec2};
use crate::vehicle::{AntennaArray, OdometryNoise, VehicleConfig, VehicleError, VehicleState};

pub const SCENARIO_FORMAT_VERSION: u32 = 1;

/// The maze shipped with the crate.
pub const DEFAULT_SCENARIO_JSON: &str = include_str!("../scenarios/default.json");

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario: {0}")]
    Json(#[from] serde_json::Error),
    #[error("scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error(transparent)]
    Vehicle(#[from] VehicleError),
    #[error("unsupported scenario format_version {0}")]
    UnsupportedVersion(u32),
    #[error("map reference `{0}` cannot be resolved without a base directory")]
    UnresolvedMap(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterfaceMode {
    /// Direction-of-arrival color border plus the signal readout.
    Vdoa,
    /// Signal percentage and bars only.
    Bar,
}

impl std::str::FromStr for InterfaceMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "vdoa" => Ok(InterfaceMode::Vdoa),
            "bar" => Ok(InterfaceMode::Bar),
            other => Err(format!("unknown interface mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pose {
    pub position: Vec2,
    pub heading: f64,
}

/// A search symbol fixed to a wall.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Symbol {
    pub id: u32,
    pub position: Vec2,
    /// Unit normal pointing out of the wall into the visible side.
    pub normal: Vec2,
    /// Face area, m².
    #[serde(default = "default_symbol_size")]
    pub size: f64,
}

fn default_symbol_size() -> f64 {
    0.004
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectionConfig {
    /// Maximum detection distance, m.
    pub range: f64,
    /// Full horizontal field of view of the camera, degrees.
    pub fov_deg: f64,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            range: 1.5,
            fov_deg: 90.0,
        }
    }
}

/// Map given inline or as a path relative to the scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum MapSource {
    Inline(Box<MapFile>),
    Path(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioDoc {
    format_version: u32,
    name: String,
    map: MapSource,
    spawn: Pose,
    #[serde(default)]
    symbols: Vec<Symbol>,
    #[serde(default = "defaults::time_limit")]
    time_limit: f64,
    #[serde(default = "defaults::disconnect_threshold")]
    disconnect_threshold: f64,
    #[serde(default = "defaults::disconnect_hold")]
    disconnect_hold: f64,
    #[serde(default = "defaults::interface_mode")]
    interface_mode: InterfaceMode,
    #[serde(default = "defaults::physics_rate")]
    physics_rate: f64,
    #[serde(default = "defaults::rss_rate")]
    rss_rate: f64,
    #[serde(default)]
    vehicle: VehicleConfig,
    #[serde(default)]
    antennas: AntennaArray,
    #[serde(default)]
    estimation: EstimationConfig,
    #[serde(default)]
    odometry: OdometryNoise,
    #[serde(default)]
    detection: DetectionConfig,
    #[serde(default)]
    evaluation: EvalConfig,
}

mod defaults {
    use super::InterfaceMode;
    pub fn time_limit() -> f64 {
        180.0
    }
    pub fn disconnect_threshold() -> f64 {
        -85.0
    }
    pub fn disconnect_hold() -> f64 {
        2.0
    }
    pub fn interface_mode() -> InterfaceMode {
        InterfaceMode::Vdoa
    }
    pub fn physics_rate() -> f64 {
        20.0
    }
    pub fn rss_rate() -> f64 {
        5.0
    }
}

/// A fully resolved scenario (map embedded).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub format_version: u32,
    pub name: String,
    pub map: MapFile,
    pub spawn: Pose,
    pub symbols: Vec<Symbol>,
    /// s
    pub time_limit: f64,
    /// dBm
    pub disconnect_threshold: f64,
    /// s
    pub disconnect_hold: f64,
    pub interface_mode: InterfaceMode,
    /// Physics ticks per second.
    pub physics_rate: f64,
    /// RSS samples per second.
    pub rss_rate: f64,
    pub vehicle: VehicleConfig,
    pub antennas: AntennaArray,
    pub estimation: EstimationConfig,
    pub odometry: OdometryNoise,
    pub detection: DetectionConfig,
    pub evaluation: EvalConfig,
}

impl Scenario {
    /// Parses a scenario document. A map given by path is resolved against
    /// `base_dir`.
    pub fn from_json(text: &str, base_dir: Option<&Path>) -> Result<Self, ScenarioError> {
        let doc: ScenarioDoc = serde_json::from_str(text)?;
        if doc.format_version != SCENARIO_FORMAT_VERSION {
            return Err(ScenarioError::UnsupportedVersion(doc.format_version));
        }
        let map = match doc.map {
            MapSource::Inline(m) => *m,
            MapSource::Path(p) => {
                let base = base_dir.ok_or_else(|| ScenarioError::UnresolvedMap(p.clone()))?;
                MapFile::load(base.join(&p))?
            }
        };
        let s = Scenario {
            format_version: doc.format_version,
            name: doc.name,
            map,
            spawn: doc.spawn,
            symbols: doc.symbols,
            time_limit: doc.time_limit,
            disconnect_threshold: doc.disconnect_threshold,
            disconnect_hold: doc.disconnect_hold,
            interface_mode: doc.interface_mode,
            physics_rate: doc.physics_rate,
            rss_rate: doc.rss_rate,
            vehicle: doc.vehicle,
            antennas: doc.antennas,
            estimation: doc.estimation,
            odometry: doc.odometry,
            detection: doc.detection,
            evaluation: doc.evaluation,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text, path.parent())
    }

    /// The built-in maze.
    pub fn default_maze() -> Self {
        Self::from_json(DEFAULT_SCENARIO_JSON, None).expect("bundled scenario is valid")
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        if self.format_version != SCENARIO_FORMAT_VERSION {
            return Err(ScenarioError::UnsupportedVersion(self.format_version));
        }
        self.map.build()?;
        self.estimation.validate()?;
        self.antennas.validate()?;
        if !(self.time_limit.is_finite() && self.time_limit > 0.0) {
            return bad(format!("time_limit must be positive, got {}", self.time_limit));
        }
        if !self.disconnect_threshold.is_finite() {
            return bad("disconnect_threshold must be finite".into());
        }
        if !(self.disconnect_hold.is_finite() && self.disconnect_hold >= 0.0) {
            return bad("disconnect_hold must be >= 0".into());
        }
        if !(self.physics_rate.is_finite() && self.physics_rate >= 5.0) {
            return bad("physics_rate must be at least 5 Hz".into());
        }
        if !(self.rss_rate.is_finite() && self.rss_rate > 0.0 && self.rss_rate <= self.physics_rate) {
            return bad("rss_rate must be in (0, physics_rate]".into());
        }
        let ratio = self.physics_rate / self.rss_rate;
        if (ratio - ratio.round()).abs() > 1e-9 {
            return bad("physics_rate must be an integer multiple of rss_rate".into());
        }
        if !self.map.bounds.contains(self.spawn.position) {
            return bad("spawn lies outside the map".into());
        }
        let v = &self.vehicle;
        if !(v.v_max > 0.0 && v.yaw_rate_max > 0.0 && v.heading_slew_rate >= 0.0) {
            return bad("vehicle limits must be positive".into());
        }
        if !(self.evaluation.tau.is_finite() && self.evaluation.tau > 0.0) {
            return bad("evaluation.tau must be > 0".into());
        }
        if !(self.evaluation.coverage_cell.is_finite() && self.evaluation.coverage_cell > 0.0) {
            return bad("evaluation.coverage_cell must be > 0".into());
        }
        let mut ids = std::collections::BTreeSet::new();
        for s in &self.symbols {
            if !ids.insert(s.id) {
                return bad(format!("duplicate symbol id {}", s.id));
            }
            if (s.normal.norm() - 1.0).abs() > 1e-6 {
                return bad(format!("symbol {} normal is not a unit vector", s.id));
            }
            let on_wall = self.map.walls.iter().any(|w| w.segment().distance_to(s.position) <= 0.05)
                || self.map.bounds.edges().iter().any(|e| e.distance_to(s.position) <= 0.05);
            if !on_wall {
                return bad(format!("symbol {} is not on a wall", s.id));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding, hex.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("scenario serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.physics_rate
    }

    pub fn ticks_per_sample(&self) -> u64 {
        (self.physics_rate / self.rss_rate).round() as u64
    }

    pub fn sample_interval(&self) -> f64 {
        1.0 / self.rss_rate
    }

    pub fn spawn_state(&self) -> VehicleState {
        VehicleState::at_rest(self.spawn.position, self.spawn.heading)
    }

    /// Walls plus the outer boundary, as collision segments.
    pub fn obstacles(&self) -> Vec<Segment> {
        self.map
            .walls
            .iter()
            .map(|w| w.segment())
            .chain(self.map.bounds.edges())
            .collect()
    }

    /// Copy with the channel and odometry noise replaced.
    pub fn with_noise(&self, noise: &NoiseProfile) -> Scenario {
        let mut s = self.clone();
        let p = &mut s.map.propagation;
        p.shadowing_sigma = noise.shadowing_sigma;
        p.fading_sigma = noise.fading_sigma;
        if let Some(l) = noise.shadowing_corr_length {
            p.shadowing_corr_length = l;
        }
        if let Some(t) = noise.fading_coherence_time {
            p.fading_coherence_time = t;
        }
        s.odometry = noise.odometry;
        s
    }
}

/// Channel and odometry noise applied on top of a scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseProfile {
    pub shadowing_sigma: f64,
    pub fading_sigma: f64,
    #[serde(default)]
    pub shadowing_corr_length: Option<f64>,
    #[serde(default)]
    pub fading_coherence_time: Option<f64>,
    #[serde(default)]
    pub odometry: OdometryNoise,
}

impl NoiseProfile {
    pub const OFF: NoiseProfile = NoiseProfile {
        shadowing_sigma: 0.0,
        fading_sigma: 0.0,
        shadowing_corr_length: None,
        fading_coherence_time: None,
        odometry: OdometryNoise::OFF,
    };

    /// Calibrated indoor channel: 3 dB shadowing, 2 dB fading, 1 % wheel
    /// scale error.
    pub fn calibrated() -> Self {
        NoiseProfile {
            shadowing_sigma: 3.0,
            fading_sigma: 2.0,
            shadowing_corr_length: None,
            fading_coherence_time: None,
            odometry: OdometryNoise {
                velocity_scale_sigma: 0.01,
                velocity_jitter_sigma: 0.02,
                heading_drift_sigma: 0.005,
            },
        }
    }

    pub fn from_propagation(p: &PropagationParams, odometry: OdometryNoise) -> Self {
        NoiseProfile {
            shadowing_sigma: p.shadowing_sigma,
            fading_sigma: p.fading_sigma,
            shadowing_corr_length: Some(p.shadowing_corr_length),
            fading_coherence_time: Some(p.fading_coherence_time),
            odometry,
        }
    }
}

/// Symbols visible from `state`: within range, inside the camera field of
/// view, facing the robot and not occluded by a wall.
pub fn detect_symbols(state: &VehicleState, scenario: &Scenario) -> Vec<u32> {
    let cam = state.position;
    let forward = state.camera_forward();
    let half_fov = scenario.detection.fov_deg.to_radians() / 2.0;
    scenario
        .symbols
        .iter()
        .filter(|s| {
            let to_symbol = s.position - cam;
            let dist = to_symbol.norm();
            if dist > scenario.detection.range || dist == 0.0 {
                return false;
            }
            if wrap_angle(to_symbol.angle() - forward).abs() > half_fov {
                return false;
            }
            if s.normal.dot(-to_symbol) <= 0.0 {
                return false;
            }
            // Stop just short of the symbol so its own wall does not occlude it.
            let probe = s.position + s.normal * 0.01;
            let sight = Segment::new(cam, probe);
            !scenario.map.walls.iter().any(|w| sight.intersects(&w.segment()))
        })
        .map(|s| s.id)
        .collect()
}
