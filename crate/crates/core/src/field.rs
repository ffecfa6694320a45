//! Synthetic indoor radio environment.
//!
//! The field is a deterministic scalar RSS map over a planar floor plan:
//! log-distance path loss, a fixed penalty for every wall between the
//! access point and the receiver, spatially correlated log-normal shadowing
//! and small-scale fading that decorrelates over half a wavelength (and
//! optionally over time). All randomness is a pure function of the seed and
//! the query coordinates, so a [`FieldModel`] can be queried concurrently
//! and repeatedly with identical results.

use std::f64::consts::LN_10;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Bounds, Segment, Vec2};

/// Speed of light in m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Lowest RSS value the field ever reports.
pub const RSS_FLOOR_DBM: f64 = -120.0;
/// Highest RSS value the field ever reports.
pub const RSS_CEILING_DBM: f64 = -20.0;

pub const MAP_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("parameter `{0}` is not finite")]
    NonFinite(&'static str),
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("access point ({x}, {y}) lies outside the map bounds")]
    ApOutOfBounds { x: f64, y: f64 },
    #[error("wall {index} has coincident endpoints")]
    DegenerateWall { index: usize },
    #[error("analytic gradient requires a noise-free field")]
    StochasticField,
    #[error("position is within the clamped near-field of the access point")]
    NearField,
    #[error("unsupported map format_version {0}")]
    UnsupportedVersion(u32),
    #[error("map file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("map file: {0}")]
    Io(#[from] std::io::Error),
}

/// A wall with a fixed attenuation applied once per crossing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WallSegment {
    pub a: Vec2,
    pub b: Vec2,
    /// dB lost by a path crossing this wall.
    pub attenuation: f64,
}

impl WallSegment {
    pub fn new(a: Vec2, b: Vec2, attenuation: f64) -> Self {
        Self { a, b, attenuation }
    }

    pub fn segment(&self) -> Segment {
        Segment::new(self.a, self.b)
    }
}

/// Propagation parameters of the synthetic channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PropagationParams {
    /// RSS at `ref_distance` from the access point, dBm.
    pub ref_power: f64,
    /// Reference distance, m.
    pub ref_distance: f64,
    pub path_loss_exponent: f64,
    /// Standard deviation of log-normal shadowing, dB.
    pub shadowing_sigma: f64,
    /// Distance over which shadowing decorrelates, m.
    pub shadowing_corr_length: f64,
    /// Standard deviation of small-scale fading, dB.
    pub fading_sigma: f64,
    /// Time after which the fading pattern is redrawn, s. Zero keeps it
    /// static in time.
    #[serde(default)]
    pub fading_coherence_time: f64,
    /// Carrier frequency, Hz.
    pub frequency: f64,
}

impl Default for PropagationParams {
    fn default() -> Self {
        Self {
            ref_power: -40.0,
            ref_distance: 1.0,
            path_loss_exponent: 2.0,
            shadowing_sigma: 0.0,
            shadowing_corr_length: 5.0,
            fading_sigma: 0.0,
            fading_coherence_time: 0.0,
            frequency: 2.4e9,
        }
    }
}

impl PropagationParams {
    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.frequency
    }

    pub fn is_noise_free(&self) -> bool {
        self.shadowing_sigma == 0.0 && self.fading_sigma == 0.0
    }

    fn validate(&self) -> Result<(), FieldError> {
        let finite = [
            ("ref_power", self.ref_power),
            ("ref_distance", self.ref_distance),
            ("path_loss_exponent", self.path_loss_exponent),
            ("shadowing_sigma", self.shadowing_sigma),
            ("shadowing_corr_length", self.shadowing_corr_length),
            ("fading_sigma", self.fading_sigma),
            ("fading_coherence_time", self.fading_coherence_time),
            ("frequency", self.frequency),
        ];
        for (name, v) in finite {
            if !v.is_finite() {
                return Err(FieldError::NonFinite(name));
            }
        }
        let invalid = |name, reason: &str| FieldError::InvalidParameter {
            name,
            reason: reason.to_string(),
        };
        if self.ref_distance <= 0.0 {
            return Err(invalid("ref_distance", "must be > 0"));
        }
        if self.path_loss_exponent < 1.0 {
            return Err(invalid("path_loss_exponent", "must be >= 1"));
        }
        if self.shadowing_sigma < 0.0 {
            return Err(invalid("shadowing_sigma", "must be >= 0"));
        }
        if self.shadowing_corr_length <= 0.0 {
            return Err(invalid("shadowing_corr_length", "must be > 0"));
        }
        if self.fading_sigma < 0.0 {
            return Err(invalid("fading_sigma", "must be >= 0"));
        }
        if self.fading_coherence_time < 0.0 {
            return Err(invalid("fading_coherence_time", "must be >= 0"));
        }
        if self.frequency <= 0.0 {
            return Err(invalid("frequency", "must be > 0"));
        }
        Ok(())
    }
}

/// Directional receive pattern `G(φ) = gain_max · max(0, cos φ)^exponent`,
/// where `φ` is the angle between the antenna boresight and the direction
/// towards the access point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AntennaPattern {
    pub gain_max: f64,
    pub exponent: f64,
}

impl AntennaPattern {
    pub fn gain(&self, boresight: f64, toward_source: f64) -> f64 {
        let c = (toward_source - boresight).cos().max(0.0);
        self.gain_max * c.powf(self.exponent)
    }
}

/// On-disk map document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapFile {
    #[serde(default = "default_map_version")]
    pub format_version: u32,
    pub bounds: Bounds,
    pub walls: Vec<WallSegment>,
    pub ap: Vec2,
    pub propagation: PropagationParams,
    pub seed: u64,
}

fn default_map_version() -> u32 {
    MAP_FORMAT_VERSION
}

impl MapFile {
    pub fn from_json(text: &str) -> Result<Self, FieldError> {
        let map: MapFile = serde_json::from_str(text)?;
        if map.format_version != MAP_FORMAT_VERSION {
            return Err(FieldError::UnsupportedVersion(map.format_version));
        }
        Ok(map)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FieldError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn build(&self) -> Result<FieldModel, FieldError> {
        build_field(self.bounds, &self.walls, self.ap, self.propagation, self.seed)
    }
}

/// Immutable radio environment.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldModel {
    bounds: Bounds,
    walls: Vec<WallSegment>,
    ap: Vec2,
    params: PropagationParams,
    seed: u64,
    fading_seed: u64,
}

/// Validates the parameters and builds a field.
pub fn build_field(
    bounds: Bounds,
    walls: &[WallSegment],
    ap: Vec2,
    params: PropagationParams,
    seed: u64,
) -> Result<FieldModel, FieldError> {
    if !bounds.min.is_finite() || !bounds.max.is_finite() {
        return Err(FieldError::NonFinite("bounds"));
    }
    if !bounds.is_valid() {
        return Err(FieldError::InvalidParameter {
            name: "bounds",
            reason: "max must exceed min on both axes".into(),
        });
    }
    if !ap.is_finite() {
        return Err(FieldError::NonFinite("ap"));
    }
    if !bounds.contains(ap) {
        return Err(FieldError::ApOutOfBounds { x: ap.x, y: ap.y });
    }
    params.validate()?;
    for (index, w) in walls.iter().enumerate() {
        if !w.a.is_finite() || !w.b.is_finite() || !w.attenuation.is_finite() {
            return Err(FieldError::NonFinite("walls"));
        }
        if w.attenuation < 0.0 {
            return Err(FieldError::InvalidParameter {
                name: "walls",
                reason: format!("wall {index} has negative attenuation"),
            });
        }
        if w.a == w.b {
            return Err(FieldError::DegenerateWall { index });
        }
    }
    Ok(FieldModel {
        bounds,
        walls: walls.to_vec(),
        ap,
        params,
        seed,
        fading_seed: seed,
    })
}

// Stream tags keep the shadowing and fading lattices independent.
const SHADOWING_STREAM: u64 = 0x5348_4144;
const FADING_STREAM: u64 = 0x4641_4445;

impl FieldModel {
    pub fn bounds(&self) -> Bounds {
        self.bounds
    }

    pub fn walls(&self) -> &[WallSegment] {
        &self.walls
    }

    pub fn ap_position(&self) -> Vec2 {
        self.ap
    }

    pub fn params(&self) -> &PropagationParams {
        &self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Copy whose small-scale fading is drawn from `seed` while the static
    /// shadowing keeps the map seed.
    pub fn with_fading_seed(mut self, seed: u64) -> Self {
        self.fading_seed = self.seed ^ mix(seed.wrapping_add(1));
        self
    }

    pub fn wavelength(&self) -> f64 {
        self.params.wavelength()
    }

    /// Total attenuation of the walls crossed by the straight path between
    /// the access point and `position`.
    pub fn wall_loss(&self, position: Vec2) -> f64 {
        let path = Segment::new(self.ap, position);
        self.walls
            .iter()
            .filter(|w| path.intersects(&w.segment()))
            .map(|w| w.attenuation)
            .sum()
    }

    /// True when no wall blocks the straight path to the access point.
    pub fn line_of_sight(&self, position: Vec2) -> bool {
        let path = Segment::new(self.ap, position);
        !self.walls.iter().any(|w| path.intersects(&w.segment()))
    }

    /// Mean RSS of the log-distance law alone (no walls, no noise).
    pub fn path_loss_rss(&self, position: Vec2) -> f64 {
        let p = &self.params;
        let d = position.distance(self.ap).max(p.ref_distance / 10.0);
        p.ref_power - 10.0 * p.path_loss_exponent * (d / p.ref_distance).log10()
    }

    /// Shadowing offset at `position`, dB.
    pub fn shadowing(&self, position: Vec2) -> f64 {
        if self.params.shadowing_sigma == 0.0 {
            return 0.0;
        }
        self.params.shadowing_sigma
            * lattice_noise(self.seed, SHADOWING_STREAM, position, self.params.shadowing_corr_length, 0)
    }

    /// Small-scale fading offset at `position` and `time`, dB.
    pub fn fading(&self, position: Vec2, time: f64) -> f64 {
        if self.params.fading_sigma == 0.0 {
            return 0.0;
        }
        let spacing = self.wavelength() / 2.0;
        let slot = if self.params.fading_coherence_time > 0.0 {
            (time / self.params.fading_coherence_time).floor() as i64
        } else {
            0
        };
        self.params.fading_sigma * lattice_noise(self.fading_seed, FADING_STREAM, position, spacing, slot)
    }

    /// RSS seen by an isotropic receiver at `position` and `time`, dBm.
    pub fn rss_at(&self, position: Vec2, time: f64) -> f64 {
        let value = self.path_loss_rss(position)
            - self.wall_loss(position)
            - self.shadowing(position)
            - self.fading(position, time);
        clamp_rss(value)
    }

    /// RSS seen by a directional receiver whose boresight points at world
    /// angle `boresight`.
    pub fn rss_at_directional(
        &self,
        position: Vec2,
        time: f64,
        boresight: f64,
        pattern: &AntennaPattern,
    ) -> f64 {
        let toward = (self.ap - position).angle();
        let gain = pattern.gain(boresight, toward);
        let value = self.path_loss_rss(position)
            - self.wall_loss(position)
            - self.shadowing(position)
            - self.fading(position, time)
            + gain;
        clamp_rss(value)
    }

    /// Exact gradient of the log-distance law at `position`, dB/m.
    ///
    /// Only defined for noise-free fields; walls are ignored, so callers
    /// must keep the probe neighborhood clear of them.
    pub fn analytic_gradient(&self, position: Vec2) -> Result<Vec2, FieldError> {
        if !self.params.is_noise_free() {
            return Err(FieldError::StochasticField);
        }
        let to_ap = self.ap - position;
        let d = to_ap.norm();
        if d <= self.params.ref_distance / 10.0 {
            return Err(FieldError::NearField);
        }
        let magnitude = 10.0 * self.params.path_loss_exponent / (d * LN_10);
        Ok(to_ap * (magnitude / d))
    }
}

fn clamp_rss(value: f64) -> f64 {
    if value.is_finite() {
        value.clamp(RSS_FLOOR_DBM, RSS_CEILING_DBM)
    } else {
        RSS_FLOOR_DBM
    }
}

fn mix(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn node_value(seed: u64, stream: u64, i: i64, j: i64, slot: i64) -> f64 {
    let mut h = mix(seed ^ 0x9e37_79b9_7f4a_7c15);
    for part in [stream, i as u64, j as u64, slot as u64] {
        h = mix(h.wrapping_add(part).wrapping_add(0x9e37_79b9_7f4a_7c15));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(h);
    StandardNormal.sample(&mut rng)
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Unit-variance Gaussian noise, smoothly interpolated between i.i.d.
/// lattice nodes spaced `spacing` apart. The weights are renormalized so
/// the marginal variance is exactly one everywhere.
fn lattice_noise(seed: u64, stream: u64, p: Vec2, spacing: f64, slot: i64) -> f64 {
    let gx = p.x / spacing;
    let gy = p.y / spacing;
    let i0 = gx.floor();
    let j0 = gy.floor();
    let sx = smoothstep(gx - i0);
    let sy = smoothstep(gy - j0);
    let (i0, j0) = (i0 as i64, j0 as i64);
    let wx = [1.0 - sx, sx];
    let wy = [1.0 - sy, sy];
    let mut acc = 0.0;
    let mut norm2 = 0.0;
    for (di, wxi) in wx.iter().enumerate() {
        for (dj, wyj) in wy.iter().enumerate() {
            let w = wxi * wyj;
            if w == 0.0 {
                continue;
            }
            acc += w * node_value(seed, stream, i0 + di as i64, j0 + dj as i64, slot);
            norm2 += w * w;
        }
    }
    acc / norm2.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn open_field(params: PropagationParams, walls: &[WallSegment]) -> FieldModel {
        let bounds = Bounds::new(Vec2::new(-20.0, -20.0), Vec2::new(20.0, 20.0));
        build_field(bounds, walls, Vec2::ZERO, params, 7).unwrap()
    }

    #[test]
    fn reference_distance_gives_reference_power() {
        let f = open_field(PropagationParams::default(), &[]);
        assert_relative_eq!(f.rss_at(Vec2::new(1.0, 0.0), 0.0), -40.0);
        assert_relative_eq!(f.rss_at(Vec2::new(0.0, -1.0), 3.0), -40.0);
    }

    #[test]
    fn log_distance_at_ten_meters() {
        let f = open_field(PropagationParams::default(), &[]);
        assert_relative_eq!(f.rss_at(Vec2::new(10.0, 0.0), 0.0), -60.0, epsilon = 1e-12);
    }

    #[test]
    fn one_wall_subtracts_its_attenuation() {
        let wall = WallSegment::new(Vec2::new(5.0, -2.0), Vec2::new(5.0, 2.0), 6.0);
        let f = open_field(PropagationParams::default(), &[wall]);
        assert_relative_eq!(f.rss_at(Vec2::new(10.0, 0.0), 0.0), -66.0, epsilon = 1e-12);
        assert!(!f.line_of_sight(Vec2::new(10.0, 0.0)));
        assert!(f.line_of_sight(Vec2::new(-10.0, 0.0)));
    }

    #[test]
    fn ap_outside_bounds_is_rejected() {
        let bounds = Bounds::new(Vec2::ZERO, Vec2::new(5.0, 5.0));
        let err = build_field(bounds, &[], Vec2::new(6.0, 1.0), PropagationParams::default(), 0);
        assert!(matches!(err, Err(FieldError::ApOutOfBounds { .. })));
    }

    #[test]
    fn non_finite_and_invalid_parameters_are_rejected() {
        let bounds = Bounds::new(Vec2::ZERO, Vec2::new(5.0, 5.0));
        let ap = Vec2::new(1.0, 1.0);
        let mut p = PropagationParams::default();
        p.ref_power = f64::NAN;
        assert!(matches!(build_field(bounds, &[], ap, p, 0), Err(FieldError::NonFinite(_))));
        let mut p = PropagationParams::default();
        p.ref_distance = 0.0;
        assert!(build_field(bounds, &[], ap, p, 0).is_err());
        let mut p = PropagationParams::default();
        p.path_loss_exponent = 0.5;
        assert!(build_field(bounds, &[], ap, p, 0).is_err());
        let wall = WallSegment::new(ap, ap, 3.0);
        assert!(matches!(
            build_field(bounds, &[wall], ap, PropagationParams::default(), 0),
            Err(FieldError::DegenerateWall { index: 0 })
        ));
    }

    #[test]
    fn near_field_is_clamped_to_ceiling() {
        let f = open_field(PropagationParams::default(), &[]);
        let v = f.rss_at(Vec2::ZERO, 0.0);
        assert!(v.is_finite());
        assert_relative_eq!(v, RSS_CEILING_DBM);
    }

    #[test]
    fn analytic_gradient_magnitude_and_direction() {
        let f = open_field(PropagationParams::default(), &[]);
        let g = f.analytic_gradient(Vec2::new(10.0, 0.0)).unwrap();
        assert_relative_eq!(g.norm(), 20.0 / (10.0 * LN_10), epsilon = 1e-12);
        assert_relative_eq!(g.norm(), 0.8686, epsilon = 1e-4);
        assert!(g.x < 0.0 && g.y.abs() < 1e-15);
        let g2 = f.analytic_gradient(Vec2::new(20.0, 0.0)).unwrap();
        assert_relative_eq!(g2.norm(), g.norm() / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn analytic_gradient_refuses_noisy_fields() {
        let mut p = PropagationParams::default();
        p.shadowing_sigma = 3.0;
        let f = open_field(p, &[]);
        assert!(matches!(f.analytic_gradient(Vec2::new(3.0, 0.0)), Err(FieldError::StochasticField)));
    }

    #[test]
    fn shadowing_has_requested_variance_and_decorrelates() {
        let corr_len = 2.0;
        let p = PropagationParams {
            shadowing_sigma: 1.0,
            shadowing_corr_length: corr_len,
            ..PropagationParams::default()
        };
        let bounds = Bounds::new(Vec2::new(-1.0, -1.0), Vec2::new(1.0, 1.0));
        let seeds = 0..4000u64;
        let base = Vec2::new(0.37, 0.81);
        let corr_at = |sep: f64| {
            let mut sxy = 0.0;
            let mut sxx = 0.0;
            let mut syy = 0.0;
            for seed in seeds.clone() {
                let f = build_field(bounds, &[], Vec2::ZERO, p, seed).unwrap();
                let a = f.shadowing(base);
                let b = f.shadowing(base + Vec2::new(sep, 0.0));
                sxy += a * b;
                sxx += a * a;
                syy += b * b;
            }
            (sxy / (sxx * syy).sqrt(), sxx / 4000.0)
        };
        let (c0, var0) = corr_at(0.0);
        assert_relative_eq!(c0, 1.0, epsilon = 1e-12);
        assert!((var0 - 1.0).abs() < 0.08, "variance {var0}");
        let c_half = corr_at(0.5 * corr_len).0;
        let c_one = corr_at(corr_len).0;
        let c_three = corr_at(3.0 * corr_len).0;
        assert!(c_half > c_one, "{c_half} {c_one}");
        assert!(c_one > c_three - 0.05, "{c_one} {c_three}");
        assert!(c_three.abs() < 0.08, "{c_three}");
    }

    #[test]
    fn fading_is_static_without_coherence_time_and_redrawn_with_it() {
        let mut p = PropagationParams {
            fading_sigma: 2.0,
            ..PropagationParams::default()
        };
        let f = open_field(p, &[]);
        let x = Vec2::new(3.0, 1.0);
        assert_eq!(f.rss_at(x, 0.0), f.rss_at(x, 100.0));
        p.fading_coherence_time = 0.5;
        let f = open_field(p, &[]);
        assert_eq!(f.rss_at(x, 0.1), f.rss_at(x, 0.2));
        assert_ne!(f.rss_at(x, 0.1), f.rss_at(x, 0.7));
    }

    #[test]
    fn directional_pattern_only_adds_gain_in_front() {
        let f = open_field(PropagationParams::default(), &[]);
        let pat = AntennaPattern {
            gain_max: 3.0,
            exponent: 2.0,
        };
        let x = Vec2::new(10.0, 0.0);
        // AP is towards -x from here.
        let facing = f.rss_at_directional(x, 0.0, std::f64::consts::PI, &pat);
        let away = f.rss_at_directional(x, 0.0, 0.0, &pat);
        assert_relative_eq!(facing, -57.0, epsilon = 1e-9);
        assert_relative_eq!(away, -60.0, epsilon = 1e-9);
    }

    #[test]
    fn map_file_rejects_unknown_keys() {
        let text = r#"{"bounds":{"min":{"x":0,"y":0},"max":{"x":4,"y":4}},"walls":[],
            "ap":{"x":1,"y":1},"propagation":{"ref_power":-40,"ref_distance":1,
            "path_loss_exponent":2,"shadowing_sigma":0,"shadowing_corr_length":5,
            "fading_sigma":0,"frequency":2.4e9},"seed":1,"colour":"red"}"#;
        assert!(MapFile::from_json(text).is_err());
        let ok = text.replace(",\"colour\":\"red\"", "");
        let map = MapFile::from_json(&ok).unwrap();
        assert_eq!(map.format_version, MAP_FORMAT_VERSION);
        map.build().unwrap();
    }
}
