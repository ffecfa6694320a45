//! RSS filtering, gradient and direction-of-arrival estimation.
//!
//! Each receiver is smoothed by an exponentially weighted moving average
//! (temporal noise) followed by a moving average whose window spans roughly
//! ten wavelengths of travel (spatial multipath). The four filtered corner
//! readings give a central finite-difference gradient in the body frame,
//! whose four-quadrant angle is the DoA. The DoA is then rotated into the
//! camera frame and rendered as a ring of border segments.

use std::collections::VecDeque;
use std::f64::consts::{FRAC_PI_2, TAU};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{RSS_CEILING_DBM, RSS_FLOOR_DBM};
use crate::geometry::{wrap_angle, Vec2};
use crate::vehicle::AntennaArray;

#[derive(Debug, Error, PartialEq)]
pub enum EstimationError {
    #[error("sample {0} is not finite")]
    NonFinite(f64),
    #[error("smoothing parameter {0} outside (0, 1]")]
    InvalidAlpha(f64),
    #[error("{name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("gradient magnitude below the detection threshold")]
    NoGradient,
    #[error("expected a DoA in the {expected:?} frame, got {actual:?}")]
    WrongFrame { expected: Frame, actual: Frame },
    #[error("color bar needs at least {MIN_SEGMENTS} segments, got {0}")]
    TooFewSegments(usize),
    #[error("corner reading {name} = {value} dBm is outside the valid range")]
    InvalidReading { name: &'static str, value: f64 },
}

pub const MIN_SEGMENTS: usize = 8;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimationConfig {
    /// EWMA smoothing parameter.
    pub alpha: f64,
    /// Upper clamp of the MAF window.
    pub n_max: usize,
    /// Speeds below this use the largest MAF window, m/s.
    pub v_min: f64,
    /// Gradient magnitudes at or below this carry no direction, dB/m.
    pub epsilon: f64,
    /// Gradient magnitude that saturates the color bar, dB/m.
    pub g_sat: f64,
    /// Number of border segments.
    #[serde(rename = "K")]
    pub segments: usize,
    /// Relative change of the MAF window needed before it is resized.
    pub resize_hysteresis: f64,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            n_max: 100,
            v_min: 0.02,
            epsilon: 1e-6,
            g_sat: 2.0,
            segments: 16,
            resize_hysteresis: 0.2,
        }
    }
}

impl EstimationConfig {
    pub fn validate(&self) -> Result<(), EstimationError> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(EstimationError::InvalidAlpha(self.alpha));
        }
        if self.n_max == 0 {
            return Err(EstimationError::NonPositive {
                name: "n_max",
                value: 0.0,
            });
        }
        for (name, value) in [("v_min", self.v_min), ("epsilon", self.epsilon), ("g_sat", self.g_sat)] {
            if !(value.is_finite() && value > 0.0) {
                return Err(EstimationError::NonPositive { name, value });
            }
        }
        if self.segments < MIN_SEGMENTS {
            return Err(EstimationError::TooFewSegments(self.segments));
        }
        if !(self.resize_hysteresis.is_finite() && self.resize_hysteresis >= 0.0) {
            return Err(EstimationError::NonPositive {
                name: "resize_hysteresis",
                value: self.resize_hysteresis,
            });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Filters
// ---------------------------------------------------------------------------

/// Exponentially weighted moving average, `Rf(i) = Rf(i-1) + α (R(i) - Rf(i-1))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EwmaState {
    alpha: f64,
    last: Option<f64>,
}

impl EwmaState {
    pub fn new(alpha: f64) -> Result<Self, EstimationError> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(EstimationError::InvalidAlpha(alpha));
        }
        Ok(Self { alpha, last: None })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn last(&self) -> Option<f64> {
        self.last
    }

    /// Feeds one sample; the first sample initializes the filter.
    pub fn update(&mut self, sample: f64) -> Result<f64, EstimationError> {
        if !sample.is_finite() {
            return Err(EstimationError::NonFinite(sample));
        }
        let out = match self.last {
            None => sample,
            Some(prev) => prev + self.alpha * (sample - prev),
        };
        self.last = Some(out);
        Ok(out)
    }
}

/// Sliding-window arithmetic mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MafState {
    window: VecDeque<f64>,
    capacity: usize,
}

impl MafState {
    pub fn new(capacity: usize) -> Self {
        let capacity = capacity.max(1);
        Self {
            window: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    pub fn mean(&self) -> Option<f64> {
        if self.window.is_empty() {
            None
        } else {
            Some(self.window.iter().sum::<f64>() / self.window.len() as f64)
        }
    }

    pub fn update(&mut self, sample: f64) -> Result<f64, EstimationError> {
        if !sample.is_finite() {
            return Err(EstimationError::NonFinite(sample));
        }
        if self.window.len() == self.capacity {
            self.window.pop_front();
        }
        self.window.push_back(sample);
        Ok(self.mean().expect("window is non-empty after a push"))
    }

    /// Changes the capacity, keeping the newest `min(capacity, len)` samples.
    pub fn resize(&mut self, capacity: usize) {
        let capacity = capacity.max(1);
        while self.window.len() > capacity {
            self.window.pop_front();
        }
        self.capacity = capacity;
    }
}

/// MAF window covering about ten wavelengths of travel:
/// `N = round(10 λ f_s / v)`, clamped to `[1, n_max]`; speeds below
/// `v_min` use `n_max`.
pub fn maf_window_size(
    speed: f64,
    sample_rate: f64,
    wavelength: f64,
    n_max: usize,
    v_min: f64,
) -> Result<usize, EstimationError> {
    if !(sample_rate.is_finite() && sample_rate > 0.0) {
        return Err(EstimationError::NonPositive {
            name: "sample_rate",
            value: sample_rate,
        });
    }
    if !(wavelength.is_finite() && wavelength > 0.0) {
        return Err(EstimationError::NonPositive {
            name: "wavelength",
            value: wavelength,
        });
    }
    let n_max = n_max.max(1);
    let speed = speed.abs();
    if !speed.is_finite() || speed < v_min {
        return Ok(n_max);
    }
    let exact = 10.0 * wavelength * sample_rate / speed;
    // round half up
    let n = (exact + 0.5).floor();
    Ok((n.max(1.0) as usize).min(n_max))
}

// ---------------------------------------------------------------------------
// Gradient and DoA
// ---------------------------------------------------------------------------

/// Filtered readings of the five receivers, dBm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CornerRssSet {
    pub r_fr: f64,
    pub r_fl: f64,
    pub r_br: f64,
    pub r_bl: f64,
    pub r_c: f64,
    pub timestamp: f64,
}

impl CornerRssSet {
    /// Builds a set from (FR, FL, BR, BL, C) readings.
    pub fn from_array(r: [f64; 5], timestamp: f64) -> Self {
        Self {
            r_fr: r[0],
            r_fl: r[1],
            r_br: r[2],
            r_bl: r[3],
            r_c: r[4],
            timestamp,
        }
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.r_fr, self.r_fl, self.r_br, self.r_bl, self.r_c]
    }

    pub fn corner_mean(&self) -> f64 {
        (self.r_fr + self.r_fl + self.r_br + self.r_bl) / 4.0
    }

    pub fn validate(&self) -> Result<(), EstimationError> {
        let named = [
            ("r_fr", self.r_fr),
            ("r_fl", self.r_fl),
            ("r_br", self.r_br),
            ("r_bl", self.r_bl),
            ("r_c", self.r_c),
        ];
        for (name, value) in named {
            if !value.is_finite() || !(RSS_FLOOR_DBM..=RSS_CEILING_DBM).contains(&value) {
                return Err(EstimationError::InvalidReading { name, value });
            }
        }
        Ok(())
    }
}

/// Body-frame RSS gradient, dB/m.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GradientEstimate {
    pub g: Vec2,
}

impl GradientEstimate {
    pub fn magnitude(&self) -> f64 {
        self.g.norm()
    }
}

/// Central finite differences across the corner rectangle:
///
/// ```text
/// g_x = ((R_FR - R_FL) + (R_BR - R_BL)) / (2 Δ_SX)
/// g_y = ((R_FR - R_BR) + (R_FL - R_BL)) / (2 Δ_SY)
/// ```
pub fn rss_gradient(corners: &CornerRssSet, array: &AntennaArray) -> GradientEstimate {
    let gx = ((corners.r_fr - corners.r_fl) + (corners.r_br - corners.r_bl)) / (2.0 * array.delta_sx);
    let gy = ((corners.r_fr - corners.r_br) + (corners.r_fl - corners.r_bl)) / (2.0 * array.delta_sy);
    GradientEstimate { g: Vec2::new(gx, gy) }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Frame {
    Body,
    Camera,
}

/// Direction of arrival: angle of the gradient from the frame's x-axis
/// (right), counterclockwise, in `(-π, π]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoaEstimate {
    pub theta: f64,
    pub frame: Frame,
    /// ‖g‖, dB/m.
    pub magnitude: f64,
}

pub fn doa(g: &GradientEstimate, epsilon: f64) -> Result<DoaEstimate, EstimationError> {
    let magnitude = g.magnitude();
    if !(magnitude > epsilon) {
        return Err(EstimationError::NoGradient);
    }
    Ok(DoaEstimate {
        theta: wrap_angle(g.g.y.atan2(g.g.x)),
        frame: Frame::Body,
        magnitude,
    })
}

pub fn to_camera_frame(d: &DoaEstimate, camera_yaw: f64) -> Result<DoaEstimate, EstimationError> {
    if d.frame != Frame::Body {
        return Err(EstimationError::WrongFrame {
            expected: Frame::Body,
            actual: d.frame,
        });
    }
    Ok(DoaEstimate {
        theta: wrap_angle(d.theta - camera_yaw),
        frame: Frame::Camera,
        magnitude: d.magnitude,
    })
}

// ---------------------------------------------------------------------------
// Operator feedback
// ---------------------------------------------------------------------------

const PERCENT_LOW_DBM: f64 = -90.0;
const PERCENT_HIGH_DBM: f64 = -30.0;

/// Linear map of `[-90, -30]` dBm onto `[0, 100]` %, clamped.
pub fn rss_to_percent(dbm: f64) -> f64 {
    if !dbm.is_finite() {
        return 0.0;
    }
    ((dbm - PERCENT_LOW_DBM) / (PERCENT_HIGH_DBM - PERCENT_LOW_DBM) * 100.0).clamp(0.0, 100.0)
}

/// Number of lit bars (0..=5) for a signal percentage.
pub fn signal_bars(percent: f64) -> u8 {
    (percent.clamp(0.0, 100.0) / 20.0).ceil() as u8
}

/// Border ring around the camera view.
///
/// Segment `k` is centered at border angle `ψ_k = 2πk/K` (wrapped),
/// measured from the top-center of the view (camera forward) and growing
/// counterclockwise, so `k = K/4` sits at the left edge midpoint and
/// `k = K/2` at the bottom-center. Positive values are drawn green,
/// negative values red.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorBar {
    pub segments: Vec<f64>,
    pub brightness: f64,
}

impl ColorBar {
    pub fn neutral(k: usize, brightness: f64) -> Self {
        Self {
            segments: vec![0.0; k],
            brightness,
        }
    }

    pub fn segment_center(k: usize, count: usize) -> f64 {
        wrap_angle(TAU * k as f64 / count as f64)
    }

    /// Index of the largest segment value, ties to the lower index.
    pub fn peak(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &v) in self.segments.iter().enumerate() {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        best.map(|(i, _)| i)
    }
}

/// Border angle (from camera forward, counterclockwise) of a camera-frame DoA.
pub fn border_bearing(d: &DoaEstimate) -> f64 {
    wrap_angle(d.theta - FRAC_PI_2)
}

/// Encodes a camera-frame DoA as border segment values
/// `s · cos(ψ_k − β)`, with `β` the DoA's border bearing and
/// `s = clamp(‖g‖ / g_sat, 0, 1)`. `None` (no usable gradient) yields a
/// neutral ring. Brightness follows the mean corner RSS.
pub fn color_bar(
    d: Option<&DoaEstimate>,
    corners: &CornerRssSet,
    segments: usize,
    g_sat: f64,
) -> Result<ColorBar, EstimationError> {
    if segments < MIN_SEGMENTS {
        return Err(EstimationError::TooFewSegments(segments));
    }
    let brightness = rss_to_percent(corners.corner_mean()) / 100.0;
    let Some(d) = d else {
        return Ok(ColorBar::neutral(segments, brightness));
    };
    if d.frame != Frame::Camera {
        return Err(EstimationError::WrongFrame {
            expected: Frame::Camera,
            actual: d.frame,
        });
    }
    let s = (d.magnitude / g_sat).clamp(0.0, 1.0);
    let beta = border_bearing(d);
    let values = (0..segments)
        .map(|k| s * (ColorBar::segment_center(k, segments) - beta).cos())
        .collect();
    Ok(ColorBar {
        segments: values,
        brightness,
    })
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

/// Output of one pipeline sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutput {
    pub filtered: CornerRssSet,
    pub gradient: GradientEstimate,
    pub doa_body: Option<DoaEstimate>,
    pub doa_camera: Option<DoaEstimate>,
    pub bar: ColorBar,
    pub maf_window: usize,
}

/// Per-receiver EWMA → MAF chain feeding the gradient and DoA.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pipeline {
    cfg: EstimationConfig,
    array: AntennaArray,
    sample_rate: f64,
    wavelength: f64,
    ewma: [EwmaState; 5],
    maf: Vec<MafState>,
}

impl Pipeline {
    pub fn new(
        cfg: EstimationConfig,
        array: AntennaArray,
        sample_rate: f64,
        wavelength: f64,
    ) -> Result<Self, EstimationError> {
        cfg.validate()?;
        let n = maf_window_size(0.0, sample_rate, wavelength, cfg.n_max, cfg.v_min)?;
        let ewma = EwmaState::new(cfg.alpha)?;
        Ok(Self {
            cfg,
            array,
            sample_rate,
            wavelength,
            ewma: [ewma; 5],
            maf: vec![MafState::new(n); 5],
        })
    }

    pub fn config(&self) -> &EstimationConfig {
        &self.cfg
    }

    pub fn maf_window(&self) -> usize {
        self.maf[0].capacity()
    }

    /// EWMA output of the central receiver, if any sample was seen.
    pub fn ewma_center(&self) -> Option<f64> {
        self.ewma[4].last()
    }

    fn adapt_window(&mut self, speed: f64) -> Result<(), EstimationError> {
        let target = maf_window_size(speed, self.sample_rate, self.wavelength, self.cfg.n_max, self.cfg.v_min)?;
        let current = self.maf_window();
        let change = (target as f64 - current as f64).abs();
        if target != current && change >= self.cfg.resize_hysteresis * current as f64 {
            for m in &mut self.maf {
                m.resize(target);
            }
        }
        Ok(())
    }

    /// Processes one sample of raw (FR, FL, BR, BL, C) readings taken at
    /// `timestamp` while moving at `speed` with the given camera yaw.
    pub fn process(
        &mut self,
        raw: [f64; 5],
        timestamp: f64,
        speed: f64,
        camera_yaw: f64,
    ) -> Result<PipelineOutput, EstimationError> {
        if let Some(bad) = raw.iter().find(|v| !v.is_finite()) {
            return Err(EstimationError::NonFinite(*bad));
        }
        self.adapt_window(speed)?;
        let mut filtered = [0.0; 5];
        for i in 0..5 {
            let e = self.ewma[i].update(raw[i])?;
            filtered[i] = self.maf[i].update(e)?;
        }
        let filtered = CornerRssSet::from_array(filtered, timestamp);
        let gradient = rss_gradient(&filtered, &self.array);
        let doa_body = doa(&gradient, self.cfg.epsilon).ok();
        let doa_camera = doa_body
            .as_ref()
            .map(|d| to_camera_frame(d, camera_yaw))
            .transpose()?;
        let bar = color_bar(doa_camera.as_ref(), &filtered, self.cfg.segments, self.cfg.g_sat)?;
        Ok(PipelineOutput {
            filtered,
            gradient,
            doa_body,
            doa_camera,
            bar,
            maf_window: self.maf_window(),
        })
    }
}
