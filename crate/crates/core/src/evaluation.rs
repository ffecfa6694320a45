//! Offline verification of the DoA feedback and mission metrics.
//!
//! Everything here is a pure function of a [`TrialLog`], so a report
//! computed live and one recomputed from the saved log are identical.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimation::GradientEstimate;
use crate::geometry::{wrap_angle, Bounds, Segment, Vec2};
use crate::session::{Event, Status, TrialLog};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("need at least two samples, got {0}")]
    TooFewSamples(usize),
    #[error("sample interval must be positive, got {0}")]
    BadInterval(f64),
    #[error("trial log has no records")]
    EmptyLog,
}

/// Which central-receiver series feeds the temporal derivative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeSource {
    /// EWMA output only.
    Ewma,
    /// EWMA followed by the moving average.
    Filtered,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Dead zone on the scalar product, dB/s.
    pub tau: f64,
    /// Coverage cell edge, m.
    pub coverage_cell: f64,
    pub derivative_source: DerivativeSource,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            coverage_cell: 0.15,
            derivative_source: DerivativeSource::Filtered,
        }
    }
}

/// `p = ⟨g, ν⟩`, both in the body frame.
pub fn scalar_product(g: &GradientEstimate, nu: Vec2) -> f64 {
    g.g.x * nu.x + g.g.y * nu.y
}

/// Forward differences `(R(i+1) − R(i)) / T_s`.
pub fn temporal_derivative(series: &[f64], sample_interval: f64) -> Result<Vec<f64>, EvalError> {
    if series.len() < 2 {
        return Err(EvalError::TooFewSamples(series.len()));
    }
    if !(sample_interval.is_finite() && sample_interval > 0.0) {
        return Err(EvalError::BadInterval(sample_interval));
    }
    Ok(series.windows(2).map(|w| (w[1] - w[0]) / sample_interval).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn merge(&self, other: &ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            tn: self.tn + other.tn,
            fn_: self.fn_ + other.fn_,
        }
    }
}

/// Classifies one `(p, dR_C/dt)` pair. Returns false when the sample falls
/// in the `|p| ≤ τ` dead zone and was skipped.
pub fn confusion_update(counts: &mut ConfusionCounts, p: f64, d_rc: f64, tau: f64) -> bool {
    if !(p.abs() > tau) {
        return false;
    }
    let rising = d_rc > 0.0;
    match (p > 0.0, rising) {
        (true, true) => counts.tp += 1,
        (true, false) => counts.fp += 1,
        (false, false) => counts.tn += 1,
        (false, true) => counts.fn_ += 1,
    }
    true
}

/// Sensitivity, specificity, precision and accuracy; `None` where the
/// denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub precision: Option<f64>,
    pub accuracy: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn metrics(c: &ConfusionCounts) -> Metrics {
    Metrics {
        sensitivity: ratio(c.tp, c.tp + c.fn_),
        specificity: ratio(c.tn, c.fp + c.tn),
        precision: ratio(c.tp, c.tp + c.fp),
        accuracy: ratio(c.tp + c.tn, c.total()),
    }
}

/// Absolute angular error, wrapped to `[0, π]`.
pub fn doa_error(estimate: f64, truth: f64) -> f64 {
    wrap_angle(estimate - truth).abs()
}

/// Visit counts on a square grid over the map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageGrid {
    origin: Vec2,
    cell_size: f64,
    nx: usize,
    ny: usize,
    counts: Vec<u32>,
    out_of_bounds: u64,
}

impl CoverageGrid {
    pub fn new(bounds: Bounds, cell_size: f64) -> Self {
        let nx = (bounds.width() / cell_size).ceil().max(1.0) as usize;
        let ny = (bounds.height() / cell_size).ceil().max(1.0) as usize;
        Self {
            origin: bounds.min,
            cell_size,
            nx,
            ny,
            counts: vec![0; nx * ny],
            out_of_bounds: 0,
        }
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    pub fn cell_of(&self, p: Vec2) -> Option<(usize, usize)> {
        let fx = (p.x - self.origin.x) / self.cell_size;
        let fy = (p.y - self.origin.y) / self.cell_size;
        if !(fx >= 0.0 && fy >= 0.0) {
            return None;
        }
        let (i, j) = (fx.floor() as usize, fy.floor() as usize);
        // Points on the far boundary belong to the last cell.
        let i = if i == self.nx && fx <= self.nx as f64 { i - 1 } else { i };
        let j = if j == self.ny && fy <= self.ny as f64 { j - 1 } else { j };
        (i < self.nx && j < self.ny).then_some((i, j))
    }

    /// Counts one visit of the cell containing `p`.
    pub fn update(&mut self, p: Vec2) {
        match self.cell_of(p) {
            Some((i, j)) => self.counts[j * self.nx + i] += 1,
            None => self.out_of_bounds += 1,
        }
    }

    pub fn count(&self, i: usize, j: usize) -> u32 {
        self.counts[j * self.nx + i]
    }

    pub fn out_of_bounds(&self) -> u64 {
        self.out_of_bounds
    }

    pub fn covered_cells(&self) -> usize {
        self.counts.iter().filter(|c| **c > 0).count()
    }

    /// Covered area, m².
    pub fn covered_area(&self) -> f64 {
        self.covered_cells() as f64 * self.cell_size * self.cell_size
    }

    pub fn total_visits(&self) -> u64 {
        self.counts.iter().map(|c| *c as u64).sum()
    }
}

/// One evaluated RSS sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSample {
    pub t: f64,
    pub p: f64,
    pub d_rc: f64,
    pub g: Vec2,
    pub nu: Vec2,
}

/// Pairs each sampled tick's scalar product with the forward difference of
/// the central receiver to the next sample.
pub fn eval_samples(log: &TrialLog) -> Vec<EvalSample> {
    let cfg = &log.header.scenario.evaluation;
    let ts = log.header.scenario.sample_interval();
    let sampled: Vec<_> = log.records.iter().filter(|r| r.sampled).collect();
    let rc: Vec<f64> = sampled
        .iter()
        .map(|r| match cfg.derivative_source {
            DerivativeSource::Ewma => r.ewma_center,
            DerivativeSource::Filtered => r.filtered[4],
        })
        .collect();
    let Ok(d_rc) = temporal_derivative(&rc, ts) else {
        return Vec::new();
    };
    sampled
        .iter()
        .zip(d_rc)
        .map(|(r, d)| EvalSample {
            t: r.t,
            p: scalar_product(&r.gradient, r.odometry.nu),
            d_rc: d,
            g: r.gradient.g,
            nu: r.odometry.nu,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub scenario: String,
    pub seed: u64,
    pub status: Status,
    pub ticks: usize,
    /// s
    pub execution_time: f64,
    pub connection_lost: bool,
    pub connection_lost_at: Option<f64>,
    /// m
    pub distance_traveled: f64,
    pub covered_cells: usize,
    /// m²
    pub covered_area: f64,
    /// dBm
    pub rss_initial: f64,
    /// dBm
    pub rss_mean: f64,
    /// Mean central RSS minus its first value, dB.
    pub rss_gain: f64,
    pub doa_samples_los: usize,
    pub doa_error_los_mean: Option<f64>,
    pub doa_error_los_max: Option<f64>,
    pub doa_samples_nlos: usize,
    /// Reported but not scored: the true DoA need not point at the source
    /// without line of sight.
    pub doa_error_nlos_mean: Option<f64>,
    pub confusion: ConfusionCounts,
    pub skipped_samples: usize,
    pub metrics: Metrics,
    pub symbols_found: Vec<u32>,
    pub collisions: usize,
}

/// Computes the report of a trial from its log.
pub fn trial_metrics(log: &TrialLog) -> Result<TrialReport, EvalError> {
    let last = log.records.last().ok_or(EvalError::EmptyLog)?;
    let scenario = &log.header.scenario;
    let ap = scenario.map.ap;
    let walls: Vec<Segment> = scenario.map.walls.iter().map(|w| w.segment()).collect();

    let mut distance = 0.0;
    let mut prev = scenario.spawn.position;
    let mut grid = CoverageGrid::new(scenario.map.bounds, scenario.evaluation.coverage_cell);
    for r in &log.records {
        distance += r.true_pose.position.distance(prev);
        prev = r.true_pose.position;
        grid.update(r.true_pose.position);
    }

    let rc: Vec<f64> = log.records.iter().filter(|r| r.sampled).map(|r| r.filtered[4]).collect();
    let (rss_initial, rss_mean) = match rc.first() {
        Some(first) => (*first, rc.iter().sum::<f64>() / rc.len() as f64),
        None => (last.filtered[4], last.filtered[4]),
    };

    let mut los = Vec::new();
    let mut nlos = Vec::new();
    for r in log.records.iter().filter(|r| r.sampled) {
        let Some(d) = r.doa_body else { continue };
        let pos = r.true_pose.position;
        let truth = (ap - pos).rotate(-r.true_pose.heading).angle();
        let err = doa_error(d.theta, truth);
        let sight = Segment::new(pos, ap);
        if walls.iter().any(|w| sight.intersects(w)) {
            nlos.push(err);
        } else {
            los.push(err);
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);

    let samples = eval_samples(log);
    let mut confusion = ConfusionCounts::default();
    let mut skipped = 0;
    for s in &samples {
        if !confusion_update(&mut confusion, s.p, s.d_rc, scenario.evaluation.tau) {
            skipped += 1;
        }
    }

    let connection_lost_at = log
        .records
        .iter()
        .find(|r| r.events.contains(&Event::SignalLost))
        .map(|r| r.t);

    Ok(TrialReport {
        scenario: scenario.name.clone(),
        seed: log.header.seed,
        status: last.status,
        ticks: log.records.len(),
        execution_time: last.t,
        connection_lost: connection_lost_at.is_some(),
        connection_lost_at,
        distance_traveled: distance,
        covered_cells: grid.covered_cells(),
        covered_area: grid.covered_area(),
        rss_initial,
        rss_mean,
        rss_gain: rss_mean - rss_initial,
        doa_samples_los: los.len(),
        doa_error_los_mean: mean(&los),
        doa_error_los_max: los.iter().cloned().reduce(f64::max),
        doa_samples_nlos: nlos.len(),
        doa_error_nlos_mean: mean(&nlos),
        confusion,
        skipped_samples: skipped,
        metrics: metrics(&confusion),
        symbols_found: last.symbols_found.clone(),
        collisions: log
            .records
            .iter()
            .filter(|r| r.events.contains(&Event::Collision))
            .count(),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.3}"))
}

impl TrialReport {
    /// Plain-text summary with the four feedback metrics as columns.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let m = &self.metrics;
        let _ = writeln!(out, "{:<12} {:>11} {:>11} {:>11} {:>11}", "", "Sensitivity", "Specificity", "Precision", "Accuracy");
        let _ = writeln!(
            out,
            "{:<12} {:>11} {:>11} {:>11} {:>11}",
            "Trial",
            fmt_opt(m.sensitivity),
            fmt_opt(m.specificity),
            fmt_opt(m.precision),
            fmt_opt(m.accuracy)
        );
        let _ = writeln!(out);
        let _ = writeln!(out, "status            {:?}", self.status);
        let _ = writeln!(out, "execution time    {:.2} s", self.execution_time);
        let _ = writeln!(out, "distance          {:.2} m", self.distance_traveled);
        let _ = writeln!(out, "covered cells     {} ({:.2} m²)", self.covered_cells, self.covered_area);
        let _ = writeln!(out, "RSS gain          {:+.2} dB", self.rss_gain);
        let _ = writeln!(out, "DoA error (LOS)   mean {} rad, max {} rad, n={}", fmt_opt(self.doa_error_los_mean), fmt_opt(self.doa_error_los_max), self.doa_samples_los);
        let _ = writeln!(out, "DoA error (NLOS)  mean {} rad, n={} (not scored)", fmt_opt(self.doa_error_nlos_mean), self.doa_samples_nlos);
        let c = &self.confusion;
        let _ = writeln!(out, "TP/FP/TN/FN       {}/{}/{}/{} (skipped {})", c.tp, c.fp, c.tn, c.fn_, self.skipped_samples);
        let _ = writeln!(out, "symbols found     {:?}", self.symbols_found);
        let _ = writeln!(out, "collisions        {}", self.collisions);
        out
    }
}

/// CSV of per-sample evaluation data.
pub fn eval_samples_csv(samples: &[EvalSample]) -> String {
    let mut out = String::from("t,p,d_rc,g_x,g_y,nu_x,nu_y\n");
    for s in samples {
        let _ = writeln!(out, "{},{},{},{},{},{},{}", s.t, s.p, s.d_rc, s.g.x, s.g.y, s.nu.x, s.nu.y);
    }
    out
}
