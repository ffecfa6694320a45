//! Trial rules engine and its append-only log.
//!
//! A [`Session`] owns the vehicle, the odometry integrator and the
//! estimation pipeline. Physics runs at the scenario's `physics_rate`; the
//! five receivers are sampled every `physics_rate / rss_rate` ticks. Each
//! tick produces exactly one [`TickRecord`], which doubles as the telemetry
//! frame handed to pilots and the network layer.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimation::{
    rss_to_percent, signal_bars, ColorBar, DoaEstimate, EstimationError, GradientEstimate, Pipeline,
    PipelineOutput,
};
use crate::evaluation::CoverageGrid;
use crate::field::FieldModel;
use crate::geometry::{Segment, Vec2};
use crate::scenario::{detect_symbols, Pose, Scenario, ScenarioError};
use crate::vehicle::{
    antenna_boresights, antenna_positions, step, FlcCommand, Odometry, OdometryReading, VehicleState,
};

pub const LOG_FORMAT_VERSION: u32 = 1;

/// Tolerance when comparing accumulated tick time against limits.
const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Status {
    Running,
    Timeout,
    SignalLost,
}

impl Status {
    pub fn is_terminal(self) -> bool {
        self != Status::Running
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    SymbolFound { id: u32 },
    MarkFound { id: u32, visible: bool },
    Collision,
    SignalLost,
    Timeout,
}

/// One physics tick: the telemetry frame and the log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub tick: u64,
    pub t: f64,
    pub status: Status,
    pub true_pose: Pose,
    pub camera_yaw: f64,
    pub odometry: OdometryReading,
    /// Whether the receivers were sampled on this tick.
    pub sampled: bool,
    /// Latest raw readings (FR, FL, BR, BL, C), dBm.
    pub raw: [f64; 5],
    /// Latest EWMA→MAF readings (FR, FL, BR, BL, C), dBm.
    pub filtered: [f64; 5],
    /// Latest EWMA output of the central receiver, dBm.
    pub ewma_center: f64,
    pub gradient: GradientEstimate,
    pub doa_body: Option<DoaEstimate>,
    pub doa_camera: Option<DoaEstimate>,
    pub bar: ColorBar,
    pub rss_percent: f64,
    pub bars: u8,
    pub maf_window: usize,
    pub command: FlcCommand,
    pub collision: bool,
    pub symbols_found: Vec<u32>,
    pub time_remaining: f64,
    pub events: Vec<Event>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub format_version: u32,
    pub scenario_hash: String,
    pub seed: u64,
    pub scenario: Scenario,
    /// Free-form description of what drove the trial (pilot policy, etc.).
    #[serde(default)]
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialLog {
    pub header: LogHeader,
    pub records: Vec<TickRecord>,
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
}

pub struct Session {
    scenario: Scenario,
    seed: u64,
    field: FieldModel,
    obstacles: Vec<Segment>,
    vehicle: VehicleState,
    odometry: Odometry,
    pipeline: Pipeline,
    sample: PipelineOutput,
    raw: [f64; 5],
    tick: u64,
    status: Status,
    symbols_found: BTreeSet<u32>,
    collision_count: u32,
    below_since: Option<f64>,
    pending: Vec<Event>,
    coverage: CoverageGrid,
    records: Vec<TickRecord>,
    last: TickRecord,
}

impl Session {
    /// Starts a session at the scenario's spawn pose. The trial `seed`
    /// selects the fading realization and the odometry noise; the static
    /// environment comes from the map's own seed.
    pub fn new(scenario: Scenario, seed: u64) -> Result<Self, SessionError> {
        scenario.validate()?;
        let field = scenario
            .map
            .build()
            .map_err(ScenarioError::from)?
            .with_fading_seed(seed);
        let vehicle = scenario.spawn_state();
        let odometry = Odometry::new(&vehicle, scenario.odometry, seed);
        let mut pipeline = Pipeline::new(
            scenario.estimation,
            scenario.antennas,
            scenario.rss_rate,
            field.wavelength(),
        )?;
        let raw = sample_receivers(&field, &scenario, &vehicle);
        let sample = pipeline.process(raw, 0.0, 0.0, vehicle.camera_yaw)?;
        let coverage = CoverageGrid::new(scenario.map.bounds, scenario.evaluation.coverage_cell);
        let obstacles = scenario.obstacles();
        let mut s = Self {
            scenario,
            seed,
            field,
            obstacles,
            vehicle,
            odometry,
            pipeline,
            sample,
            raw,
            tick: 0,
            status: Status::Running,
            symbols_found: BTreeSet::new(),
            collision_count: 0,
            below_since: None,
            pending: Vec::new(),
            coverage,
            records: Vec::new(),
            last: placeholder_record(),
        };
        s.last = s.frame(false, FlcCommand::STOP, false, Vec::new());
        Ok(s)
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn field(&self) -> &FieldModel {
        &self.field
    }

    pub fn status(&self) -> Status {
        self.status
    }

    pub fn vehicle(&self) -> &VehicleState {
        &self.vehicle
    }

    pub fn elapsed(&self) -> f64 {
        self.tick as f64 * self.scenario.dt()
    }

    pub fn ticks(&self) -> u64 {
        self.tick
    }

    pub fn symbols_found(&self) -> &BTreeSet<u32> {
        &self.symbols_found
    }

    pub fn collision_count(&self) -> u32 {
        self.collision_count
    }

    pub fn coverage(&self) -> &CoverageGrid {
        &self.coverage
    }

    /// Most recent frame (the initial frame before the first tick).
    pub fn last_frame(&self) -> &TickRecord {
        &self.last
    }

    pub fn records(&self) -> &[TickRecord] {
        &self.records
    }

    /// Records an operator "mark found" action in the next tick.
    pub fn mark_found(&mut self, id: u32) {
        if self.status.is_terminal() {
            return;
        }
        let visible = detect_symbols(&self.vehicle, &self.scenario).contains(&id);
        self.pending.push(Event::MarkFound { id, visible });
    }

    /// Advances one physics tick. On a terminated session this returns the
    /// terminal frame unchanged.
    pub fn tick(&mut self, cmd: &FlcCommand) -> Result<TickRecord, SessionError> {
        if self.status.is_terminal() {
            return Ok(self.last.clone());
        }
        let dt = self.scenario.dt();
        let cmd = cmd.clamped(&self.scenario.vehicle);
        let prev = self.vehicle;
        let outcome = step(&prev, &cmd, dt, &self.scenario.vehicle, &self.obstacles)
            .expect("scenario dt is within the integrator limit");
        self.tick += 1;
        let t = self.elapsed();
        self.vehicle = outcome.state;
        self.vehicle.time = t;
        let mut events = std::mem::take(&mut self.pending);
        // Count contacts, not ticks spent against a wall.
        if outcome.collided && !self.last.collision {
            self.collision_count += 1;
            events.push(Event::Collision);
        }
        let odo = self.odometry.update(&prev, &self.vehicle);

        let sampled = self.tick.is_multiple_of(self.scenario.ticks_per_sample());
        if sampled {
            self.raw = sample_receivers(&self.field, &self.scenario, &self.vehicle);
            self.sample = self
                .pipeline
                .process(self.raw, t, odo.nu.norm(), self.vehicle.camera_yaw)?;
            if self.sample.filtered.r_c < self.scenario.disconnect_threshold {
                self.below_since.get_or_insert(t);
            } else {
                self.below_since = None;
            }
        }

        for id in detect_symbols(&self.vehicle, &self.scenario) {
            if self.symbols_found.insert(id) {
                events.push(Event::SymbolFound { id });
            }
        }
        self.coverage.update(self.vehicle.position);

        let lost = self
            .below_since
            .is_some_and(|since| t - since >= self.scenario.disconnect_hold - TIME_EPS);
        if lost {
            self.status = Status::SignalLost;
            events.push(Event::SignalLost);
        } else if t >= self.scenario.time_limit - TIME_EPS {
            self.status = Status::Timeout;
            events.push(Event::Timeout);
        }

        let record = self.frame(sampled, cmd, outcome.collided, events);
        self.records.push(record.clone());
        self.last = record.clone();
        Ok(record)
    }

    fn frame(&self, sampled: bool, command: FlcCommand, collision: bool, events: Vec<Event>) -> TickRecord {
        let percent = rss_to_percent(self.sample.filtered.r_c);
        TickRecord {
            tick: self.tick,
            t: self.elapsed(),
            status: self.status,
            true_pose: Pose {
                position: self.vehicle.position,
                heading: self.vehicle.heading,
            },
            camera_yaw: self.vehicle.camera_yaw,
            odometry: self.odometry.reading(),
            sampled,
            raw: self.raw,
            filtered: self.sample.filtered.to_array(),
            ewma_center: self.pipeline.ewma_center().unwrap_or(self.sample.filtered.r_c),
            gradient: self.sample.gradient,
            doa_body: self.sample.doa_body,
            doa_camera: self.sample.doa_camera,
            bar: self.sample.bar.clone(),
            rss_percent: percent,
            bars: signal_bars(percent),
            maf_window: self.sample.maf_window,
            command,
            collision,
            symbols_found: self.symbols_found.iter().copied().collect(),
            time_remaining: (self.scenario.time_limit - self.elapsed()).max(0.0),
            events,
        }
    }

    /// Snapshot of the log so far.
    pub fn log(&self, config: serde_json::Value) -> TrialLog {
        TrialLog {
            header: LogHeader {
                format_version: LOG_FORMAT_VERSION,
                scenario_hash: self.scenario.hash(),
                seed: self.seed,
                scenario: self.scenario.clone(),
                config,
            },
            records: self.records.clone(),
        }
    }

    /// Consumes the session, returning its log.
    pub fn into_log(self, config: serde_json::Value) -> TrialLog {
        TrialLog {
            header: LogHeader {
                format_version: LOG_FORMAT_VERSION,
                scenario_hash: self.scenario.hash(),
                seed: self.seed,
                scenario: self.scenario,
                config,
            },
            records: self.records,
        }
    }
}

fn sample_receivers(field: &FieldModel, scenario: &Scenario, state: &VehicleState) -> [f64; 5] {
    let pos = antenna_positions(state, &scenario.antennas);
    let t = state.time;
    match &scenario.antennas.pattern {
        None => pos.map(|p| field.rss_at(p, t)),
        Some(pattern) => {
            let bore = antenna_boresights(state, &scenario.antennas);
            let mut out = [0.0; 5];
            for i in 0..4 {
                out[i] = field.rss_at_directional(pos[i], t, bore[i], pattern);
            }
            out[4] = field.rss_at(pos[4], t);
            out
        }
    }
}

fn placeholder_record() -> TickRecord {
    TickRecord {
        tick: 0,
        t: 0.0,
        status: Status::Running,
        true_pose: Pose {
            position: Vec2::ZERO,
            heading: 0.0,
        },
        camera_yaw: 0.0,
        odometry: OdometryReading {
            position: Vec2::ZERO,
            heading: 0.0,
            nu: Vec2::ZERO,
        },
        sampled: false,
        raw: [0.0; 5],
        filtered: [0.0; 5],
        ewma_center: 0.0,
        gradient: GradientEstimate::default(),
        doa_body: None,
        doa_camera: None,
        bar: ColorBar::neutral(0, 0.0),
        rss_percent: 0.0,
        bars: 0,
        maf_window: 0,
        command: FlcCommand::STOP,
        collision: false,
        symbols_found: Vec::new(),
        time_remaining: 0.0,
        events: Vec::new(),
    }
}

// ---------------------------------------------------------------------------
// NDJSON log file
// ---------------------------------------------------------------------------

#[derive(Debug, Error)]
pub enum LogError {
    #[error("log i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("log is empty")]
    Empty,
    #[error("line {line}: malformed entry after {}: {message}", describe_last(*last_valid_tick))]
    Corrupt {
        line: usize,
        last_valid_tick: Option<u64>,
        message: String,
    },
    #[error("log ends without a footer (truncated) after {}", describe_last(*last_valid_tick))]
    Truncated { last_valid_tick: Option<u64> },
    #[error("footer announces {expected} records, found {found}")]
    CountMismatch { expected: usize, found: usize },
    #[error("scenario hash mismatch: header says {stored}, scenario hashes to {computed}")]
    HashMismatch { stored: String, computed: String },
    #[error("line {line}: timestamp {t} does not increase (previous {previous})")]
    NonMonotone { line: usize, t: f64, previous: f64 },
    #[error("unsupported log format_version {0}")]
    UnsupportedVersion(u32),
}

fn describe_last(tick: Option<u64>) -> String {
    match tick {
        Some(t) => format!("last valid record tick {t}"),
        None => "the header (no valid records)".to_string(),
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogLine {
    Header(Box<LogHeader>),
    Record(Box<TickRecord>),
    Footer { record_count: usize },
}

impl TrialLog {
    pub fn write_to(&self, w: impl Write) -> Result<(), LogError> {
        let mut w = BufWriter::new(w);
        serde_json::to_writer(&mut w, &LogLine::Header(Box::new(self.header.clone())))
            .map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut w, &LogLine::Record(Box::new(r.clone()))).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        serde_json::to_writer(
            &mut w,
            &LogLine::Footer {
                record_count: self.records.len(),
            },
        )
        .map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory cannot fail");
        buf
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), LogError> {
        let f = std::fs::File::create(path)?;
        self.write_to(f)
    }

    pub fn read_from(r: impl std::io::Read) -> Result<Self, LogError> {
        let reader = BufReader::new(r);
        let mut header: Option<LogHeader> = None;
        let mut records: Vec<TickRecord> = Vec::new();
        let mut footer: Option<usize> = None;
        for (idx, line) in reader.lines().enumerate() {
            let line_no = idx + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let last_valid_tick = records.last().map(|r| r.tick);
            let corrupt = |message: String| LogError::Corrupt {
                line: line_no,
                last_valid_tick,
                message,
            };
            if footer.is_some() {
                return Err(corrupt("content after footer".into()));
            }
            let entry: LogLine = serde_json::from_str(&line).map_err(|e| corrupt(e.to_string()))?;
            match (entry, header.is_some()) {
                (LogLine::Header(h), false) => {
                    if h.format_version != LOG_FORMAT_VERSION {
                        return Err(LogError::UnsupportedVersion(h.format_version));
                    }
                    let computed = h.scenario.hash();
                    if computed != h.scenario_hash {
                        return Err(LogError::HashMismatch {
                            stored: h.scenario_hash.clone(),
                            computed,
                        });
                    }
                    header = Some(*h);
                }
                (LogLine::Header(_), true) => return Err(corrupt("duplicate header".into())),
                (_, false) => return Err(corrupt("first line is not a header".into())),
                (LogLine::Record(r), true) => {
                    if let Some(prev) = records.last() {
                        if !(r.t > prev.t) {
                            return Err(LogError::NonMonotone {
                                line: line_no,
                                t: r.t,
                                previous: prev.t,
                            });
                        }
                    }
                    records.push(*r);
                }
                (LogLine::Footer { record_count }, true) => footer = Some(record_count),
            }
        }
        let header = header.ok_or(LogError::Empty)?;
        let expected = footer.ok_or(LogError::Truncated {
            last_valid_tick: records.last().map(|r| r.tick),
        })?;
        if expected != records.len() {
            return Err(LogError::CountMismatch {
                expected,
                found: records.len(),
            });
        }
        Ok(TrialLog { header, records })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, LogError> {
        Self::read_from(std::fs::File::open(path)?)
    }
}
