//! Headless trials and parallel suites.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::{metrics, trial_metrics, ConfusionCounts, EvalError, Metrics, TrialReport};
use crate::geometry::Vec2;
use crate::pilot::{PilotPolicy, WaypointParams};
use crate::scenario::{NoiseProfile, Scenario};
use crate::session::{Session, SessionError, TrialLog};

#[derive(Debug, Error)]
pub enum TrialError {
    #[error("pilot does not fit the scenario: {0}")]
    PilotMismatch(String),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("suite has no trials")]
    EmptySuite,
}

/// Drives a fresh session with `policy` until it terminates.
pub fn run_trial(
    scenario: &Scenario,
    policy: &PilotPolicy,
    seed: u64,
) -> Result<(TrialLog, TrialReport), TrialError> {
    policy.validate(scenario).map_err(TrialError::PilotMismatch)?;
    let mut pilot = policy.build(scenario, seed);
    let mut session = Session::new(scenario.clone(), seed)?;
    while !session.status().is_terminal() {
        let cmd = pilot.command(session.last_frame());
        session.tick(&cmd)?;
    }
    let config = serde_json::json!({ "pilot": policy });
    let log = session.into_log(config);
    let report = trial_metrics(&log)?;
    Ok((log, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSpec {
    pub name: String,
    pub scenario: Scenario,
    pub pilot: PilotPolicy,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub name: String,
    pub seed: u64,
    pub report: Option<TrialReport>,
    pub error: Option<String>,
}

/// Running sums over completed trials. Merging is associative and
/// commutative, so the aggregate does not depend on trial order.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Aggregate {
    pub trials: usize,
    pub failed: usize,
    pub pooled: ConfusionCounts,
    metric_sums: [f64; 4],
    metric_counts: [usize; 4],
    doa_error_sum: f64,
    doa_error_trials: usize,
    pub doa_error_max: Option<f64>,
    coverage_sum: f64,
    distance_sum: f64,
    rss_gain_sum: f64,
    pub connection_losses: usize,
    pub collisions: usize,
}

impl Aggregate {
    pub fn from_outcome(o: &TrialOutcome) -> Self {
        let Some(r) = &o.report else {
            return Aggregate { failed: 1, ..Default::default() };
        };
        let m = [r.metrics.sensitivity, r.metrics.specificity, r.metrics.precision, r.metrics.accuracy];
        let mut a = Aggregate {
            trials: 1,
            pooled: r.confusion,
            coverage_sum: r.covered_area,
            distance_sum: r.distance_traveled,
            rss_gain_sum: r.rss_gain,
            connection_losses: r.connection_lost as usize,
            collisions: r.collisions,
            doa_error_max: r.doa_error_los_max,
            ..Default::default()
        };
        for (i, v) in m.iter().enumerate() {
            if let Some(v) = v {
                a.metric_sums[i] = *v;
                a.metric_counts[i] = 1;
            }
        }
        if let Some(e) = r.doa_error_los_mean {
            a.doa_error_sum = e;
            a.doa_error_trials = 1;
        }
        a
    }

    pub fn merge(&self, o: &Aggregate) -> Aggregate {
        let mut a = *self;
        a.trials += o.trials;
        a.failed += o.failed;
        a.pooled = a.pooled.merge(&o.pooled);
        for i in 0..4 {
            a.metric_sums[i] += o.metric_sums[i];
            a.metric_counts[i] += o.metric_counts[i];
        }
        a.doa_error_sum += o.doa_error_sum;
        a.doa_error_trials += o.doa_error_trials;
        a.doa_error_max = match (a.doa_error_max, o.doa_error_max) {
            (Some(x), Some(y)) => Some(x.max(y)),
            (x, y) => x.or(y),
        };
        a.coverage_sum += o.coverage_sum;
        a.distance_sum += o.distance_sum;
        a.rss_gain_sum += o.rss_gain_sum;
        a.connection_losses += o.connection_losses;
        a.collisions += o.collisions;
        a
    }

    /// Per-trial metrics averaged over the trials where each is defined.
    pub fn mean_metrics(&self) -> Metrics {
        let m = |i: usize| (self.metric_counts[i] > 0).then(|| self.metric_sums[i] / self.metric_counts[i] as f64);
        Metrics {
            sensitivity: m(0),
            specificity: m(1),
            precision: m(2),
            accuracy: m(3),
        }
    }

    /// Metrics of all samples pooled across trials.
    pub fn pooled_metrics(&self) -> Metrics {
        metrics(&self.pooled)
    }

    /// Mean over trials of each trial's mean LOS DoA error, rad.
    pub fn mean_doa_error(&self) -> Option<f64> {
        (self.doa_error_trials > 0).then(|| self.doa_error_sum / self.doa_error_trials as f64)
    }

    fn per_trial(&self, sum: f64) -> Option<f64> {
        (self.trials > 0).then(|| sum / self.trials as f64)
    }

    pub fn mean_covered_area(&self) -> Option<f64> {
        self.per_trial(self.coverage_sum)
    }

    pub fn mean_distance(&self) -> Option<f64> {
        self.per_trial(self.distance_sum)
    }

    pub fn mean_rss_gain(&self) -> Option<f64> {
        self.per_trial(self.rss_gain_sum)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub trials: Vec<TrialOutcome>,
    pub aggregate: Aggregate,
    pub mean: Metrics,
    pub pooled: Metrics,
    pub mean_doa_error: Option<f64>,
}

impl SuiteReport {
    pub fn all_completed(&self) -> bool {
        self.aggregate.failed == 0
    }

    /// Per-trial rows and the mean, four feedback metrics as columns.
    pub fn to_table(&self) -> String {
        use std::fmt::Write as _;
        let f = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.2}"));
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<16} {:>11} {:>11} {:>11} {:>11} {:>10} {:>9}",
            "", "Sensitivity", "Specificity", "Precision", "Accuracy", "DoA err", "Status"
        );
        for t in &self.trials {
            match &t.report {
                Some(r) => {
                    let m = &r.metrics;
                    let _ = writeln!(
                        out,
                        "{:<16} {:>11} {:>11} {:>11} {:>11} {:>10} {:>9?}",
                        t.name,
                        f(m.sensitivity),
                        f(m.specificity),
                        f(m.precision),
                        f(m.accuracy),
                        f(r.doa_error_los_mean),
                        r.status
                    );
                }
                None => {
                    let _ = writeln!(out, "{:<16} failed: {}", t.name, t.error.as_deref().unwrap_or("unknown"));
                }
            }
        }
        let m = &self.mean;
        let _ = writeln!(
            out,
            "{:<16} {:>11} {:>11} {:>11} {:>11} {:>10}",
            "Mean",
            f(m.sensitivity),
            f(m.specificity),
            f(m.precision),
            f(m.accuracy),
            f(self.mean_doa_error)
        );
        let p = &self.pooled;
        let _ = writeln!(
            out,
            "{:<16} {:>11} {:>11} {:>11} {:>11}",
            "Pooled",
            f(p.sensitivity),
            f(p.specificity),
            f(p.precision),
            f(p.accuracy)
        );
        let a = &self.aggregate;
        let _ = writeln!(
            out,
            "\ncompleted {}/{}  connection losses {}  collisions {}  mean coverage {} m²  mean RSS gain {} dB",
            a.trials,
            a.trials + a.failed,
            a.connection_losses,
            a.collisions,
            f(a.mean_covered_area()),
            f(a.mean_rss_gain())
        );
        out
    }

    /// One CSV row per trial plus a mean row.
    pub fn to_csv(&self) -> String {
        use std::fmt::Write as _;
        let f = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        let mut out = String::from(
            "trial,seed,status,sensitivity,specificity,precision,accuracy,doa_error_los,tp,fp,tn,fn,covered_area,distance,rss_gain,connection_lost,error\n",
        );
        for t in &self.trials {
            match &t.report {
                Some(r) => {
                    let m = &r.metrics;
                    let c = &r.confusion;
                    let _ = writeln!(
                        out,
                        "{},{},{:?},{},{},{},{},{},{},{},{},{},{},{},{},{},",
                        t.name,
                        t.seed,
                        r.status,
                        f(m.sensitivity),
                        f(m.specificity),
                        f(m.precision),
                        f(m.accuracy),
                        f(r.doa_error_los_mean),
                        c.tp,
                        c.fp,
                        c.tn,
                        c.fn_,
                        r.covered_area,
                        r.distance_traveled,
                        r.rss_gain,
                        r.connection_lost
                    );
                }
                None => {
                    let err = t.error.as_deref().unwrap_or("").replace([',', '\n'], " ");
                    let _ = writeln!(out, "{},{},FAILED,,,,,,,,,,,,,,{}", t.name, t.seed, err);
                }
            }
        }
        let m = &self.mean;
        let c = &self.aggregate.pooled;
        let _ = writeln!(
            out,
            "mean,,,{},{},{},{},{},{},{},{},{},{},{},{},{},",
            f(m.sensitivity),
            f(m.specificity),
            f(m.precision),
            f(m.accuracy),
            f(self.mean_doa_error),
            c.tp,
            c.fp,
            c.tn,
            c.fn_,
            f(self.aggregate.mean_covered_area()),
            f(self.aggregate.mean_distance()),
            f(self.aggregate.mean_rss_gain()),
            self.aggregate.connection_losses
        );
        out
    }
}

/// Runs every trial on the rayon pool. A failing trial is reported in its
/// outcome and does not stop the others.
pub fn run_suite(trials: &[TrialSpec]) -> Result<SuiteReport, TrialError> {
    if trials.is_empty() {
        return Err(TrialError::EmptySuite);
    }
    let outcomes: Vec<TrialOutcome> = trials
        .par_iter()
        .map(|t| match run_trial(&t.scenario, &t.pilot, t.seed) {
            Ok((_, report)) => TrialOutcome {
                name: t.name.clone(),
                seed: t.seed,
                report: Some(report),
                error: None,
            },
            Err(e) => TrialOutcome {
                name: t.name.clone(),
                seed: t.seed,
                report: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    let aggregate = outcomes
        .par_iter()
        .map(Aggregate::from_outcome)
        .reduce(Aggregate::default, |a, b| a.merge(&b));
    Ok(SuiteReport {
        mean: aggregate.mean_metrics(),
        pooled: aggregate.pooled_metrics(),
        mean_doa_error: aggregate.mean_doa_error(),
        trials: outcomes,
        aggregate,
    })
}

/// Eight short missions on the built-in maze: out-and-back runs along
/// bearings 45° apart around the access point, pausing at each end.
pub fn default_suite(noise: &NoiseProfile) -> Vec<TrialSpec> {
    let base = Scenario::default_maze().with_noise(noise);
    default_suite_for(&base)
}

/// Dwell at each end of a run; long enough to flush the moving average so
/// each leg is judged on its own motion.
pub const SUITE_DWELL: f64 = 7.0;
pub const SUITE_SPEED: f64 = 0.2;
/// Closest approach to the access point, m.
pub const SUITE_NEAR: f64 = 1.0;

/// The default mission set applied to `base`. Each run starts
/// [`SUITE_NEAR`] from the access point and heads out along its bearing up
/// to the given range, shortened to stay clear of the walls.
pub fn default_suite_for(base: &Scenario) -> Vec<TrialSpec> {
    let ap = base.map.ap;
    let runs = [
        ("east", 0.0, 4.5),
        ("northeast", 45.0, 4.0),
        ("north", 90.0, 5.0),
        ("northwest", 135.0, 4.0),
        ("west", 180.0, 3.3),
        ("southwest", 225.0, 4.0),
        ("south", 270.0, 5.0),
        ("southeast", 315.0, 4.5),
    ];
    runs.iter()
        .enumerate()
        .map(|(i, &(name, bearing_deg, range))| {
            let dir = Vec2::from_angle(f64::to_radians(bearing_deg));
            let near = ap + dir * SUITE_NEAR;
            let far = ap + dir * range;
            let mut scenario = base.clone();
            scenario.spawn.position = near;
            scenario.spawn.heading = 0.0;
            TrialSpec {
                name: format!("radial-{name}"),
                scenario,
                pilot: PilotPolicy::Waypoint(WaypointParams {
                    speed: SUITE_SPEED,
                    waypoints: vec![far, near],
                    looped: true,
                    dwell: SUITE_DWELL,
                    ..WaypointParams::default()
                }),
                seed: 1000 + i as u64,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_suite_is_an_error() {
        assert!(matches!(run_suite(&[]), Err(TrialError::EmptySuite)));
    }

    #[test]
    fn failed_trial_is_reported_and_suite_continues() {
        let s = Scenario::default_maze().with_noise(&NoiseProfile::OFF);
        let mut short = s.clone();
        short.time_limit = 2.0;
        let trials = vec![
            TrialSpec {
                name: "ok".into(),
                scenario: short.clone(),
                pilot: PilotPolicy::Idle,
                seed: 1,
            },
            TrialSpec {
                name: "bad".into(),
                scenario: short,
                pilot: PilotPolicy::waypoints(0.3, vec![Vec2::new(1e6, 0.0)]),
                seed: 2,
            },
        ];
        let r = run_suite(&trials).unwrap();
        assert_eq!(r.aggregate.trials, 1);
        assert_eq!(r.aggregate.failed, 1);
        assert!(!r.all_completed());
        assert!(r.trials[1].error.as_ref().unwrap().contains("outside"));
        assert!(r.to_table().contains("failed"));
    }

    #[test]
    fn aggregate_merge_is_order_independent() {
        let s = Scenario::default_maze().with_noise(&NoiseProfile::OFF);
        let mut short = s.clone();
        short.time_limit = 8.0;
        let mut specs = default_suite_for(&short);
        specs.truncate(5);
        let r = run_suite(&specs).unwrap();
        let parts: Vec<Aggregate> = r.trials.iter().map(Aggregate::from_outcome).collect();
        let fwd = parts.iter().fold(Aggregate::default(), |a, b| a.merge(b));
        let rev = parts.iter().rev().fold(Aggregate::default(), |a, b| a.merge(b));
        let pairwise = parts[0].merge(&parts[1]).merge(&parts[2].merge(&parts[3]).merge(&parts[4]));
        assert_eq!(fwd.pooled, rev.pooled);
        assert_eq!(fwd.trials, pairwise.trials);
        let (a, b) = (fwd.mean_metrics(), rev.mean_metrics());
        for (x, y) in [(a.sensitivity, b.sensitivity), (a.accuracy, b.accuracy)] {
            match (x, y) {
                (Some(x), Some(y)) => assert!((x - y).abs() < 1e-12),
                (x, y) => assert_eq!(x, y),
            }
        }
    }
}
