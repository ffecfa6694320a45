//! Radio-field simulation, RSS-gradient direction-of-arrival estimation and
//! headless teleoperation trials.
//!
//! The modules build on each other in order: [`geometry`] and [`field`]
//! describe the world, [`vehicle`] moves the robot and its antennas,
//! [`estimation`] turns five receiver readings into a DoA, [`session`]
//! runs a trial and logs it, and [`evaluation`] scores the log.

pub mod estimation;
pub mod evaluation;
pub mod field;
pub mod geometry;
pub mod pilot;
pub mod scenario;
pub mod session;
pub mod trial;
pub mod vehicle;

pub use estimation::{
    color_bar, doa, maf_window_size, rss_gradient, rss_to_percent, signal_bars, to_camera_frame,
    ColorBar, CornerRssSet, DoaEstimate, EstimationConfig, EwmaState, Frame, GradientEstimate,
    MafState, Pipeline, PipelineOutput,
};
pub use evaluation::{
    confusion_update, doa_error, metrics, scalar_product, temporal_derivative, trial_metrics,
    ConfusionCounts, CoverageGrid, EvalConfig, Metrics, TrialReport,
};
pub use field::{build_field, FieldModel, MapFile, PropagationParams, WallSegment};
pub use geometry::{wrap_angle, Bounds, Segment, Vec2};
pub use pilot::{Pilot, PilotPolicy};
pub use scenario::{InterfaceMode, NoiseProfile, Scenario};
pub use session::{Event, Session, Status, TickRecord, TrialLog};
pub use trial::{run_suite, run_trial, SuiteReport, TrialSpec};
pub use vehicle::{AntennaArray, FlcCommand, OdometryNoise, VehicleConfig, VehicleState};
