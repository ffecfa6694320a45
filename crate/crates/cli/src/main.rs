//! `doateleop`: headless trials, suites, log evaluation, RSS map probes and
//! the teleoperation servers. Every flag can also be set through a
//! `DOATELEOP_<FLAG>` environment variable.

mod output;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use doateleop_core::pilot::{RandomWalkParams, WaypointParams};
use doateleop_core::trial::default_suite_for;
use doateleop_core::{
    run_suite, run_trial, trial_metrics, NoiseProfile, PilotPolicy, Scenario, TrialLog, TrialSpec, Vec2,
};
use doateleop_server::{replay_serve_path, serve, ReplayConfig, ServerConfig};

use output::{report_csv, Format};

#[derive(Parser)]
#[command(name = "doateleop", version, about = "RSS-gradient DoA teleoperation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Drive one headless trial with a scripted pilot.
    Run(RunArgs),
    /// Run a batch of trials in parallel and print the aggregate table.
    Suite(SuiteArgs),
    /// Recompute the report of a saved trial log.
    Evaluate(EvaluateArgs),
    /// Host live sessions for an operator console.
    Serve(ServeArgs),
    /// Stream a saved log over the session socket.
    Replay(ReplayArgs),
    /// Sample the RSS field on a regular grid.
    MapProbe(ProbeArgs),
}

#[derive(Args, Clone)]
struct WorldArgs {
    /// Scenario JSON file, or `default` for the built-in maze.
    #[arg(long, env = "DOATELEOP_SCENARIO", default_value = "default")]
    scenario: String,
    /// `off`, `default` (the scenario's own channel) or a noise-profile JSON file.
    #[arg(long, env = "DOATELEOP_NOISE", default_value = "default")]
    noise: String,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    world: WorldArgs,
    #[arg(long, env = "DOATELEOP_SEED", default_value_t = 1)]
    seed: u64,
    /// `gradient-follower`, `random-walk`, `waypoint`, `idle`, inline JSON,
    /// or a pilot JSON file.
    #[arg(long, env = "DOATELEOP_PILOT", default_value = "gradient-follower")]
    pilot: String,
    /// Waypoint `X,Y` in metres; repeat for a path. Implies the waypoint pilot.
    #[arg(long = "waypoint", value_parser = parse_point)]
    waypoints: Vec<Vec2>,
    /// Pilot speed override, m/s.
    #[arg(long, env = "DOATELEOP_SPEED")]
    speed: Option<f64>,
    /// Write the trial log here.
    #[arg(long, env = "DOATELEOP_OUT")]
    out: Option<PathBuf>,
    /// Write the report here instead of stdout.
    #[arg(long, env = "DOATELEOP_REPORT")]
    report: Option<PathBuf>,
    #[arg(long, env = "DOATELEOP_FORMAT", value_enum, default_value_t = Format::Table)]
    format: Format,
}

#[derive(Args)]
struct SuiteArgs {
    #[command(flatten)]
    world: WorldArgs,
    /// JSON array of trial specs; defaults to the eight radial missions.
    #[arg(long, env = "DOATELEOP_SUITE")]
    suite: Option<PathBuf>,
    /// Renumber trial seeds from this value.
    #[arg(long, env = "DOATELEOP_SEED")]
    seed: Option<u64>,
    /// Directory for per-trial logs.
    #[arg(long, env = "DOATELEOP_OUT")]
    out: Option<PathBuf>,
    #[arg(long, env = "DOATELEOP_REPORT")]
    report: Option<PathBuf>,
    #[arg(long, env = "DOATELEOP_FORMAT", value_enum, default_value_t = Format::Table)]
    format: Format,
}

#[derive(Args)]
struct EvaluateArgs {
    log: PathBuf,
    #[arg(long, env = "DOATELEOP_REPORT")]
    report: Option<PathBuf>,
    #[arg(long, env = "DOATELEOP_FORMAT", value_enum, default_value_t = Format::Table)]
    format: Format,
    /// Also write per-sample evaluation rows (CSV) here.
    #[arg(long)]
    samples: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    /// Scenario files or `default`; repeat to offer several.
    #[arg(long, env = "DOATELEOP_SCENARIO", value_delimiter = ',', default_value = "default")]
    scenario: Vec<String>,
    #[arg(long, env = "DOATELEOP_NOISE", default_value = "default")]
    noise: String,
    #[arg(long, env = "DOATELEOP_BIND", default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
    /// Send ground truth in telemetry.
    #[arg(long, env = "DOATELEOP_DEBUG")]
    debug: bool,
    #[arg(long, env = "DOATELEOP_TELEMETRY_RATE", default_value_t = 10.0)]
    telemetry_rate: f64,
    /// Simulated seconds per wall-clock second.
    #[arg(long, env = "DOATELEOP_TIME_SCALE", default_value_t = 1.0)]
    time_scale: f64,
    /// Seconds a disconnected session waits for its operator.
    #[arg(long, env = "DOATELEOP_RESUME_GRACE", default_value_t = 30.0)]
    resume_grace: f64,
    /// Seconds between the final frame and closing the socket.
    #[arg(long, env = "DOATELEOP_CLOSE_GRACE", default_value_t = 1.0)]
    close_grace: f64,
    /// Directory for session logs.
    #[arg(long, env = "DOATELEOP_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReplayArgs {
    log: PathBuf,
    #[arg(long, env = "DOATELEOP_BIND", default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
    /// Playback rate; 0 steps one frame per `step` message.
    #[arg(long, env = "DOATELEOP_SPEED", default_value_t = 1.0)]
    speed: f64,
    #[arg(long, env = "DOATELEOP_DEBUG")]
    debug: bool,
    #[arg(long, env = "DOATELEOP_CLOSE_GRACE", default_value_t = 1.0)]
    close_grace: f64,
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    world: WorldArgs,
    /// Fading realization.
    #[arg(long, env = "DOATELEOP_SEED", default_value_t = 0)]
    seed: u64,
    /// Grid spacing, m.
    #[arg(long, env = "DOATELEOP_STEP", default_value_t = 0.25)]
    step: f64,
    /// Simulation time for time-varying fading, s.
    #[arg(long, default_value_t = 0.0)]
    time: f64,
    /// `total` RSS, or the `mean` (path loss and walls only).
    #[arg(long, value_enum, default_value_t = output::Component::Total)]
    component: output::Component,
    #[arg(long, env = "DOATELEOP_OUT")]
    out: Option<PathBuf>,
    #[arg(long, env = "DOATELEOP_FORMAT", value_enum, default_value_t = Format::Csv)]
    format: Format,
}

fn parse_point(s: &str) -> Result<Vec2, String> {
    let (x, y) = s.split_once(',').ok_or_else(|| format!("expected X,Y, got `{s}`"))?;
    let p = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}"));
    Ok(Vec2::new(p(x)?, p(y)?))
}

fn load_scenario(spec: &str) -> Result<Scenario> {
    if spec == "default" || spec == "default-maze" {
        return Ok(Scenario::default_maze());
    }
    Scenario::load(spec).with_context(|| format!("loading scenario {spec}"))
}

fn apply_noise(scenario: Scenario, noise: &str) -> Result<Scenario> {
    Ok(match noise {
        "default" => scenario,
        "off" => scenario.with_noise(&NoiseProfile::OFF),
        path => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading noise profile {path}"))?;
            let profile: NoiseProfile =
                serde_json::from_str(&text).with_context(|| format!("parsing noise profile {path}"))?;
            scenario.with_noise(&profile)
        }
    })
}

impl WorldArgs {
    fn scenario(&self) -> Result<Scenario> {
        apply_noise(load_scenario(&self.scenario)?, &self.noise)
    }
}

fn parse_pilot(args: &RunArgs) -> Result<PilotPolicy> {
    let text = args.pilot.trim();
    let mut policy = match text {
        _ if !args.waypoints.is_empty() => PilotPolicy::Waypoint(WaypointParams {
            waypoints: args.waypoints.clone(),
            ..WaypointParams::default()
        }),
        "gradient-follower" => PilotPolicy::gradient_follower(),
        "random-walk" => PilotPolicy::RandomWalk(RandomWalkParams::default()),
        "idle" => PilotPolicy::Idle,
        "waypoint" => bail!("the waypoint pilot needs at least one --waypoint X,Y"),
        _ if text.starts_with('{') => serde_json::from_str(text).context("parsing inline pilot JSON")?,
        path => {
            let body = std::fs::read_to_string(path).with_context(|| format!("unknown pilot `{path}`"))?;
            serde_json::from_str(&body).with_context(|| format!("parsing pilot file {path}"))?
        }
    };
    if let Some(v) = args.speed {
        match &mut policy {
            PilotPolicy::GradientFollower(p) => p.speed = v,
            PilotPolicy::Waypoint(p) => p.speed = v,
            PilotPolicy::RandomWalk(p) => p.speed = v,
            PilotPolicy::Idle => {}
        }
    }
    Ok(policy)
}

fn emit(text: &str, dest: Option<&Path>) -> Result<()> {
    match dest {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            if !text.ends_with('\n') {
                println!();
            }
            Ok(())
        }
    }
}

fn render_report(r: &doateleop_core::TrialReport, format: Format) -> Result<String> {
    Ok(match format {
        Format::Json => serde_json::to_string_pretty(r)?,
        Format::Table => r.to_table(),
        Format::Csv => report_csv(r)?,
    })
}

fn run(args: RunArgs) -> Result<bool> {
    let scenario = args.world.scenario()?;
    let pilot = parse_pilot(&args)?;
    let (log, report) = run_trial(&scenario, &pilot, args.seed)?;
    if let Some(out) = &args.out {
        log.write(out).with_context(|| format!("writing log {}", out.display()))?;
    }
    emit(&render_report(&report, args.format)?, args.report.as_deref())?;
    Ok(report.status.is_terminal())
}

fn suite(args: SuiteArgs) -> Result<bool> {
    let mut specs: Vec<TrialSpec> = match &args.suite {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let mut specs: Vec<TrialSpec> = serde_json::from_str(&text).context("parsing suite file")?;
            if args.world.noise != "default" {
                for s in &mut specs {
                    s.scenario = apply_noise(s.scenario.clone(), &args.world.noise)?;
                }
            }
            specs
        }
        None => default_suite_for(&args.world.scenario()?),
    };
    if let Some(base) = args.seed {
        for (i, s) in specs.iter_mut().enumerate() {
            s.seed = base + i as u64;
        }
    }
    let report = run_suite(&specs)?;
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
        for spec in &specs {
            let (log, _) = run_trial(&spec.scenario, &spec.pilot, spec.seed)?;
            log.write(dir.join(format!("{}.ndjson", spec.name)))?;
        }
    }
    let text = match args.format {
        Format::Json => serde_json::to_string_pretty(&report)?,
        Format::Table => report.to_table(),
        Format::Csv => report.to_csv(),
    };
    emit(&text, args.report.as_deref())?;
    for t in report.trials.iter().filter(|t| t.error.is_some()) {
        eprintln!("trial {} failed: {}", t.name, t.error.as_deref().unwrap_or_default());
    }
    Ok(report.all_completed())
}

fn evaluate(args: EvaluateArgs) -> Result<bool> {
    let log = TrialLog::read(&args.log).with_context(|| format!("reading log {}", args.log.display()))?;
    let report = trial_metrics(&log)?;
    emit(&render_report(&report, args.format)?, args.report.as_deref())?;
    if let Some(path) = &args.samples {
        let samples = doateleop_core::evaluation::eval_samples(&log);
        std::fs::write(path, doateleop_core::evaluation::eval_samples_csv(&samples))?;
    }
    if !report.status.is_terminal() {
        eprintln!("log ends before the session terminated");
    }
    Ok(report.status.is_terminal())
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

fn seconds(v: f64, name: &str) -> Result<Duration> {
    Duration::try_from_secs_f64(v).map_err(|_| anyhow::anyhow!("--{name} must be a non-negative number of seconds"))
}

fn serve_cmd(args: ServeArgs) -> Result<bool> {
    let mut scenarios = Vec::new();
    for s in &args.scenario {
        scenarios.push(apply_noise(load_scenario(s)?, &args.noise)?);
    }
    let mut config = ServerConfig::new(scenarios[0].clone());
    for s in scenarios.into_iter().skip(1) {
        config = config.with_scenario(s);
    }
    config.debug = args.debug;
    config.telemetry_rate = args.telemetry_rate;
    config.time_scale = args.time_scale;
    config.resume_grace = seconds(args.resume_grace, "resume-grace")?;
    config.close_grace = seconds(args.close_grace, "close-grace")?;
    config.log_dir = args.out;
    runtime()?.block_on(async move {
        let server = serve(config, args.bind).await?;
        eprintln!("serving sessions on ws://{}/session", server.local_addr());
        tokio::signal::ctrl_c().await?;
        server.shutdown().await?;
        Ok(true)
    })
}

fn replay_cmd(args: ReplayArgs) -> Result<bool> {
    let config = ReplayConfig {
        speed: args.speed,
        debug: args.debug,
        close_grace: seconds(args.close_grace, "close-grace")?,
    };
    runtime()?.block_on(async move {
        let server = replay_serve_path(&args.log, args.bind, config).await?;
        eprintln!("replaying {} on ws://{}/session", args.log.display(), server.local_addr());
        tokio::signal::ctrl_c().await?;
        server.shutdown().await?;
        Ok(true)
    })
}

fn map_probe(args: ProbeArgs) -> Result<bool> {
    let scenario = args.world.scenario()?;
    let grid = output::probe(&scenario, args.seed, args.step, args.time, args.component)?;
    let text = match args.format {
        Format::Json => serde_json::to_string(&grid)?,
        Format::Csv => grid.to_csv(),
        Format::Table => grid.to_table(),
    };
    emit(&text, args.out.as_deref())?;
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Suite(a) => suite(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Serve(a) => serve_cmd(a),
        Command::Replay(a) => replay_cmd(a),
        Command::MapProbe(a) => map_probe(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
