mod svg;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use ftnet::blocking::{detect_gridlock, simulate_blocking, BlockingError, BlockingMode};
use ftnet::config::{ConfigError, NetworkConfig, Scenario};
use ftnet::metrics::{
    metrics_csv, metrics_table, sweep_csv, sweep_offset, webster_delay, MetricsError,
    WebsterInput,
};
use ftnet::model::{routing_depth, stability_report, validate, ModelError, RoutingDepth};
use ftnet::oracle::{compare_fluid_discrete, OracleError};
use ftnet::orbit::{coupling_time, find_periodic_orbit, Coupling, OrbitError, OrbitReport};
use ftnet::simulator::{simulate, NetworkState, SimError, Trajectory};
use svg::{line_plot, Series};

/// Fluid queueing networks under fixed-time signal control.
#[derive(Parser)]
#[command(name = "ftnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Output {
    /// Directory for report.json and CSV/SVG outputs.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    /// Also write SVG plots.
    #[arg(long)]
    svg: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Check a config for structural errors.
    Validate { config: PathBuf },
    /// Mean rates, effective demand and the stability margins.
    Stability {
        config: PathBuf,
        #[command(flatten)]
        out: Output,
    },
    /// Simulate from the config's initial state.
    Simulate {
        config: PathBuf,
        #[arg(long)]
        horizon: f64,
        /// Sampling interval for trajectory.csv (default: period / 100).
        #[arg(long)]
        interval: Option<f64>,
        #[command(flatten)]
        out: Output,
    },
    /// Periodic orbit from the empty state, with its certificate and metrics.
    Orbit {
        config: PathBuf,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
        #[arg(long, default_value_t = 100_000)]
        max_periods: usize,
        #[command(flatten)]
        out: Output,
    },
    /// Coupling time of the config's initial state with another state.
    Couple {
        config: PathBuf,
        /// Second state as `id=x` queue lengths (others empty); default: the orbit.
        #[arg(long = "with", value_name = "ID=X")]
        with: Vec<String>,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
        #[arg(long, default_value_t = 1000)]
        max_periods: usize,
        #[command(flatten)]
        out: Output,
    },
    /// Per-queue metrics over one period of the orbit.
    Metrics {
        config: PathBuf,
        #[command(flatten)]
        out: Output,
    },
    /// Orbit delay at a queue as its signal offset sweeps one cycle.
    SweepOffset {
        config: PathBuf,
        /// Queue whose service profile is shifted.
        #[arg(long)]
        queue: String,
        /// Number of offsets on a uniform grid over one period.
        #[arg(long, default_value_t = 48)]
        resolution: usize,
        #[command(flatten)]
        out: Output,
    },
    /// Simulate with the config's storage limits.
    Blocking {
        config: PathBuf,
        #[arg(long)]
        horizon: f64,
        #[arg(long, value_enum, default_value_t = Mode::RateCapped)]
        mode: Mode,
        /// Gate grid step for the strict mode.
        #[arg(long, default_value_t = 1e-3)]
        step: f64,
        #[arg(long)]
        interval: Option<f64>,
        #[command(flatten)]
        out: Output,
    },
    /// Sup-norm error between the fluid and discrete-vehicle models.
    OracleCompare {
        config: PathBuf,
        #[arg(long)]
        horizon: f64,
        /// Granularities (vehicles per fluid unit); default from config or 10,100,1000.
        #[arg(long, value_delimiter = ',')]
        granularity: Vec<u64>,
        #[arg(long)]
        step: Option<f64>,
        #[command(flatten)]
        out: Output,
    },
    /// Webster's delay approximation.
    Webster {
        #[arg(long = "T")]
        cycle: f64,
        #[arg(long = "g")]
        green: f64,
        #[arg(long = "q")]
        flow: f64,
        #[arg(long = "x")]
        ratio: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    RateCapped,
    Strict,
}

/// Exit statuses, one per failure class.
mod status {
    pub const IO: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const INVALID_NETWORK: u8 = 3;
    pub const UNSTABLE: u8 = 4;
    pub const SIMULATION: u8 = 5;
    pub const CONVERGENCE: u8 = 6;
    pub const DOMAIN: u8 = 7;
}

/// Marker for failures detected by the CLI itself.
#[derive(Debug)]
struct Failure(u8, String);

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.1)
    }
}

impl std::error::Error for Failure {}

fn model_status(e: &ModelError) -> u8 {
    match e {
        ModelError::Invalid(_) => status::INVALID_NETWORK,
        ModelError::SpectralRadius { .. } => status::UNSTABLE,
    }
}

fn sim_status(e: &SimError) -> u8 {
    match e {
        SimError::Model(m) => model_status(m),
        _ => status::SIMULATION,
    }
}

fn orbit_status(e: &OrbitError) -> u8 {
    match e {
        OrbitError::Model(m) => model_status(m),
        OrbitError::Simulation(s) => sim_status(s),
        OrbitError::UnstableNetwork { .. } => status::UNSTABLE,
        OrbitError::ShapeMismatch(_) => status::DOMAIN,
        OrbitError::MonotonicityViolated { .. } | OrbitError::MaxPeriodsExceeded { .. } => {
            status::CONVERGENCE
        }
    }
}

fn exit_status(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return f.0;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return status::IO;
        }
        if cause.downcast_ref::<ConfigError>().is_some() {
            return status::CONFIG;
        }
        if let Some(e) = cause.downcast_ref::<ModelError>() {
            return model_status(e);
        }
        if let Some(e) = cause.downcast_ref::<SimError>() {
            return sim_status(e);
        }
        if let Some(e) = cause.downcast_ref::<OrbitError>() {
            return orbit_status(e);
        }
        if let Some(e) = cause.downcast_ref::<MetricsError>() {
            return match e {
                MetricsError::Orbit(o) => orbit_status(o),
                _ => status::DOMAIN,
            };
        }
        if let Some(e) = cause.downcast_ref::<BlockingError>() {
            return match e {
                BlockingError::Simulation(s) => sim_status(s),
                _ => status::DOMAIN,
            };
        }
        if let Some(e) = cause.downcast_ref::<OracleError>() {
            return match e {
                OracleError::Model(m) => model_status(m),
                OracleError::Simulation(s) => sim_status(s),
                OracleError::InvalidConfig(_) => status::DOMAIN,
            };
        }
    }
    status::DOMAIN
}

fn load(path: &Path) -> Result<Scenario> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg = NetworkConfig::from_json(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(cfg.scenario()?)
}

fn load_valid(path: &Path) -> Result<Scenario> {
    let scenario = load(path)?;
    let report = validate(&scenario.network);
    if !report.is_valid() {
        bail!(Failure(status::INVALID_NETWORK, format!("invalid network: {report}")));
    }
    Ok(scenario)
}

fn positive(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        bail!(Failure(status::DOMAIN, format!("--{name} must be positive, got {v}")));
    }
    Ok(())
}

fn write(out: &Output, name: &str, contents: &str) -> Result<()> {
    fs::create_dir_all(&out.out_dir).with_context(|| format!("creating {}", out.out_dir.display()))?;
    let path = out.out_dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_report(out: &Output, report: &Value) -> Result<()> {
    write(out, "report.json", &serde_json::to_string_pretty(report)?)?;
    println!("{}", serde_json::to_string_pretty(report)?);
    Ok(())
}

fn labels(scenario: &Scenario) -> Vec<String> {
    scenario.network.queues().iter().map(|q| q.id.clone()).collect()
}

fn queue_plot(title: &str, traj: &Trajectory, labels: &[String], cap: Option<&[f64]>) -> String {
    let series: Vec<Series> = labels
        .iter()
        .enumerate()
        .map(|(i, label)| Series {
            label: label.clone(),
            points: traj
                .times
                .iter()
                .zip(&traj.queue)
                .map(|(&t, q)| (t, cap.map_or(q[i], |c| q[i].min(c[i]))))
                .collect(),
        })
        .collect();
    line_plot(title, "time", "queue", &series)
}

fn write_trajectory(out: &Output, traj: &Trajectory, labels: &[String], interval: f64, title: &str) -> Result<()> {
    write(out, "trajectory.csv", &traj.sample_csv(interval, labels))?;
    if out.svg {
        write(out, "queues.svg", &queue_plot(title, traj, labels, None))?;
    }
    Ok(())
}

fn parse_assignments(network: &ftnet::model::Network, items: &[String]) -> Result<Vec<f64>> {
    let mut x = vec![0.0; network.n()];
    for item in items {
        let (id, value) = item
            .split_once('=')
            .ok_or_else(|| Failure(status::DOMAIN, format!("expected ID=X, got {item:?}")))?;
        let i = network
            .index_of(id)
            .ok_or_else(|| Failure(status::DOMAIN, format!("unknown queue {id:?}")))?;
        let v: f64 = value
            .parse()
            .map_err(|_| Failure(status::DOMAIN, format!("bad queue length {value:?}")))?;
        if !(v >= 0.0 && v.is_finite()) {
            bail!(Failure(status::DOMAIN, format!("queue length must be nonnegative, got {v}")));
        }
        x[i] = v;
    }
    Ok(x)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Validate { config } => {
            let scenario = load(&config)?;
            let report = validate(&scenario.network);
            if !report.is_valid() {
                for v in &report.violations {
                    eprintln!("violation: {v}");
                }
                bail!(Failure(status::INVALID_NETWORK, format!("invalid network: {report}")));
            }
            println!("valid: {} queues, {} links", scenario.network.n(), scenario.network.links().len());
        }
        Command::Stability { config, out } => {
            let scenario = load_valid(&config)?;
            let report = stability_report(&scenario.network)?;
            let depth = match routing_depth(scenario.network.routing()) {
                RoutingDepth::Acyclic(k) => json!({"acyclic": k}),
                RoutingDepth::Cyclic => json!("cyclic"),
            };
            write_report(&out, &json!({ "stability": report, "routing_depth": depth }))?;
            if !report.stable {
                bail!(Failure(status::UNSTABLE, "network is unstable".into()));
            }
        }
        Command::Simulate { config, horizon, interval, out } => {
            positive("horizon", horizon)?;
            let scenario = load_valid(&config)?;
            let interval = interval.unwrap_or(scenario.network.period() / 100.0);
            positive("interval", interval)?;
            let traj = simulate(&scenario.network, &scenario.initial, horizon)?;
            let labels = labels(&scenario);
            write_trajectory(&out, &traj, &labels, interval, "queue lengths")?;
            write_report(
                &out,
                &json!({
                    "horizon": horizon,
                    "events": traj.events.len(),
                    "final_queue": traj.final_state().queue,
                    "max_queue": (0..traj.n()).map(|i| traj.max_queue(i)).collect::<Vec<_>>(),
                    "queues": labels,
                }),
            )?;
        }
        Command::Orbit { config, tol, max_periods, out } => {
            positive("tol", tol)?;
            let scenario = load_valid(&config)?;
            let net = &scenario.network;
            let orbit = find_periodic_orbit(net, tol, max_periods)?;
            let report = OrbitReport::new(net, &orbit);
            let traj = &orbit.trajectory;
            let rows = metrics_table(net, traj, traj.start(), traj.end())?;
            let labels = labels(&scenario);
            write_trajectory(&out, traj, &labels, net.period() / 100.0, "periodic orbit")?;
            write(&out, "metrics.csv", &metrics_csv(&rows))?;
            write_report(&out, &json!({ "orbit": report, "metrics": rows }))?;
            if !report.certificate.passed {
                bail!(Failure(status::CONVERGENCE, "orbit certificate failed".into()));
            }
        }
        Command::Couple { config, with, tol, max_periods, out } => {
            let scenario = load_valid(&config)?;
            let net = &scenario.network;
            let other = if with.is_empty() {
                find_periodic_orbit(net, 1e-9, 100_000)?.anchor
            } else {
                NetworkState::with_queues(net, parse_assignments(net, &with)?)
            };
            let coupling = coupling_time(net, &scenario.initial, &other, tol, max_periods)?;
            let periods = match coupling {
                Coupling::At { time } => Some((time / net.period() - 1e-12).ceil().max(0.0) as u64),
                Coupling::NotWithinHorizon => None,
            };
            write_report(
                &out,
                &json!({ "coupling": coupling, "periods": periods, "tol": tol, "other_queue": other.queue }),
            )?;
        }
        Command::Metrics { config, out } => {
            let scenario = load_valid(&config)?;
            let net = &scenario.network;
            let orbit = find_periodic_orbit(net, 1e-9, 100_000)?;
            let traj = &orbit.trajectory;
            let rows = metrics_table(net, traj, traj.start(), traj.end())?;
            write(&out, "metrics.csv", &metrics_csv(&rows))?;
            write_report(&out, &json!({ "window": [traj.start(), traj.end()], "metrics": rows }))?;
        }
        Command::SweepOffset { config, queue, resolution, out } => {
            if resolution == 0 {
                bail!(Failure(status::DOMAIN, "--resolution must be at least 1".into()));
            }
            let scenario = load_valid(&config)?;
            let net = &scenario.network;
            let i = net
                .index_of(&queue)
                .ok_or_else(|| Failure(status::DOMAIN, format!("unknown queue {queue:?}")))?;
            let offsets: Vec<f64> = (0..resolution)
                .map(|k| net.period() * k as f64 / resolution as f64)
                .collect();
            let points = sweep_offset(net, i, &offsets)?;
            write(&out, "sweep.csv", &sweep_csv(&points))?;
            if out.svg {
                let series = Series {
                    label: queue.clone(),
                    points: points.iter().filter_map(|p| p.delay.map(|d| (p.offset, d))).collect(),
                };
                write(&out, "sweep.svg", &line_plot("delay vs offset", "offset", "delay", &[series]))?;
            }
            let delays: Vec<f64> = points.iter().filter_map(|p| p.delay).collect();
            write_report(
                &out,
                &json!({
                    "queue": queue,
                    "points": points,
                    "min_delay": delays.iter().cloned().fold(f64::INFINITY, f64::min),
                    "max_delay": delays.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                }),
            )?;
        }
        Command::Blocking { config, horizon, mode, step, interval, out } => {
            positive("horizon", horizon)?;
            let scenario = load_valid(&config)?;
            let net = &scenario.network;
            let mode = match mode {
                Mode::RateCapped => BlockingMode::RateCapped,
                Mode::Strict => BlockingMode::StrictGateDiscrete { step },
            };
            let traj = simulate_blocking(net, &scenario.storage, &scenario.initial, horizon, mode)?;
            let inner = &traj.trajectory;
            let labels = labels(&scenario);
            let interval = interval.unwrap_or(net.period() / 100.0);
            positive("interval", interval)?;
            write(&out, "trajectory.csv", &inner.sample_csv(interval, &labels))?;
            if out.svg {
                write(
                    &out,
                    "queues.svg",
                    &queue_plot("stored queues", inner, &labels, Some(&traj.limits.0)),
                )?;
            }
            let window = (inner.end() - net.period()).max(inner.start());
            let gridlock = detect_gridlock(&traj, window, inner.end());
            let limits: Vec<Value> = traj
                .limits
                .0
                .iter()
                .map(|&x| if x.is_finite() { json!(x) } else { json!("inf") })
                .collect();
            write_report(
                &out,
                &json!({
                    "mode": mode,
                    "storage": limits,
                    "gridlock_last_period": gridlock,
                    "max_spillback": traj.max_spillback(),
                    "final_stored": (0..net.n()).map(|i| traj.stored_at(i, inner.end())).collect::<Vec<_>>(),
                }),
            )?;
        }
        Command::OracleCompare { config, horizon, granularity, step, out } => {
            positive("horizon", horizon)?;
            let scenario = load_valid(&config)?;
            let section = scenario.oracle.clone();
            let granularity = if !granularity.is_empty() {
                granularity
            } else if let Some(s) = &section {
                s.granularity.clone()
            } else {
                vec![10, 100, 1000]
            };
            let step = step.or(section.map(|s| s.step.0)).unwrap_or(1e-3);
            positive("step", step)?;
            let rows = compare_fluid_discrete(&scenario.network, &scenario.initial, horizon, &granularity, step)?;
            let mut csv = String::from("granularity,step,sup_error\n");
            for r in &rows {
                csv.push_str(&format!("{},{},{}\n", r.granularity, r.step, r.sup_error));
            }
            write(&out, "oracle.csv", &csv)?;
            write_report(&out, &json!({ "horizon": horizon, "rows": rows }))?;
        }
        Command::Webster { cycle, green, flow, ratio } => {
            let d = webster_delay(WebsterInput { cycle, green, flow, ratio })?;
            println!("{d:.4}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(status::DOMAIN)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_status(&err))
        }
    }
}
