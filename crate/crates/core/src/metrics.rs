//! Performance measures on trajectories: time-averaged queue, queueing delay
//! per served vehicle, unused service, and Webster's delay approximation.
//!
//! All measures work on any trajectory window; statements about fixed-time
//! networks concern the periodic orbit, so callers usually pass one period
//! of [`PeriodicOrbit::trajectory`](crate::orbit::PeriodicOrbit).

use std::fmt::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Network;
use crate::orbit::{find_periodic_orbit, OrbitError};
use crate::simulator::Trajectory;
use crate::TOL;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("window [{t0}, {t1}] is not covered by the trajectory [{start}, {end}]")]
    WindowNotCovered { t0: f64, t1: f64, start: f64, end: f64 },
    #[error("no vehicles served in the window")]
    NoThroughput,
    #[error("domain error: {0}")]
    Domain(String),
    #[error("sweep requires a downstream queue; queue {0} has no incoming link")]
    NotDownstream(usize),
    #[error(transparent)]
    Orbit(#[from] OrbitError),
}

fn covered(traj: &Trajectory, t0: f64, t1: f64) -> Result<(), MetricsError> {
    if t1 < t0 || t0 < traj.start() - TOL || t1 > traj.end() + TOL {
        return Err(MetricsError::WindowNotCovered {
            t0,
            t1,
            start: traj.start(),
            end: traj.end(),
        });
    }
    Ok(())
}

/// Time average of queue `i` over `[t0, t1]` (exact for piecewise-linear x).
pub fn average_queue(traj: &Trajectory, i: usize, t0: f64, t1: f64) -> Result<f64, MetricsError> {
    covered(traj, t0, t1)?;
    if t1 - t0 <= 0.0 {
        return Ok(traj.queue_at(i, t0));
    }
    Ok(traj.queue_integral(i, t0, t1) / (t1 - t0))
}

/// Queue-time accumulated in the window per vehicle served in it; excludes
/// free-flow travel time on links.
pub fn delay_per_vehicle(traj: &Trajectory, i: usize, t0: f64, t1: f64) -> Result<f64, MetricsError> {
    covered(traj, t0, t1)?;
    let served = traj.departure_integral(i, t0, t1);
    if served <= 0.0 {
        return Err(MetricsError::NoThroughput);
    }
    Ok(traj.queue_integral(i, t0, t1) / served)
}

/// Service capacity left unused in the window (growth of `v`).
pub fn wasted_green(traj: &Trajectory, i: usize, t0: f64, t1: f64) -> Result<f64, MetricsError> {
    covered(traj, t0, t1)?;
    Ok(traj.cumulative_unused_at(i, t1) - traj.cumulative_unused_at(i, t0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WebsterInput {
    pub cycle: f64,
    pub green: f64,
    pub flow: f64,
    /// Flow-to-capacity ratio.
    pub ratio: f64,
}

/// Webster's approximate delay per vehicle at an isolated signal.
pub fn webster_delay(w: WebsterInput) -> Result<f64, MetricsError> {
    let WebsterInput { cycle, green, flow, ratio } = w;
    if !(cycle > 0.0 && cycle.is_finite()) {
        return Err(MetricsError::Domain(format!("cycle must be positive, got {cycle}")));
    }
    if !(green > 0.0 && green <= cycle) {
        return Err(MetricsError::Domain(format!("green must lie in (0, {cycle}], got {green}")));
    }
    if !(flow > 0.0 && flow.is_finite()) {
        return Err(MetricsError::Domain(format!("flow must be positive, got {flow}")));
    }
    if !(0.0..1.0).contains(&ratio) {
        return Err(MetricsError::Domain(format!("ratio must lie in [0, 1), got {ratio}")));
    }
    let split = green / cycle;
    let uniform = cycle * (1.0 - split).powi(2) / (2.0 * (1.0 - split * ratio));
    let random = ratio * ratio / (2.0 * flow * (1.0 - ratio));
    let correction = 0.65 * (cycle / (flow * flow)).cbrt() * ratio.powf(2.0 + 5.0 * split);
    Ok(uniform + random - correction)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub queue: String,
    pub avg_queue: f64,
    /// `None` when nothing was served in the window.
    pub delay_per_vehicle: Option<f64>,
    pub wasted_green: f64,
}

/// One row per queue over `[t0, t1]`.
pub fn metrics_table(
    network: &Network,
    traj: &Trajectory,
    t0: f64,
    t1: f64,
) -> Result<Vec<MetricsRow>, MetricsError> {
    (0..network.n())
        .map(|i| {
            let delay = match delay_per_vehicle(traj, i, t0, t1) {
                Ok(d) => Some(d),
                Err(MetricsError::NoThroughput) => None,
                Err(e) => return Err(e),
            };
            Ok(MetricsRow {
                queue: network.queue(i).id.clone(),
                avg_queue: average_queue(traj, i, t0, t1)?,
                delay_per_vehicle: delay,
                wasted_green: wasted_green(traj, i, t0, t1)?,
            })
        })
        .collect()
}

/// CSV with header `queue,avg_queue,delay_per_vehicle,wasted_green`; an
/// undefined delay is left empty.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("queue,avg_queue,delay_per_vehicle,wasted_green\n");
    for r in rows {
        let delay = r.delay_per_vehicle.map(|d| d.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{}", r.queue, r.avg_queue, delay, r.wasted_green);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub offset: f64,
    /// Orbit delay per vehicle at the swept queue; 0 for an idle queue,
    /// `None` if vehicles wait but none are served.
    pub delay: Option<f64>,
    pub avg_queue: f64,
}

/// Shifts the service profile of queue `i` by each offset, finds the orbit and
/// reports the queue's delay over one period. Offsets run in parallel.
pub fn sweep_offset(
    network: &Network,
    i: usize,
    offsets: &[f64],
) -> Result<Vec<SweepPoint>, MetricsError> {
    if i >= network.n() || network.incoming(i).is_empty() {
        return Err(MetricsError::NotDownstream(i));
    }
    let period = network.period();
    offsets
        .par_iter()
        .map(|&offset| {
            let shifted = network.with_service(i, network.service(i).shifted(offset));
            let orbit = find_periodic_orbit(&shifted, TOL, 100_000)?;
            let traj = &orbit.trajectory;
            let (t0, t1) = (traj.start(), traj.start() + period);
            let avg_queue = average_queue(traj, i, t0, t1)?;
            // Nothing served and nothing waiting: no vehicle is delayed.
            let delay = match delay_per_vehicle(traj, i, t0, t1) {
                Ok(d) => Some(d),
                Err(MetricsError::NoThroughput) if avg_queue == 0.0 => Some(0.0),
                Err(MetricsError::NoThroughput) => None,
                Err(e) => return Err(e),
            };
            Ok(SweepPoint {
                offset,
                delay,
                avg_queue,
            })
        })
        .collect()
}

/// CSV with header `offset,delay`.
pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("offset,delay\n");
    for p in points {
        let delay = p.delay.map(|d| d.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{}", p.offset, delay);
    }
    out
}
