//! Periodic orbit of a stable fixed-time network.
//!
//! Starting from the empty state (no queues, no departures in the history
//! window) the one-period map produces a componentwise nondecreasing, bounded
//! sequence of states; its limit is the unique periodic trajectory. With
//! acyclic routing the sequence becomes constant after finitely many periods.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{routing_depth, stability_report, ModelError, Network, RoutingDepth};
use crate::simulator::{simulate, NetworkState, SimError, StepFunction, Trajectory};
use crate::TOL;

#[derive(Debug, Error)]
pub enum OrbitError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Simulation(#[from] SimError),
    #[error("network is unstable (smallest margin {margin})")]
    UnstableNetwork { margin: f64 },
    #[error("states differ in shape: {0}")]
    ShapeMismatch(String),
    #[error("iterate {period} decreased: {detail}")]
    MonotonicityViolated { period: usize, detail: String },
    #[error("no fixed point within {periods} periods (last distance {distance:e})")]
    MaxPeriodsExceeded { periods: usize, distance: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Convergence {
    /// Iterate `n` from the empty state already is the periodic state.
    ExactFiniteTime { periods: usize },
    /// Successive distances fell below the tolerance; `rate` estimates the
    /// contraction factor per period when enough nonzero distances exist.
    GeometricToTolerance { rate: Option<f64> },
}

#[derive(Debug, Clone)]
pub struct PeriodicOrbit {
    /// State at phase 0.
    pub anchor: NetworkState,
    /// One period starting from the anchor.
    pub trajectory: Trajectory,
    /// One-period maps applied.
    pub iterations: usize,
    pub convergence: Convergence,
    /// Distance between the anchor and its image.
    pub residual: f64,
    pub tolerance: f64,
    /// Distance between consecutive iterates, one entry per map application.
    pub distances: Vec<f64>,
}

/// One period of the dynamics, re-anchored to the starting phase.
pub fn poincare_map(network: &Network, state: &NetworkState) -> Result<NetworkState, SimError> {
    let period = network.period();
    let traj = simulate(network, state, period)?;
    let mut next = traj.final_state().shifted(-period);
    next.time = state.time;
    Ok(next)
}

/// Cumulative departure differences `∫(b1 - b2)` from the window start,
/// evaluated at every knot of either history and at the window end.
fn cumulative_gaps(h1: &StepFunction, h2: &StepFunction) -> Result<Vec<f64>, OrbitError> {
    let w1 = h1.end() - h1.start();
    let w2 = h2.end() - h2.start();
    if (w1 - w2).abs() > TOL {
        return Err(OrbitError::ShapeMismatch(format!(
            "history windows of length {w1} and {w2}"
        )));
    }
    let mut offsets: Vec<f64> = h1
        .knots()
        .iter()
        .map(|k| k.0 - h1.start())
        .chain(h2.knots().iter().map(|k| k.0 - h2.start()))
        .filter(|&o| o > 0.0 && o < w1)
        .chain([w1])
        .collect();
    offsets.sort_by(f64::total_cmp);
    offsets.dedup();

    let mut gaps = Vec::with_capacity(offsets.len());
    let (mut acc, mut prev) = (0.0, 0.0);
    for o in offsets {
        acc += h1.integral(h1.start() + prev, h1.start() + o)
            - h2.integral(h2.start() + prev, h2.start() + o);
        gaps.push(acc);
        prev = o;
    }
    Ok(gaps)
}

fn check_shape(s1: &NetworkState, s2: &NetworkState) -> Result<(), OrbitError> {
    if s1.n() != s2.n() || s1.history.len() != s2.history.len() || s1.history.len() != s1.n() {
        return Err(OrbitError::ShapeMismatch(format!(
            "{} vs {} queues",
            s1.n(),
            s2.n()
        )));
    }
    Ok(())
}

/// Largest queue difference plus the largest deviation of cumulative
/// departures over the trailing history window.
pub fn state_distance(s1: &NetworkState, s2: &NetworkState) -> Result<f64, OrbitError> {
    check_shape(s1, s2)?;
    let dx = s1
        .queue
        .iter()
        .zip(&s2.queue)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let mut db: f64 = 0.0;
    for (h1, h2) in s1.history.iter().zip(&s2.history) {
        for g in cumulative_gaps(h1, h2)? {
            db = db.max(g.abs());
        }
    }
    Ok(dx + db)
}

/// Checks `upper >= lower` in queues and in window-aligned cumulative
/// departures, up to `slack`.
fn check_dominates(
    upper: &NetworkState,
    lower: &NetworkState,
    slack: f64,
    period: usize,
) -> Result<(), OrbitError> {
    check_shape(upper, lower)?;
    for (i, (u, l)) in upper.queue.iter().zip(&lower.queue).enumerate() {
        if *u < l - slack {
            return Err(OrbitError::MonotonicityViolated {
                period,
                detail: format!("queue {i}: {u} < {l}"),
            });
        }
    }
    for (i, (hu, hl)) in upper.history.iter().zip(&lower.history).enumerate() {
        if let Some(g) = cumulative_gaps(hu, hl)?.into_iter().find(|&g| g < -slack) {
            return Err(OrbitError::MonotonicityViolated {
                period,
                detail: format!("cumulative departures of queue {i} fell by {}", -g),
            });
        }
    }
    Ok(())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn contraction_rate(distances: &[f64]) -> Option<f64> {
    let ratios: Vec<f64> = distances
        .windows(2)
        .filter(|w| w[0] > 0.0 && w[1] > 0.0)
        .map(|w| w[1] / w[0])
        .collect();
    if ratios.is_empty() {
        return None;
    }
    let tail = ratios[ratios.len().saturating_sub(5)..].to_vec();
    Some(median(tail))
}

/// Iterates the one-period map from the empty state until consecutive
/// iterates are within `tol` (and within [`TOL`] for acyclic routing).
pub fn find_periodic_orbit(
    network: &Network,
    tol: f64,
    max_periods: usize,
) -> Result<PeriodicOrbit, OrbitError> {
    let report = stability_report(network)?;
    if !report.stable {
        let margin = report.margin.iter().cloned().fold(f64::INFINITY, f64::min);
        return Err(OrbitError::UnstableNetwork { margin });
    }
    let acyclic = matches!(routing_depth(network.routing()), RoutingDepth::Acyclic(_));
    let target = if acyclic { tol.min(TOL) } else { tol };

    let mut current = NetworkState::zero(network);
    let mut distances = Vec::new();
    for k in 0..max_periods {
        let next = poincare_map(network, &current)?;
        let scale = next.queue.iter().cloned().fold(1.0, f64::max);
        check_dominates(&next, &current, TOL * scale, k + 1)?;
        let d = state_distance(&next, &current)?;
        distances.push(d);
        if d <= target {
            let convergence = if acyclic {
                Convergence::ExactFiniteTime { periods: k }
            } else {
                Convergence::GeometricToTolerance {
                    rate: contraction_rate(&distances),
                }
            };
            let trajectory = simulate(network, &current, network.period())?;
            return Ok(PeriodicOrbit {
                residual: d,
                anchor: current,
                trajectory,
                iterations: k + 1,
                convergence,
                tolerance: tol,
                distances,
            });
        }
        current = next;
    }
    Err(OrbitError::MaxPeriodsExceeded {
        periods: max_periods,
        distance: distances.last().copied().unwrap_or(f64::NAN),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Coupling {
    At { time: f64 },
    NotWithinHorizon,
}

/// Earliest evaluation time after which the two trajectories stay within
/// `tol` of each other for at least one full period.
///
/// Distances are evaluated at every event of either trajectory and at every
/// time a departure change leaves the history window.
pub fn coupling_time(
    network: &Network,
    s1: &NetworkState,
    s2: &NetworkState,
    tol: f64,
    max_periods: usize,
) -> Result<Coupling, OrbitError> {
    let report = stability_report(network)?;
    if !report.stable {
        let margin = report.margin.iter().cloned().fold(f64::INFINITY, f64::min);
        return Err(OrbitError::UnstableNetwork { margin });
    }
    check_shape(s1, s2)?;
    let period = network.period();
    let window = network.max_delay();
    let mut since = (state_distance(s1, s2)? <= tol).then_some(s1.time);
    let (mut a, mut b) = (s1.clone(), s2.clone());
    for _ in 0..max_periods + 1 {
        let ta = simulate(network, &a, period)?;
        let tb = simulate(network, &b, period)?;
        let (start, end) = (ta.start(), ta.end());
        let mut times: Vec<f64> = ta.times.iter().chain(&tb.times).copied().collect();
        for h in ta.history.iter().chain(&tb.history) {
            times.extend(
                h.knots()
                    .iter()
                    .map(|k| k.0 + window)
                    .filter(|&t| t > start && t < end),
            );
        }
        times.retain(|&t| t > start);
        times.sort_by(f64::total_cmp);
        times.dedup_by(|x, y| (*x - *y).abs() <= 1e-15);
        for t in times {
            let d = state_distance(&ta.state_at(t), &tb.state_at(t))?;
            if d > tol {
                since = None;
            } else if since.is_none() {
                since = Some(t);
            }
        }
        if let Some(t) = since {
            if end - t >= period - TOL {
                return Ok(Coupling::At { time: t });
            }
        }
        a = ta.final_state();
        b = tb.final_state();
    }
    Ok(Coupling::NotWithinHorizon)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueCertificate {
    pub id: String,
    /// First phase at which the orbit queue is within [`TOL`] of zero.
    pub clearing_time: Option<f64>,
    pub measured_unused: f64,
    pub predicted_unused: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrbitCertificate {
    pub queues: Vec<QueueCertificate>,
    pub residual: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Tolerance on per-period unused service.
const UNUSED_TOL: f64 = 1e-8;

fn clearing_time(traj: &Trajectory, i: usize) -> Option<f64> {
    // Queues are linear between events and only reach zero at an event.
    (0..traj.times.len())
        .find(|&k| traj.queue[k][i] <= TOL)
        .map(|k| traj.times[k] - traj.start())
}

/// Checks clearing in every period, the unused-service identity and the
/// fixed-point residual.
pub fn verify_orbit(network: &Network, orbit: &PeriodicOrbit) -> OrbitCertificate {
    let period = network.period();
    let predicted = stability_report(network)
        .map(|r| r.predicted_wasted_service)
        .unwrap_or_else(|_| vec![f64::NAN; network.n()]);
    let traj = &orbit.trajectory;
    let last = traj.times.len() - 1;
    let queues: Vec<QueueCertificate> = (0..network.n())
        .map(|i| {
            let measured = traj.cumulative_unused[last][i] - traj.cumulative_unused[0][i];
            let predicted = predicted[i] * period;
            let clearing_time = clearing_time(traj, i);
            QueueCertificate {
                id: network.queue(i).id.clone(),
                passed: clearing_time.is_some() && (measured - predicted).abs() <= UNUSED_TOL,
                clearing_time,
                measured_unused: measured,
                predicted_unused: predicted,
            }
        })
        .collect();
    let passed = orbit.residual <= orbit.tolerance && queues.iter().all(|q| q.passed);
    OrbitCertificate {
        queues,
        residual: orbit.residual,
        tolerance: orbit.tolerance,
        passed,
    }
}

/// Serializable summary of an orbit and its certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrbitReport {
    pub period: f64,
    pub anchor_queue: Vec<f64>,
    pub iterations: usize,
    pub convergence: Convergence,
    pub distances: Vec<f64>,
    pub certificate: OrbitCertificate,
}

impl OrbitReport {
    pub fn new(network: &Network, orbit: &PeriodicOrbit) -> Self {
        Self {
            period: network.period(),
            anchor_queue: orbit.anchor.queue.clone(),
            iterations: orbit.iterations,
            convergence: orbit.convergence,
            distances: orbit.distances.clone(),
            certificate: verify_orbit(network, orbit),
        }
    }
}
