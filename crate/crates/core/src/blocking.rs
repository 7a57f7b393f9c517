//! Finite storage: a queue at capacity blocks service of every queue that
//! routes into it.
//!
//! The simulator integrates the total content `Q` of each queue. Storage
//! holds `min(Q, ξ)`; anything beyond `ξ` has already left its upstream
//! queue (it was on the link when the gate closed) and waits at the link end
//! as spillback. Stored queues therefore never exceed capacity.
//!
//! Two gate semantics are offered:
//! - [`BlockingMode::RateCapped`]: feeders of a full queue are slowed by a
//!   common factor so that inflow matches the full queue's outflow — a
//!   continuous resolution of the on/off gate.
//! - [`BlockingMode::StrictGateDiscrete`]: the literal on/off gate, sampled
//!   on a fixed time grid.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Network;
use crate::simulator::{
    simulate_gated, EventKind, NetworkState, RateView, ServiceGate, SimError, SimOptions,
    Trajectory,
};

#[derive(Debug, Error)]
pub enum BlockingError {
    #[error(transparent)]
    Simulation(#[from] SimError),
    #[error("queue {queue} starts with {x} vehicles, above its capacity {capacity}")]
    CapacityExceededAtInit { queue: usize, x: f64, capacity: f64 },
    #[error("invalid storage limits: {0}")]
    InvalidLimits(String),
    #[error("gate step must be positive and finite, got {0}")]
    InvalidStep(f64),
}

/// Storage capacity per queue; `f64::INFINITY` means unlimited.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageLimits(pub Vec<f64>);

impl StorageLimits {
    pub fn unlimited(n: usize) -> Self {
        Self(vec![f64::INFINITY; n])
    }

    pub fn get(&self, i: usize) -> f64 {
        self.0[i]
    }

    fn check(&self, n: usize) -> Result<(), BlockingError> {
        if self.0.len() != n {
            return Err(BlockingError::InvalidLimits(format!(
                "{} limits for {n} queues",
                self.0.len()
            )));
        }
        if let Some((i, xi)) = self.0.iter().enumerate().find(|(_, &xi)| xi.is_nan() || xi <= 0.0) {
            return Err(BlockingError::InvalidLimits(format!(
                "capacity of queue {i} must be positive, got {xi}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BlockingMode {
    RateCapped,
    StrictGateDiscrete { step: f64 },
}

/// Events where a queue's content reaches its capacity from either side.
fn capacity_crossing(limits: &StorageLimits, t: f64, q: &[f64], net: &[f64], tol: f64) -> Option<f64> {
    let mut next = f64::INFINITY;
    for (i, (&x, &r)) in q.iter().zip(net).enumerate() {
        let xi = limits.get(i);
        if !xi.is_finite() {
            continue;
        }
        if x < xi - tol && r > 0.0 {
            next = next.min(t + (xi - x) / r);
        } else if x > xi + tol && r < 0.0 {
            next = next.min(t + (x - xi) / -r);
        }
    }
    next.is_finite().then_some(next)
}

struct RateCapped {
    limits: StorageLimits,
    /// `(feeder, ratio)` per queue, merged over parallel links.
    feeders: Vec<Vec<(usize, f64)>>,
}

impl RateCapped {
    fn new(network: &Network, limits: StorageLimits) -> Self {
        let feeders = (0..network.n())
            .map(|j| {
                let mut f: Vec<(usize, f64)> = Vec::new();
                for r in network.incoming(j) {
                    match f.iter_mut().find(|e| e.0 == r.peer) {
                        Some(e) => e.1 += r.ratio,
                        None => f.push((r.peer, r.ratio)),
                    }
                }
                f
            })
            .collect();
        Self { limits, feeders }
    }

    fn departure(view: &RateView<'_>, i: usize, factor: f64) -> f64 {
        let c = view.service[i] * factor;
        if view.queue[i] > 0.0 {
            c
        } else {
            view.arrival[i].min(c)
        }
    }

    /// Smallest common feeder factor `s` at which the inflow into `j` is at
    /// least its outflow; 1 if `j` drains even with unrestricted feeders.
    fn feeder_factor(&self, view: &RateView<'_>, j: usize, factors: &[f64]) -> f64 {
        let feeders = &self.feeders[j];
        let own = feeders.iter().any(|f| f.0 == j);
        let balance = |s: f64| {
            let inflow: f64 = feeders
                .iter()
                .map(|&(i, r)| r * Self::departure(view, i, s))
                .sum();
            let out_factor = if own { s.min(factors[j]) } else { factors[j] };
            view.entry[j] + inflow - Self::departure(view, j, out_factor)
        };
        if balance(0.0) >= 0.0 {
            return 0.0;
        }
        let mut knots: Vec<f64> = feeders
            .iter()
            .map(|&(i, _)| i)
            .chain([j])
            .filter(|&i| view.queue[i] <= 0.0 && view.service[i] > 0.0)
            .map(|i| view.arrival[i] / view.service[i])
            .filter(|&s| s > 0.0 && s < 1.0)
            .collect();
        knots.push(1.0);
        knots.sort_by(f64::total_cmp);
        let (mut lo, mut g_lo) = (0.0, balance(0.0));
        for s in knots {
            let g = balance(s);
            if g >= 0.0 {
                return lo + (s - lo) * (-g_lo) / (g - g_lo);
            }
            lo = s;
            g_lo = g;
        }
        1.0
    }
}

impl ServiceGate for RateCapped {
    fn factors(&mut self, view: &RateView<'_>) -> Result<Vec<f64>, SimError> {
        let n = view.queue.len();
        let mut full: Vec<usize> = (0..n)
            .filter(|&j| view.queue[j] >= self.limits.get(j) - view.tol)
            .collect();
        for _ in 0..=n {
            let mut factors = vec![1.0; n];
            // Successor restrictions can cascade upstream; a fixed number of
            // sweeps over the full set settles acyclic chains.
            for _ in 0..=n {
                let mut changed = false;
                for &j in &full {
                    let s = self.feeder_factor(view, j, &factors);
                    for &(i, _) in &self.feeders[j] {
                        if s < factors[i] {
                            factors[i] = s;
                            changed = true;
                        }
                    }
                }
                if !changed {
                    break;
                }
            }
            // A queue exactly at capacity that drains under these factors
            // is not blocking.
            let before = full.len();
            full.retain(|&j| {
                let xi = self.limits.get(j);
                let at_boundary = (view.queue[j] - xi).abs() <= view.tol;
                let net = view.arrival[j] - Self::departure(view, j, factors[j]);
                !(at_boundary && net < -view.tol)
            });
            if full.len() == before {
                return Ok(factors);
            }
        }
        Err(SimError::ChatteringSuspected {
            time: view.time,
            limit: n + 1,
        })
    }

    fn next_event(&self, t: f64, queue: &[f64], net_rate: &[f64]) -> Option<(f64, EventKind)> {
        capacity_crossing(&self.limits, t, queue, net_rate, crate::TOL)
            .map(|s| (s, EventKind::Gate { queue: None }))
    }

    fn settle(&self, queue: &mut [f64], tol: f64) {
        for (i, x) in queue.iter_mut().enumerate() {
            if (*x - self.limits.get(i)).abs() <= tol {
                *x = self.limits.get(i);
            }
        }
    }
}

struct StrictGate {
    limits: StorageLimits,
    successors: Vec<Vec<usize>>,
    origin: f64,
    step: f64,
    last_grid: Option<i64>,
    factors: Vec<f64>,
}

impl ServiceGate for StrictGate {
    fn factors(&mut self, view: &RateView<'_>) -> Result<Vec<f64>, SimError> {
        let k = ((view.time - self.origin) / self.step).round();
        let on_grid = (view.time - self.origin - k * self.step).abs() <= view.tol;
        if self.last_grid.is_none() || (on_grid && self.last_grid != Some(k as i64)) {
            self.last_grid = Some(k as i64);
            self.factors = self
                .successors
                .iter()
                .map(|succ| {
                    let blocked = succ
                        .iter()
                        .any(|&j| view.queue[j] >= self.limits.get(j) - view.tol);
                    if blocked {
                        0.0
                    } else {
                        1.0
                    }
                })
                .collect();
        }
        Ok(self.factors.clone())
    }

    fn next_event(&self, t: f64, _: &[f64], _: &[f64]) -> Option<(f64, EventKind)> {
        let k = ((t - self.origin) / self.step + 1e-9).floor() + 1.0;
        Some((self.origin + k * self.step, EventKind::Gate { queue: None }))
    }
}

/// Gated trajectory plus the split of each queue's content into stored
/// vehicles and spillback.
#[derive(Debug, Clone)]
pub struct BlockingTrajectory {
    /// Underlying trajectory; its `queue` holds total content.
    pub trajectory: Trajectory,
    pub limits: StorageLimits,
    pub mode: BlockingMode,
}

impl BlockingTrajectory {
    pub fn stored_at(&self, i: usize, t: f64) -> f64 {
        self.trajectory.queue_at(i, t).min(self.limits.get(i))
    }

    pub fn spillback_at(&self, i: usize, t: f64) -> f64 {
        (self.trajectory.queue_at(i, t) - self.limits.get(i)).max(0.0)
    }

    /// Stored queue per event time.
    pub fn stored(&self) -> Vec<Vec<f64>> {
        self.trajectory
            .queue
            .iter()
            .map(|q| {
                q.iter()
                    .enumerate()
                    .map(|(i, &x)| x.min(self.limits.get(i)))
                    .collect()
            })
            .collect()
    }

    pub fn max_spillback(&self) -> f64 {
        self.trajectory
            .queue
            .iter()
            .flat_map(|q| {
                q.iter()
                    .enumerate()
                    .map(|(i, &x)| (x - self.limits.get(i)).max(0.0))
            })
            .fold(0.0, f64::max)
    }
}

pub fn simulate_blocking(
    network: &Network,
    limits: &StorageLimits,
    init: &NetworkState,
    horizon: f64,
    mode: BlockingMode,
) -> Result<BlockingTrajectory, BlockingError> {
    let n = network.n();
    limits.check(n)?;
    for (i, &x) in init.queue.iter().enumerate().take(n) {
        let capacity = limits.get(i);
        if x > capacity + crate::TOL {
            return Err(BlockingError::CapacityExceededAtInit { queue: i, x, capacity });
        }
    }
    let opts = SimOptions::default();
    let trajectory = match mode {
        BlockingMode::RateCapped => {
            let mut gate = RateCapped::new(network, limits.clone());
            simulate_gated(network, init, horizon, &mut gate, &opts)?
        }
        BlockingMode::StrictGateDiscrete { step } => {
            if !(step > 0.0 && step.is_finite()) {
                return Err(BlockingError::InvalidStep(step));
            }
            let successors = (0..n)
                .map(|i| {
                    network
                        .outgoing(i)
                        .iter()
                        .filter(|r| r.ratio > 0.0)
                        .map(|r| r.peer)
                        .collect()
                })
                .collect();
            let mut gate = StrictGate {
                limits: limits.clone(),
                successors,
                origin: init.time,
                step,
                last_grid: None,
                factors: vec![1.0; n],
            };
            simulate_gated(network, init, horizon, &mut gate, &opts)?
        }
    };
    Ok(BlockingTrajectory {
        trajectory,
        limits: limits.clone(),
        mode,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "queues", rename_all = "snake_case")]
pub enum GridlockStatus {
    Gridlocked(Vec<usize>),
    Free,
}

/// Queues that stay at capacity with zero departures throughout `[t0, t1]`.
pub fn detect_gridlock(traj: &BlockingTrajectory, t0: f64, t1: f64) -> GridlockStatus {
    let tol = crate::TOL;
    let inner = &traj.trajectory;
    let mut stuck = Vec::new();
    for i in 0..inner.n() {
        let xi = traj.limits.get(i);
        if !xi.is_finite() {
            continue;
        }
        let mut full = traj.stored_at(i, t0) >= xi - tol && traj.stored_at(i, t1) >= xi - tol;
        let mut idle = true;
        for k in 0..inner.intervals() {
            let (a, b) = (inner.times[k], inner.times[k + 1]);
            if b <= t0 || a >= t1 {
                continue;
            }
            full &= inner.queue[k][i].min(xi) >= xi - tol && inner.queue[k + 1][i].min(xi) >= xi - tol;
            idle &= inner.departure[k][i] <= tol;
        }
        if full && idle {
            stuck.push(i);
        }
    }
    if stuck.is_empty() {
        GridlockStatus::Free
    } else {
        GridlockStatus::Gridlocked(stuck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{isolated_signal, recirculating_loop, recirculating_loop_with_entry, signal_tandem};
    use crate::orbit::find_periodic_orbit;
    use crate::simulator::simulate;

    #[test]
    fn self_loop_gridlocks_when_full() {
        let net = recirculating_loop();
        let limits = StorageLimits(vec![1.0]);
        for mode in [BlockingMode::RateCapped, BlockingMode::StrictGateDiscrete { step: 0.01 }] {
            let traj = simulate_blocking(&net, &limits, &NetworkState::with_queues(&net, vec![1.0]), 10.0, mode).unwrap();
            for k in 0..=100 {
                let t = k as f64 / 10.0;
                assert_eq!(traj.stored_at(0, t), 1.0);
                assert_eq!(traj.trajectory.departure_rate_at(0, t), 0.0);
            }
            assert_eq!(detect_gridlock(&traj, 0.0, 10.0), GridlockStatus::Gridlocked(vec![0]));

            let empty = simulate_blocking(&net, &limits, &NetworkState::zero(&net), 10.0, mode).unwrap();
            assert!(empty.trajectory.queue.iter().all(|q| q[0] == 0.0));
            assert_eq!(detect_gridlock(&empty, 0.0, 10.0), GridlockStatus::Free);
        }
    }

    #[test]
    fn unlimited_storage_reduces_to_plain_simulation() {
        let net = signal_tandem(0.5);
        let init = NetworkState::with_queues(&net, vec![0.7, 0.2]);
        let plain = simulate(&net, &init, 5.0).unwrap();
        let gated = simulate_blocking(&net, &StorageLimits::unlimited(2), &init, 5.0, BlockingMode::RateCapped).unwrap();
        assert_eq!(gated.trajectory, plain);
        assert_eq!(detect_gridlock(&gated, 0.0, 5.0), GridlockStatus::Free);

        let strict = simulate_blocking(
            &net,
            &StorageLimits::unlimited(2),
            &init,
            5.0,
            BlockingMode::StrictGateDiscrete { step: 0.1 },
        )
        .unwrap();
        for k in 0..=50 {
            let t = k as f64 / 10.0;
            for i in 0..2 {
                assert!((strict.trajectory.queue_at(i, t) - plain.queue_at(i, t)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ample_storage_keeps_the_orbit() {
        let net = recirculating_loop_with_entry(0.2);
        let orbit = find_periodic_orbit(&net, 1e-12, 10_000).unwrap();
        let peak = orbit.trajectory.max_queue(0);
        let limits = StorageLimits(vec![peak + 0.05]);
        let plain = simulate(&net, &orbit.anchor, 5.0).unwrap();
        let gated = simulate_blocking(&net, &limits, &orbit.anchor, 5.0, BlockingMode::RateCapped).unwrap();
        assert_eq!(gated.trajectory, plain);
    }

    #[test]
    fn tight_storage_respects_capacity() {
        let net = signal_tandem(0.5);
        let limits = StorageLimits(vec![f64::INFINITY, 0.3]);
        let init = NetworkState::with_queues(&net, vec![0.5, 0.0]);
        for mode in [BlockingMode::RateCapped, BlockingMode::StrictGateDiscrete { step: 0.01 }] {
            let traj = simulate_blocking(&net, &limits, &init, 6.0, mode).unwrap();
            for q in traj.stored() {
                assert!(q[1] <= 0.3 + crate::TOL);
            }
            // The upstream approach is held back while downstream is full.
            assert!(traj.trajectory.max_queue(0) > 0.5);
        }
    }

    #[test]
    fn input_errors() {
        let net = isolated_signal();
        let init = NetworkState::with_queues(&net, vec![2.0]);
        assert!(matches!(
            simulate_blocking(&net, &StorageLimits(vec![1.0]), &init, 1.0, BlockingMode::RateCapped),
            Err(BlockingError::CapacityExceededAtInit { queue: 0, .. })
        ));
        assert!(matches!(
            simulate_blocking(&net, &StorageLimits(vec![0.0]), &init, 1.0, BlockingMode::RateCapped),
            Err(BlockingError::InvalidLimits(_))
        ));
        assert!(matches!(
            simulate_blocking(
                &net,
                &StorageLimits(vec![5.0]),
                &init,
                1.0,
                BlockingMode::StrictGateDiscrete { step: 0.0 }
            ),
            Err(BlockingError::InvalidStep(_))
        ));
    }
}
