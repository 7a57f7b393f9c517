//! Discrete-vehicle counterpart of the fluid network, used to cross-check the
//! simulator.
//!
//! One unit of fluid is `N` vehicles and time advances in steps of `h`. Each
//! step, per queue: external arrivals and vehicles reaching the end of their
//! link join the queue; then whole vehicles are served from a service
//! accumulator; the served vehicles are split across outgoing links (and the
//! exit) by largest-remainder apportionment with carried remainders. Links
//! are pipelines of `round(delay / h)` steps. Everything is deterministic and
//! conserves vehicles exactly.

use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, Network};
use crate::simulator::{simulate, NetworkState, SimError};

/// Slack when flooring accumulators, so that rates summing to whole vehicles
/// per step are not lost to rounding.
const FLOOR_SLACK: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Simulation(#[from] SimError),
    #[error("invalid discrete configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscreteConfig {
    /// Vehicles per unit of fluid.
    pub granularity: u64,
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteTrajectory {
    pub granularity: u64,
    pub step: f64,
    /// Step end times, starting with the initial time.
    pub times: Vec<f64>,
    /// Vehicles queued per step end.
    pub counts: Vec<Vec<u64>>,
    /// Vehicles on links per step end.
    pub in_transit: Vec<u64>,
    /// Cumulative vehicles that entered from outside (including the initial
    /// load) and that left the network.
    pub entered: Vec<u64>,
    pub exited: Vec<u64>,
}

impl DiscreteTrajectory {
    pub fn normalized(&self, k: usize, i: usize) -> f64 {
        self.counts[k][i] as f64 / self.granularity as f64
    }

    /// `entered == queued + in transit + exited` at every step.
    pub fn conserves(&self) -> bool {
        (0..self.times.len()).all(|k| {
            let queued: u64 = self.counts[k].iter().sum();
            self.entered[k] == queued + self.in_transit[k] + self.exited[k]
        })
    }
}

struct Pipeline {
    to: usize,
    slots: VecDeque<u64>,
}

/// Splits `total` across quotas proportional to `weights`, carrying the
/// rounding error of each category to the next call.
fn apportion(total: u64, weights: &[f64], carry: &mut [f64]) -> Vec<u64> {
    let quotas: Vec<f64> = weights
        .iter()
        .zip(carry.iter())
        .map(|(w, c)| (total as f64 * w + c).max(0.0))
        .collect();
    let mut shares: Vec<u64> = quotas.iter().map(|q| q.floor() as u64).collect();
    let mut assigned: u64 = shares.iter().sum();
    if assigned > total {
        // Carries can push floors above the total; trim the smallest
        // remainders first.
        let mut order: Vec<usize> = (0..shares.len()).collect();
        order.sort_by(|&a, &b| (quotas[a] - shares[a] as f64).total_cmp(&(quotas[b] - shares[b] as f64)));
        for &k in order.iter().cycle() {
            if assigned == total {
                break;
            }
            if shares[k] > 0 {
                shares[k] -= 1;
                assigned -= 1;
            }
        }
    } else if assigned < total {
        let mut order: Vec<usize> = (0..shares.len()).collect();
        order.sort_by(|&a, &b| {
            (quotas[b] - shares[b] as f64)
                .total_cmp(&(quotas[a] - shares[a] as f64))
                .then(a.cmp(&b))
        });
        for &k in order.iter().cycle() {
            if assigned == total {
                break;
            }
            shares[k] += 1;
            assigned += 1;
        }
    }
    for ((c, q), s) in carry.iter_mut().zip(&quotas).zip(&shares) {
        *c = q - *s as f64;
    }
    shares
}

pub fn discrete_simulate(
    network: &Network,
    config: DiscreteConfig,
    init: &NetworkState,
    horizon: f64,
) -> Result<DiscreteTrajectory, OracleError> {
    network.ensure_valid()?;
    let DiscreteConfig { granularity, step } = config;
    if granularity == 0 {
        return Err(OracleError::InvalidConfig("granularity must be at least 1".into()));
    }
    if !(step > 0.0 && step.is_finite()) {
        return Err(OracleError::InvalidConfig(format!("step must be positive, got {step}")));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(OracleError::InvalidConfig(format!("horizon must be positive, got {horizon}")));
    }
    let n = network.n();
    if init.queue.len() != n || init.history.len() != n {
        return Err(OracleError::InvalidConfig("initial state does not match network".into()));
    }
    let scale = granularity as f64;
    let t0 = init.time;

    let mut counts: Vec<u64> = init.queue.iter().map(|x| (x * scale).round() as u64).collect();
    let mut entered: u64 = counts.iter().sum();

    // Links per source queue, plus one trailing weight for the exit.
    let mut pipelines: Vec<Pipeline> = Vec::new();
    let mut out_links: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut weights: Vec<Vec<f64>> = vec![Vec::new(); n];
    for j in 0..n {
        for route in network.outgoing(j) {
            let d = ((route.delay / step).round() as usize).max(1);
            // Pre-load with departures from the initial history: slot m
            // arrives after step m, i.e. left during step m - d.
            let mut carry = 0.0;
            let slots = (0..d)
                .map(|m| {
                    let lo = t0 + (m as f64 - d as f64) * step;
                    let q = route.ratio * init.history[j].integral(lo, lo + step) * scale + carry;
                    let whole = (q + FLOOR_SLACK).floor().max(0.0);
                    carry = q - whole;
                    whole as u64
                })
                .collect();
            out_links[j].push(pipelines.len());
            weights[j].push(route.ratio);
            pipelines.push(Pipeline { to: route.peer, slots });
        }
        weights[j].push(network.routing().exit_fraction(j));
    }
    entered += pipelines.iter().flat_map(|p| p.slots.iter()).sum::<u64>();
    let mut carries: Vec<Vec<f64>> = weights.iter().map(|w| vec![0.0; w.len()]).collect();
    let mut entry_acc = vec![0.0; n];
    let mut service_acc = vec![0.0; n];
    let mut exited: u64 = 0;

    let transit = |p: &[Pipeline]| p.iter().flat_map(|p| p.slots.iter()).sum::<u64>();
    let steps = (horizon / step).round().max(1.0) as usize;
    let mut out = DiscreteTrajectory {
        granularity,
        step,
        times: vec![t0],
        counts: vec![counts.clone()],
        in_transit: vec![transit(&pipelines)],
        entered: vec![entered],
        exited: vec![exited],
    };

    for k in 0..steps {
        let lo = t0 + k as f64 * step;
        let hi = lo + step;
        for p in &mut pipelines {
            let arrived = p.slots.pop_front().unwrap_or(0);
            counts[p.to] += arrived;
        }
        for i in 0..n {
            entry_acc[i] += network.entry(i).integral(lo, hi) * scale;
            let new = (entry_acc[i] + FLOOR_SLACK).floor().max(0.0);
            entry_acc[i] -= new;
            counts[i] += new as u64;
            entered += new as u64;
        }
        let mut sends: Vec<u64> = vec![0; pipelines.len()];
        for i in 0..n {
            service_acc[i] += network.service(i).integral(lo, hi) * scale;
            let capacity = (service_acc[i] + FLOOR_SLACK).floor().max(0.0);
            service_acc[i] -= capacity;
            let served = counts[i].min(capacity as u64);
            counts[i] -= served;
            let shares = apportion(served, &weights[i], &mut carries[i]);
            for (&l, &s) in out_links[i].iter().zip(&shares) {
                sends[l] = s;
            }
            exited += shares[shares.len() - 1];
        }
        for (p, s) in pipelines.iter_mut().zip(sends) {
            p.slots.push_back(s);
        }
        out.times.push(hi);
        out.counts.push(counts.clone());
        out.in_transit.push(transit(&pipelines));
        out.entered.push(entered);
        out.exited.push(exited);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub granularity: u64,
    pub step: f64,
    /// Largest `|x_fluid - count / N|` over all step ends and queues.
    pub sup_error: f64,
}

/// Sup-norm distance between the fluid trajectory and the discrete model for
/// each granularity, with a common time step. Runs in parallel.
pub fn compare_fluid_discrete(
    network: &Network,
    init: &NetworkState,
    horizon: f64,
    granularities: &[u64],
    step: f64,
) -> Result<Vec<ComparisonRow>, OracleError> {
    let fluid = simulate(network, init, horizon)?;
    granularities
        .par_iter()
        .map(|&granularity| {
            let config = DiscreteConfig { granularity, step };
            let discrete = discrete_simulate(network, config, init, horizon)?;
            let mut sup_error: f64 = 0.0;
            for (k, &t) in discrete.times.iter().enumerate() {
                let t = t.min(fluid.end());
                for i in 0..network.n() {
                    sup_error = sup_error.max((fluid.queue_at(i, t) - discrete.normalized(k, i)).abs());
                }
            }
            Ok(ComparisonRow { granularity, step, sup_error })
        })
        .collect()
}
