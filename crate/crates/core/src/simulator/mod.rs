//! Event-driven exact integration of the fluid network.
//!
//! Every queue obeys `dx/dt = a - b`, where the arrival rate `a` is the
//! external entry plus routed departures from upstream queues delayed by
//! their link travel times, and departures run at the service rate while
//! the queue is positive and at `min(a, c)` when it is empty. All inputs are
//! piecewise constant, so between events every rate is constant and every
//! queue is linear in time; the engine jumps from event to event.
//!
//! A departure-rate change at queue `j` at time `s` is scheduled as an
//! arrival-rate change at `s + delay` for each outgoing link.

mod export;
mod history;

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, Network};
use crate::TOL;

pub use export::EventRecord;
pub use history::StepFunction;
use crate::same_instant;

/// Departure-rate changes smaller than this are not propagated downstream.
const RATE_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("departure history of queue {queue} does not cover time {time}")]
    HistoryGap { queue: usize, time: f64 },
    #[error("non-finite input: {0}")]
    NonfiniteInput(String),
    #[error("invalid initial state: {0}")]
    InvalidInitialState(String),
    #[error("horizon must be positive and finite, got {0}")]
    BadHorizon(f64),
    #[error("more than {limit} events within one period (at t = {time})")]
    ChatteringSuspected { time: f64, limit: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    ProfileBreak { queue: usize },
    ArrivalRateChange { queue: usize },
    QueueEmpties { queue: usize },
    /// Gate re-evaluation requested by a [`ServiceGate`].
    Gate { queue: Option<usize> },
    HorizonEnd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    pub kind: EventKind,
}

#[derive(Debug, Clone, Copy)]
pub struct SimOptions {
    /// Value tolerance for clamping queues and checking initial states.
    pub tol: f64,
    pub max_events_per_period: usize,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            tol: TOL,
            max_events_per_period: 1_000_000,
        }
    }
}

/// Queue vector plus the departure history over the trailing window
/// `[time - max_delay, time]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkState {
    pub time: f64,
    pub queue: Vec<f64>,
    pub history: Vec<StepFunction>,
}

impl NetworkState {
    /// Empty queues and no departures over the history window.
    pub fn zero(network: &Network) -> Self {
        Self::with_queues(network, vec![0.0; network.n()])
    }

    /// Given queue lengths at time 0 with zero departure history.
    pub fn with_queues(network: &Network, queue: Vec<f64>) -> Self {
        let w = network.max_delay();
        Self {
            time: 0.0,
            history: vec![StepFunction::zero(-w, 0.0); queue.len()],
            queue,
        }
    }

    pub fn n(&self) -> usize {
        self.queue.len()
    }

    /// Same state re-labelled `dt` later (used to re-anchor at phase 0).
    pub fn shifted(&self, dt: f64) -> Self {
        Self {
            time: self.time + dt,
            queue: self.queue.clone(),
            history: self.history.iter().map(|h| h.shifted(dt)).collect(),
        }
    }
}

/// Rates at the current instant, handed to a [`ServiceGate`].
pub struct RateView<'a> {
    pub time: f64,
    pub network: &'a Network,
    pub queue: &'a [f64],
    pub entry: &'a [f64],
    pub arrival: &'a [f64],
    pub service: &'a [f64],
    pub tol: f64,
}

/// Hook that scales each queue's service rate by a factor in `[0, 1]`.
pub trait ServiceGate {
    fn factors(&mut self, view: &RateView<'_>) -> Result<Vec<f64>, SimError>;

    /// Earliest time after `t` at which factors may change, given the
    /// current queues and their net rates of change.
    fn next_event(&self, t: f64, queue: &[f64], net_rate: &[f64]) -> Option<(f64, EventKind)>;

    /// Snap queue values that reached a gate threshold.
    fn settle(&self, _queue: &mut [f64], _tol: f64) {}
}

/// The plain fixed-time network: service is never gated.
pub struct Ungated;

impl ServiceGate for Ungated {
    fn factors(&mut self, view: &RateView<'_>) -> Result<Vec<f64>, SimError> {
        Ok(vec![1.0; view.queue.len()])
    }

    fn next_event(&self, _: f64, _: &[f64], _: &[f64]) -> Option<(f64, EventKind)> {
        None
    }
}

/// Event-exact trajectory. `times` lists every event; queue lengths and
/// cumulative unused service are given at those times, and rates are given
/// per interval `[times[k], times[k + 1])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub queue: Vec<Vec<f64>>,
    pub cumulative_unused: Vec<Vec<f64>>,
    pub entry: Vec<Vec<f64>>,
    pub arrival: Vec<Vec<f64>>,
    pub departure: Vec<Vec<f64>>,
    pub unused: Vec<Vec<f64>>,
    /// Effective service rate (after any gating).
    pub service: Vec<Vec<f64>>,
    /// Departure rates from `start - max_delay` to `end`.
    pub history: Vec<StepFunction>,
    pub events: Vec<Event>,
    pub max_delay: f64,
}

impl Trajectory {
    pub fn n(&self) -> usize {
        self.queue[0].len()
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    pub fn intervals(&self) -> usize {
        self.times.len() - 1
    }

    /// Index of the interval containing `t` (right-continuous, clamped).
    pub fn interval_index(&self, t: f64) -> usize {
        let k = self.times.partition_point(|&s| s <= t);
        k.clamp(1, self.intervals().max(1)) - 1
    }

    fn interpolate(&self, series: &[Vec<f64>], i: usize, t: f64) -> f64 {
        if self.intervals() == 0 {
            return series[0][i];
        }
        let k = self.interval_index(t);
        let (t0, t1) = (self.times[k], self.times[k + 1]);
        let (v0, v1) = (series[k][i], series[k + 1][i]);
        if t1 <= t0 {
            return v1;
        }
        let w = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
        v0 + (v1 - v0) * w
    }

    pub fn queue_at(&self, i: usize, t: f64) -> f64 {
        self.interpolate(&self.queue, i, t)
    }

    pub fn cumulative_unused_at(&self, i: usize, t: f64) -> f64 {
        self.interpolate(&self.cumulative_unused, i, t)
    }

    pub fn departure_rate_at(&self, i: usize, t: f64) -> f64 {
        self.history[i].rate_at(t)
    }

    /// Exact integral of queue `i` over `[t0, t1]`.
    pub fn queue_integral(&self, i: usize, t0: f64, t1: f64) -> f64 {
        let mut pts = vec![(t0, self.queue_at(i, t0))];
        for (k, &t) in self.times.iter().enumerate() {
            if t > t0 && t < t1 {
                pts.push((t, self.queue[k][i]));
            }
        }
        pts.push((t1, self.queue_at(i, t1)));
        pts.windows(2)
            .map(|w| 0.5 * (w[0].1 + w[1].1) * (w[1].0 - w[0].0))
            .sum()
    }

    pub fn departure_integral(&self, i: usize, t0: f64, t1: f64) -> f64 {
        self.history[i].integral(t0, t1)
    }

    /// Network state at `t`, including the departure window `[t - max_delay, t]`.
    pub fn state_at(&self, t: f64) -> NetworkState {
        NetworkState {
            time: t,
            queue: (0..self.n()).map(|i| self.queue_at(i, t)).collect(),
            history: self
                .history
                .iter()
                .map(|h| h.window(t - self.max_delay, t))
                .collect(),
        }
    }

    pub fn final_state(&self) -> NetworkState {
        let k = self.times.len() - 1;
        let t = self.times[k];
        NetworkState {
            time: t,
            queue: self.queue[k].clone(),
            history: self
                .history
                .iter()
                .map(|h| h.window(t - self.max_delay, t))
                .collect(),
        }
    }

    pub fn max_queue(&self, i: usize) -> f64 {
        self.queue.iter().map(|q| q[i]).fold(0.0, f64::max)
    }
}

/// Arrival rate into queue `i` at time `t`: external entry plus routed,
/// delayed departures read from `history`.
pub fn arrival_rate(
    network: &Network,
    history: &[StepFunction],
    i: usize,
    t: f64,
) -> Result<f64, SimError> {
    let mut a = network.entry(i).rate_at(t);
    for route in network.incoming(i) {
        let h = &history[route.peer];
        let s = t - route.delay;
        if s < h.start() - TOL || s > h.end() + TOL {
            return Err(SimError::HistoryGap {
                queue: route.peer,
                time: s,
            });
        }
        a += route.ratio * h.rate_at(s);
    }
    Ok(a)
}

/// Vehicles in queues plus vehicles on links that will join a queue.
pub fn total_vehicles(network: &Network, state: &NetworkState) -> f64 {
    let queued: f64 = state.queue.iter().sum();
    let mut transit = 0.0;
    for j in 0..network.n() {
        for route in network.outgoing(j) {
            transit += route.ratio * state.history[j].integral(state.time - route.delay, state.time);
        }
    }
    queued + transit
}

pub fn simulate(network: &Network, init: &NetworkState, horizon: f64) -> Result<Trajectory, SimError> {
    simulate_gated(network, init, horizon, &mut Ungated, &SimOptions::default())
}

pub fn simulate_with(
    network: &Network,
    init: &NetworkState,
    horizon: f64,
    opts: &SimOptions,
) -> Result<Trajectory, SimError> {
    simulate_gated(network, init, horizon, &mut Ungated, opts)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Pending {
    time: f64,
    queue: usize,
}

impl Eq for Pending {}

impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Pending {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.queue.cmp(&other.queue))
    }
}

fn check_initial_state(network: &Network, init: &NetworkState, tol: f64) -> Result<(), SimError> {
    let n = network.n();
    if init.queue.len() != n || init.history.len() != n {
        return Err(SimError::InvalidInitialState(format!(
            "state has {} queues and {} histories, network has {n}",
            init.queue.len(),
            init.history.len()
        )));
    }
    if !init.time.is_finite() {
        return Err(SimError::NonfiniteInput("initial time".into()));
    }
    for (i, &x) in init.queue.iter().enumerate() {
        if !x.is_finite() {
            return Err(SimError::NonfiniteInput(format!("queue {i} length")));
        }
        if x < 0.0 {
            return Err(SimError::InvalidInitialState(format!("queue {i} is negative ({x})")));
        }
    }
    for j in 0..n {
        let need = network.outgoing(j).iter().map(|r| r.delay).fold(0.0, f64::max);
        let h = &init.history[j];
        if h.start() > init.time - need + tol || h.end() < init.time - tol {
            return Err(SimError::HistoryGap {
                queue: j,
                time: init.time - need,
            });
        }
        if need == 0.0 {
            continue;
        }
        let knots = h.knots();
        for (k, &(s, rate)) in knots.iter().enumerate() {
            if !rate.is_finite() {
                return Err(SimError::NonfiniteInput(format!("history of queue {j}")));
            }
            let lo = s.max(init.time - need);
            let hi = knots.get(k + 1).map_or(h.end(), |n| n.0).min(init.time);
            if hi - lo <= tol {
                continue;
            }
            let cap = network.service(j).min_over(lo, hi);
            if rate < -tol || rate > cap + tol {
                return Err(SimError::InvalidInitialState(format!(
                    "history of queue {j} has rate {rate} outside [0, {cap}] on [{lo}, {hi})"
                )));
            }
        }
    }
    Ok(())
}

/// Simulates `network` from `init` over `[init.time, init.time + horizon]`
/// with service scaled by `gate`.
pub fn simulate_gated<G: ServiceGate + ?Sized>(
    network: &Network,
    init: &NetworkState,
    horizon: f64,
    gate: &mut G,
    opts: &SimOptions,
) -> Result<Trajectory, SimError> {
    network.ensure_valid()?;
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(SimError::BadHorizon(horizon));
    }
    let tol = opts.tol;
    check_initial_state(network, init, tol)?;

    let n = network.n();
    let t0 = init.time;
    let end = t0 + horizon;
    let max_delay = network.max_delay();
    let period = network.period();

    let mut history: Vec<StepFunction> = init
        .history
        .iter()
        .map(|h| {
            let mut w = h.window(h.start().max(t0 - max_delay), t0);
            w.extend_to(t0);
            w
        })
        .collect();
    let mut pending = BinaryHeap::new();
    for (j, h) in history.iter().enumerate() {
        for route in network.outgoing(j) {
            for &(s, _) in &h.knots()[1..] {
                if s + route.delay > t0 + same_instant(t0) && s < t0 {
                    pending.push(Reverse(Pending {
                        time: s + route.delay,
                        queue: route.peer,
                    }));
                }
            }
        }
    }

    let mut x = init.queue.clone();
    let mut v = vec![0.0; n];
    let mut t = t0;

    let mut traj = Trajectory {
        times: vec![t0],
        queue: vec![x.clone()],
        cumulative_unused: vec![v.clone()],
        entry: Vec::new(),
        arrival: Vec::new(),
        departure: Vec::new(),
        unused: Vec::new(),
        service: Vec::new(),
        history: Vec::new(),
        events: Vec::new(),
        max_delay,
    };

    let mut period_start = t0;
    let mut period_events = 0usize;

    loop {
        let entry: Vec<f64> = (0..n).map(|i| network.entry(i).rate_at(t)).collect();
        let mut arrival = entry.clone();
        for (i, a) in arrival.iter_mut().enumerate() {
            for route in network.incoming(i) {
                *a += route.ratio * history[route.peer].rate_at(t - route.delay);
            }
        }
        let raw_service: Vec<f64> = (0..n).map(|i| network.service(i).rate_at(t)).collect();
        let factors = gate.factors(&RateView {
            time: t,
            network,
            queue: &x,
            entry: &entry,
            arrival: &arrival,
            service: &raw_service,
            tol,
        })?;
        let service: Vec<f64> = raw_service.iter().zip(&factors).map(|(c, s)| c * s).collect();
        let departure: Vec<f64> = (0..n)
            .map(|i| if x[i] > 0.0 { service[i] } else { arrival[i].min(service[i]) })
            .collect();
        let unused: Vec<f64> = service.iter().zip(&departure).map(|(c, b)| c - b).collect();

        for j in 0..n {
            let prev = history[j].last_rate();
            if (departure[j] - prev).abs() > RATE_EPS * departure[j].abs().max(1.0)
                && history[j].push(t, departure[j])
            {
                for route in network.outgoing(j) {
                    pending.push(Reverse(Pending {
                        time: t + route.delay,
                        queue: route.peer,
                    }));
                }
            }
        }

        let net: Vec<f64> = arrival.iter().zip(&departure).map(|(a, b)| a - b).collect();
        let empties: Vec<f64> = (0..n)
            .map(|i| {
                if x[i] > 0.0 && net[i] < 0.0 {
                    t + x[i] / -net[i]
                } else {
                    f64::INFINITY
                }
            })
            .collect();
        let profile_breaks: Vec<f64> = (0..n)
            .map(|i| {
                network
                    .entry(i)
                    .next_break_after(t)
                    .min(network.service(i).next_break_after(t))
            })
            .collect();
        let gate_event = gate.next_event(t, &x, &net);

        let mut next = end;
        for &c in empties.iter().chain(&profile_breaks) {
            next = next.min(c);
        }
        if let Some(Reverse(p)) = pending.peek() {
            next = next.min(p.time);
        }
        if let Some((g, _)) = gate_event {
            next = next.min(g);
        }
        if end - next <= same_instant(end) {
            next = end;
        }
        let next = next.max(t);
        let eps = same_instant(next);

        let dt = next - t;
        for i in 0..n {
            x[i] += net[i] * dt;
            v[i] += unused[i] * dt;
            if empties[i] <= next + eps || (x[i] < 0.0 && x[i] > -tol) {
                x[i] = 0.0;
            }
            if x[i] < 0.0 {
                // Only reachable through rounding far beyond tolerance.
                x[i] = 0.0;
            }
        }
        gate.settle(&mut x, tol);

        let mut kinds = Vec::new();
        for i in 0..n {
            if empties[i] <= next + eps {
                kinds.push(EventKind::QueueEmpties { queue: i });
            }
            if profile_breaks[i] <= next + eps {
                kinds.push(EventKind::ProfileBreak { queue: i });
            }
        }
        while let Some(Reverse(p)) = pending.peek() {
            if p.time > next + eps {
                break;
            }
            let queue = p.queue;
            pending.pop();
            let kind = EventKind::ArrivalRateChange { queue };
            if !kinds.contains(&kind) {
                kinds.push(kind);
            }
        }
        if let Some((g, kind)) = gate_event {
            if g <= next + eps {
                kinds.push(kind);
            }
        }
        if next >= end {
            kinds.push(EventKind::HorizonEnd);
        }

        traj.entry.push(entry);
        traj.arrival.push(arrival);
        traj.departure.push(departure);
        traj.unused.push(unused);
        traj.service.push(service);
        traj.times.push(next);
        traj.queue.push(x.clone());
        traj.cumulative_unused.push(v.clone());
        traj.events
            .extend(kinds.into_iter().map(|kind| Event { time: next, kind }));
        t = next;

        if t >= end {
            break;
        }
        period_events += 1;
        if t - period_start >= period {
            period_start = t;
            period_events = 0;
        } else if period_events > opts.max_events_per_period {
            return Err(SimError::ChatteringSuspected {
                time: t,
                limit: opts.max_events_per_period,
            });
        }
    }

    for h in &mut history {
        h.extend_to(end);
    }
    traj.history = history;
    Ok(traj)
}
