//! Network description: periodic piecewise-constant rate profiles, routing
//! ratios, link delays, input validation and the mean-rate stability
//! condition.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{same_instant, TOL};

/// Periodic, right-continuous, piecewise-constant rate function.
///
/// `pieces` holds `(start, rate)` pairs; the rate applies on
/// `[start, next_start)` and the whole pattern repeats with `period`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateProfile {
    period: f64,
    pieces: Vec<(f64, f64)>,
}

impl RateProfile {
    /// Builds a profile without checking it; see [`RateProfile::issues`].
    pub fn new(period: f64, pieces: Vec<(f64, f64)>) -> Self {
        Self { period, pieces }
    }

    pub fn constant(period: f64, rate: f64) -> Self {
        Self::new(period, vec![(0.0, rate)])
    }

    /// Rate `on_rate` on `[start, start + duration)` (mod period), zero elsewhere.
    pub fn green_window(period: f64, start: f64, duration: f64, on_rate: f64) -> Self {
        Self::new(period, vec![(0.0, on_rate), (duration, 0.0)]).shifted(start)
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn pieces(&self) -> &[(f64, f64)] {
        &self.pieces
    }

    /// Structural problems with this profile, as human-readable reasons.
    pub fn issues(&self) -> Vec<ProfileIssue> {
        let mut out = Vec::new();
        if self.pieces.is_empty() {
            out.push(ProfileIssue::Empty);
            return out;
        }
        if self.pieces[0].0 != 0.0 {
            out.push(ProfileIssue::FirstBreakNotZero(self.pieces[0].0));
        }
        for w in self.pieces.windows(2) {
            if w[1].0.is_nan() || w[1].0 <= w[0].0 {
                out.push(ProfileIssue::BreaksNotIncreasing(w[1].0));
            }
        }
        for &(start, rate) in &self.pieces {
            if !start.is_finite() || start < 0.0 || (self.period.is_finite() && start >= self.period) {
                out.push(ProfileIssue::BreakOutOfRange(start));
            }
            if !rate.is_finite() {
                out.push(ProfileIssue::NonFiniteRate(rate));
            } else if rate < 0.0 {
                out.push(ProfileIssue::NegativeRate(rate));
            }
        }
        out
    }

    /// Phase of `t` within the cycle, in `[0, period)`. Phases at the same
    /// instant as the period end wrap to zero.
    pub fn phase(&self, t: f64) -> f64 {
        let p = t.rem_euclid(self.period);
        if self.period - p <= same_instant(t) {
            0.0
        } else {
            p
        }
    }

    /// Right-continuous evaluation.
    pub fn rate_at(&self, t: f64) -> f64 {
        let p = self.phase(t);
        let eps = same_instant(t);
        let idx = self.pieces.partition_point(|&(s, _)| s <= p + eps);
        self.pieces[idx.max(1) - 1].1
    }

    /// First rate change strictly later than `t`, or infinity for a
    /// constant profile.
    pub fn next_break_after(&self, t: f64) -> f64 {
        if self.pieces.len() < 2 {
            return f64::INFINITY;
        }
        let eps = same_instant(t);
        let cycle = ((t + eps) / self.period).floor();
        for k in [cycle, cycle + 1.0] {
            let base = k * self.period;
            for &(s, _) in &self.pieces {
                let cand = base + s;
                if cand > t + eps {
                    return cand;
                }
            }
        }
        (cycle + 2.0) * self.period
    }

    fn partial_integral(&self, phase: f64) -> f64 {
        let mut acc = 0.0;
        for (k, &(start, rate)) in self.pieces.iter().enumerate() {
            if start >= phase {
                break;
            }
            let end = self.pieces.get(k + 1).map_or(self.period, |p| p.0).min(phase);
            acc += rate * (end - start);
        }
        acc
    }

    fn antiderivative(&self, t: f64) -> f64 {
        let cycles = (t / self.period).floor();
        let phase = t - cycles * self.period;
        cycles * self.period * mean_rate(self) + self.partial_integral(phase)
    }

    /// Exact integral of the rate over `[t0, t1]`.
    pub fn integral(&self, t0: f64, t1: f64) -> f64 {
        self.antiderivative(t1) - self.antiderivative(t0)
    }

    /// Smallest rate taken on `[t0, t1)`.
    pub fn min_over(&self, t0: f64, t1: f64) -> f64 {
        let mut lo = self.rate_at(t0);
        let mut t = t0;
        loop {
            t = self.next_break_after(t);
            if t >= t1 - TOL {
                return lo;
            }
            lo = lo.min(self.rate_at(t));
        }
    }

    /// The profile delayed by `offset`: `shifted(o).rate_at(t) == rate_at(t - o)`.
    pub fn shifted(&self, offset: f64) -> Self {
        let period = self.period;
        let phi = offset.rem_euclid(period);
        let mut moved: Vec<(f64, f64)> = self
            .pieces
            .iter()
            .map(|&(s, r)| {
                let mut m = (s + phi).rem_euclid(period);
                if period - m <= TOL {
                    m = 0.0;
                }
                (m, r)
            })
            .collect();
        moved.sort_by(|a, b| a.0.total_cmp(&b.0));
        if moved[0].0 > TOL {
            let wrap = moved[moved.len() - 1].1;
            moved.insert(0, (0.0, wrap));
        } else {
            moved[0].0 = 0.0;
        }
        let mut pieces: Vec<(f64, f64)> = Vec::with_capacity(moved.len());
        for (s, r) in moved {
            match pieces.last_mut() {
                Some(last) if s - last.0 <= TOL => last.1 = r,
                Some(last) if last.1 == r => {}
                _ => pieces.push((s, r)),
            }
        }
        Self::new(period, pieces)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self::new(
            self.period,
            self.pieces.iter().map(|&(s, r)| (s, r * factor)).collect(),
        )
    }

    pub fn max_rate(&self) -> f64 {
        self.pieces.iter().map(|p| p.1).fold(0.0, f64::max)
    }
}

/// Time average of a profile over one period.
pub fn mean_rate(profile: &RateProfile) -> f64 {
    profile.partial_integral(profile.period) / profile.period
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProfileIssue {
    Empty,
    FirstBreakNotZero(f64),
    BreaksNotIncreasing(f64),
    BreakOutOfRange(f64),
    NegativeRate(f64),
    NonFiniteRate(f64),
}

impl fmt::Display for ProfileIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProfileIssue::Empty => write!(f, "profile has no pieces"),
            ProfileIssue::FirstBreakNotZero(s) => write!(f, "first piece starts at {s}, not 0"),
            ProfileIssue::BreaksNotIncreasing(s) => {
                write!(f, "piece starts not strictly increasing at {s}")
            }
            ProfileIssue::BreakOutOfRange(s) => write!(f, "piece start {s} outside [0, period)"),
            ProfileIssue::NegativeRate(r) => write!(f, "negative rate {r}"),
            ProfileIssue::NonFiniteRate(r) => write!(f, "non-finite rate {r}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProfileKind {
    Entry,
    Service,
}

impl fmt::Display for ProfileKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProfileKind::Entry => "entry",
            ProfileKind::Service => "service",
        })
    }
}

/// Dense `n x n` matrix of routing ratios; `r(i, j)` is the fraction of
/// departures from queue `i` that travel to queue `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl RoutingMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            entries: vec![0.0; n * n],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        let mut m = Self::zeros(n);
        for (i, row) in rows.iter().enumerate() {
            for (j, &r) in row.iter().enumerate().take(n) {
                m.set(i, j, r);
            }
        }
        m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.entries[from * self.n + to]
    }

    pub fn set(&mut self, from: usize, to: usize, ratio: f64) {
        self.entries[from * self.n + to] = ratio;
    }

    pub fn row_sum(&self, from: usize) -> f64 {
        self.entries[from * self.n..(from + 1) * self.n].iter().sum()
    }

    /// Fraction of departures from `from` that leave the network.
    pub fn exit_fraction(&self, from: usize) -> f64 {
        1.0 - self.row_sum(from)
    }

    fn successors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).filter(move |&j| self.get(i, j) > 0.0)
    }

    /// Spectral radius estimate. Acyclic supports are nilpotent and return 0;
    /// otherwise power iteration on `I + R` (200 steps, stop at 1e-12 change)
    /// feeding the Collatz-Wielandt upper bound `max_i (Rv)_i / v_i`.
    pub fn spectral_radius(&self) -> f64 {
        if self.n == 0 || matches!(routing_depth(self), RoutingDepth::Acyclic(_)) {
            return 0.0;
        }
        let n = self.n;
        let mul = |v: &[f64]| -> Vec<f64> {
            (0..n)
                .map(|i| (0..n).map(|j| self.get(i, j) * v[j]).sum())
                .collect()
        };
        let mut v = vec![1.0; n];
        let mut estimate = f64::INFINITY;
        for _ in 0..200 {
            let rv = mul(&v);
            let w: Vec<f64> = v.iter().zip(&rv).map(|(a, b)| a + b).collect();
            let norm = w.iter().cloned().fold(0.0, f64::max);
            v = w.iter().map(|x| x / norm).collect();
            let rv = mul(&v);
            let bound = rv
                .iter()
                .zip(&v)
                .map(|(r, x)| r / x)
                .fold(0.0, f64::max);
            let done = (bound - estimate).abs() < 1e-12;
            estimate = bound;
            if done {
                break;
            }
        }
        estimate
    }
}

/// Longest chain of queues a vehicle can visit, if routing has no cycles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RoutingDepth {
    Acyclic(usize),
    Cyclic,
}

/// Longest path (counted in queues) through the support graph of `routing`,
/// or `Cyclic` when the support contains a cycle (self-loops included).
pub fn routing_depth(routing: &RoutingMatrix) -> RoutingDepth {
    let n = routing.n();
    if n == 0 {
        return RoutingDepth::Acyclic(0);
    }
    let mut indegree = vec![0usize; n];
    for i in 0..n {
        for j in routing.successors(i) {
            indegree[j] += 1;
        }
    }
    let mut depth = vec![1usize; n];
    let mut ready: Vec<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut seen = 0;
    while let Some(i) = ready.pop() {
        seen += 1;
        for j in routing.successors(i) {
            depth[j] = depth[j].max(depth[i] + 1);
            indegree[j] -= 1;
            if indegree[j] == 0 {
                ready.push(j);
            }
        }
    }
    if seen < n {
        RoutingDepth::Cyclic
    } else {
        RoutingDepth::Acyclic(depth.into_iter().max().unwrap_or(0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueSpec {
    pub id: String,
    pub entry: RateProfile,
    pub service: RateProfile,
}

/// A directed link `from -> to` carrying `ratio` of `from`'s departures,
/// which reach `to` after `delay` time units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub from: usize,
    pub to: usize,
    pub ratio: f64,
    pub delay: Option<f64>,
}

/// A routed link with a known delay, as used by the simulator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Route {
    pub peer: usize,
    pub ratio: f64,
    pub delay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    period: f64,
    queues: Vec<QueueSpec>,
    links: Vec<Link>,
    routing: RoutingMatrix,
    incoming: Vec<Vec<Route>>,
    outgoing: Vec<Vec<Route>>,
}

impl Network {
    /// Assembles a network. Nothing is checked here; call [`validate`].
    pub fn new(period: f64, queues: Vec<QueueSpec>, links: Vec<Link>) -> Self {
        let n = queues.len();
        let mut routing = RoutingMatrix::zeros(n);
        let mut incoming = vec![Vec::new(); n];
        let mut outgoing = vec![Vec::new(); n];
        for link in &links {
            if link.from >= n || link.to >= n {
                continue;
            }
            routing.set(link.from, link.to, routing.get(link.from, link.to) + link.ratio);
            if link.ratio > 0.0 {
                if let Some(delay) = link.delay {
                    incoming[link.to].push(Route {
                        peer: link.from,
                        ratio: link.ratio,
                        delay,
                    });
                    outgoing[link.from].push(Route {
                        peer: link.to,
                        ratio: link.ratio,
                        delay,
                    });
                }
            }
        }
        Self {
            period,
            queues,
            links,
            routing,
            incoming,
            outgoing,
        }
    }

    pub fn n(&self) -> usize {
        self.queues.len()
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn queues(&self) -> &[QueueSpec] {
        &self.queues
    }

    pub fn queue(&self, i: usize) -> &QueueSpec {
        &self.queues[i]
    }

    pub fn entry(&self, i: usize) -> &RateProfile {
        &self.queues[i].entry
    }

    pub fn service(&self, i: usize) -> &RateProfile {
        &self.queues[i].service
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn routing(&self) -> &RoutingMatrix {
        &self.routing
    }

    /// Links ending at queue `i` (peer = upstream queue).
    pub fn incoming(&self, i: usize) -> &[Route] {
        &self.incoming[i]
    }

    /// Links leaving queue `i` (peer = downstream queue).
    pub fn outgoing(&self, i: usize) -> &[Route] {
        &self.outgoing[i]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.queues.iter().position(|q| q.id == id)
    }

    /// Largest link delay (0 without links).
    pub fn max_delay(&self) -> f64 {
        self.outgoing
            .iter()
            .flatten()
            .map(|r| r.delay)
            .fold(0.0, f64::max)
    }

    /// Smallest link delay (infinity without links).
    pub fn min_delay(&self) -> f64 {
        self.outgoing
            .iter()
            .flatten()
            .map(|r| r.delay)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn with_service(&self, i: usize, service: RateProfile) -> Self {
        let mut queues = self.queues.clone();
        queues[i].service = service;
        Self::new(self.period, queues, self.links.clone())
    }

    pub fn with_entry(&self, i: usize, entry: RateProfile) -> Self {
        let mut queues = self.queues.clone();
        queues[i].entry = entry;
        Self::new(self.period, queues, self.links.clone())
    }

    pub fn ensure_valid(&self) -> Result<(), ModelError> {
        let report = validate(self);
        if report.is_valid() {
            Ok(())
        } else {
            Err(ModelError::Invalid(report))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NonPositivePeriod(f64),
    PeriodMismatch {
        queue: usize,
        profile: ProfileKind,
        period: f64,
    },
    BadProfile {
        queue: usize,
        profile: ProfileKind,
        issue: ProfileIssue,
    },
    LinkOutOfRange {
        from: usize,
        to: usize,
    },
    DuplicateLink {
        from: usize,
        to: usize,
    },
    BadRatio {
        from: usize,
        to: usize,
        ratio: f64,
    },
    MissingDelay {
        from: usize,
        to: usize,
    },
    BadDelay {
        from: usize,
        to: usize,
        delay: f64,
    },
    RowSumExceedsOne {
        queue: usize,
        sum: f64,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NonPositivePeriod(p) => write!(f, "period must be positive, got {p}"),
            Violation::PeriodMismatch {
                queue,
                profile,
                period,
            } => write!(
                f,
                "period mismatch: queue {queue} {profile} profile has period {period}"
            ),
            Violation::BadProfile {
                queue,
                profile,
                issue,
            } => write!(f, "queue {queue} {profile} profile: {issue}"),
            Violation::LinkOutOfRange { from, to } => {
                write!(f, "link {from}->{to} references an unknown queue")
            }
            Violation::DuplicateLink { from, to } => write!(f, "duplicate link {from}->{to}"),
            Violation::BadRatio { from, to, ratio } => {
                write!(f, "link {from}->{to} has invalid ratio {ratio}")
            }
            Violation::MissingDelay { from, to } => write!(f, "missing delay on link {from}->{to}"),
            Violation::BadDelay { from, to, delay } => {
                write!(f, "link {from}->{to} delay must be positive and finite, got {delay}")
            }
            Violation::RowSumExceedsOne { queue, sum } => {
                write!(f, "routing row sum exceeds 1 at queue {queue} (sum {sum})")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return f.write_str("valid");
        }
        let lines: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        f.write_str(&lines.join("; "))
    }
}

/// Lists every invariant violation in `network`; an empty report means valid.
pub fn validate(network: &Network) -> ValidationReport {
    let mut violations = Vec::new();
    let period = network.period();
    if !(period > 0.0 && period.is_finite()) {
        violations.push(Violation::NonPositivePeriod(period));
    }
    for (i, q) in network.queues().iter().enumerate() {
        for (kind, profile) in [(ProfileKind::Entry, &q.entry), (ProfileKind::Service, &q.service)] {
            if profile.period() != period {
                violations.push(Violation::PeriodMismatch {
                    queue: i,
                    profile: kind,
                    period: profile.period(),
                });
            }
            for issue in profile.issues() {
                violations.push(Violation::BadProfile {
                    queue: i,
                    profile: kind,
                    issue,
                });
            }
        }
    }
    let n = network.n();
    let mut seen = std::collections::BTreeSet::new();
    for link in network.links() {
        let (from, to) = (link.from, link.to);
        if from >= n || to >= n {
            violations.push(Violation::LinkOutOfRange { from, to });
            continue;
        }
        if !seen.insert((from, to)) {
            violations.push(Violation::DuplicateLink { from, to });
        }
        if !(link.ratio.is_finite() && link.ratio >= 0.0) {
            violations.push(Violation::BadRatio {
                from,
                to,
                ratio: link.ratio,
            });
        }
        match link.delay {
            None if link.ratio > 0.0 => violations.push(Violation::MissingDelay { from, to }),
            Some(d) if !(d > 0.0 && d.is_finite()) => {
                violations.push(Violation::BadDelay { from, to, delay: d })
            }
            _ => {}
        }
    }
    for i in 0..n {
        let sum = network.routing().row_sum(i);
        if sum > 1.0 + TOL {
            violations.push(Violation::RowSumExceedsOne { queue: i, sum });
        }
    }
    ValidationReport { violations }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid network: {0}")]
    Invalid(ValidationReport),
    #[error("routing spectral radius {radius} is not below 1; vehicles do not all leave")]
    SpectralRadius { radius: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub mean_entry: Vec<f64>,
    pub mean_service: Vec<f64>,
    /// `(I - R^T)^{-1}` applied to the mean entry rates.
    pub effective_demand: Vec<f64>,
    pub margin: Vec<f64>,
    pub stable: bool,
    /// Smallest margin when stable, otherwise 0.
    pub epsilon: f64,
    /// Long-run unused service rate per queue, `c_bar - lambda`.
    pub predicted_wasted_service: Vec<f64>,
    pub spectral_radius: f64,
}

/// Mean rates, effective demand and the strict stability condition
/// `c_bar > (I - R^T)^{-1} e_bar`. A margin of exactly zero (within
/// [`TOL`]) is reported as unstable.
pub fn stability_report(network: &Network) -> Result<StabilityReport, ModelError> {
    network.ensure_valid()?;
    let n = network.n();
    let routing = network.routing();
    let radius = routing.spectral_radius();
    if radius >= 1.0 - 1e-9 {
        return Err(ModelError::SpectralRadius { radius });
    }
    let mean_entry: Vec<f64> = network.queues().iter().map(|q| mean_rate(&q.entry)).collect();
    let mean_service: Vec<f64> = network.queues().iter().map(|q| mean_rate(&q.service)).collect();

    let system = DMatrix::from_fn(n, n, |i, j| {
        let id = if i == j { 1.0 } else { 0.0 };
        id - routing.get(j, i)
    });
    let inverse = system
        .try_inverse()
        .ok_or(ModelError::SpectralRadius { radius })?;
    if inverse.iter().any(|&v| v < -1e-12) {
        return Err(ModelError::SpectralRadius { radius });
    }
    let demand = &inverse * DVector::from_column_slice(&mean_entry);
    let effective_demand: Vec<f64> = demand.iter().map(|v| v.max(0.0)).collect();
    let margin: Vec<f64> = mean_service
        .iter()
        .zip(&effective_demand)
        .map(|(c, l)| c - l)
        .collect();
    let stable = margin.iter().all(|&m| m > TOL);
    let epsilon = if stable {
        margin.iter().cloned().fold(f64::INFINITY, f64::min)
    } else {
        0.0
    };
    Ok(StabilityReport {
        mean_entry,
        mean_service,
        effective_demand,
        predicted_wasted_service: margin.clone(),
        margin,
        stable,
        epsilon: if n == 0 { 0.0 } else { epsilon },
        spectral_radius: radius,
    })
}
