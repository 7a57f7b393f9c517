//! Shared generators and independent reference computations for the
//! integration tests.
#![allow(dead_code)]

use ftnet::model::{stability_report, Link, Network, QueueSpec, RateProfile};
use ftnet::simulator::{NetworkState, StepFunction, Trajectory};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use rand::SeedableRng;
pub type TestRng = ChaCha8Rng;

pub fn rng(seed: u64) -> TestRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A random multiple of `1/den` in `[lo, hi]` (inclusive, in units of 1/den).
fn grid(rng: &mut TestRng, lo: u32, hi: u32, den: f64) -> f64 {
    rng.gen_range(lo..=hi) as f64 / den
}

/// Piecewise-constant profile on period 1 with breaks on the 1/8 grid and
/// rates on the 1/4 grid.
pub fn random_profile(rng: &mut TestRng, max_rate_quarters: u32, allow_zero_mean: bool) -> RateProfile {
    loop {
        let mut starts: Vec<u32> = (1..8).filter(|_| rng.gen_bool(0.3)).collect();
        starts.insert(0, 0);
        let pieces: Vec<(f64, f64)> = starts
            .iter()
            .map(|&s| (s as f64 / 8.0, grid(rng, 0, max_rate_quarters, 4.0)))
            .collect();
        let p = RateProfile::new(1.0, pieces);
        if allow_zero_mean || p.pieces().iter().any(|x| x.1 > 0.0) {
            return p;
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NetworkShape {
    pub max_queues: usize,
    /// Only links from lower to higher index (no cycles, no self-loops).
    pub acyclic: bool,
}

/// Random stable network with rational data: up to `max_queues` queues,
/// routing ratios on the 1/8 grid with row sums at most 7/8, delays on the
/// 1/8 grid in `[1/8, 1]`, and entry rates scaled down until every margin is
/// at least a tenth of the mean service rate.
pub fn random_stable_network(rng: &mut TestRng, shape: NetworkShape) -> Network {
    let n = rng.gen_range(1..=shape.max_queues);
    let queues: Vec<QueueSpec> = (0..n)
        .map(|i| QueueSpec {
            id: format!("q{i}"),
            entry: random_profile(rng, 8, true),
            service: random_profile(rng, 16, false),
        })
        .collect();
    let mut links = Vec::new();
    for from in 0..n {
        let mut budget = 7u32;
        for to in 0..n {
            if shape.acyclic && to <= from {
                continue;
            }
            if budget == 0 || !rng.gen_bool(0.4) {
                continue;
            }
            let eighths = rng.gen_range(1..=budget.min(4));
            budget -= eighths;
            links.push(Link {
                from,
                to,
                ratio: eighths as f64 / 8.0,
                delay: Some(grid(rng, 1, 8, 8.0)),
            });
        }
    }
    let mut net = Network::new(1.0, queues, links);
    let report = stability_report(&net).expect("generated network is valid");
    let mut scale: f64 = 1.0;
    for i in 0..n {
        let lambda = report.effective_demand[i];
        if lambda > 0.0 {
            scale = scale.min(0.9 * report.mean_service[i] / lambda);
        }
    }
    if scale < 1.0 {
        // Round down to the 1/16 grid to keep data rational.
        let s = (scale * 16.0).floor() / 16.0;
        for i in 0..n {
            let e = net.entry(i).scaled(s);
            net = net.with_entry(i, e);
        }
    }
    assert!(stability_report(&net).unwrap().stable);
    net
}

/// Departure history on `[-w, 0]` with knots on the 1/8 grid and rates a
/// random fraction of the service available there.
pub fn random_history(rng: &mut TestRng, net: &Network, j: usize) -> StepFunction {
    let w = net.max_delay();
    if w == 0.0 {
        return StepFunction::zero(0.0, 0.0);
    }
    let steps = (w * 8.0).round() as i64;
    let mut knots = Vec::new();
    for k in 0..steps {
        let lo = -w + k as f64 / 8.0;
        let cap = net.service(j).min_over(lo, lo + 1.0 / 8.0);
        let frac = grid(rng, 0, 4, 4.0);
        knots.push((lo, cap * frac));
    }
    StepFunction::new(-w, 0.0, knots)
}

pub fn random_state(rng: &mut TestRng, net: &Network, max_queue: u32) -> NetworkState {
    let mut s = NetworkState::with_queues(net, (0..net.n()).map(|_| grid(rng, 0, max_queue, 4.0)).collect());
    for j in 0..net.n() {
        s.history[j] = random_history(rng, net, j);
    }
    s
}

/// Independent fixed-step integrator of the same dynamics: departures are
/// the service rate when the queue is positive and `min(a, c)` otherwise;
/// delayed arrivals are read from a sampled departure history.
pub struct EulerGrid {
    pub dt: f64,
    pub times: Vec<f64>,
    pub queue: Vec<Vec<f64>>,
}

pub fn euler_grid(net: &Network, init: &NetworkState, horizon: f64, dt: f64) -> EulerGrid {
    let n = net.n();
    let steps = (horizon / dt).round() as usize;
    let lag: Vec<Vec<(usize, f64, usize)>> = (0..n)
        .map(|i| {
            net.links()
                .iter()
                .filter(|l| l.to == i && l.ratio > 0.0)
                .map(|l| (l.from, l.ratio, (l.delay.unwrap() / dt).round() as usize))
                .collect()
        })
        .collect();
    let back = (net.max_delay() / dt).round() as usize;
    // departures[j][back + k] is the rate on step k; negative k is history.
    let mut departures: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            (0..back)
                .map(|k| init.history[j].rate_at(init.time - net.max_delay() + (k as f64 + 0.5) * dt))
                .collect()
        })
        .collect();
    let mut x = init.queue.clone();
    let mut out = EulerGrid { dt, times: vec![init.time], queue: vec![x.clone()] };
    for k in 0..steps {
        let t = init.time + k as f64 * dt;
        let mid = t + 0.5 * dt;
        let mut next = x.clone();
        let mut b = vec![0.0; n];
        for i in 0..n {
            let mut a = net.entry(i).rate_at(mid);
            for &(j, r, d) in &lag[i] {
                a += r * departures[j][back + k - d];
            }
            let c = net.service(i).rate_at(mid);
            // Within a step the queue may empty; serve what is available.
            let available = x[i] / dt + a;
            b[i] = c.min(available);
            next[i] = (x[i] + (a - b[i]) * dt).max(0.0);
        }
        for j in 0..n {
            departures[j].push(b[j]);
        }
        x = next;
        out.times.push(t + dt);
        out.queue.push(x.clone());
    }
    out
}

/// Running-maximum reflection of `u` sampled on a uniform grid.
pub fn brute_force_reflection(u: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut v = 0.0f64;
    let mut xs = Vec::with_capacity(u.len());
    let mut vs = Vec::with_capacity(u.len());
    for &ui in u {
        v = v.max(-ui);
        xs.push(ui + v);
        vs.push(v);
    }
    (xs, vs)
}

/// Union of event times of two trajectories.
pub fn union_times(a: &Trajectory, b: &Trajectory) -> Vec<f64> {
    let mut t: Vec<f64> = a.times.iter().chain(&b.times).copied().collect();
    t.sort_by(f64::total_cmp);
    t.dedup();
    t
}

/// Largest violation of `y > 0 => x = 0` (unused service only while the
/// queue is empty): unused service accumulated on intervals where the queue
/// stays above `tol`.
pub fn complementarity_violation(traj: &Trajectory, tol: f64) -> f64 {
    let mut worst = 0.0f64;
    for k in 0..traj.intervals() {
        let dt = traj.times[k + 1] - traj.times[k];
        for i in 0..traj.n() {
            let busy = traj.queue[k][i].min(traj.queue[k + 1][i]) > tol;
            if busy {
                worst = worst.max(traj.unused[k][i] * dt);
                worst = worst.max((traj.cumulative_unused[k + 1][i] - traj.cumulative_unused[k][i]).abs());
            }
        }
    }
    worst
}

/// Largest per-queue flow-balance error `x(t) - x(0) - ∫(a - b)` and
/// network vehicle-conservation error over the trajectory.
pub fn conservation_errors(net: &Network, traj: &Trajectory) -> (f64, f64) {
    let mut balance = 0.0f64;
    let mut acc = traj.queue[0].clone();
    let mut entered = 0.0;
    let mut exited = 0.0;
    for k in 0..traj.intervals() {
        let dt = traj.times[k + 1] - traj.times[k];
        for (i, x) in acc.iter_mut().enumerate() {
            *x += (traj.arrival[k][i] - traj.departure[k][i]) * dt;
            balance = balance.max((*x - traj.queue[k + 1][i]).abs());
            entered += traj.entry[k][i] * dt;
            exited += net.routing().exit_fraction(i) * traj.departure[k][i] * dt;
        }
    }
    let start = traj.state_at(traj.start());
    let end = traj.final_state();
    let total = |s: &NetworkState| ftnet::simulator::total_vehicles(net, s);
    let conservation = (total(&end) - total(&start) - entered + exited).abs();
    (balance, conservation)
}
