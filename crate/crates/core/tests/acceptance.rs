//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{NetworkShape, TestRng};
use ftnet::blocking::{detect_gridlock, simulate_blocking, BlockingMode, GridlockStatus, StorageLimits};
use ftnet::catalog::{isolated_signal, recirculating_loop, signal_tandem};
use ftnet::metrics::{average_queue, sweep_offset, webster_delay, WebsterInput};
use ftnet::model::{routing_depth, stability_report, Network, RoutingDepth};
use ftnet::oracle::compare_fluid_discrete;
use ftnet::orbit::{
    coupling_time, find_periodic_orbit, poincare_map, state_distance, verify_orbit, Convergence, Coupling,
};
use ftnet::reflection::{skorokhod, PiecewiseLinearPath};
use ftnet::simulator::{simulate, NetworkState, StepFunction, Trajectory};
use rand::Rng;

const TOL: f64 = 1e-9;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(label: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    ensure((got - want).abs() <= tol, || format!("{label}: got {got}, want {want} ± {tol:e}"))
}

fn ac1_signal_reproduction() -> Check {
    let start = Instant::now();
    let net = isolated_signal();
    let short = NetworkState::with_queues(&net, vec![0.5]);
    let long = NetworkState::with_queues(&net, vec![1.5]);
    let a = simulate(&net, &short, 3.0).map_err(|e| e.to_string())?;
    let b = simulate(&net, &long, 3.0).map_err(|e| e.to_string())?;
    close("periodicity |x(0)-x(1)|", a.queue_at(0, 1.0), a.queue_at(0, 0.0), TOL)?;
    close("x(2)", a.queue_at(0, 2.0), 0.5, TOL)?;
    let coupling = coupling_time(&net, &short, &long, TOL, 10).map_err(|e| e.to_string())?;
    let Coupling::At { time } = coupling else {
        return Err("trajectories never couple".into());
    };
    close("coupling time", time, 1.5, TOL)?;
    // Just before coupling the long queue is still discharging at saturation
    // while the periodic trajectory is passing arrivals through.
    close("b(1.4) from 1.5", b.departure_rate_at(0, 1.4), 3.0, TOL)?;
    close("b(1.4) on orbit", a.departure_rate_at(0, 1.4), 1.0, TOL)?;
    for k in 0..=30 {
        let t = 1.5 + k as f64 * 0.05;
        close("coincidence after coupling", b.queue_at(0, t), a.queue_at(0, t), TOL)?;
    }
    close("b one cycle after coupling", b.departure_rate_at(0, 2.4), 1.0, TOL)?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(1), || format!("runtime {elapsed:?}"))?;
    Ok(format!("coupling at {time}, runtime {elapsed:?}"))
}

fn ac2_orbit_from_zero() -> Check {
    let net = isolated_signal();
    let orbit = find_periodic_orbit(&net, TOL, 100).map_err(|e| e.to_string())?;
    close("anchor", orbit.anchor.queue[0], 0.5, TOL)?;
    ensure(matches!(orbit.convergence, Convergence::ExactFiniteTime { .. }), || {
        format!("convergence {:?}", orbit.convergence)
    })?;
    let mut s = NetworkState::zero(&net);
    for k in 0..5 {
        let next = poincare_map(&net, &s).map_err(|e| e.to_string())?;
        ensure(next.queue[0] >= s.queue[0] - TOL, || format!("iterate {k} decreased"))?;
        s = next;
    }
    let cert = verify_orbit(&net, &orbit);
    ensure(cert.passed, || format!("certificate failed: {cert:?}"))?;
    let q = &cert.queues[0];
    ensure(q.clearing_time.is_some(), || "queue never clears".into())?;
    close("unused service per period", q.measured_unused, 0.5, 1e-8)?;
    let report = stability_report(&net).map_err(|e| e.to_string())?;
    let predicted = net.period() * (report.mean_service[0] - report.mean_entry[0]);
    close("T(c̄ - ē)", q.measured_unused, predicted, 1e-8)?;
    Ok(format!(
        "anchor {}, clearing at {:?}, unused {}",
        orbit.anchor.queue[0], q.clearing_time, q.measured_unused
    ))
}

fn ac3_geometric_decay() -> Check {
    let net = recirculating_loop();
    ensure(routing_depth(net.routing()) == RoutingDepth::Cyclic, || "routing not cyclic".into())?;
    let zero = find_periodic_orbit(&net, TOL, 1000).map_err(|e| e.to_string())?;
    let mut found = Vec::new();
    for x0 in [0.25, 0.4] {
        let init = NetworkState::with_queues(&net, vec![x0]);
        let traj = simulate(&net, &init, 20.0).map_err(|e| e.to_string())?;
        for n in 0..=20 {
            let want = x0 * 0.5f64.powi(n);
            close(&format!("x({n}) from {x0}"), traj.queue_at(0, n as f64), want, TOL)?;
        }
        let coupling = coupling_time(&net, &init, &zero.anchor, TOL, 100).map_err(|e| e.to_string())?;
        let Coupling::At { time } = coupling else {
            return Err(format!("x0 = {x0} never couples"));
        };
        let periods = (time / net.period() - TOL).ceil() as i64;
        let want = (x0 / TOL).log2().ceil() as i64;
        ensure(periods == want, || format!("x0 = {x0}: coupled after {periods} periods, want {want}"))?;
        found.push(periods);
    }
    Ok(format!("coupling periods {found:?}"))
}

fn ac4_delays() -> Check {
    let net = isolated_signal();
    let orbit = find_periodic_orbit(&net, TOL, 100).map_err(|e| e.to_string())?;
    let avg = average_queue(&orbit.trajectory, 0, 0.0, 1.0).map_err(|e| e.to_string())?;
    close("first intersection average queue", avg, 3.0 / 16.0, TOL)?;

    let tandem = signal_tandem(0.0);
    let offsets: Vec<f64> = (0..48).map(|k| k as f64 / 48.0).collect();
    let sweep = sweep_offset(&tandem, 1, &offsets).map_err(|e| e.to_string())?;
    let integrals: Vec<f64> = sweep.iter().map(|p| p.avg_queue * tandem.period()).collect();
    let lo = integrals.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = integrals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    close("sweep minimum", lo, 0.0, 1e-6)?;
    close("sweep maximum", hi, 23.0 / 48.0, 1e-6)?;

    let w = webster_delay(WebsterInput { cycle: 1.0, green: 0.5, flow: 1.0, ratio: 2.0 / 3.0 })
        .map_err(|e| e.to_string())?;
    close("webster", w, 0.7477, 5e-3)?;
    Ok(format!("avg queue {avg}, sweep range [{lo}, {hi}], webster {w:.4}"))
}

/// Lower copy of an upper initial state: every queue and history rate scaled
/// by a random fraction in `[0, 1]`.
fn dominated_state(rng: &mut TestRng, upper: &NetworkState) -> NetworkState {
    let mut lower = upper.clone();
    for x in &mut lower.queue {
        *x *= rng.gen_range(0..=4) as f64 / 4.0;
    }
    for h in &mut lower.history {
        let knots: Vec<(f64, f64)> =
            h.knots().iter().map(|&(t, r)| (t, r * rng.gen_range(0..=4) as f64 / 4.0)).collect();
        *h = StepFunction::new(h.start(), h.end(), knots);
    }
    lower
}

fn monotone_violations(lo: &Trajectory, hi: &Trajectory) -> Vec<String> {
    let times = common::union_times(lo, hi);
    let scale = hi.queue.iter().flatten().cloned().fold(1.0, f64::max);
    let slack = TOL * scale;
    let mut out = Vec::new();
    for w in times.windows(2) {
        let (t, mid) = (w[0], 0.5 * (w[0] + w[1]));
        for i in 0..lo.n() {
            if lo.queue_at(i, t) > hi.queue_at(i, t) + slack {
                out.push(format!("x[{i}]({t})"));
            }
            if lo.departure_rate_at(i, mid) > hi.departure_rate_at(i, mid) + slack {
                out.push(format!("b[{i}]({mid})"));
            }
            if lo.cumulative_unused_at(i, t) + slack < hi.cumulative_unused_at(i, t) {
                out.push(format!("v[{i}]({t})"));
            }
        }
    }
    out
}

fn ac5_monotonicity() -> Check {
    let mut violations = Vec::new();
    let count = 200;
    for seed in 0..count {
        let mut rng = common::rng(5000 + seed);
        let upper = common::random_stable_network(&mut rng, NetworkShape { max_queues: 5, acyclic: seed % 3 == 0 });
        let factor = rng.gen_range(0..=4) as f64 / 4.0;
        let mut lower = upper.clone();
        for i in 0..upper.n() {
            lower = lower.with_entry(i, upper.entry(i).scaled(factor));
        }
        let s_hi = common::random_state(&mut rng, &upper, 8);
        let s_lo = dominated_state(&mut rng, &s_hi);
        let hi = simulate(&upper, &s_hi, 10.0).map_err(|e| format!("seed {seed}: {e}"))?;
        let lo = simulate(&lower, &s_lo, 10.0).map_err(|e| format!("seed {seed}: {e}"))?;
        for v in monotone_violations(&lo, &hi) {
            violations.push(format!("seed {seed}: {v}"));
        }
    }
    ensure(violations.is_empty(), || {
        format!("{} violations, first: {}", violations.len(), violations[0])
    })?;
    Ok(format!("{count} network pairs, 0 violations"))
}

fn audit(net: &Network, traj: &Trajectory, label: &str) -> Result<(), String> {
    let horizon = (traj.end() - traj.start()).max(1.0);
    let bound = TOL * horizon;
    let comp = common::complementarity_violation(traj, TOL);
    ensure(comp <= bound, || format!("{label}: complementarity violated by {comp:e}"))?;
    let (balance, conservation) = common::conservation_errors(net, traj);
    ensure(balance <= bound, || format!("{label}: flow balance error {balance:e}"))?;
    ensure(conservation <= bound, || format!("{label}: conservation error {conservation:e}"))?;
    Ok(())
}

fn ac6_complementarity_conservation() -> Check {
    let mut audited = 0;
    let examples = [
        (isolated_signal(), vec![0.5]),
        (isolated_signal(), vec![1.5]),
        (recirculating_loop(), vec![0.4]),
        (signal_tandem(0.5), vec![0.7, 0.2]),
    ];
    for (k, (net, x0)) in examples.iter().enumerate() {
        let traj = simulate(net, &NetworkState::with_queues(net, x0.clone()), 20.0).map_err(|e| e.to_string())?;
        audit(net, &traj, &format!("example {k}"))?;
        audited += 1;
    }
    for seed in 0..200 {
        let mut rng = common::rng(6000 + seed);
        let net = common::random_stable_network(&mut rng, NetworkShape { max_queues: 5, acyclic: seed % 2 == 0 });
        let init = common::random_state(&mut rng, &net, 8);
        let traj = simulate(&net, &init, 20.0).map_err(|e| format!("seed {seed}: {e}"))?;
        audit(&net, &traj, &format!("seed {seed}"))?;
        audited += 1;
    }
    Ok(format!("{audited} trajectories audited"))
}

fn ac7_uniqueness() -> Check {
    let mut acyclic_cases = 0;
    let mut worst: f64 = 0.0;
    let nets = 50;
    for seed in 0..nets {
        let mut rng = common::rng(7000 + seed);
        let acyclic = seed % 2 == 0;
        let net = common::random_stable_network(&mut rng, NetworkShape { max_queues: 5, acyclic });
        let orbit = find_periodic_orbit(&net, 1e-10, 100_000).map_err(|e| format!("seed {seed}: {e}"))?;
        let exact = matches!(routing_depth(net.routing()), RoutingDepth::Acyclic(_));
        if exact {
            acyclic_cases += 1;
        }
        for trial in 0..5 {
            let mut s = common::random_state(&mut rng, &net, 12);
            let mut reached = None;
            for p in 1..=200 {
                s = poincare_map(&net, &s).map_err(|e| format!("seed {seed}: {e}"))?;
                let d = state_distance(&s, &orbit.anchor).map_err(|e| e.to_string())?;
                if d <= TOL {
                    reached.get_or_insert(p);
                } else {
                    reached = None;
                }
            }
            let d = state_distance(&s, &orbit.anchor).map_err(|e| e.to_string())?;
            worst = worst.max(d);
            ensure(d <= 1e-6, || format!("seed {seed} trial {trial}: distance {d:e} after 200 periods"))?;
            if exact {
                ensure(reached.is_some(), || {
                    format!("seed {seed} trial {trial}: acyclic network did not coincide exactly (distance {d:e})")
                })?;
            }
        }
    }
    Ok(format!(
        "{nets} networks x 5 states ({acyclic_cases} acyclic), worst distance {worst:e}"
    ))
}

fn ac8_reflection_oracle() -> Check {
    const M: usize = 100_000;
    let mut worst_ratio: f64 = 0.0;
    let inputs = 100;
    for seed in 0..inputs {
        let mut rng = common::rng(8000 + seed);
        let horizon = rng.gen_range(1.0..10.0);
        let pieces = rng.gen_range(1..=20);
        let mut starts: Vec<f64> = (0..pieces - 1).map(|_| rng.gen_range(0.0..horizon)).collect();
        starts.push(0.0);
        starts.sort_by(f64::total_cmp);
        starts.dedup();
        let slopes: Vec<(f64, f64)> = starts.iter().map(|&s| (s, rng.gen_range(-5.0..5.0))).collect();
        let x0 = rng.gen_range(0.0..2.0);
        let u = PiecewiseLinearPath::from_slopes(x0, &slopes, horizon).map_err(|e| e.to_string())?;
        let r = skorokhod(&u).map_err(|e| e.to_string())?;
        let grid: Vec<f64> = (0..=M).map(|k| horizon * k as f64 / M as f64).collect();
        let samples: Vec<f64> = grid.iter().map(|&t| u.value_at(t).unwrap()).collect();
        let (bx, bv) = common::brute_force_reflection(&samples);
        let max_slope = slopes.iter().map(|s| s.1.abs()).fold(0.0, f64::max);
        let bound = 2.0 * max_slope * horizon / M as f64 + 1e-12;
        for (k, &t) in grid.iter().enumerate() {
            let ex = (r.x.value_at(t).unwrap() - bx[k]).abs();
            let ev = (r.v.value_at(t).unwrap() - bv[k]).abs();
            let e = ex.max(ev);
            ensure(e <= bound, || format!("seed {seed}: error {e:e} at t = {t} exceeds {bound:e}"))?;
            worst_ratio = worst_ratio.max(e / bound);
        }
    }
    Ok(format!("{inputs} inputs, worst error {worst_ratio:.3} of bound"))
}

fn ac9_blocking() -> Check {
    let net = recirculating_loop();
    let limits = StorageLimits(vec![1.0]);
    let horizon = 100.0 * net.period();
    let full = NetworkState::with_queues(&net, vec![1.0]);
    let empty = NetworkState::zero(&net);
    for mode in [BlockingMode::RateCapped, BlockingMode::StrictGateDiscrete { step: 1e-3 }] {
        let jam = simulate_blocking(&net, &limits, &full, horizon, mode).map_err(|e| e.to_string())?;
        let idle = simulate_blocking(&net, &limits, &empty, horizon, mode).map_err(|e| e.to_string())?;
        let times = common::union_times(&jam.trajectory, &idle.trajectory);
        for w in times.windows(2) {
            let (t, mid) = (w[0], 0.5 * (w[0] + w[1]));
            close("gridlock x", jam.stored_at(0, t), 1.0, TOL)?;
            close("gridlock b", jam.trajectory.departure_rate_at(0, mid), 0.0, TOL)?;
            close("empty x", idle.stored_at(0, t), 0.0, TOL)?;
            let d = state_distance(&jam.trajectory.state_at(t), &idle.trajectory.state_at(t))
                .map_err(|e| e.to_string())?;
            ensure(d > TOL, || format!("{mode:?}: initial conditions coupled at t = {t}"))?;
        }
        ensure(detect_gridlock(&jam, 0.0, horizon) == GridlockStatus::Gridlocked(vec![0]), || {
            format!("{mode:?}: gridlock not detected")
        })?;
    }

    for seed in 0..20 {
        let mut rng = common::rng(9000 + seed);
        let net = common::random_stable_network(&mut rng, NetworkShape { max_queues: 5, acyclic: false });
        let init = common::random_state(&mut rng, &net, 8);
        let plain = simulate(&net, &init, 10.0).map_err(|e| e.to_string())?;
        let gated = simulate_blocking(&net, &StorageLimits::unlimited(net.n()), &init, 10.0, BlockingMode::RateCapped)
            .map_err(|e| e.to_string())?;
        ensure(gated.trajectory == plain, || format!("seed {seed}: unlimited storage changed the trajectory"))?;
    }
    Ok("gridlock and empty states persist 100 periods; unlimited storage is exact".into())
}

fn ac10_fluid_discrete() -> Check {
    let signal = isolated_signal();
    let tandem_loop = recirculating_loop();
    let cases = [
        ("signal", signal.clone(), NetworkState::with_queues(&signal, vec![0.5])),
        ("loop", tandem_loop.clone(), NetworkState::with_queues(&tandem_loop, vec![0.4])),
    ];
    let mut summary = Vec::new();
    for (label, net, init) in cases {
        let rows = compare_fluid_discrete(&net, &init, 10.0, &[10, 100, 1000], 1e-3).map_err(|e| e.to_string())?;
        let errs: Vec<f64> = rows.iter().map(|r| r.sup_error).collect();
        ensure(errs.windows(2).all(|w| w[1] < w[0]), || format!("{label}: errors not decreasing {errs:?}"))?;
        ensure(errs[2] <= 0.01, || format!("{label}: N=1000 error {}", errs[2]))?;
        let shown: Vec<String> = errs.iter().map(|e| format!("{e:.1e}")).collect();
        summary.push(format!("{label} [{}]", shown.join(", ")));
    }
    Ok(summary.join("; "))
}

fn main() -> ExitCode {
    let suite = Instant::now();
    let criteria: [Criterion; 10] = [
        ("AC1 isolated signal reproduction", ac1_signal_reproduction),
        ("AC2 orbit from the empty state", ac2_orbit_from_zero),
        ("AC3 recirculation decays geometrically", ac3_geometric_decay),
        ("AC4 delays and offsets", ac4_delays),
        ("AC5 monotonicity", ac5_monotonicity),
        ("AC6 complementarity and conservation", ac6_complementarity_conservation),
        ("AC7 uniqueness of the periodic orbit", ac7_uniqueness),
        ("AC8 reflection matches brute force", ac8_reflection_oracle),
        ("AC9 blocking and gridlock", ac9_blocking),
        ("AC10 fluid-discrete convergence", ac10_fluid_discrete),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let t = Instant::now();
        match check() {
            Ok(detail) => println!("PASS {name}: {detail} ({:.2?})", t.elapsed()),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail} ({:.2?})", t.elapsed());
            }
        }
    }
    let total = suite.elapsed();
    println!("acceptance suite finished in {total:.2?}");
    if total > Duration::from_secs(300) {
        println!("FAIL suite runtime exceeds 5 minutes");
        failed += 1;
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
