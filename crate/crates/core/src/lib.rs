//! Fluid queueing networks of signalized intersections under fixed-time
//! control.
//!
//! Vehicles enter queues in periodic streams, are served at periodic
//! saturation rates, travel links with fixed delays and are routed in fixed
//! proportions. The crate simulates such networks exactly (all rates are
//! piecewise constant), checks the mean-rate stability condition, finds the
//! unique periodic orbit by iterating the one-period map from the empty
//! state, and computes delay and wasted-green metrics on it.

pub mod blocking;
pub mod catalog;
pub mod config;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod orbit;
pub mod reflection;
pub mod simulator;

/// Default comparison tolerance for queue values and reported times.
pub const TOL: f64 = 1e-9;

/// Relative window within which two clock times denote the same instant.
/// Much tighter than [`TOL`]: treating distinct instants as one shifts
/// `rate * window` vehicles, which would accumulate over long runs.
const TIME_EPS: f64 = 1e-12;

pub(crate) fn same_instant(t: f64) -> f64 {
    TIME_EPS * t.abs().max(1.0)
}
