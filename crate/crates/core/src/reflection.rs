//! One-dimensional reflection at zero for piecewise-linear net-input paths.
//!
//! For a continuous `u` with `u(0) >= 0` the regulator
//! `v(t) = sup_{s <= t} max(-u(s), 0)` is the smallest nondecreasing process
//! that keeps `x = u + v` nonnegative, and it only grows while `x = 0`.
//! With piecewise-linear input both outputs are piecewise linear and the
//! extra breakpoints (where `x` first touches zero inside a segment) have a
//! closed form.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::TOL;

#[derive(Debug, Error, PartialEq)]
pub enum ReflectionError {
    #[error("path needs at least one breakpoint")]
    Empty,
    #[error("breakpoint times must be finite and strictly increasing (at index {0})")]
    NotIncreasing(usize),
    #[error("non-finite path value at index {0}")]
    NonFinite(usize),
    #[error("initial value {0} is negative")]
    NegativeInitialCondition(f64),
    #[error("paths are defined on different domains")]
    DomainMismatch,
}

/// Continuous path given by its values at breakpoints, linear in between.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseLinearPath {
    points: Vec<(f64, f64)>,
}

impl PiecewiseLinearPath {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self, ReflectionError> {
        if points.is_empty() {
            return Err(ReflectionError::Empty);
        }
        for (k, &(t, v)) in points.iter().enumerate() {
            if !t.is_finite() || (k > 0 && t <= points[k - 1].0) {
                return Err(ReflectionError::NotIncreasing(k));
            }
            if !v.is_finite() {
                return Err(ReflectionError::NonFinite(k));
            }
        }
        Ok(Self { points })
    }

    /// Path that starts at `x0` and integrates the piecewise-constant
    /// `slopes` given as `(start, slope)` pairs up to `horizon`.
    pub fn from_slopes(x0: f64, slopes: &[(f64, f64)], horizon: f64) -> Result<Self, ReflectionError> {
        let mut points = Vec::with_capacity(slopes.len() + 1);
        let mut value = x0;
        for (k, &(start, slope)) in slopes.iter().enumerate() {
            if start >= horizon {
                break;
            }
            let end = slopes.get(k + 1).map_or(horizon, |s| s.0).min(horizon);
            if points.is_empty() {
                points.push((start, value));
            }
            value += slope * (end - start);
            points.push((end, value));
        }
        Self::new(points)
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn start(&self) -> f64 {
        self.points[0].0
    }

    pub fn end(&self) -> f64 {
        self.points[self.points.len() - 1].0
    }

    /// Linear interpolation; `None` outside the domain (beyond [`TOL`]).
    pub fn value_at(&self, t: f64) -> Option<f64> {
        if t < self.start() - TOL || t > self.end() + TOL {
            return None;
        }
        let k = self.points.partition_point(|p| p.0 <= t);
        if k == 0 {
            return Some(self.points[0].1);
        }
        if k == self.points.len() {
            return Some(self.points[k - 1].1);
        }
        let (t0, v0) = self.points[k - 1];
        let (t1, v1) = self.points[k];
        Some(v0 + (v1 - v0) * (t - t0) / (t1 - t0))
    }
}

/// Queue path `x` and cumulative regulator `v` produced by [`skorokhod`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectionResult {
    pub x: PiecewiseLinearPath,
    pub v: PiecewiseLinearPath,
}

pub fn skorokhod(u: &PiecewiseLinearPath) -> Result<ReflectionResult, ReflectionError> {
    let pts = u.points();
    let (t0, u0) = pts[0];
    if u0 < 0.0 {
        return Err(ReflectionError::NegativeInitialCondition(u0));
    }
    let mut xs = vec![(t0, u0)];
    let mut vs = vec![(t0, 0.0)];
    let mut v = 0.0_f64;
    for w in pts.windows(2) {
        let (ta, ua) = w[0];
        let (tb, ub) = w[1];
        let xa = ua + v;
        let drop = ub - ua;
        if xa + drop < 0.0 {
            // x reaches zero inside the segment and v takes over from there.
            let slope = drop / (tb - ta);
            let hit = ta + xa / -slope;
            if hit > ta && hit < tb {
                xs.push((hit, 0.0));
                vs.push((hit, v));
            }
            v = -ub;
            xs.push((tb, 0.0));
        } else {
            xs.push((tb, xa + drop));
        }
        vs.push((tb, v));
    }
    Ok(ReflectionResult {
        x: PiecewiseLinearPath { points: xs },
        v: PiecewiseLinearPath { points: vs },
    })
}

/// Exact sup-norm distance between two paths on the same domain; the
/// difference is piecewise linear, so the maximum sits on a merged breakpoint.
pub fn sup_distance(p: &PiecewiseLinearPath, q: &PiecewiseLinearPath) -> Result<f64, ReflectionError> {
    if (p.start() - q.start()).abs() > TOL || (p.end() - q.end()).abs() > TOL {
        return Err(ReflectionError::DomainMismatch);
    }
    let mut best = 0.0_f64;
    for &(t, _) in p.points().iter().chain(q.points()) {
        let a = p.value_at(t).unwrap_or(0.0);
        let b = q.value_at(t).unwrap_or(0.0);
        best = best.max((a - b).abs());
    }
    Ok(best)
}
