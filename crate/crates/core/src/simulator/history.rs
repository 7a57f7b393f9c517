use serde::{Deserialize, Serialize};

use crate::same_instant;

/// Right-continuous piecewise-constant function on `[start, end]`.
///
/// `knots` holds `(time, rate)` pairs; the rate applies from its knot to the
/// next one (the last rate runs to `end`). The first knot sits at `start`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFunction {
    start: f64,
    end: f64,
    knots: Vec<(f64, f64)>,
}

impl StepFunction {
    /// Builds a step function from knots; the first knot is moved to `start`.
    ///
    /// # Panics
    /// If `knots` is empty.
    pub fn new(start: f64, end: f64, mut knots: Vec<(f64, f64)>) -> Self {
        assert!(!knots.is_empty(), "step function needs at least one knot");
        knots.retain(|k| k.0 < end || k.0 <= start);
        knots[0].0 = start;
        Self { start, end, knots }
    }

    pub fn constant(start: f64, end: f64, rate: f64) -> Self {
        Self::new(start, end, vec![(start, rate)])
    }

    pub fn zero(start: f64, end: f64) -> Self {
        Self::constant(start, end, 0.0)
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }

    pub fn last_rate(&self) -> f64 {
        self.knots[self.knots.len() - 1].1
    }

    fn index_at(&self, t: f64) -> usize {
        let eps = same_instant(t);
        self.knots.partition_point(|k| k.0 <= t + eps).max(1) - 1
    }

    /// Right-continuous rate at `t`.
    pub fn rate_at(&self, t: f64) -> f64 {
        self.knots[self.index_at(t)].1
    }

    /// Time of the first knot strictly after `t`.
    pub fn next_knot_after(&self, t: f64) -> Option<f64> {
        let eps = same_instant(t);
        let k = self.knots.partition_point(|k| k.0 <= t + eps);
        self.knots.get(k).map(|k| k.0)
    }

    /// Appends a rate change at `t >= end`; a change at the same instant as
    /// the last knot overwrites it; returns whether the stored
    /// function changed.
    pub fn push(&mut self, t: f64, rate: f64) -> bool {
        let last = self.knots.len() - 1;
        if self.knots[last].1 == rate {
            self.end = self.end.max(t);
            return false;
        }
        let eps = same_instant(t);
        if t - self.knots[last].0 <= eps && last > 0 {
            self.knots[last].1 = rate;
            if self.knots[last - 1].1 == rate {
                self.knots.pop();
            }
        } else if t - self.knots[last].0 <= eps {
            self.knots[last].1 = rate;
        } else {
            self.knots.push((t, rate));
        }
        self.end = self.end.max(t);
        true
    }

    pub fn extend_to(&mut self, end: f64) {
        self.end = self.end.max(end);
    }

    /// Exact integral over `[a, b]` intersected with the domain.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        let a = a.max(self.start);
        let b = b.min(self.end);
        if b <= a {
            return 0.0;
        }
        let first = self.knots.partition_point(|k| k.0 <= a).max(1) - 1;
        let mut acc = 0.0;
        for k in first..self.knots.len() {
            let lo = self.knots[k].0.max(a);
            let hi = self.knots.get(k + 1).map_or(self.end, |n| n.0).min(b);
            if hi > lo {
                acc += self.knots[k].1 * (hi - lo);
            }
            if hi >= b {
                break;
            }
        }
        acc
    }

    /// Restriction to `[from, to]`.
    pub fn window(&self, from: f64, to: f64) -> Self {
        let first = self.knots.partition_point(|k| k.0 <= from).max(1) - 1;
        let mut knots = vec![(from, self.knots[first].1)];
        knots.extend(
            self.knots[first + 1..]
                .iter()
                .filter(|k| k.0 > from && k.0 < to)
                .copied(),
        );
        Self {
            start: from,
            end: to,
            knots,
        }
    }

    pub fn shifted(&self, dt: f64) -> Self {
        Self {
            start: self.start + dt,
            end: self.end + dt,
            knots: self.knots.iter().map(|&(t, r)| (t + dt, r)).collect(),
        }
    }

    pub fn max_rate(&self) -> f64 {
        self.knots.iter().map(|k| k.1).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_rate(&self) -> f64 {
        self.knots.iter().map(|k| k.1).fold(f64::INFINITY, f64::min)
    }
}
