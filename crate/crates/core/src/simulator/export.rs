use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{Event, Trajectory};

/// Per-event snapshot: queue lengths and cumulative unused service at the
/// event time, plus the departure and unused rates that start there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub t: f64,
    pub events: Vec<Event>,
    pub x: Vec<f64>,
    pub b: Vec<f64>,
    pub y: Vec<f64>,
    pub v: Vec<f64>,
}

impl Trajectory {
    pub fn event_records(&self) -> Vec<EventRecord> {
        let mut out = Vec::with_capacity(self.times.len());
        let mut cursor = 0;
        for (k, &t) in self.times.iter().enumerate() {
            let mut events = Vec::new();
            while cursor < self.events.len() && self.events[cursor].time <= t {
                events.push(self.events[cursor]);
                cursor += 1;
            }
            let rates = k.min(self.intervals().saturating_sub(1));
            out.push(EventRecord {
                t,
                events,
                x: self.queue[k].clone(),
                b: self.departure.get(rates).cloned().unwrap_or_default(),
                y: self.unused.get(rates).cloned().unwrap_or_default(),
                v: self.cumulative_unused[k].clone(),
            });
        }
        out
    }

    /// Uniform samples every `interval` as CSV with header `t,queue,x,b,y,v`;
    /// rows ordered by time, then queue.
    pub fn sample_csv(&self, interval: f64, labels: &[String]) -> String {
        let mut out = String::from("t,queue,x,b,y,v\n");
        let steps = ((self.end() - self.start()) / interval + 1e-9).floor() as usize;
        for s in 0..=steps {
            let t = self.start() + s as f64 * interval;
            let k = self.interval_index(t);
            for i in 0..self.n() {
                let label = labels.get(i).cloned().unwrap_or_else(|| i.to_string());
                let (b, y) = if self.intervals() == 0 {
                    (0.0, 0.0)
                } else {
                    (self.departure[k][i], self.unused[k][i])
                };
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    t,
                    label,
                    self.queue_at(i, t),
                    b,
                    y,
                    self.cumulative_unused_at(i, t)
                );
            }
        }
        out
    }
}
