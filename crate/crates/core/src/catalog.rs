//! Small reference networks with unit cycle length.

use crate::model::{Link, Network, QueueSpec, RateProfile};

/// One approach with constant arrivals at rate 1, served at 3 during the
/// first half of each cycle and blocked during the second half.
pub fn isolated_signal() -> Network {
    Network::new(
        1.0,
        vec![QueueSpec {
            id: "approach".into(),
            entry: RateProfile::constant(1.0, 1.0),
            service: RateProfile::new(1.0, vec![(0.0, 3.0), (0.5, 0.0)]),
        }],
        vec![],
    )
}

/// One queue without external arrivals, served at 1 during the first half
/// of the cycle; half of the departures come back after half a cycle.
pub fn recirculating_loop() -> Network {
    recirculating_loop_with_entry(0.0)
}

pub fn recirculating_loop_with_entry(entry: f64) -> Network {
    Network::new(
        1.0,
        vec![QueueSpec {
            id: "loop".into(),
            entry: RateProfile::constant(1.0, entry),
            service: RateProfile::new(1.0, vec![(0.0, 1.0), (0.5, 0.0)]),
        }],
        vec![Link {
            from: 0,
            to: 0,
            ratio: 0.5,
            delay: Some(0.5),
        }],
    )
}

/// [`isolated_signal`] feeding a second signal (rate 3, half-cycle green
/// starting at `green_start`) over a link of one full cycle.
pub fn signal_tandem(green_start: f64) -> Network {
    let first = isolated_signal().queues()[0].clone();
    Network::new(
        1.0,
        vec![
            first,
            QueueSpec {
                id: "downstream".into(),
                entry: RateProfile::constant(1.0, 0.0),
                service: RateProfile::green_window(1.0, green_start, 0.5, 3.0),
            },
        ],
        vec![Link {
            from: 0,
            to: 1,
            ratio: 1.0,
            delay: Some(1.0),
        }],
    )
}
