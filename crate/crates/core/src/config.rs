//! JSON network configuration.
//!
//! ```json
//! {
//!   "period": 1,
//!   "queues": [
//!     {"id": "a", "entry_profile": [[0, 1]], "service_profile": [[0, 3], ["1/2", 0]]},
//!     {"id": "b", "entry_profile": [[0, 0]], "service_profile": [[0, 1]]}
//!   ],
//!   "links": [{"from": "a", "to": "b", "ratio": "1/2", "delay": 1}],
//!   "initial": {"a": 0.5},
//!   "storage": {"b": 2},
//!   "oracle": {"granularity": [10, 100, 1000], "step": 0.001}
//! }
//! ```
//!
//! Numbers may be JSON numbers or strings holding a decimal, a fraction
//! `p/q`, or `inf` (storage only). `initial`, `storage` and `oracle` are
//! optional: queues start empty, storage is unlimited.

use std::collections::BTreeMap;
use std::fmt;

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::blocking::StorageLimits;
use crate::model::{Link, Network, QueueSpec, RateProfile};
use crate::simulator::NetworkState;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unknown queue id {0:?}")]
    UnknownQueue(String),
    #[error("duplicate queue id {0:?}")]
    DuplicateQueue(String),
    #[error("invalid value for {field}: {value}")]
    BadValue { field: String, value: f64 },
}

/// A number written as a JSON number or as a `"p/q"` / decimal string.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Num(pub f64);

impl Serialize for Num {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            s.serialize_f64(self.0)
        } else if self.0 > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str(&self.0.to_string())
        }
    }
}

fn parse_number(text: &str) -> Option<f64> {
    let text = text.trim();
    if let Some((p, q)) = text.split_once('/') {
        let p: f64 = p.trim().parse().ok()?;
        let q: f64 = q.trim().parse().ok()?;
        return (q != 0.0).then(|| p / q);
    }
    match text {
        "inf" | "infinity" | "+inf" => Some(f64::INFINITY),
        _ => text.parse().ok(),
    }
}

impl<'de> Deserialize<'de> for Num {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct NumVisitor;
        impl Visitor<'_> for NumVisitor {
            type Value = Num;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a number or a string like \"3/4\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Num, E> {
                Ok(Num(v))
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Num, E> {
                Ok(Num(v as f64))
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Num, E> {
                Ok(Num(v as f64))
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<Num, E> {
                parse_number(v)
                    .map(Num)
                    .ok_or_else(|| E::custom(format!("not a number: {v:?}")))
            }
        }
        d.deserialize_any(NumVisitor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueueConfig {
    pub id: String,
    pub entry_profile: Vec<(Num, Num)>,
    pub service_profile: Vec<(Num, Num)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkConfig {
    pub from: String,
    pub to: String,
    pub ratio: Num,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delay: Option<Num>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    pub granularity: Vec<u64>,
    pub step: Num,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub period: Num,
    pub queues: Vec<QueueConfig>,
    #[serde(default)]
    pub links: Vec<LinkConfig>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub initial: BTreeMap<String, Num>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub storage: BTreeMap<String, Num>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleConfig>,
}

/// Everything a command needs from a config file.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub network: Network,
    pub initial: NetworkState,
    pub storage: StorageLimits,
    pub oracle: Option<OracleConfig>,
}

fn pieces(p: &[(Num, Num)]) -> Vec<(f64, f64)> {
    p.iter().map(|(s, r)| (s.0, r.0)).collect()
}

fn num_pieces(p: &[(f64, f64)]) -> Vec<(Num, Num)> {
    p.iter().map(|&(s, r)| (Num(s), Num(r))).collect()
}

impl NetworkConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    fn index(&self) -> Result<BTreeMap<&str, usize>, ConfigError> {
        let mut index = BTreeMap::new();
        for (i, q) in self.queues.iter().enumerate() {
            if index.insert(q.id.as_str(), i).is_some() {
                return Err(ConfigError::DuplicateQueue(q.id.clone()));
            }
        }
        Ok(index)
    }

    /// Builds the network without validating it (see [`crate::model::validate`]).
    pub fn network(&self) -> Result<Network, ConfigError> {
        let index = self.index()?;
        let lookup = |id: &str| {
            index
                .get(id)
                .copied()
                .ok_or_else(|| ConfigError::UnknownQueue(id.to_string()))
        };
        let period = self.period.0;
        let queues = self
            .queues
            .iter()
            .map(|q| QueueSpec {
                id: q.id.clone(),
                entry: RateProfile::new(period, pieces(&q.entry_profile)),
                service: RateProfile::new(period, pieces(&q.service_profile)),
            })
            .collect();
        let links = self
            .links
            .iter()
            .map(|l| {
                Ok(Link {
                    from: lookup(&l.from)?,
                    to: lookup(&l.to)?,
                    ratio: l.ratio.0,
                    delay: l.delay.map(|d| d.0),
                })
            })
            .collect::<Result<_, ConfigError>>()?;
        Ok(Network::new(period, queues, links))
    }

    pub fn scenario(&self) -> Result<Scenario, ConfigError> {
        let network = self.network()?;
        let index = self.index()?;
        let mut queue = vec![0.0; network.n()];
        for (id, x) in &self.initial {
            let i = *index.get(id.as_str()).ok_or_else(|| ConfigError::UnknownQueue(id.clone()))?;
            if !(x.0 >= 0.0 && x.0.is_finite()) {
                return Err(ConfigError::BadValue { field: format!("initial.{id}"), value: x.0 });
            }
            queue[i] = x.0;
        }
        let mut storage = StorageLimits::unlimited(network.n());
        for (id, xi) in &self.storage {
            let i = *index.get(id.as_str()).ok_or_else(|| ConfigError::UnknownQueue(id.clone()))?;
            if xi.0.is_nan() || xi.0 <= 0.0 {
                return Err(ConfigError::BadValue { field: format!("storage.{id}"), value: xi.0 });
            }
            storage.0[i] = xi.0;
        }
        Ok(Scenario {
            initial: NetworkState::with_queues(&network, queue),
            network,
            storage,
            oracle: self.oracle.clone(),
        })
    }

    /// Config describing `network` (no optional sections).
    pub fn from_network(network: &Network) -> Self {
        let id = |i: usize| network.queue(i).id.clone();
        Self {
            period: Num(network.period()),
            queues: network
                .queues()
                .iter()
                .map(|q| QueueConfig {
                    id: q.id.clone(),
                    entry_profile: num_pieces(q.entry.pieces()),
                    service_profile: num_pieces(q.service.pieces()),
                })
                .collect(),
            links: network
                .links()
                .iter()
                .map(|l| LinkConfig {
                    from: id(l.from),
                    to: id(l.to),
                    ratio: Num(l.ratio),
                    delay: l.delay.map(Num),
                })
                .collect(),
            initial: BTreeMap::new(),
            storage: BTreeMap::new(),
            oracle: None,
        }
    }
}
