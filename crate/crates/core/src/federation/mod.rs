//! Round protocol: sampling, local updates with pruning, and aggregation.

mod aggregate;
mod client;
mod simulation;

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use serde::{Deserialize, Serialize};

pub use aggregate::{aggregate_fedavg, aggregate_sub_fedavg, AggregationMode, Contribution};
pub use client::{
    client_update, client_update_hybrid, client_update_unstructured, ClientState, ClientUpdateResult, LocalPruning,
    LocalTraining,
};
pub use simulation::{ClientRoundRecord, FedConfig, RoundReport, ServerState, Simulation};

use crate::error::{Error, Result};
use crate::rng::{stream, TAG_SAMPLE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "sub-fedavg-un")]
    SubFedAvgUn,
    #[serde(rename = "sub-fedavg-hy")]
    SubFedAvgHy,
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "standalone")]
    Standalone,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [
        Algorithm::SubFedAvgUn,
        Algorithm::SubFedAvgHy,
        Algorithm::FedAvg,
        Algorithm::Standalone,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::SubFedAvgUn => "sub-fedavg-un",
            Algorithm::SubFedAvgHy => "sub-fedavg-hy",
            Algorithm::FedAvg => "fedavg",
            Algorithm::Standalone => "standalone",
        }
    }

    pub fn local_pruning(self) -> LocalPruning {
        match self {
            Algorithm::SubFedAvgUn => LocalPruning::Unstructured,
            Algorithm::SubFedAvgHy => LocalPruning::Hybrid,
            Algorithm::FedAvg | Algorithm::Standalone => LocalPruning::None,
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::config("algorithm", format!("unknown algorithm {s:?}")))
    }
}

/// Number of clients drawn per round: `max(1, round(rate * n))`.
pub fn sample_size(n: usize, rate: f64) -> usize {
    ((rate * n as f64).round() as usize).clamp(1, n.max(1))
}

/// Uniform draw without replacement, sorted ascending; a pure function of
/// `(n, rate, seed, round)`.
pub fn sample_clients(n: usize, rate: f64, seed: u64, round: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::Empty("client registry"));
    }
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::config("sample_rate", format!("{rate} must lie in (0, 1]")));
    }
    let m = sample_size(n, rate);
    let mut rng = stream(seed, &[TAG_SAMPLE, round as u64]);
    let mut ids = index::sample(&mut rng, n, m).into_vec();
    ids.sort_unstable();
    Ok(ids)
}
