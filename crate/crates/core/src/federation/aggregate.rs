use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::ParamSet;
use crate::pruning::SparsityMask;

/// How positions kept by only some clients are combined.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationMode {
    /// Mean over the clients that keep the position.
    #[default]
    PerPosition,
    /// Mean only where every contributing client keeps the position;
    /// elsewhere the previous global value stays.
    StrictIntersection,
}

/// One client's contribution to aggregation.
#[derive(Debug, Clone, Copy)]
pub struct Contribution<'a> {
    pub client: usize,
    pub params: &'a ParamSet,
    pub mask: &'a SparsityMask,
}

fn sorted<'a>(items: &[Contribution<'a>]) -> Result<Vec<Contribution<'a>>> {
    if items.is_empty() {
        return Err(Error::Empty("client results"));
    }
    let mut v = items.to_vec();
    v.sort_by_key(|c| c.client);
    Ok(v)
}

/// Masked averaging: each position becomes the mean over the clients whose
/// mask keeps it, summed in ascending client order. Positions nobody keeps
/// retain `previous`. Running BN statistics follow the owning channel's bit.
pub fn aggregate_sub_fedavg(
    results: &[Contribution<'_>],
    previous: &ParamSet,
    mode: AggregationMode,
) -> Result<ParamSet> {
    let results = sorted(results)?;
    for r in &results {
        previous.check_congruent(r.params)?;
        r.mask.check_params(previous)?;
    }
    let mut out = previous.clone();
    for (e, entry) in out.entries_mut().iter_mut().enumerate() {
        let data = entry.tensor.data_mut();
        for (q, slot) in data.iter_mut().enumerate() {
            let mut sum = 0.0f64;
            let mut keepers = 0usize;
            for r in &results {
                if r.mask.bits(e)[q] {
                    sum += r.params.entries()[e].tensor.data()[q] as f64;
                    keepers += 1;
                }
            }
            let take = match mode {
                AggregationMode::PerPosition => keepers > 0,
                AggregationMode::StrictIntersection => keepers == results.len(),
            };
            if take {
                *slot = (sum / keepers as f64) as f32;
            }
        }
    }
    Ok(out)
}

/// Uniform mean of every position over all results, ascending client order.
pub fn aggregate_fedavg(results: &[(usize, &ParamSet)]) -> Result<ParamSet> {
    if results.is_empty() {
        return Err(Error::Empty("client results"));
    }
    let mut v = results.to_vec();
    v.sort_by_key(|(c, _)| *c);
    let first = v[0].1;
    for (_, p) in &v {
        first.check_congruent(p)?;
    }
    let mut out = first.clone();
    let n = v.len() as f64;
    for (e, entry) in out.entries_mut().iter_mut().enumerate() {
        for (q, slot) in entry.tensor.data_mut().iter_mut().enumerate() {
            let sum: f64 = v.iter().map(|(_, p)| p.entries()[e].tensor.data()[q] as f64).sum();
            *slot = (sum / n) as f32;
        }
    }
    Ok(out)
}
