use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::dataset::Dataset;
use crate::error::{Error, Result};
use crate::rng::{stream, TAG_PARTITION, TAG_VALIDATION};

/// Non-IID label-shard assignment of training examples to clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub shard_size: usize,
    pub shards_per_client: usize,
    /// Shard ids dealt to each client, in dealing order.
    pub shards: BTreeMap<usize, Vec<usize>>,
    /// Training example indices per client.
    pub assignment: BTreeMap<usize, Vec<usize>>,
    /// Test indices whose label occurs in the client's training labels.
    pub eval_assignment: BTreeMap<usize, Vec<usize>>,
}

impl Partition {
    pub fn client_count(&self) -> usize {
        self.assignment.len()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            context: "serialising partition".into(),
            source,
        })
    }
}

/// Sorts the training set by label, cuts it into contiguous shards of
/// `shard_size`, shuffles the shard ids with `seed` and deals
/// `shards_per_client` to each client in turn.
pub fn partition_shards(
    train: &Dataset,
    test: &Dataset,
    clients: usize,
    shards_per_client: usize,
    shard_size: usize,
    seed: u64,
) -> Result<Partition> {
    let required = clients
        .checked_mul(shards_per_client)
        .and_then(|s| s.checked_mul(shard_size))
        .ok_or(Error::Overflow("partition size"))?;
    if clients == 0 || shard_size == 0 || shards_per_client == 0 || required > train.len() {
        return Err(Error::InsufficientData {
            required,
            available: train.len(),
        });
    }
    let sorted: Vec<usize> = train.by_class().iter().flatten().copied().collect();
    let total_shards = sorted.len() / shard_size;
    let mut ids: Vec<usize> = (0..total_shards).collect();
    ids.shuffle(&mut stream(seed, &[TAG_PARTITION]));

    let mut shards = BTreeMap::new();
    let mut assignment = BTreeMap::new();
    let mut eval_assignment = BTreeMap::new();
    for k in 0..clients {
        let mine = ids[k * shards_per_client..(k + 1) * shards_per_client].to_vec();
        let idx: Vec<usize> = mine
            .iter()
            .flat_map(|&s| sorted[s * shard_size..(s + 1) * shard_size].iter().copied())
            .collect();
        let labels = train.label_set(&idx);
        let eval: Vec<usize> = (0..test.len())
            .filter(|&i| labels.binary_search(&test.label(i)).is_ok())
            .collect();
        shards.insert(k, mine);
        assignment.insert(k, idx);
        eval_assignment.insert(k, eval);
    }
    Ok(Partition {
        shard_size,
        shards_per_client,
        shards,
        assignment,
        eval_assignment,
    })
}

/// Holds out `fraction` of a client's training indices for validation.
/// Returns `(train, validation)`. A positive fraction always holds out at
/// least one example when the client has two or more.
pub fn split_validation(indices: &[usize], fraction: f64, seed: u64, client: usize) -> (Vec<usize>, Vec<usize>) {
    let mut shuffled = indices.to_vec();
    shuffled.shuffle(&mut stream(seed, &[TAG_VALIDATION, client as u64]));
    let mut n_val = (indices.len() as f64 * fraction).round() as usize;
    if fraction <= 0.0 || indices.len() < 2 {
        n_val = 0;
    } else {
        n_val = n_val.clamp(1, indices.len() - 1);
    }
    let val = shuffled.split_off(shuffled.len() - n_val);
    (shuffled, val)
}
