use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::uplink_bits;
use crate::nn::optim::OptimizerState;
use crate::nn::params::ParamSet;
use crate::nn::spec::ModelSpec;
use crate::nn::train::{evaluate, train_epoch};
use crate::pruning::{
    apply_mask, apply_mask_in_place, derive_channel_mask, derive_unstructured_mask, mask_distance, should_prune,
    Coverage, PruneKind, PruneSchedule, SparsityMask,
};
use crate::rng::{stream, TAG_SHUFFLE};

/// Which masks a client derives during local training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LocalPruning {
    None,
    /// Magnitude masks over every conv and dense weight and bias.
    Unstructured,
    /// Channel masks from BN scales plus magnitude masks on dense layers.
    Hybrid,
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    /// Test-set indices this client is scored on.
    pub eval: Vec<usize>,
    pub params: ParamSet,
    pub mask: SparsityMask,
    pub schedule: PruneSchedule,
    pub optimizer: OptimizerState,
    /// Validation accuracy after each local update.
    pub history: Vec<f64>,
}

/// What one local update produced.
#[derive(Debug, Clone)]
pub struct ClientUpdateResult {
    pub client: usize,
    pub params: ParamSet,
    pub mask: SparsityMask,
    pub validation_accuracy: f64,
    pub loss: f32,
    /// Distance between first- and last-epoch masks, when derived.
    pub delta_unstructured: Option<f64>,
    pub delta_structured: Option<f64>,
    pub pruned_unstructured: bool,
    pub pruned_structured: bool,
    pub mask_changed: bool,
    pub uplink_bits: u64,
}

/// Per-round inputs shared by every client.
#[derive(Debug, Clone, Copy)]
pub struct LocalTraining<'a> {
    pub spec: &'a ModelSpec,
    pub data: &'a Dataset,
    pub epochs: usize,
    pub batch_size: usize,
    pub round: usize,
    pub seed: u64,
}

struct Kinds {
    unstructured: Option<Coverage>,
    structured: bool,
}

fn kinds(pruning: LocalPruning, schedule: &PruneSchedule) -> Kinds {
    let open = |k| schedule.current(k) < schedule.target(k);
    match pruning {
        LocalPruning::None => Kinds {
            unstructured: None,
            structured: false,
        },
        LocalPruning::Unstructured => Kinds {
            unstructured: open(PruneKind::Unstructured).then_some(Coverage::ConvAndDense),
            structured: false,
        },
        LocalPruning::Hybrid => Kinds {
            unstructured: open(PruneKind::Unstructured).then_some(Coverage::DenseOnly),
            structured: open(PruneKind::Structured),
        },
    }
}

type DerivedMasks = (Option<SparsityMask>, Option<SparsityMask>);

fn derive(params: &ParamSet, schedule: &PruneSchedule, k: &Kinds) -> Result<DerivedMasks> {
    let us = match k.unstructured {
        Some(cov) => Some(derive_unstructured_mask(
            params,
            schedule.next_level(PruneKind::Unstructured),
            cov,
        )?),
        None => None,
    };
    let s = if k.structured {
        Some(derive_channel_mask(params, schedule.next_level(PruneKind::Structured))?)
    } else {
        None
    };
    Ok((us, s))
}

/// Local update shared by every algorithm.
///
/// The client starts from `start` restricted to its own mask (or from its own
/// parameters when `start` is `None`), trains `epochs` epochs with a fresh
/// optimizer, and when pruning derives masks after the first and last epoch
/// at the next scheduled level. Each kind whose gate opens narrows the
/// client mask by its last-epoch mask and advances its schedule.
pub fn client_update(
    client: &mut ClientState,
    start: Option<&ParamSet>,
    env: &LocalTraining<'_>,
    pruning: LocalPruning,
) -> Result<ClientUpdateResult> {
    if let Some(g) = start {
        client.params = apply_mask(g, &client.mask)?;
    }
    client.optimizer.reset();
    let k = kinds(pruning, &client.schedule);
    let prunes = k.unstructured.is_some() || k.structured;
    if env.epochs == 0 || (prunes && env.epochs < 2) {
        return Err(Error::config(
            "epochs",
            "local training needs at least two epochs when pruning, one otherwise",
        ));
    }
    let mut rng = stream(env.seed, &[TAG_SHUFFLE, env.round as u64, client.id as u64]);
    let mut first = (None, None);
    let mut loss = 0.0;
    for epoch in 0..env.epochs {
        loss = train_epoch(
            env.spec,
            &mut client.params,
            &mut client.optimizer,
            Some(&client.mask),
            env.data,
            &client.train,
            env.batch_size,
            &mut rng,
        )?
        .ok_or(Error::Diverged {
            client: client.id,
            round: env.round,
        })?;
        if epoch == 0 && prunes {
            first = derive(&client.params, &client.schedule, &k)?;
        }
    }
    let last = if prunes {
        derive(&client.params, &client.schedule, &k)?
    } else {
        (None, None)
    };
    let accuracy = evaluate(env.spec, &client.params, env.data, &client.validation)?;
    client.history.push(accuracy);

    let distance = |a: &Option<SparsityMask>, b: &Option<SparsityMask>| -> Result<Option<f64>> {
        match (a, b) {
            (Some(a), Some(b)) => mask_distance(a, b).map(Some),
            _ => Ok(None),
        }
    };
    let delta_us = distance(&first.0, &last.0)?;
    let delta_s = distance(&first.1, &last.1)?;
    let gate = |delta: Option<f64>, kind| delta.is_some_and(|d| should_prune(accuracy, &client.schedule, d, kind));
    let fire_us = gate(delta_us, PruneKind::Unstructured);
    let fire_s = gate(delta_s, PruneKind::Structured);

    let mut mask = client.mask.clone();
    let mut schedule = client.schedule.clone();
    if fire_s {
        mask = mask.intersect(last.1.as_ref().expect("derived with its delta"))?;
        schedule = schedule.advance(PruneKind::Structured);
    }
    if fire_us {
        mask = mask.intersect(last.0.as_ref().expect("derived with its delta"))?;
        schedule = schedule.advance(PruneKind::Unstructured);
    }
    let mask_changed = mask != client.mask;
    if mask_changed {
        apply_mask_in_place(&mut client.params, &mask)?;
    }
    client.mask = mask;
    client.schedule = schedule;

    Ok(ClientUpdateResult {
        client: client.id,
        params: client.params.clone(),
        mask: client.mask.clone(),
        validation_accuracy: accuracy,
        loss,
        delta_unstructured: delta_us,
        delta_structured: delta_s,
        pruned_unstructured: fire_us,
        pruned_structured: fire_s,
        mask_changed,
        uplink_bits: uplink_bits(client.mask.retained_learnable(), client.mask.payload_bits(), mask_changed),
    })
}

/// Local update with magnitude pruning over conv and dense weights.
pub fn client_update_unstructured(
    client: &mut ClientState,
    global: &ParamSet,
    env: &LocalTraining<'_>,
) -> Result<ClientUpdateResult> {
    client_update(client, Some(global), env, LocalPruning::Unstructured)
}

/// Local update with channel pruning on conv layers and magnitude pruning on
/// dense layers, each gated independently.
pub fn client_update_hybrid(
    client: &mut ClientState,
    global: &ParamSet,
    env: &LocalTraining<'_>,
) -> Result<ClientUpdateResult> {
    client_update(client, Some(global), env, LocalPruning::Hybrid)
}
