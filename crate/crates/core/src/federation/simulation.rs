use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{split_validation, DataSplit, Partition};
use crate::error::{Error, Result};
use crate::federation::aggregate::{aggregate_fedavg, aggregate_sub_fedavg, AggregationMode, Contribution};
use crate::federation::client::{client_update, ClientState, ClientUpdateResult, LocalTraining};
use crate::federation::{sample_clients, Algorithm};
use crate::metrics::{conv_flops_for_mask, downlink_bits, CostEntry, CostLedger};
use crate::nn::optim::OptimizerState;
use crate::nn::params::{init_params, ParamSet};
use crate::nn::spec::ModelSpec;
use crate::nn::train::evaluate;
use crate::pruning::{apply_mask, hybrid_dense_mask, Coverage, PruneSchedule, SparsityMask};
use crate::rng::{derive_seed, TAG_INIT};

/// Everything the round loop needs besides the model and data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub algorithm: Algorithm,
    pub clients: usize,
    pub sample_rate: f64,
    pub rounds: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    /// Starting schedule for every client.
    pub schedule: PruneSchedule,
    pub aggregation: AggregationMode,
    pub validation_fraction: f64,
    pub seed: u64,
    /// Worker threads for client updates; 0 uses every core.
    pub threads: usize,
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub global: ParamSet,
    /// Rounds completed so far.
    pub round: usize,
    pub clients: usize,
    pub sample_rate: f64,
    pub seed: u64,
}

impl ServerState {
    pub fn sample(&self) -> Result<Vec<usize>> {
        sample_clients(self.clients, self.sample_rate, self.seed, self.round)
    }
}

/// One client's line in a round report. Every client appears each round;
/// the update fields are empty for clients that were not sampled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundRecord {
    pub client: usize,
    pub selected: bool,
    /// Test accuracy on the client's evaluation set after aggregation.
    pub accuracy: f64,
    pub validation_accuracy: Option<f64>,
    pub loss: Option<f32>,
    pub delta_unstructured: Option<f64>,
    pub delta_structured: Option<f64>,
    pub pruned_unstructured: bool,
    pub pruned_structured: bool,
    pub sparsity: f64,
    pub sparsity_unstructured: f64,
    pub sparsity_structured: f64,
    pub level_unstructured: f64,
    pub level_structured: f64,
    pub zero_count: usize,
    pub uplink_bits: u64,
    pub downlink_bits: u64,
    /// Forward conv FLOPs spent in this round's local training.
    pub conv_flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    /// One-based round number.
    pub round: usize,
    pub algorithm: Algorithm,
    pub selected: Vec<usize>,
    pub clients: Vec<ClientRoundRecord>,
    pub mean_accuracy: f64,
    pub mean_sparsity_unstructured: f64,
    pub mean_sparsity_structured: f64,
    pub round_bits: u64,
    pub cumulative_bits: u64,
    pub round_conv_flops: u64,
    pub cumulative_conv_flops: u64,
}

impl RoundReport {
    pub fn cumulative_bytes(&self) -> f64 {
        self.cumulative_bits as f64 / 8.0
    }

    pub fn mean_sparsity(&self) -> f64 {
        mean(self.clients.iter().map(|c| c.sparsity))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// A configured experiment advanced one round at a time.
pub struct Simulation {
    spec: ModelSpec,
    data: Arc<DataSplit>,
    config: FedConfig,
    server: ServerState,
    clients: Vec<ClientState>,
    ledger: CostLedger,
    reports: Vec<RoundReport>,
    pool: rayon::ThreadPool,
}

impl Simulation {
    pub fn new(spec: ModelSpec, data: Arc<DataSplit>, partition: &Partition, config: FedConfig) -> Result<Self> {
        validate(&spec, &config)?;
        if partition.client_count() < config.clients {
            return Err(Error::config(
                "clients",
                format!("partition has {} clients, {} requested", partition.client_count(), config.clients),
            ));
        }
        if data.train.image_shape() != spec.input || data.train.classes() > spec.classes() {
            return Err(Error::config(
                "model",
                format!(
                    "{} takes {:?} inputs and {} classes, dataset has {:?} and {}",
                    spec.name,
                    spec.input,
                    spec.classes(),
                    data.train.image_shape(),
                    data.train.classes()
                ),
            ));
        }
        let theta0 = init_params(&spec, derive_seed(config.seed, &[TAG_INIT]))?;
        let optimizer = OptimizerState::new(config.learning_rate, config.momentum)?;
        let mask = match config.algorithm {
            Algorithm::SubFedAvgHy => hybrid_dense_mask(&theta0),
            _ => SparsityMask::dense(&theta0, Coverage::ConvAndDense),
        };
        let clients = (0..config.clients)
            .map(|k| {
                let (train, validation) =
                    split_validation(&partition.assignment[&k], config.validation_fraction, config.seed, k);
                ClientState {
                    id: k,
                    train,
                    validation,
                    eval: partition.eval_assignment[&k].clone(),
                    params: theta0.clone(),
                    mask: mask.clone(),
                    schedule: config.schedule.clone(),
                    optimizer: optimizer.clone(),
                    history: Vec::new(),
                }
            })
            .collect();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build()
            .map_err(|e| Error::config("threads", e.to_string()))?;
        Ok(Self {
            server: ServerState {
                global: theta0,
                round: 0,
                clients: config.clients,
                sample_rate: config.sample_rate,
                seed: config.seed,
            },
            spec,
            data,
            config,
            clients,
            ledger: CostLedger::new(),
            reports: Vec::new(),
            pool,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn config(&self) -> &FedConfig {
        &self.config
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn ledger(&self) -> &CostLedger {
        &self.ledger
    }

    pub fn reports(&self) -> &[RoundReport] {
        &self.reports
    }

    pub fn finished(&self) -> bool {
        self.server.round >= self.config.rounds
    }

    /// Runs every remaining round.
    pub fn run(&mut self) -> Result<&[RoundReport]> {
        while !self.finished() {
            self.step()?;
        }
        Ok(&self.reports)
    }

    /// One round: sample, train and prune locally, aggregate, evaluate.
    pub fn step(&mut self) -> Result<&RoundReport> {
        let round = self.server.round;
        let algorithm = self.config.algorithm;
        let federated = algorithm != Algorithm::Standalone;
        let selected = self.server.sample()?;
        let env = LocalTraining {
            spec: &self.spec,
            data: &self.data.train,
            epochs: self.config.epochs,
            batch_size: self.config.batch_size,
            round,
            seed: self.config.seed,
        };

        // cost and compute are charged against the mask the round starts with
        let mut start = vec![None; self.clients.len()];
        for &k in &selected {
            let c = &self.clients[k];
            let flops = conv_flops_for_mask(&self.spec, &c.mask)?.total;
            let examples = (self.config.epochs * c.train.len()) as u64;
            let down = if federated {
                downlink_bits(c.mask.retained_learnable())
            } else {
                0
            };
            start[k] = Some((flops.checked_mul(examples).ok_or(Error::Overflow("conv flops"))?, down));
        }

        let global = federated.then_some(&self.server.global);
        let pruning = algorithm.local_pruning();
        let results: Vec<ClientUpdateResult> = self.pool.install(|| {
            self.clients
                .par_iter_mut()
                .filter(|c| selected.binary_search(&c.id).is_ok())
                .map(|c| client_update(c, global, &env, pruning))
                .collect::<Result<Vec<_>>>()
        })?;

        match algorithm {
            Algorithm::Standalone => {}
            Algorithm::FedAvg => {
                let pairs: Vec<(usize, &ParamSet)> = results.iter().map(|r| (r.client, &r.params)).collect();
                self.server.global = aggregate_fedavg(&pairs)?;
            }
            Algorithm::SubFedAvgUn | Algorithm::SubFedAvgHy => {
                let contributions: Vec<Contribution> = results
                    .iter()
                    .map(|r| Contribution {
                        client: r.client,
                        params: &r.params,
                        mask: &r.mask,
                    })
                    .collect();
                self.server.global =
                    aggregate_sub_fedavg(&contributions, &self.server.global, self.config.aggregation)?;
            }
        }

        let spec = &self.spec;
        let test = &self.data.test;
        let global = &self.server.global;
        let accuracies: Vec<f64> = self.pool.install(|| {
            self.clients
                .par_iter()
                .map(|c| {
                    if federated {
                        evaluate(spec, &apply_mask(global, &c.mask)?, test, &c.eval)
                    } else {
                        evaluate(spec, &c.params, test, &c.eval)
                    }
                })
                .collect::<Result<Vec<_>>>()
        })?;

        let mut by_client: Vec<Option<&ClientUpdateResult>> = vec![None; self.clients.len()];
        for r in &results {
            by_client[r.client] = Some(r);
        }
        let mut records = Vec::with_capacity(self.clients.len());
        let mut round_bits = 0u64;
        let mut round_flops = 0u64;
        for (c, acc) in self.clients.iter().zip(accuracies) {
            let r = by_client[c.id];
            let (flops, down) = start[c.id].unwrap_or((0, 0));
            let up = match r {
                Some(r) if federated => r.uplink_bits,
                _ => 0,
            };
            if r.is_some() && federated {
                self.ledger.record(CostEntry {
                    round: round + 1,
                    client: c.id,
                    uplink_bits: up,
                    downlink_bits: down,
                })?;
            }
            round_bits = round_bits
                .checked_add(up + down)
                .ok_or(Error::Overflow("round bits"))?;
            round_flops = round_flops.checked_add(flops).ok_or(Error::Overflow("round flops"))?;
            records.push(ClientRoundRecord {
                client: c.id,
                selected: r.is_some(),
                accuracy: acc,
                validation_accuracy: r.map(|r| r.validation_accuracy),
                loss: r.map(|r| r.loss),
                delta_unstructured: r.and_then(|r| r.delta_unstructured),
                delta_structured: r.and_then(|r| r.delta_structured),
                pruned_unstructured: r.is_some_and(|r| r.pruned_unstructured),
                pruned_structured: r.is_some_and(|r| r.pruned_structured),
                sparsity: c.mask.sparsity(),
                sparsity_unstructured: c.mask.unstructured_sparsity(),
                sparsity_structured: c.mask.channel_sparsity(),
                level_unstructured: c.schedule.current_unstructured,
                level_structured: c.schedule.current_structured,
                zero_count: c.mask.prunable_zeros(),
                uplink_bits: up,
                downlink_bits: down,
                conv_flops: flops,
            });
        }
        let prev = self.reports.last();
        let cumulative_bits = prev.map_or(0, |p| p.cumulative_bits) + round_bits;
        let cumulative_conv_flops = prev
            .map_or(0, |p| p.cumulative_conv_flops)
            .checked_add(round_flops)
            .ok_or(Error::Overflow("cumulative flops"))?;
        let report = RoundReport {
            round: round + 1,
            algorithm,
            selected,
            mean_accuracy: mean(records.iter().map(|r| r.accuracy)),
            mean_sparsity_unstructured: mean(records.iter().map(|r| r.sparsity_unstructured)),
            mean_sparsity_structured: mean(records.iter().map(|r| r.sparsity_structured)),
            clients: records,
            round_bits,
            cumulative_bits,
            round_conv_flops: round_flops,
            cumulative_conv_flops,
        };
        self.server.round += 1;
        self.reports.push(report);
        Ok(self.reports.last().expect("just pushed"))
    }
}

fn validate(spec: &ModelSpec, c: &FedConfig) -> Result<()> {
    if c.clients == 0 {
        return Err(Error::config("clients", "must be positive"));
    }
    if !(c.sample_rate > 0.0 && c.sample_rate <= 1.0) {
        return Err(Error::config("sample_rate", format!("{} must lie in (0, 1]", c.sample_rate)));
    }
    if c.batch_size == 0 {
        return Err(Error::config("batch_size", "must be positive"));
    }
    let prunes = matches!(c.algorithm, Algorithm::SubFedAvgUn | Algorithm::SubFedAvgHy);
    if c.epochs == 0 || (prunes && c.epochs < 2) {
        return Err(Error::config(
            "epochs",
            "pruning compares first- and last-epoch masks, so at least two epochs are needed",
        ));
    }
    if !(0.0..1.0).contains(&c.validation_fraction) {
        return Err(Error::config("validation_fraction", "must lie in [0, 1)"));
    }
    c.schedule.validate()?;
    if c.algorithm == Algorithm::SubFedAvgHy && !spec.conv_layers().iter().any(|l| l.batch_norm) {
        return Err(Error::config(
            "model",
            format!("{} has no batch-norm layers for channel pruning", spec.name),
        ));
    }
    Ok(())
}
