//! One configured experiment from data loading to artifacts on disk.

use std::path::PathBuf;

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::federation::{RoundReport, Simulation};
use crate::metrics::CostLedger;
use crate::report::{
    accuracy_vs_round_csv, accuracy_vs_sparsity_csv, client_table_csv, create_run_dir, ledger_json, rounds_jsonl,
    summary_csv, write_atomic, ACC_ROUND_FILE, ACC_SPARSITY_FILE, CLIENTS_FILE, CONFIG_FILE, LEDGER_FILE,
    ROUNDS_FILE, SUMMARY_FILE,
};

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub reports: Vec<RoundReport>,
    pub ledger: CostLedger,
}

/// Builds and runs the simulation, calling `on_round` after every round.
pub fn simulate(config: &ExperimentConfig, mut on_round: impl FnMut(&RoundReport)) -> Result<Simulation> {
    config.validate()?;
    let (spec, data, partition) = config.prepare()?;
    let mut sim = Simulation::new(spec, data, &partition, config.fed_config())?;
    while !sim.finished() {
        on_round(sim.step()?);
    }
    Ok(sim)
}

/// Writes every artifact of a finished simulation into a new run directory
/// under `config.output`.
pub fn write_artifacts(config: &ExperimentConfig, sim: &Simulation) -> Result<PathBuf> {
    let name = config.dataset_name()?;
    let stem = format!(
        "{}-{}-seed{}",
        config.federation.algorithm,
        serde_json::to_value(name).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
        config.seed
    );
    let dir = create_run_dir(&config.output, &stem)?;
    let echo = config.experiment_echo();
    let reports = sim.reports();
    let mut resolved = String::from("# resolved configuration\n");
    resolved += &config.to_toml()?;
    write_atomic(&dir, CONFIG_FILE, resolved.as_bytes())?;
    write_atomic(&dir, ROUNDS_FILE, rounds_jsonl(reports, &echo)?.as_bytes())?;
    write_atomic(&dir, LEDGER_FILE, ledger_json(sim.ledger(), &echo)?.as_bytes())?;
    write_atomic(&dir, CLIENTS_FILE, client_table_csv(reports, Some(&echo))?.as_bytes())?;
    write_atomic(&dir, ACC_ROUND_FILE, accuracy_vs_round_csv(reports, Some(&echo))?.as_bytes())?;
    write_atomic(&dir, ACC_SPARSITY_FILE, accuracy_vs_sparsity_csv(reports, Some(&echo))?.as_bytes())?;
    write_atomic(&dir, SUMMARY_FILE, summary_csv(reports, Some(&echo))?.as_bytes())?;
    Ok(dir)
}

pub fn run_experiment(config: &ExperimentConfig, on_round: impl FnMut(&RoundReport)) -> Result<RunOutcome> {
    let sim = simulate(config, on_round)?;
    let dir = write_artifacts(config, &sim)?;
    Ok(RunOutcome {
        dir,
        reports: sim.reports().to_vec(),
        ledger: sim.ledger().clone(),
    })
}
