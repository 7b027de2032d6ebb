//! Experiment configuration: a TOML file with nested sections, overridable
//! from the command line with dotted `section.key=value` pairs.
//!
//! ```toml
//! seed = 1
//! rounds = 100
//!
//! [dataset]
//! name = "mnist"
//! path = "/data/mnist"
//!
//! [federation]
//! algorithm = "sub-fedavg-un"
//! clients = 100
//!
//! [pruning]
//! p_us = 50
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{data_root, load_benchmark, partition_shards, Benchmark, DataSplit, Partition, SynthSpec};
use crate::error::{Error, Result};
use crate::federation::{AggregationMode, Algorithm, FedConfig};
use crate::nn::ModelSpec;
use crate::pruning::PruneSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetName {
    Mnist,
    Emnist,
    Cifar10,
    Cifar100,
    Synthetic,
}

impl DatasetName {
    pub fn benchmark(self) -> Option<Benchmark> {
        match self {
            DatasetName::Mnist => Some(Benchmark::Mnist),
            DatasetName::Emnist => Some(Benchmark::Emnist),
            DatasetName::Cifar10 => Some(Benchmark::Cifar10),
            DatasetName::Cifar100 => Some(Benchmark::Cifar100),
            DatasetName::Synthetic => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub classes: usize,
    /// Training examples per class. When absent, just enough to fill every
    /// client's shards.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_class: Option<usize>,
    pub test_per_class: usize,
    pub separation: f64,
    pub side: usize,
    pub nuisance_rank: usize,
    pub nuisance_scale: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            per_class: None,
            test_per_class: 100,
            separation: 0.3,
            side: 16,
            nuisance_rank: 32,
            nuisance_scale: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub name: Option<DatasetName>,
    /// Directory holding the benchmark files; falls back to `SUBFED_DATA`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shard_size: Option<usize>,
    pub shards_per_client: usize,
    pub synthetic: SyntheticConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            name: None,
            path: None,
            shard_size: None,
            shards_per_client: 2,
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Built-in model name; defaults by dataset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    pub algorithm: Algorithm,
    pub clients: usize,
    pub sample_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub aggregation: AggregationMode,
    pub validation_fraction: f64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::SubFedAvgUn,
            clients: 100,
            sample_rate: 0.1,
            epochs: 5,
            batch_size: 10,
            learning_rate: 0.01,
            momentum: 0.5,
            aggregation: AggregationMode::PerPosition,
            validation_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruningConfig {
    pub r_us: f64,
    pub r_s: f64,
    pub p_us: f64,
    pub p_s: f64,
    pub eps_us: f64,
    pub eps_s: f64,
    pub acc_th: f64,
}

impl Default for PruningConfig {
    fn default() -> Self {
        Self {
            r_us: 10.0,
            r_s: 10.0,
            p_us: 50.0,
            p_s: 50.0,
            eps_us: 1e-4,
            eps_s: 0.05,
            acc_th: 50.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub rounds: usize,
    /// Parent directory for run subdirectories.
    pub output: PathBuf,
    /// Client-update worker threads; 0 uses every core.
    pub threads: usize,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub federation: FederationConfig,
    pub pruning: PruningConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            rounds: 100,
            output: PathBuf::from("runs"),
            threads: 0,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            federation: FederationConfig::default(),
            pruning: PruningConfig::default(),
        }
    }
}

/// Reads `path` (if any), applies `overrides` in order and validates.
pub fn parse_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(format!("reading {}", p.display()), e))?;
            toml::from_str::<toml::Table>(&text).map_err(|e| Error::config(p.display().to_string(), e.message()))?
        }
        None => toml::Table::new(),
    };
    for (key, raw) in overrides {
        set_dotted(&mut table, key, raw)?;
    }
    let config: ExperimentConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::config("config", e.message()))?;
    config.validate()?;
    Ok(config)
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::config(s, "override must look like section.key=value"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn set_dotted(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "empty key segment"));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("{part} is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_scalar(raw));
    Ok(())
}

/// A TOML literal if `raw` parses as one, else the raw text as a string.
fn parse_scalar(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        let name = d.name.ok_or_else(|| Error::config("dataset.name", "missing"))?;
        if let Some(0) = d.shard_size {
            return Err(Error::config("dataset.shard_size", "must be positive"));
        }
        if d.shards_per_client == 0 {
            return Err(Error::config("dataset.shards_per_client", "must be positive"));
        }
        if name == DatasetName::Synthetic {
            let s = &d.synthetic;
            if s.classes < 2 {
                return Err(Error::config("dataset.synthetic.classes", "need at least 2"));
            }
            if s.side == 0 {
                return Err(Error::config("dataset.synthetic.side", "must be positive"));
            }
            if s.test_per_class == 0 {
                return Err(Error::config("dataset.synthetic.test_per_class", "must be positive"));
            }
            if !(s.separation >= 0.0 && s.separation.is_finite()) {
                return Err(Error::config("dataset.synthetic.separation", "must be finite and non-negative"));
            }
            if !(s.nuisance_scale >= 0.0 && s.nuisance_scale.is_finite()) {
                return Err(Error::config("dataset.synthetic.nuisance_scale", "must be finite and non-negative"));
            }
        }
        if self.rounds == 0 {
            return Err(Error::config("rounds", "must be positive"));
        }
        let f = &self.federation;
        if f.clients == 0 {
            return Err(Error::config("federation.clients", "must be positive"));
        }
        if !(f.sample_rate > 0.0 && f.sample_rate <= 1.0) {
            return Err(Error::config("federation.sample_rate", format!("{} must lie in (0, 1]", f.sample_rate)));
        }
        if f.epochs == 0 {
            return Err(Error::config("federation.epochs", "must be positive"));
        }
        if f.batch_size == 0 {
            return Err(Error::config("federation.batch_size", "must be positive"));
        }
        if !(f.learning_rate > 0.0 && f.learning_rate.is_finite()) {
            return Err(Error::config("federation.learning_rate", "must be finite and positive"));
        }
        if !(0.0..1.0).contains(&f.momentum) {
            return Err(Error::config("federation.momentum", format!("{} must lie in [0, 1)", f.momentum)));
        }
        if !(0.0..1.0).contains(&f.validation_fraction) {
            return Err(Error::config(
                "federation.validation_fraction",
                format!("{} must lie in [0, 1)", f.validation_fraction),
            ));
        }
        let p = &self.pruning;
        for (key, v) in [
            ("pruning.r_us", p.r_us),
            ("pruning.r_s", p.r_s),
            ("pruning.p_us", p.p_us),
            ("pruning.p_s", p.p_s),
        ] {
            if !(0.0..100.0).contains(&v) {
                return Err(Error::config(key, format!("{v} must lie in [0, 100)")));
            }
        }
        for (key, v) in [("pruning.eps_us", p.eps_us), ("pruning.eps_s", p.eps_s)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, format!("{v} must be finite and non-negative")));
            }
        }
        if !(0.0..=100.0).contains(&p.acc_th) {
            return Err(Error::config("pruning.acc_th", format!("{} must lie in [0, 100]", p.acc_th)));
        }
        Ok(())
    }

    pub fn dataset_name(&self) -> Result<DatasetName> {
        self.dataset.name.ok_or_else(|| Error::config("dataset.name", "missing"))
    }

    pub fn shard_size(&self) -> Result<usize> {
        let name = self.dataset_name()?;
        Ok(self.dataset.shard_size.unwrap_or(match name.benchmark() {
            Some(b) => b.shard_size(),
            None => 50,
        }))
    }

    pub fn model_name(&self) -> Result<String> {
        if let Some(m) = &self.model.name {
            return Ok(m.clone());
        }
        Ok(match self.dataset_name()?.benchmark() {
            Some(b) => b.default_model().to_string(),
            None => "mlp-synth".to_string(),
        })
    }

    pub fn schedule(&self) -> PruneSchedule {
        let p = &self.pruning;
        PruneSchedule {
            rate_unstructured: p.r_us,
            rate_structured: p.r_s,
            target_unstructured: p.p_us,
            target_structured: p.p_s,
            accuracy_threshold: p.acc_th,
            epsilon_unstructured: p.eps_us,
            epsilon_structured: p.eps_s,
            current_unstructured: 0.0,
            current_structured: 0.0,
        }
    }

    pub fn fed_config(&self) -> FedConfig {
        let f = &self.federation;
        FedConfig {
            algorithm: f.algorithm,
            clients: f.clients,
            sample_rate: f.sample_rate,
            rounds: self.rounds,
            epochs: f.epochs,
            batch_size: f.batch_size,
            learning_rate: f.learning_rate,
            momentum: f.momentum,
            schedule: self.schedule(),
            aggregation: f.aggregation,
            validation_fraction: f.validation_fraction,
            seed: self.seed,
            threads: self.threads,
        }
    }

    /// Synthetic generator settings with `per_class` resolved.
    pub fn synth_spec(&self) -> Result<SynthSpec> {
        let s = &self.dataset.synthetic;
        let needed = self.federation.clients * self.dataset.shards_per_client * self.shard_size()?;
        let mut spec = SynthSpec::new(s.classes, s.per_class.unwrap_or(needed.div_ceil(s.classes)), s.separation, self.seed);
        spec.test_per_class = s.test_per_class;
        spec.side = s.side;
        spec.nuisance_rank = s.nuisance_rank;
        spec.nuisance_scale = s.nuisance_scale;
        Ok(spec)
    }

    pub fn load_data(&self) -> Result<DataSplit> {
        match self.dataset_name()?.benchmark() {
            Some(b) => {
                let root = data_root(self.dataset.path.as_deref())?;
                load_benchmark(b, &root)
            }
            None => Ok(self.synth_spec()?.generate()),
        }
    }

    pub fn model_spec(&self, data: &DataSplit) -> Result<ModelSpec> {
        ModelSpec::builtin(&self.model_name()?, data.train.image_shape(), data.train.classes())
    }

    pub fn partition(&self, data: &DataSplit) -> Result<Partition> {
        partition_shards(
            &data.train,
            &data.test,
            self.federation.clients,
            self.dataset.shards_per_client,
            self.shard_size()?,
            self.seed,
        )
    }

    /// Loads data, builds the model and partition.
    pub fn prepare(&self) -> Result<(ModelSpec, Arc<DataSplit>, Partition)> {
        let data = self.load_data()?;
        let spec = self.model_spec(&data)?;
        let partition = self.partition(&data)?;
        Ok((spec, Arc::new(data), partition))
    }

    /// The resolved configuration as TOML.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    /// The settings that determine results, omitting where output goes and
    /// how many threads compute it.
    pub fn experiment_echo(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).unwrap_or(serde_json::Value::Null);
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output");
            obj.remove("threads");
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(k: &str, v: &str) -> (String, String) {
        (k.to_string(), v.to_string())
    }

    fn write(text: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), text).unwrap();
        f
    }

    #[test]
    fn empty_file_with_dataset_flag_gives_defaults() {
        let f = write("");
        let c = parse_config(Some(f.path()), &[ov("dataset.name", "mnist")]).unwrap();
        assert_eq!(c.federation.clients, 100);
        assert_eq!(c.federation.batch_size, 10);
        assert_eq!(c.federation.epochs, 5);
        assert_eq!(c.federation.learning_rate, 0.01);
        assert_eq!(c.federation.momentum, 0.5);
        assert_eq!(c.pruning.eps_us, 1e-4);
        assert_eq!(c.pruning.eps_s, 0.05);
        assert_eq!(c.pruning.acc_th, 50.0);
        assert_eq!(c.shard_size().unwrap(), 250);
        assert_eq!(c.model_name().unwrap(), "cnn5-mnist");
    }

    #[test]
    fn target_out_of_range() {
        let f = write("[dataset]\nname = \"synthetic\"\n[pruning]\np_us = 120\n");
        let e = parse_config(Some(f.path()), &[]).unwrap_err();
        assert!(e.is_config());
        assert!(e.to_string().contains("pruning.p_us"), "{e}");
    }

    #[test]
    fn flag_beats_file() {
        let f = write("[dataset]\nname = \"synthetic\"\n[federation]\nlearning_rate = 0.01\n");
        let c = parse_config(Some(f.path()), &[ov("federation.learning_rate", "0.1")]).unwrap();
        assert_eq!(c.federation.learning_rate, 0.1);
    }

    #[test]
    fn unknown_key_named() {
        let f = write("[dataset]\nname = \"synthetic\"\n[federation]\nlearnig_rate = 0.1\n");
        let e = parse_config(Some(f.path()), &[]).unwrap_err();
        assert!(e.is_config());
        assert!(e.to_string().contains("learnig_rate"), "{e}");
    }

    #[test]
    fn missing_dataset() {
        let e = parse_config(None, &[]).unwrap_err();
        assert!(e.to_string().contains("dataset.name"), "{e}");
    }

    #[test]
    fn missing_benchmark_path_is_config_error() {
        if std::env::var_os(crate::data::DATA_ROOT_ENV).is_some() {
            return;
        }
        let c = parse_config(None, &[ov("dataset.name", "cifar10")]).unwrap();
        let e = c.load_data().unwrap_err();
        assert!(e.is_config());
        assert!(e.to_string().contains("dataset.path"), "{e}");
    }

    #[test]
    fn string_overrides() {
        let c = parse_config(
            None,
            &[
                ov("dataset.name", "synthetic"),
                ov("federation.algorithm", "fedavg"),
                ov("federation.aggregation", "strict-intersection"),
            ],
        )
        .unwrap();
        assert_eq!(c.federation.algorithm, Algorithm::FedAvg);
        assert_eq!(c.federation.aggregation, AggregationMode::StrictIntersection);
    }

    #[test]
    fn bad_override_syntax() {
        assert!(parse_override("seed").is_err());
        assert_eq!(parse_override("seed = 3").unwrap(), ov("seed", "3"));
    }

    #[test]
    fn toml_round_trip() {
        let c = parse_config(None, &[ov("dataset.name", "synthetic"), ov("seed", "9")]).unwrap();
        let f = write(&c.to_toml().unwrap());
        assert_eq!(parse_config(Some(f.path()), &[]).unwrap(), c);
    }

    #[test]
    fn synthetic_fills_shards() {
        let c = parse_config(None, &[ov("dataset.name", "synthetic"), ov("federation.clients", "10")]).unwrap();
        let (_, data, part) = c.prepare().unwrap();
        assert_eq!(data.train.len(), 10 * 2 * 50);
        assert_eq!(part.client_count(), 10);
    }
}
