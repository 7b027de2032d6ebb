//! Datasets, on-disk readers, synthetic clusters and the shard partitioner.

mod dataset;
mod formats;
mod partition;
mod synth;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use dataset::{DataSplit, Dataset};
pub use formats::{
    encode_idx_images, encode_idx_labels, load_cifar_binary, load_idx, CifarVariant, IDX_IMAGES_MAGIC,
    IDX_LABELS_MAGIC,
};
pub use partition::{partition_shards, split_validation, Partition};
pub use synth::{synth_dataset, SynthSpec};

use crate::error::{Error, Result};

/// Environment variable naming the directory that holds benchmark files.
pub const DATA_ROOT_ENV: &str = "SUBFED_DATA";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Benchmark {
    Mnist,
    /// The ten-class digits split.
    Emnist,
    Cifar10,
    Cifar100,
}

impl Benchmark {
    /// Default shard size for this benchmark's partition.
    pub fn shard_size(self) -> usize {
        match self {
            Benchmark::Cifar100 => 125,
            _ => 250,
        }
    }

    pub fn default_model(self) -> &'static str {
        match self {
            Benchmark::Mnist | Benchmark::Emnist => "cnn5-mnist",
            Benchmark::Cifar10 | Benchmark::Cifar100 => "lenet5-cifar",
        }
    }

    /// File names expected under the data root, train files first.
    pub fn files(self) -> (Vec<&'static str>, Vec<&'static str>) {
        match self {
            Benchmark::Mnist => (
                vec!["train-images-idx3-ubyte", "train-labels-idx1-ubyte"],
                vec!["t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"],
            ),
            Benchmark::Emnist => (
                vec!["emnist-digits-train-images-idx3-ubyte", "emnist-digits-train-labels-idx1-ubyte"],
                vec!["emnist-digits-test-images-idx3-ubyte", "emnist-digits-test-labels-idx1-ubyte"],
            ),
            Benchmark::Cifar10 => (
                vec![
                    "data_batch_1.bin",
                    "data_batch_2.bin",
                    "data_batch_3.bin",
                    "data_batch_4.bin",
                    "data_batch_5.bin",
                ],
                vec!["test_batch.bin"],
            ),
            Benchmark::Cifar100 => (vec!["train.bin"], vec!["test.bin"]),
        }
    }
}

/// Resolves the data root from an explicit path or [`DATA_ROOT_ENV`].
pub fn data_root(explicit: Option<&Path>) -> Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p.to_path_buf());
    }
    std::env::var_os(DATA_ROOT_ENV)
        .map(PathBuf::from)
        .ok_or_else(|| Error::config("dataset.path", format!("no dataset path given and {DATA_ROOT_ENV} is unset")))
}

/// Loads a benchmark's train and test sets from `root` and standardises both
/// with the training set's per-channel statistics.
pub fn load_benchmark(benchmark: Benchmark, root: &Path) -> Result<DataSplit> {
    let (train_files, test_files) = benchmark.files();
    let join = |names: &[&str]| names.iter().map(|n| root.join(n)).collect::<Vec<_>>();
    let (tr, te) = (join(&train_files), join(&test_files));
    let (mut train, mut test) = match benchmark {
        Benchmark::Mnist | Benchmark::Emnist => (load_idx(&tr[0], &tr[1])?, load_idx(&te[0], &te[1])?),
        Benchmark::Cifar10 => (
            load_cifar_binary(&tr, CifarVariant::Cifar10)?,
            load_cifar_binary(&te, CifarVariant::Cifar10)?,
        ),
        Benchmark::Cifar100 => (
            load_cifar_binary(&tr, CifarVariant::Cifar100)?,
            load_cifar_binary(&te, CifarVariant::Cifar100)?,
        ),
    };
    let (mean, std) = train.channel_stats();
    train.normalize(&mean, &std);
    test.normalize(&mean, &std);
    Ok(DataSplit { train, test })
}
