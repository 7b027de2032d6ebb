use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};

use subfed::config::{parse_config, parse_override, ExperimentConfig};
use subfed::experiment::run_experiment;
use subfed::metrics::{comm_cost_closed_form, conv_flops, BITS_PER_SCALAR};
use subfed::nn::ModelSpec;
use subfed::pruning::prune_count;
use subfed::report::{compare_runs, render_comparison, write_atomic};

#[derive(Parser)]
#[command(name = "subfed", version, about = "Federated learning with per-client pruned subnetworks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its artifacts.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Suppress per-round progress on stderr.
        #[arg(long, short)]
        quiet: bool,
    },
    /// Compare the final rounds of two or more runs.
    Compare {
        /// Summary CSV files or run directories.
        #[arg(required = true, num_args = 2..)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Write the client partition as JSON.
    PartitionDump {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convolution FLOPs of a built-in model at given channel keep-sets.
    Flops {
        #[arg(long)]
        model: String,
        /// Input shape as CxHxW; defaults for the benchmark models.
        #[arg(long)]
        input: Option<String>,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        /// Kept output channels per conv layer, comma separated.
        #[arg(long, conflicts_with = "prune")]
        keep: Option<String>,
        /// Percentage of channels pruned in every conv layer.
        #[arg(long)]
        prune: Option<f64>,
        #[arg(long)]
        json: bool,
    },
    /// Closed-form communication cost `R * B * |W| * 2`.
    Cost {
        #[arg(long)]
        rounds: u64,
        /// Parameters exchanged per round.
        #[arg(long)]
        params: u64,
        #[arg(long, default_value_t = BITS_PER_SCALAR)]
        bits: u64,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<String>,
    /// Directory holding benchmark files (overrides SUBFED_DATA).
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    algorithm: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rounds: Option<usize>,
    /// Client-update threads; 0 uses every core.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Any other setting as section.key=value; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> subfed::Result<ExperimentConfig> {
        let mut ov = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                ov.push((k.to_string(), v));
            }
        };
        let quoted = |s: &Option<String>| s.as_ref().map(|s| format!("{s:?}"));
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| format!("{:?}", p.display().to_string()));
        push("dataset.name", quoted(&self.dataset));
        push("dataset.path", path(&self.data_root));
        push("model.name", quoted(&self.model));
        push("federation.algorithm", quoted(&self.algorithm));
        push("seed", self.seed.map(|v| v.to_string()));
        push("rounds", self.rounds.map(|v| v.to_string()));
        push("threads", self.threads.map(|v| v.to_string()));
        push("output", path(&self.output));
        for s in &self.set {
            ov.push(parse_override(s)?);
        }
        parse_config(self.config.as_deref(), &ov)
    }
}

/// An error the user can fix by changing arguments or configuration.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn lift(e: subfed::Error) -> anyhow::Error {
    if e.is_config() {
        anyhow!(Usage(e.to_string()))
    } else {
        anyhow!(e)
    }
}

fn default_input(model: &str) -> Option<[usize; 3]> {
    match model {
        "cnn5-mnist" => Some([1, 28, 28]),
        "lenet5-cifar" => Some([3, 32, 32]),
        _ => None,
    }
}

fn parse_list(s: &str, what: &str, sep: char) -> anyhow::Result<Vec<usize>> {
    s.split(sep)
        .map(|p| p.trim().parse::<usize>().map_err(|_| anyhow!(Usage(format!("{what}: bad number {p:?}")))))
        .collect()
}

fn flops(
    model: &str,
    input: Option<&str>,
    classes: usize,
    keep: Option<&str>,
    prune: Option<f64>,
    json: bool,
) -> anyhow::Result<()> {
    let input = match input {
        Some(s) => {
            let v = parse_list(s, "--input", 'x')?;
            <[usize; 3]>::try_from(v).map_err(|_| anyhow!(Usage("--input must be CxHxW".into())))?
        }
        None => default_input(model).ok_or_else(|| anyhow!(Usage(format!("--input is required for {model}"))))?,
    };
    let spec = ModelSpec::builtin(model, input, classes).map_err(|e| anyhow!(Usage(e.to_string())))?;
    let convs = spec.conv_layers();
    let kept: Vec<usize> = match (keep, prune) {
        (Some(k), _) => parse_list(k, "--keep", ',')?,
        (None, Some(p)) => {
            if !(0.0..100.0).contains(&p) {
                bail!(Usage(format!("--prune {p} must lie in [0, 100)")));
            }
            convs.iter().map(|c| c.out_channels - prune_count(p, c.out_channels)).collect()
        }
        (None, None) => convs.iter().map(|c| c.out_channels).collect(),
    };
    let profile = conv_flops(&spec, &kept).map_err(|e| anyhow!(Usage(e.to_string())))?.with_fc(&spec);
    if json {
        println!("{}", serde_json::to_string_pretty(&profile)?);
        return Ok(());
    }
    println!("{:<12} {:>8} {:>8} {:>14} {:>14}", "layer", "kept_in", "kept_out", "flops", "dense_flops");
    for l in &profile.layers {
        println!("{:<12} {:>8} {:>8} {:>14} {:>14}", l.layer, l.kept_in, l.kept_out, l.flops, l.dense_flops);
    }
    println!("total {} of {} dense, reduction {:.4}x", profile.total, profile.dense_total, profile.reduction);
    Ok(())
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Run { config, quiet } => {
            let config = config.resolve().map_err(lift)?;
            let out = run_experiment(&config, |r| {
                if !quiet {
                    eprintln!(
                        "round {:>4}  accuracy {:>6.2}  sparsity {:.3}/{:.3}  bytes {:.0}",
                        r.round,
                        r.mean_accuracy,
                        r.mean_sparsity_unstructured,
                        r.mean_sparsity_structured,
                        r.cumulative_bytes()
                    );
                }
            })
            .map_err(lift)?;
            println!("{}", out.dir.display());
        }
        Command::Compare { runs, json } => {
            let rows = compare_runs(&runs).map_err(lift)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&rows)?);
            } else {
                print!("{}", render_comparison(&rows));
            }
        }
        Command::PartitionDump { config, out } => {
            let config = config.resolve().map_err(lift)?;
            let data = config.load_data().map_err(lift)?;
            let partition = config.partition(&data).map_err(lift)?;
            let text = partition.to_json().map_err(lift)?;
            match out {
                Some(p) => {
                    let dir = p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
                    let name = p.file_name().ok_or_else(|| anyhow!(Usage("--out needs a file name".into())))?;
                    write_atomic(dir, &name.to_string_lossy(), text.as_bytes())
                        .map_err(lift)
                        .with_context(|| format!("writing {}", p.display()))?;
                }
                None => println!("{text}"),
            }
        }
        Command::Flops {
            model,
            input,
            classes,
            keep,
            prune,
            json,
        } => flops(&model, input.as_deref(), classes, keep.as_deref(), prune, json)?,
        Command::Cost {
            rounds,
            params,
            bits,
            json,
        } => {
            let c = comm_cost_closed_form(rounds, bits, params).map_err(lift)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&c)?);
            } else {
                println!("{} bits, {} bytes, {} MB", c.bits, c.bytes, c.megabytes);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.is::<Usage>()) {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
