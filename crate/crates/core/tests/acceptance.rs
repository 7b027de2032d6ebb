//! One check per acceptance criterion. Each prints a single
//! `criterion N: PASS|FAIL ...` line to stderr and then asserts.

mod support;

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use subfed::config::{parse_config, ExperimentConfig};
use subfed::data::{
    encode_idx_images, encode_idx_labels, load_benchmark, load_idx, partition_shards, Benchmark, DATA_ROOT_ENV,
};
use subfed::federation::{aggregate_sub_fedavg, AggregationMode, Algorithm, Contribution, RoundReport, Simulation};
use subfed::metrics::{comm_cost_closed_form, conv_flops};
use subfed::nn::{init_params, Layer, ModelSpec, ParamSet};
use subfed::pruning::{Coverage, SparsityMask};
use subfed::report::summary_csv;

fn verdict(n: u32, pass: bool, detail: &str) {
    let line = format!("criterion {n}: {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn config(pairs: &[(&str, String)]) -> ExperimentConfig {
    let ov: Vec<(String, String)> = pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
    parse_config(None, &ov).unwrap()
}

/// The personalization run: synthetic clusters, 10 clients with two
/// shards each, full participation, 30 rounds.
fn run7_config(algorithm: Algorithm, seed: u64, threads: usize, p_us: f64) -> ExperimentConfig {
    config(&[
        ("dataset.name", "\"synthetic\"".into()),
        ("federation.algorithm", format!("\"{algorithm}\"")),
        ("federation.clients", "10".into()),
        ("federation.sample_rate", "1.0".into()),
        ("rounds", "30".into()),
        ("seed", seed.to_string()),
        ("threads", threads.to_string()),
        ("pruning.p_us", p_us.to_string()),
    ])
}

struct Run {
    reports: Vec<RoundReport>,
    csv: String,
    /// Client rounds in which a zero-set shrank.
    shrunk: usize,
    /// Final unstructured sparsity per client.
    final_sparsity: Vec<f64>,
}

fn execute(cfg: &ExperimentConfig) -> Run {
    let (spec, data, partition) = cfg.prepare().unwrap();
    let mut sim = Simulation::new(spec, data, &partition, cfg.fed_config()).unwrap();
    let mut masks: Vec<SparsityMask> = sim.clients().iter().map(|c| c.mask.clone()).collect();
    let mut shrunk = 0;
    while !sim.finished() {
        sim.step().unwrap();
        for (c, prev) in sim.clients().iter().zip(masks.iter_mut()) {
            if !c.mask.zeros_superset_of(prev) {
                shrunk += 1;
            }
            *prev = c.mask.clone();
        }
    }
    let reports = sim.reports().to_vec();
    Run {
        csv: summary_csv(&reports, Some(&cfg.experiment_echo())).unwrap(),
        final_sparsity: sim.clients().iter().map(|c| c.mask.unstructured_sparsity()).collect(),
        reports,
        shrunk,
    }
}

const SEEDS: [u64; 3] = [1, 2, 3];
const RUN7: [Algorithm; 3] = [Algorithm::FedAvg, Algorithm::SubFedAvgUn, Algorithm::Standalone];

struct Run7 {
    runs: BTreeMap<(&'static str, u64), Run>,
    seconds: f64,
}

fn run7() -> &'static Run7 {
    static CELL: OnceLock<Run7> = OnceLock::new();
    CELL.get_or_init(|| {
        let t = Instant::now();
        let mut runs = BTreeMap::new();
        for &alg in &RUN7 {
            for &seed in &SEEDS {
                runs.insert((alg.as_str(), seed), execute(&run7_config(alg, seed, 0, 90.0)));
            }
        }
        Run7 {
            runs,
            seconds: t.elapsed().as_secs_f64(),
        }
    })
}

fn final_mean(r: &Run) -> f64 {
    r.reports.last().unwrap().mean_accuracy
}

fn seed_mean(f: impl Fn(u64) -> f64) -> f64 {
    SEEDS.iter().map(|&s| f(s)).sum::<f64>() / SEEDS.len() as f64
}

#[test]
fn criterion_01_gradient_oracle() {
    let t = Instant::now();
    let result = support::gradient::run_oracle(24);
    let secs = t.elapsed().as_secs_f64();
    let (pass, detail) = match &result {
        Ok(s) => (
            s.worst < 1e-3 && secs < 60.0,
            format!(
                "({} specs, {} coordinates, {} at kinks skipped, worst relative error {:.2e}; {secs:.1}s)",
                s.specs, s.checked, s.skipped, s.worst
            ),
        ),
        Err(e) => (false, format!("({e})")),
    };
    verdict(1, pass, &detail);
    assert!(pass);
}

#[test]
fn criterion_02_reduction_equivalence() {
    let t = Instant::now();
    let base = |alg: &str, p_us: &str| {
        config(&[
            ("dataset.name", "\"synthetic\"".into()),
            ("federation.algorithm", format!("\"{alg}\"")),
            ("federation.clients", "5".into()),
            ("federation.sample_rate", "1.0".into()),
            ("rounds", "10".into()),
            ("seed", "7".into()),
            ("pruning.p_us", p_us.into()),
        ])
    };
    let sub = execute(&base("sub-fedavg-un", "0"));
    let fed = execute(&base("fedavg", "50"));
    let strip = |csv: &str| -> Vec<String> {
        csv.lines()
            .filter(|l| !l.starts_with('#'))
            .map(|l| {
                let mut f: Vec<&str> = l.split(',').collect();
                f.remove(1);
                f.join(",")
            })
            .collect()
    };
    let rows_equal = strip(&sub.csv) == strip(&fed.csv);
    let bits = |r: &Run| -> Vec<u64> {
        r.reports.iter().flat_map(|rep| rep.clients.iter().map(|c| c.accuracy.to_bits())).collect()
    };
    let clients_equal = bits(&sub) == bits(&fed);
    let secs = t.elapsed().as_secs_f64();
    let pass = rows_equal && clients_equal && sub.reports.len() == 10 && secs < 60.0;
    verdict(
        2,
        pass,
        &format!("(10 rounds, 5 clients: summary rows equal {rows_equal}, per-client accuracies equal {clients_equal}; {secs:.1}s)"),
    );
    assert!(pass);
}

#[test]
fn criterion_03_aggregation_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    use rand::Rng;
    let mut mismatches = 0;
    let instances = 100;
    for _ in 0..instances {
        let outputs = rng.random_range(1..=8);
        let inputs = rng.random_range(1..=64 / outputs - 1);
        let spec = ModelSpec::new("agg", [1, 1, inputs], vec![Layer::Flatten, Layer::Dense { inputs, outputs }]).unwrap();
        let clients = rng.random_range(1..=5);
        let draw = |rng: &mut ChaCha8Rng| -> ParamSet {
            let mut p = init_params(&spec, 0).unwrap();
            for e in p.entries_mut() {
                for v in e.tensor.data_mut() {
                    *v = rng.random_range(-100.0f32..100.0);
                }
            }
            p
        };
        let prev = draw(&mut rng);
        let params: Vec<ParamSet> = (0..clients).map(|_| draw(&mut rng)).collect();
        let masks: Vec<SparsityMask> = params
            .iter()
            .map(|p| {
                let mut m = SparsityMask::dense(p, Coverage::ConvAndDense);
                for e in 0..p.len() {
                    for q in 0..p.entries()[e].tensor.len() {
                        m.set_bit(e, q, rng.random_bool(0.5));
                    }
                }
                m
            })
            .collect();
        let mut order: Vec<usize> = (0..clients).collect();
        order.shuffle(&mut rng);
        let contrib: Vec<Contribution> = order
            .iter()
            .map(|&c| Contribution {
                client: c,
                params: &params[c],
                mask: &masks[c],
            })
            .collect();
        let got = aggregate_sub_fedavg(&contrib, &prev, AggregationMode::PerPosition).unwrap();
        for e in 0..prev.len() {
            for q in 0..prev.entries()[e].tensor.len() {
                let keepers: Vec<f64> = (0..clients)
                    .filter(|&c| masks[c].bits(e)[q])
                    .map(|c| params[c].entries()[e].tensor.data()[q] as f64)
                    .collect();
                let want = if keepers.is_empty() {
                    prev.entries()[e].tensor.data()[q]
                } else {
                    (keepers.iter().sum::<f64>() / keepers.len() as f64) as f32
                };
                if got.entries()[e].tensor.data()[q].to_bits() != want.to_bits() {
                    mismatches += 1;
                }
            }
        }
    }
    let pass = mismatches == 0;
    verdict(3, pass, &format!("({instances} random instances, {mismatches} mismatching positions)"));
    assert!(pass);
}

#[test]
fn criterion_04_closed_form_cost() {
    let c = comm_cost_closed_form(1000, 32, 65520).unwrap();
    let exact = c.megabytes == 524.16 && c.bytes == 524_160_000;
    let rounds = 6u64;
    let cfg = config(&[
        ("dataset.name", "\"synthetic\"".into()),
        ("federation.algorithm", "\"fedavg\"".into()),
        ("federation.clients", "5".into()),
        ("federation.sample_rate", "1.0".into()),
        ("rounds", rounds.to_string()),
    ]);
    let (spec, data, partition) = cfg.prepare().unwrap();
    let w = spec.learnable_count() as u64;
    let mut sim = Simulation::new(spec, data, &partition, cfg.fed_config()).unwrap();
    sim.run().unwrap();
    let want = comm_cost_closed_form(rounds, 32, w).unwrap().bits;
    let per_client = sim.ledger().per_client_bits();
    let ledger_ok = per_client.len() == 5 && per_client.values().all(|&b| b == want);
    let pass = exact && ledger_ok;
    verdict(
        4,
        pass,
        &format!(
            "(closed form {} MB; dense FedAvg R={rounds} |W|={w}: per-client ledger {:?} vs {want} bits)",
            c.megabytes,
            per_client.values().collect::<Vec<_>>()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_05_flop_reduction() {
    let spec = ModelSpec::builtin("lenet5-cifar", [3, 32, 32], 10).unwrap();
    let p = conv_flops(&spec, &[3, 8]).unwrap();
    // conv1: 3->6 channels, 5x5 kernel, 28x28 output; conv2: 6->16, 5x5, 10x10.
    let dense_hand: u64 = 2 * 3 * 25 * 6 * 28 * 28 + 2 * 6 * 25 * 16 * 10 * 10;
    let pruned_hand: u64 = 2 * 3 * 25 * 3 * 28 * 28 + 2 * 3 * 25 * 8 * 10 * 10;
    let factor = dense_hand as f64 / pruned_hand as f64;
    let pass = p.reduction >= 2.0 && p.total == pruned_hand && p.dense_total == dense_hand && p.reduction == factor;
    verdict(
        5,
        pass,
        &format!("(LeNet-5 at half channels: {} / {} = {:.4}x)", p.dense_total, p.total, p.reduction),
    );
    assert!(pass);
}

const MNIST_TRAIN: [usize; 10] = [5923, 6742, 5958, 6131, 5842, 5421, 5918, 6265, 5851, 5949];
const MNIST_TEST: [usize; 10] = [980, 1135, 1032, 1010, 982, 892, 958, 1028, 974, 1009];

fn write_idx_pair(dir: &Path, stem: &str, hist: &[usize], rng: &mut ChaCha8Rng) {
    let mut labels: Vec<u8> = hist.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c as u8, n)).collect();
    labels.shuffle(rng);
    let pixels: Vec<u8> = labels.iter().flat_map(|&l| std::iter::repeat_n(l * 20, 28 * 28)).collect();
    std::fs::write(dir.join(format!("{stem}-images-idx3-ubyte")), encode_idx_images(28, 28, &pixels)).unwrap();
    std::fs::write(dir.join(format!("{stem}-labels-idx1-ubyte")), encode_idx_labels(&labels)).unwrap();
}

#[test]
fn criterion_06_non_iid_severity() {
    let real = std::env::var_os(DATA_ROOT_ENV)
        .map(std::path::PathBuf::from)
        .filter(|p| p.join("train-labels-idx1-ubyte").is_file());
    let (split, source) = match real {
        Some(root) => (load_benchmark(Benchmark::Mnist, &root).unwrap(), "MNIST files"),
        None => {
            let dir = tempfile::tempdir().unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            write_idx_pair(dir.path(), "train", &MNIST_TRAIN, &mut rng);
            write_idx_pair(dir.path(), "t10k", &MNIST_TEST, &mut rng);
            let train = load_idx(&dir.path().join("train-images-idx3-ubyte"), &dir.path().join("train-labels-idx1-ubyte")).unwrap();
            let test = load_idx(&dir.path().join("t10k-images-idx3-ubyte"), &dir.path().join("t10k-labels-idx1-ubyte")).unwrap();
            (subfed::data::DataSplit { train, test }, "IDX pair with the MNIST label histogram")
        }
    };
    let part = partition_shards(&split.train, &split.test, 100, 2, 250, 1).unwrap();
    let sizes_ok = part.assignment.len() == 100 && part.assignment.values().all(|v| v.len() == 500);
    let mut distinct: Vec<usize> = part
        .assignment
        .values()
        .map(|idx| idx.iter().map(|&i| split.train.label(i)).collect::<std::collections::BTreeSet<_>>().len())
        .collect();
    distinct.sort_unstable();
    let median = (distinct[49] + distinct[50]) as f64 / 2.0;
    let pass = sizes_ok && median <= 4.0;
    verdict(
        6,
        pass,
        &format!("({source}: 100 clients x 500 examples {sizes_ok}, median distinct labels {median}, max {})", distinct[99]),
    );
    assert!(pass);
}

#[test]
fn criterion_07_personalization_benefit() {
    let r = run7();
    let mean = |alg: Algorithm| seed_mean(|s| final_mean(&r.runs[&(alg.as_str(), s)]));
    let (sub, fed, solo) = (mean(Algorithm::SubFedAvgUn), mean(Algorithm::FedAvg), mean(Algorithm::Standalone));
    let per_seed: Vec<String> = SEEDS
        .iter()
        .map(|&s| {
            format!(
                "seed {s}: {:.1}/{:.1}/{:.1}",
                final_mean(&r.runs[&("sub-fedavg-un", s)]),
                final_mean(&r.runs[&("fedavg", s)]),
                final_mean(&r.runs[&("standalone", s)])
            )
        })
        .collect();
    let per_seed_time = r.seconds / SEEDS.len() as f64;
    let pass = sub >= fed + 5.0 && sub >= solo && per_seed_time < 600.0;
    verdict(
        7,
        pass,
        &format!(
            "(mean final accuracy sub-fedavg-un {sub:.2}, fedavg {fed:.2}, standalone {solo:.2}; {}; {per_seed_time:.1}s per seed)",
            per_seed.join(", ")
        ),
    );
    assert!(pass);
}

/// Seed-mean accuracy and unstructured sparsity per round.
fn mean_curve(r: &Run7, alg: Algorithm) -> Vec<(f64, f64)> {
    let rounds = r.runs[&(alg.as_str(), 1)].reports.len();
    (0..rounds)
        .map(|i| {
            let acc = seed_mean(|s| r.runs[&(alg.as_str(), s)].reports[i].mean_accuracy);
            let sp = seed_mean(|s| r.runs[&(alg.as_str(), s)].reports[i].mean_sparsity_unstructured);
            (acc, sp)
        })
        .collect()
}

#[test]
fn criterion_08_accuracy_sparsity_shape() {
    let r = run7();
    let sub = mean_curve(r, Algorithm::SubFedAvgUn);
    let fed = mean_curve(r, Algorithm::FedAvg);
    let at30 = (0..sub.len())
        .min_by(|&a, &b| (sub[a].1 - 0.3).abs().total_cmp(&(sub[b].1 - 0.3).abs()))
        .unwrap();
    let early_ok = sub[at30].0 >= fed[at30].0;

    // Final accuracy as a function of the target level, everything else as in run 7.
    let mut sweep: Vec<(f64, f64, f64)> = Vec::new();
    for p in [30.0, 50.0, 70.0, 90.0, 99.0] {
        let acc = seed_mean(|s| {
            if p == 90.0 {
                final_mean(&r.runs[&("sub-fedavg-un", s)])
            } else {
                final_mean(&execute(&run7_config(Algorithm::SubFedAvgUn, s, 0, p)))
            }
        });
        let sp = if p == 90.0 {
            seed_mean(|s| r.runs[&("sub-fedavg-un", s)].reports.last().unwrap().mean_sparsity_unstructured)
        } else {
            f64::NAN
        };
        sweep.push((p, acc, sp));
    }
    let peak = sweep.iter().map(|t| t.1).fold(f64::NEG_INFINITY, f64::max);
    let highest = sweep.last().unwrap().1;
    let falls = highest < peak;

    let in_run_peak = sub.iter().map(|t| t.0).fold(f64::NEG_INFINITY, f64::max);
    let last = sub.last().unwrap();
    let in_run = format!("final sparsity {:.3} accuracy {:.2}, in-run peak {in_run_peak:.2}", last.1, last.0);

    let pass = early_ok && falls;
    let sweep_s: Vec<String> = sweep.iter().map(|(p, a, _)| format!("p{p:.0}={a:.1}")).collect();
    verdict(
        8,
        pass,
        &format!(
            "(round {} at sparsity {:.2}: sub-fedavg-un {:.2} vs fedavg {:.2}; final accuracy by target {}: peak {peak:.2}, at 99% {highest:.2}; in run 7: {in_run})",
            at30 + 1,
            sub[at30].1,
            sub[at30].0,
            fed[at30].0,
            sweep_s.join(" ")
        ),
    );
    assert!(pass);
}

struct Audit {
    shrunk: usize,
    overshoot: usize,
    gated_prunes: usize,
    prunes: usize,
    below_threshold: usize,
}

fn audit(cfg: &ExperimentConfig, run: &Run, audit: &mut Audit) {
    let p = &cfg.pruning;
    audit.shrunk += run.shrunk;
    for rep in &run.reports {
        for c in &rep.clients {
            if c.sparsity_unstructured > (p.p_us + p.r_us) / 100.0 + 1e-12 || c.sparsity_structured > (p.p_s + p.r_s) / 100.0 + 1e-12 {
                audit.overshoot += 1;
            }
            let pruned = c.pruned_unstructured || c.pruned_structured;
            if pruned {
                audit.prunes += 1;
            }
            if let Some(v) = c.validation_accuracy {
                if v < p.acc_th {
                    audit.below_threshold += 1;
                    if pruned {
                        audit.gated_prunes += 1;
                    }
                }
            }
        }
    }
    for s in &run.final_sparsity {
        if *s > (p.p_us + p.r_us) / 100.0 + 1e-12 {
            audit.overshoot += 1;
        }
    }
}

#[test]
fn criterion_09_mask_lifecycle() {
    let r = run7();
    let mut a = Audit {
        shrunk: 0,
        overshoot: 0,
        gated_prunes: 0,
        prunes: 0,
        below_threshold: 0,
    };
    for &s in &SEEDS {
        audit(&run7_config(Algorithm::SubFedAvgUn, s, 0, 90.0), &r.runs[&("sub-fedavg-un", s)], &mut a);
    }
    let mut extra = vec![
        config(&[
            ("dataset.name", "\"synthetic\"".into()),
            ("federation.algorithm", "\"sub-fedavg-un\"".into()),
            ("federation.clients", "10".into()),
            ("federation.sample_rate", "0.5".into()),
            ("rounds", "20".into()),
            ("pruning.acc_th", "80".into()),
            ("pruning.p_us", "70".into()),
        ]),
        config(&[
            ("dataset.name", "\"synthetic\"".into()),
            ("model.name", "\"cnn-synth\"".into()),
            ("federation.algorithm", "\"sub-fedavg-hy\"".into()),
            ("federation.clients", "6".into()),
            ("federation.sample_rate", "1.0".into()),
            ("rounds", "12".into()),
            ("pruning.p_us", "60".into()),
            ("pruning.p_s", "40".into()),
        ]),
    ];
    for cfg in extra.drain(..) {
        let run = execute(&cfg);
        audit(&cfg, &run, &mut a);
    }
    let pass = a.shrunk == 0 && a.overshoot == 0 && a.gated_prunes == 0 && a.prunes > 0 && a.below_threshold > 0;
    verdict(
        9,
        pass,
        &format!(
            "(5 runs: {} prune events, {} zero-set shrinks, {} over target, {} of {} below-threshold updates pruned)",
            a.prunes, a.shrunk, a.overshoot, a.gated_prunes, a.below_threshold
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_10_determinism() {
    let r = run7();
    let mut identical = 0;
    let mut total = 0;
    for &alg in &RUN7 {
        for &s in &SEEDS {
            for threads in [1, 3] {
                let again = execute(&run7_config(alg, s, threads, 90.0));
                total += 1;
                if again.csv.as_bytes() == r.runs[&(alg.as_str(), s)].csv.as_bytes() {
                    identical += 1;
                }
            }
        }
    }
    let pass = identical == total;
    verdict(
        10,
        pass,
        &format!("({identical} of {total} reruns at 1 and 3 threads byte-identical to the all-core CSV)"),
    );
    assert!(pass);
}
