//! Run artifacts: the round stream, CSV summary, cost ledger, per-client
//! table and plot data, written atomically into a fresh run directory.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::RoundReport;
use crate::metrics::CostLedger;

/// Header of `summary.csv`, in order.
pub const SUMMARY_COLUMNS: [&str; 7] = [
    "round",
    "algorithm",
    "mean_accuracy",
    "mean_sparsity_unstructured",
    "mean_sparsity_structured",
    "cumulative_bytes",
    "cumulative_conv_flops",
];

pub const SUMMARY_FILE: &str = "summary.csv";
pub const ROUNDS_FILE: &str = "rounds.jsonl";
pub const LEDGER_FILE: &str = "cost_ledger.json";
pub const CLIENTS_FILE: &str = "client_accuracy.csv";
pub const ACC_ROUND_FILE: &str = "accuracy_vs_round.csv";
pub const ACC_SPARSITY_FILE: &str = "accuracy_vs_sparsity.csv";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub round: usize,
    pub algorithm: String,
    pub mean_accuracy: f64,
    pub mean_sparsity_unstructured: f64,
    pub mean_sparsity_structured: f64,
    pub cumulative_bytes: f64,
    pub cumulative_conv_flops: u64,
}

impl SummaryRow {
    pub fn from_report(r: &RoundReport) -> Self {
        Self {
            round: r.round,
            algorithm: r.algorithm.to_string(),
            mean_accuracy: r.mean_accuracy,
            mean_sparsity_unstructured: r.mean_sparsity_unstructured,
            mean_sparsity_structured: r.mean_sparsity_structured,
            cumulative_bytes: r.cumulative_bytes(),
            cumulative_conv_flops: r.cumulative_conv_flops,
        }
    }
}

fn csv_err(context: &str, e: csv::Error) -> Error {
    Error::config(context, e.to_string())
}

/// Leading `# config: {...}` line, or nothing.
fn echo_line(echo: Option<&serde_json::Value>) -> String {
    echo.map(|v| format!("# config: {v}\n")).unwrap_or_default()
}

fn to_csv<T: Serialize>(rows: &[T], echo: Option<&serde_json::Value>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| csv_err("csv", e))?;
    }
    let body = w.into_inner().map_err(|e| Error::config("csv", e.to_string()))?;
    Ok(echo_line(echo) + &String::from_utf8_lossy(&body))
}

pub fn summary_csv(reports: &[RoundReport], echo: Option<&serde_json::Value>) -> Result<String> {
    let rows: Vec<SummaryRow> = reports.iter().map(SummaryRow::from_report).collect();
    if rows.is_empty() {
        return Ok(echo_line(echo) + &SUMMARY_COLUMNS.join(",") + "\n");
    }
    to_csv(&rows, echo)
}

/// Parses a summary written by [`summary_csv`], skipping `#` lines.
pub fn parse_summary(text: &str) -> Result<Vec<SummaryRow>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let headers = r.headers().map_err(|e| csv_err("summary", e))?.clone();
    if headers.iter().ne(SUMMARY_COLUMNS) {
        return Err(Error::config("summary", format!("unexpected columns {:?}", headers)));
    }
    r.deserialize().map(|row| row.map_err(|e| csv_err("summary", e))).collect()
}

/// Reads a summary from a CSV file or a run directory containing one.
pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let file = if path.is_dir() { path.join(SUMMARY_FILE) } else { path.to_path_buf() };
    if !file.exists() {
        return Err(Error::config(file.display().to_string(), "no such summary file"));
    }
    let text = std::fs::read_to_string(&file).map_err(|e| Error::io(format!("reading {}", file.display()), e))?;
    parse_summary(&text).map_err(|e| match e {
        Error::Config { reason, .. } => Error::config(file.display().to_string(), reason),
        other => other,
    })
}

fn encode<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|source| Error::Json {
        context: "serialising round stream".into(),
        source,
    })
}

/// The round stream: a config line followed by one report per line.
pub fn rounds_jsonl(reports: &[RoundReport], echo: &serde_json::Value) -> Result<String> {
    let mut out = encode(&serde_json::json!({ "config": echo }))? + "\n";
    for r in reports {
        out += &encode(r)?;
        out.push('\n');
    }
    Ok(out)
}

pub fn ledger_json(ledger: &CostLedger, echo: &serde_json::Value) -> Result<String> {
    let v = serde_json::json!({
        "config": echo,
        "uplink_bits": ledger.uplink_bits(),
        "downlink_bits": ledger.downlink_bits(),
        "total_bits": ledger.total_bits(),
        "total_bytes": ledger.total_bytes(),
        "per_client_bits": ledger.per_client_bits(),
        "per_round_bits": ledger.per_round_bits(),
        "entries": ledger.entries(),
    });
    serde_json::to_string_pretty(&v).map_err(|source| Error::Json {
        context: "serialising cost ledger".into(),
        source,
    })
}

#[derive(Serialize)]
struct ClientRow {
    client: usize,
    accuracy: f64,
    sparsity: f64,
    sparsity_unstructured: f64,
    sparsity_structured: f64,
    level_unstructured: f64,
    level_structured: f64,
    uplink_bits: u64,
}

/// Final-round accuracy and sparsity per client.
pub fn client_table_csv(reports: &[RoundReport], echo: Option<&serde_json::Value>) -> Result<String> {
    let last = reports.last().ok_or(Error::Empty("round reports"))?;
    let mut uplink = std::collections::BTreeMap::<usize, u64>::new();
    for r in reports {
        for c in &r.clients {
            *uplink.entry(c.client).or_default() += c.uplink_bits;
        }
    }
    let rows: Vec<ClientRow> = last
        .clients
        .iter()
        .map(|c| ClientRow {
            client: c.client,
            accuracy: c.accuracy,
            sparsity: c.sparsity,
            sparsity_unstructured: c.sparsity_unstructured,
            sparsity_structured: c.sparsity_structured,
            level_unstructured: c.level_unstructured,
            level_structured: c.level_structured,
            uplink_bits: uplink[&c.client],
        })
        .collect();
    to_csv(&rows, echo)
}

#[derive(Serialize)]
struct RoundAccuracyRow {
    round: usize,
    mean_accuracy: f64,
    min_accuracy: f64,
    max_accuracy: f64,
    cumulative_bytes: f64,
}

#[derive(Serialize)]
struct SparsityAccuracyRow {
    round: usize,
    mean_sparsity: f64,
    mean_sparsity_unstructured: f64,
    mean_sparsity_structured: f64,
    mean_accuracy: f64,
}

pub fn accuracy_vs_round_csv(reports: &[RoundReport], echo: Option<&serde_json::Value>) -> Result<String> {
    let rows: Vec<RoundAccuracyRow> = reports
        .iter()
        .map(|r| {
            let accs = r.clients.iter().map(|c| c.accuracy);
            RoundAccuracyRow {
                round: r.round,
                mean_accuracy: r.mean_accuracy,
                min_accuracy: accs.clone().fold(f64::INFINITY, f64::min),
                max_accuracy: accs.fold(f64::NEG_INFINITY, f64::max),
                cumulative_bytes: r.cumulative_bytes(),
            }
        })
        .collect();
    to_csv(&rows, echo)
}

pub fn accuracy_vs_sparsity_csv(reports: &[RoundReport], echo: Option<&serde_json::Value>) -> Result<String> {
    let rows: Vec<SparsityAccuracyRow> = reports
        .iter()
        .map(|r| SparsityAccuracyRow {
            round: r.round,
            mean_sparsity: r.mean_sparsity(),
            mean_sparsity_unstructured: r.mean_sparsity_unstructured,
            mean_sparsity_structured: r.mean_sparsity_structured,
            mean_accuracy: r.mean_accuracy,
        })
        .collect();
    to_csv(&rows, echo)
}

/// Creates `parent/stem-NNN` with the first free index.
pub fn create_run_dir(parent: &Path, stem: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(parent).map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
    for n in 1..=9999u32 {
        let dir = parent.join(format!("{stem}-{n:03}"));
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(format!("creating {}", dir.display()), e)),
        }
    }
    Err(Error::Overflow("run directory index"))
}

/// Writes `dir/name` through a temporary file and a rename, so the file is
/// either complete or absent.
pub fn write_atomic(dir: &Path, name: &str, contents: &[u8]) -> Result<PathBuf> {
    let target = dir.join(name);
    let tmp = dir.join(format!(".{name}.tmp"));
    let ctx = |what: &str| format!("{what} {}", tmp.display());
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(ctx("creating"), e))?;
    f.write_all(contents).map_err(|e| Error::io(ctx("writing"), e))?;
    f.sync_all().map_err(|e| Error::io(ctx("syncing"), e))?;
    drop(f);
    std::fs::rename(&tmp, &target).map_err(|e| Error::io(format!("renaming to {}", target.display()), e))?;
    Ok(target)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub label: String,
    pub algorithm: String,
    pub rounds: usize,
    pub final_accuracy: f64,
    pub sparsity_unstructured: f64,
    pub sparsity_structured: f64,
    pub cumulative_bytes: f64,
    pub cumulative_conv_flops: u64,
    pub accuracy_delta: f64,
    pub bytes_delta: f64,
    /// Baseline conv FLOPs divided by this run's.
    pub flop_reduction: Option<f64>,
}

/// Side-by-side final-round figures; deltas are against the first run.
pub fn compare_runs(paths: &[PathBuf]) -> Result<Vec<ComparisonRow>> {
    if paths.len() < 2 {
        return Err(Error::config("compare", "need at least two summaries"));
    }
    let mut finals = Vec::with_capacity(paths.len());
    for p in paths {
        let rows = read_summary(p)?;
        let last = rows.last().cloned().ok_or(Error::Empty("summary rows"))?;
        finals.push((p.display().to_string(), last));
    }
    let base = finals[0].1.clone();
    Ok(finals
        .into_iter()
        .map(|(label, r)| ComparisonRow {
            label,
            algorithm: r.algorithm.clone(),
            rounds: r.round,
            final_accuracy: r.mean_accuracy,
            sparsity_unstructured: r.mean_sparsity_unstructured,
            sparsity_structured: r.mean_sparsity_structured,
            cumulative_bytes: r.cumulative_bytes,
            cumulative_conv_flops: r.cumulative_conv_flops,
            accuracy_delta: r.mean_accuracy - base.mean_accuracy,
            bytes_delta: r.cumulative_bytes - base.cumulative_bytes,
            flop_reduction: (r.cumulative_conv_flops > 0)
                .then(|| base.cumulative_conv_flops as f64 / r.cumulative_conv_flops as f64),
        })
        .collect())
}

pub fn render_comparison(rows: &[ComparisonRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<40} {:<14} {:>6} {:>9} {:>8} {:>8} {:>14} {:>9} {:>14} {:>8}",
        "run", "algorithm", "rounds", "accuracy", "sp_us", "sp_s", "bytes", "d_acc", "d_bytes", "flops_x"
    );
    for r in rows {
        let flops = r.flop_reduction.map(|f| format!("{f:.3}")).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            out,
            "{:<40} {:<14} {:>6} {:>9.2} {:>8.4} {:>8.4} {:>14.0} {:>+9.2} {:>+14.0} {:>8}",
            r.label,
            r.algorithm,
            r.rounds,
            r.final_accuracy,
            r.sparsity_unstructured,
            r.sparsity_structured,
            r.cumulative_bytes,
            r.accuracy_delta,
            r.bytes_delta,
            flops
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::federation::Algorithm;

    fn report(round: usize, acc: f64, bits: u64) -> RoundReport {
        RoundReport {
            round,
            algorithm: Algorithm::FedAvg,
            selected: vec![],
            clients: vec![],
            mean_accuracy: acc,
            mean_sparsity_unstructured: 0.25,
            mean_sparsity_structured: 0.0,
            round_bits: bits,
            cumulative_bits: bits * round as u64,
            round_conv_flops: 10,
            cumulative_conv_flops: 10 * round as u64,
        }
    }

    #[test]
    fn summary_header_and_round_trip() {
        let reports = [report(1, 50.5, 64), report(2, 61.25, 64)];
        let echo = serde_json::json!({"seed": 3});
        let text = summary_csv(&reports, Some(&echo)).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "# config: {\"seed\":3}");
        assert_eq!(lines.next().unwrap(), SUMMARY_COLUMNS.join(","));
        let rows = parse_summary(&text).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].cumulative_bytes, 16.0);
        assert_eq!(rows[1].mean_accuracy, 61.25);
    }

    #[test]
    fn atomic_write_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        write_atomic(dir.path(), "a.txt", b"hello").unwrap();
        let names: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names, vec![std::ffi::OsString::from("a.txt")]);
    }

    #[test]
    fn run_dirs_are_versioned() {
        let dir = tempfile::tempdir().unwrap();
        let a = create_run_dir(dir.path(), "x").unwrap();
        let b = create_run_dir(dir.path(), "x").unwrap();
        assert_ne!(a, b);
        assert!(b.ends_with("x-002"));
    }

    #[test]
    fn compare_self_has_zero_deltas() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_atomic(dir.path(), SUMMARY_FILE, summary_csv(&[report(1, 70.0, 8)], None).unwrap().as_bytes())
            .unwrap();
        let rows = compare_runs(&[p.clone(), p]).unwrap();
        assert_eq!(rows[1].accuracy_delta, 0.0);
        assert_eq!(rows[1].bytes_delta, 0.0);
        assert_eq!(rows[1].flop_reduction, Some(1.0));
    }

    #[test]
    fn compare_missing_file() {
        let e = compare_runs(&[PathBuf::from("/nonexistent/a.csv"), PathBuf::from("/nonexistent/b.csv")]).unwrap_err();
        assert!(e.to_string().contains("/nonexistent/a.csv"), "{e}");
    }

    #[test]
    fn compare_needs_two() {
        assert!(compare_runs(&[PathBuf::from("a")]).is_err());
    }
}
