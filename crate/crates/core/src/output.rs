//! Result files for offline plotting.
//!
//! `epochs.csv` has one row per (replication, epoch, mechanism):
//! `replication,epoch,mechanism,requesters,providers,nsw,esw,realized_sw,
//! platform_utility,avg_requester_utility,avg_provider_utility,
//! avg_expected_requester_utility,avg_expected_provider_utility,tasks_served`.
//!
//! `summary.csv` is long format, one row per (epoch, mechanism, metric):
//! `epoch,mechanism,metric,mean,half_width,replications`.
//!
//! `run.json` holds the resolved config, master seed and crate version.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::config::ExperimentConfig;
use crate::sim::{EpochTrace, MechanismKind, SummaryRow};

pub const EPOCHS_FILE: &str = "epochs.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const RUN_FILE: &str = "run.json";

pub const EPOCHS_HEADER: [&str; 14] = [
    "replication",
    "epoch",
    "mechanism",
    "requesters",
    "providers",
    "nsw",
    "esw",
    "realized_sw",
    "platform_utility",
    "avg_requester_utility",
    "avg_provider_utility",
    "avg_expected_requester_utility",
    "avg_expected_provider_utility",
    "tasks_served",
];

pub const SUMMARY_HEADER: [&str; 6] = [
    "epoch",
    "mechanism",
    "metric",
    "mean",
    "half_width",
    "replications",
];

#[derive(Debug, Error)]
#[error("{path}: {source}")]
pub struct OutputError {
    pub path: PathBuf,
    #[source]
    pub source: std::io::Error,
}

#[derive(Serialize)]
struct EpochRow {
    replication: usize,
    epoch: usize,
    mechanism: MechanismKind,
    requesters: usize,
    providers: usize,
    nsw: f64,
    esw: f64,
    realized_sw: f64,
    platform_utility: f64,
    avg_requester_utility: f64,
    avg_provider_utility: f64,
    avg_expected_requester_utility: f64,
    avg_expected_provider_utility: f64,
    tasks_served: usize,
}

#[derive(Serialize)]
struct SummaryLine<'a> {
    epoch: usize,
    mechanism: MechanismKind,
    metric: &'a str,
    mean: f64,
    half_width: f64,
    replications: usize,
}

#[derive(Serialize)]
struct RunInfo<'a> {
    version: &'a str,
    master_seed: u64,
    config: &'a ExperimentConfig,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> OutputError + '_ {
    move |source| OutputError {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> OutputError + '_ {
    move |e| OutputError {
        path: path.to_path_buf(),
        source: e.into(),
    }
}

pub fn write_epochs<W: Write>(out: W, traces: &[Vec<EpochTrace>]) -> csv::Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record(EPOCHS_HEADER)?;
    for (replication, rep) in traces.iter().enumerate() {
        for trace in rep {
            for r in &trace.records {
                w.serialize(EpochRow {
                    replication,
                    epoch: trace.epoch,
                    mechanism: r.mechanism,
                    requesters: r.requesters,
                    providers: r.providers,
                    nsw: r.nsw,
                    esw: r.esw,
                    realized_sw: r.realized_sw,
                    platform_utility: r.platform_utility,
                    avg_requester_utility: r.avg_requester_utility,
                    avg_provider_utility: r.avg_provider_utility,
                    avg_expected_requester_utility: r.avg_expected_requester_utility,
                    avg_expected_provider_utility: r.avg_expected_provider_utility,
                    tasks_served: r.tasks_served,
                })?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary<W: Write>(out: W, summary: &[SummaryRow]) -> csv::Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record(SUMMARY_HEADER)?;
    for row in summary {
        w.serialize(SummaryLine {
            epoch: row.epoch,
            mechanism: row.mechanism,
            metric: row.metric.name(),
            mean: row.mean,
            half_width: row.half_width,
            replications: row.replications,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the three result files into `dir`, creating it if needed.
pub fn emit_results(
    dir: &Path,
    config: &ExperimentConfig,
    traces: &[Vec<EpochTrace>],
    summary: &[SummaryRow],
) -> Result<(), OutputError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;

    let path = dir.join(EPOCHS_FILE);
    let file = File::create(&path).map_err(io_err(&path))?;
    write_epochs(BufWriter::new(file), traces).map_err(csv_err(&path))?;

    let path = dir.join(SUMMARY_FILE);
    let file = File::create(&path).map_err(io_err(&path))?;
    write_summary(BufWriter::new(file), summary).map_err(csv_err(&path))?;

    let path = dir.join(RUN_FILE);
    let info = RunInfo {
        version: env!("CARGO_PKG_VERSION"),
        master_seed: config.seed,
        config,
    };
    let mut text = serde_json::to_string_pretty(&info).map_err(|e| OutputError {
        path: path.clone(),
        source: e.into(),
    })?;
    text.push('\n');
    std::fs::write(&path, text).map_err(io_err(&path))?;
    Ok(())
}
