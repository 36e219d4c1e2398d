//! Summary export: pretty JSON and long-format CSV with columns
//! `n, metric, value, se, scenario_hash`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::experiment::{CheckpointSummary, ExperimentSummary, Metric};
use crate::error::{CarError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
}

impl std::str::FromStr for Format {
    type Err = CarError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            other => Err(CarError::param("format", format!("unknown format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub n: usize,
    pub metric: String,
    pub value: f64,
    pub se: f64,
    pub scenario_hash: String,
}

pub fn csv_rows(summary: &ExperimentSummary) -> Vec<CsvRow> {
    summary
        .checkpoints
        .iter()
        .flat_map(|c| {
            c.metrics.iter().map(move |m| CsvRow {
                n: c.n,
                metric: m.name.clone(),
                value: m.value,
                se: m.se,
                scenario_hash: summary.scenario_hash.clone(),
            })
        })
        .collect()
}

pub fn write_summary<W: Write>(summary: &ExperimentSummary, format: Format, out: W) -> Result<()> {
    match format {
        Format::Json => {
            let mut out = out;
            serde_json::to_writer_pretty(&mut out, summary)?;
            out.write_all(b"\n")?;
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(out);
            for row in csv_rows(summary) {
                w.serialize(row)?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

pub fn read_summary_json<R: Read>(input: R) -> Result<ExperimentSummary> {
    Ok(serde_json::from_reader(input)?)
}

pub fn read_csv_rows<R: Read>(input: R) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_reader(input);
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Rebuilds the checkpoint table from CSV rows, in row order.
pub fn checkpoints_from_rows(rows: &[CsvRow]) -> Vec<CheckpointSummary> {
    let mut out: Vec<CheckpointSummary> = Vec::new();
    for row in rows {
        let metric = Metric {
            name: row.metric.clone(),
            value: row.value,
            se: row.se,
        };
        match out.last_mut() {
            Some(c) if c.n == row.n => c.metrics.push(metric),
            _ => out.push(CheckpointSummary {
                n: row.n,
                metrics: vec![metric],
            }),
        }
    }
    out
}

/// Writes `<stem>.json` and `<stem>.csv` under `dir`.
pub fn export_summary(summary: &ExperimentSummary, dir: &Path, stem: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (format, ext) in [(Format::Json, "json"), (Format::Csv, "csv")] {
        let file = std::fs::File::create(dir.join(format!("{stem}.{ext}")))?;
        write_summary(summary, format, std::io::BufWriter::new(file))?;
    }
    Ok(())
}

/// Loads every `*.json` summary in `dir`, sorted by file name.
pub fn load_summaries(dir: &Path) -> Result<Vec<ExperimentSummary>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| read_summary_json(std::fs::File::open(p)?))
        .collect()
}
