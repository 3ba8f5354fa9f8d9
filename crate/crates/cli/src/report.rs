//! CSV and JSON artifacts. Floats are written in Rust's shortest round-trip
//! form, so parsing a file back yields the exact values that were written.

use std::path::Path;

use crlnet_core::eval::EvalReport;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const LOSS_HEADER: [&str; 2] = ["epoch", "mean_loss"];

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    let line = e.position().map_or(0, |p| p.line());
    let message = e.to_string();
    match e.into_kind() {
        csv::ErrorKind::Io(source) => CliError::Io { path: path.to_path_buf(), source },
        _ => CliError::Csv { path: path.to_path_buf(), line, message },
    }
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_err(path, e))
}

fn finish(mut w: csv::Writer<std::fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(CliError::io(path))
}

type Records = (Vec<String>, Vec<(u64, csv::StringRecord)>);

/// Header plus the records of a CSV file, each record with its 1-based line.
fn read_records(path: &Path) -> Result<Records> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.iter().map(str::to_string).collect::<Vec<_>>();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        rows.push((line, rec));
    }
    Ok((header, rows))
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: u64, field: &str, what: &str) -> Result<T> {
    field.trim().parse().map_err(|_| CliError::Csv {
        path: path.to_path_buf(),
        line,
        message: format!("{what} {field:?} is not a number"),
    })
}

pub fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let mut w = writer(path)?;
    let io = |e| csv_err(path, e);
    w.write_record(LOSS_HEADER).map_err(io)?;
    for (i, loss) in losses.iter().enumerate() {
        w.write_record([(i + 1).to_string(), loss.to_string()]).map_err(io)?;
    }
    finish(w, path)
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<(usize, f64)>> {
    let (header, rows) = read_records(path)?;
    if header != LOSS_HEADER {
        return Err(CliError::Csv { path: path.to_path_buf(), line: 1, message: format!("header {header:?}, expected epoch,mean_loss") });
    }
    if rows.is_empty() {
        return Err(CliError::Csv { path: path.to_path_buf(), line: 2, message: "no data rows".into() });
    }
    rows.iter()
        .map(|(line, rec)| Ok((parse_field(path, *line, &rec[0], "epoch")?, parse_field(path, *line, &rec[1], "mean_loss")?)))
        .collect()
}

/// `episode,<strategy>...`, one row per episode; all strategies share the episodes.
pub fn write_accuracy_csv(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut w = writer(path)?;
    let io = |e| csv_err(path, e);
    let mut header = vec!["episode".to_string()];
    header.extend(reports.iter().map(|r| r.strategy.to_string()));
    w.write_record(&header).map_err(io)?;
    let n = reports.first().map_or(0, |r| r.per_episode_accuracy.len());
    for e in 0..n {
        let mut row = vec![e.to_string()];
        row.extend(reports.iter().map(|r| r.per_episode_accuracy[e].to_string()));
        w.write_record(&row).map_err(io)?;
    }
    finish(w, path)
}

/// Strategy columns of an accuracy CSV.
pub fn read_accuracy_csv(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let (header, rows) = read_records(path)?;
    if header.first().map(String::as_str) != Some("episode") || header.len() < 2 {
        return Err(CliError::Csv { path: path.to_path_buf(), line: 1, message: "expected header episode,<strategy>...".into() });
    }
    if rows.is_empty() {
        return Err(CliError::Csv { path: path.to_path_buf(), line: 2, message: "no data rows".into() });
    }
    let mut cols: Vec<(String, Vec<f64>)> = header[1..].iter().map(|h| (h.clone(), Vec::with_capacity(rows.len()))).collect();
    for (line, rec) in &rows {
        for (i, (name, col)) in cols.iter_mut().enumerate() {
            let v: f64 = parse_field(path, *line, &rec[i + 1], name)?;
            if !v.is_finite() {
                return Err(CliError::Csv { path: path.to_path_buf(), line: *line, message: format!("{name} is not finite") });
            }
            col.push(v);
        }
    }
    Ok(cols)
}

/// One embedding row.
pub struct EmbeddingRow<'a> {
    pub sample_id: &'a str,
    pub class_id: usize,
    pub pool: &'a str,
    pub features: &'a [f64],
}

pub fn write_embeddings_csv(path: &Path, rows: &[EmbeddingRow<'_>]) -> Result<()> {
    let mut w = writer(path)?;
    let io = |e| csv_err(path, e);
    let dim = rows.first().map_or(0, |r| r.features.len());
    let mut header = vec!["sample_id".to_string(), "class_id".into(), "pool".into()];
    header.extend((0..dim).map(|i| format!("f{i}")));
    w.write_record(&header).map_err(io)?;
    for r in rows {
        let mut rec = vec![r.sample_id.to_string(), r.class_id.to_string(), r.pool.to_string()];
        rec.extend(r.features.iter().map(f64::to_string));
        w.write_record(&rec).map_err(io)?;
    }
    finish(w, path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyResult {
    pub strategy: String,
    pub mean: f64,
    pub ci95: f64,
    pub n_episodes: usize,
    pub per_episode_accuracy: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub config_hash: String,
    pub checkpoint_epoch: usize,
    /// `trained`, or `untrained` when the conditional and re-representation
    /// parameters were re-initialised (backbone-prototype baseline).
    pub head: String,
    pub n_way: usize,
    pub k_shot: usize,
    pub queries_per_class: usize,
    pub episodes: usize,
    pub episode_seed: u64,
    pub results: Vec<StrategyResult>,
}

impl StrategyResult {
    pub fn from_report(r: &EvalReport) -> Self {
        Self {
            strategy: r.strategy.to_string(),
            mean: r.mean,
            ci95: r.ci95,
            n_episodes: r.n_episodes,
            per_episode_accuracy: r.per_episode_accuracy.clone(),
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(CliError::io(path))
}

pub fn read_eval_summary(path: &Path) -> Result<EvalSummary> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}
