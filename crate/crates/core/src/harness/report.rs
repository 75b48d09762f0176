use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::output::{RunSummary, ROUNDS_FILE, SUMMARY_FILE};
use crate::error::{Error, Result};

pub const REPORT_HEADER: [&str; 9] = [
    "protocol",
    "epsilon",
    "seed",
    "round",
    "accuracy",
    "cumulative_bits",
    "sigma",
    "refactorized",
    "run",
];

/// One row of `rounds.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRow {
    pub round: usize,
    pub sampled: String,
    pub accuracy: f64,
    pub cumulative_bits: u64,
    pub sigma: f64,
    pub deficient: usize,
    pub refactorized: bool,
    pub skipped_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub protocol: String,
    pub epsilon: Option<f64>,
    pub seed: u64,
    pub round: usize,
    pub accuracy: f64,
    pub cumulative_bits: u64,
    pub sigma: f64,
    pub refactorized: bool,
    pub run: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub summaries: Vec<RunSummary>,
    pub warnings: Vec<String>,
}

/// First round whose accuracy reaches `target`, with the bits sent by then.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Crossing {
    pub round: usize,
    pub bits: u64,
}

pub fn first_crossing(series: impl IntoIterator<Item = (usize, f64, u64)>, target: f64) -> Option<Crossing> {
    series
        .into_iter()
        .find(|&(_, acc, _)| acc >= target)
        .map(|(round, _, bits)| Crossing { round, bits })
}

pub fn read_rounds(path: &Path) -> Result<Vec<RoundRow>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    csv::Reader::from_reader(file)
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(Error::from)
}

fn load_dir(dir: &Path) -> Result<(RunSummary, Vec<RoundRow>)> {
    let sp = dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
    let summary: RunSummary = serde_json::from_str(&text)?;
    Ok((summary, read_rounds(&dir.join(ROUNDS_FILE))?))
}

/// Merges run directories into one long table. Unreadable directories are
/// skipped with a warning.
pub fn report(dirs: &[PathBuf]) -> Report {
    let mut out = Report::default();
    for dir in dirs {
        match load_dir(dir) {
            Ok((summary, rounds)) => {
                let run = dir.display().to_string();
                out.rows.extend(rounds.into_iter().map(|r| ReportRow {
                    protocol: summary.protocol.clone(),
                    epsilon: summary.requested_epsilon,
                    seed: summary.seed,
                    round: r.round,
                    accuracy: r.accuracy,
                    cumulative_bits: r.cumulative_bits,
                    sigma: r.sigma,
                    refactorized: r.refactorized,
                    run: run.clone(),
                }));
                out.summaries.push(summary);
            }
            Err(e) => out.warnings.push(format!("skipping {}: {e}", dir.display())),
        }
    }
    out
}

impl Report {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(REPORT_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.protocol.clone(),
                r.epsilon.map_or(String::new(), |e| format!("{e:?}")),
                r.seed.to_string(),
                r.round.to_string(),
                format!("{:?}", r.accuracy),
                r.cumulative_bits.to_string(),
                format!("{:?}", r.sigma),
                r.refactorized.to_string(),
                r.run.clone(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
