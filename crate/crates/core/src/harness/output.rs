use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::stats::{mean, median};
use crate::error::{Error, Result};
use crate::factorize::{output_sensitivities, LoRAPair};
use crate::fl::{FLRunConfig, RoundLog, RunOutput};
use crate::linalg::{fpmx, DenseMatrix};

pub const ROUNDS_FILE: &str = "rounds.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const A_FILE: &str = "final_a.fpmx";
pub const B_FILE: &str = "final_b.fpmx";
pub const BASE_FILE: &str = "base.fpmx";

pub const ROUNDS_HEADER: [&str; 8] = [
    "round",
    "sampled",
    "accuracy",
    "cumulative_bits",
    "sigma",
    "deficient",
    "refactorized",
    "skipped_steps",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub protocol: String,
    pub seed: u64,
    pub rounds: usize,
    pub final_accuracy: f64,
    pub base_accuracy: f64,
    pub requested_epsilon: Option<f64>,
    /// ε certified by the accountant for `sigma`; absent without noise.
    pub certified_epsilon: Option<f64>,
    pub delta: f64,
    pub sigma: f64,
    pub clip: Option<f64>,
    pub accounting_rate: f64,
    pub adjacency: String,
    pub tight_sensitivity: bool,
    /// Noisy matrices released per round; the accountant counts one step.
    pub releases_per_round: usize,
    pub sampling_note: String,
    pub output_perturbation_sensitivities: (f64, f64),
    pub bits_per_value: u32,
    pub total_bits: u64,
    pub mean_aggregation_seconds: f64,
    pub median_aggregation_seconds: f64,
    pub learning_rate: f64,
}

impl RunSummary {
    pub fn new(config: &FLRunConfig, seed: u64, out: &RunOutput) -> Self {
        let times = out.aggregation_times();
        let releases = match config.protocol.name {
            crate::fl::Protocol::FfaLoRA => 1,
            _ => 2,
        };
        Self {
            protocol: config.protocol.name.to_string(),
            seed,
            rounds: out.logs.len(),
            final_accuracy: out.final_accuracy,
            base_accuracy: out.base_accuracy,
            requested_epsilon: config.privacy.epsilon,
            certified_epsilon: out.privacy.certified_epsilon,
            delta: out.privacy.delta,
            sigma: out.privacy.sigma,
            clip: out.privacy.clip,
            accounting_rate: out.privacy.accounting_rate,
            adjacency: format!("{:?}", config.privacy.adjacency).to_lowercase(),
            tight_sensitivity: config.privacy.tight_sensitivity,
            releases_per_round: if out.privacy.sigma > 0.0 { releases } else { 0 },
            sampling_note: format!(
                "fixed-size sampling of {} of {} clients per round, accounted as Poisson at rate {}",
                config.clients_per_round(),
                config.task.clients,
                out.privacy.accounting_rate
            ),
            output_perturbation_sensitivities: output_sensitivities(
                config.protocol.r,
                config.privacy.clip.unwrap_or(1.0),
            ),
            bits_per_value: config.bits_per_value,
            total_bits: out.total_bits(),
            mean_aggregation_seconds: mean(&times),
            median_aggregation_seconds: median(&times),
            learning_rate: config.training.eta,
        }
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn sampled_field(ids: &[usize]) -> String {
    ids.iter().map(ToString::to_string).collect::<Vec<_>>().join(";")
}

/// `rounds.csv`: every logged quantity except wall time, so identical seeds
/// give identical bytes.
pub fn rounds_csv(logs: &[RoundLog]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(ROUNDS_HEADER)?;
    for l in logs {
        w.write_record([
            l.round.to_string(),
            sampled_field(&l.sampled),
            format!("{:?}", l.accuracy),
            l.cumulative_bits.to_string(),
            format!("{:?}", l.sigma),
            l.deficient.to_string(),
            l.refactorized.to_string(),
            l.skipped_steps.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

pub fn timing_csv(logs: &[RoundLog]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["round", "refactorized", "aggregation_seconds"])?;
    for l in logs {
        w.write_record([
            l.round.to_string(),
            l.refactorized.to_string(),
            format!("{:e}", l.aggregation_seconds),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

/// Writes every artifact of a finished run into `dir`.
pub fn write_run(dir: &Path, config: &FLRunConfig, seed: u64, out: &RunOutput) -> Result<RunSummary> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let summary = RunSummary::new(config, seed, out);
    let mut cfg = config.clone();
    cfg.task.seed = seed;
    write_file(&dir.join(CONFIG_FILE), cfg.to_toml()?)?;
    write_file(&dir.join(ROUNDS_FILE), rounds_csv(&out.logs)?)?;
    write_file(&dir.join(TIMING_FILE), timing_csv(&out.logs)?)?;
    write_file(&dir.join(SUMMARY_FILE), serde_json::to_vec_pretty(&summary)?)?;
    fpmx::save(out.pair.a(), dir.join(A_FILE))?;
    fpmx::save(out.pair.b(), dir.join(B_FILE))?;
    fpmx::save(&out.base, dir.join(BASE_FILE))?;
    Ok(summary)
}

/// A released model read back from a run directory.
#[derive(Debug, Clone)]
pub struct SavedRun {
    pub dir: PathBuf,
    pub config: FLRunConfig,
    pub summary: RunSummary,
    pub base: DenseMatrix,
    pub pair: LoRAPair,
}

impl SavedRun {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read_to_string(&p).map_err(|e| Error::io(p, e))
        };
        let config = FLRunConfig::from_toml(&read(CONFIG_FILE)?)?;
        let summary: RunSummary = serde_json::from_str(&read(SUMMARY_FILE)?)?;
        let pair = LoRAPair::new(fpmx::load(dir.join(A_FILE))?, fpmx::load(dir.join(B_FILE))?)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            config,
            summary,
            base: fpmx::load(dir.join(BASE_FILE))?,
            pair,
        })
    }

    pub fn weight(&self) -> DenseMatrix {
        crate::fl::merge(&self.base, &self.pair)
    }
}
