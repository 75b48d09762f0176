use std::path::PathBuf;

use serde::Serialize;

use super::output::write_run;
use super::presets::CLIP;
use super::report::first_crossing;
use super::stats::{mean, std_dev, stratified_median};
use crate::error::{Error, Result};
use crate::fl::{run_experiment, FLRunConfig, Protocol, RoundLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Epsilon,
    RefactorFrequency,
    Protocol,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "epsilon" => Ok(SweepAxis::Epsilon),
            "refactor_frequency" | "frequency" => Ok(SweepAxis::RefactorFrequency),
            "protocol" => Ok(SweepAxis::Protocol),
            other => Err(Error::Config(format!(
                "unknown sweep axis {other:?} (expected epsilon, refactor_frequency, protocol)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum SweepValue {
    /// `None` runs without noise or clipping.
    Epsilon(Option<f64>),
    Frequency(usize),
    Protocol(Protocol),
}

impl SweepValue {
    pub fn parse(axis: SweepAxis, text: &str) -> Result<Self> {
        let bad = |e: &dyn std::fmt::Display| Error::Config(format!("bad {axis:?} value {text:?}: {e}"));
        Ok(match axis {
            SweepAxis::Epsilon if matches!(text, "none" | "nonprivate" | "inf") => SweepValue::Epsilon(None),
            SweepAxis::Epsilon => SweepValue::Epsilon(Some(text.parse().map_err(|e| bad(&e))?)),
            SweepAxis::RefactorFrequency => SweepValue::Frequency(text.parse().map_err(|e| bad(&e))?),
            SweepAxis::Protocol => SweepValue::Protocol(text.parse()?),
        })
    }

    pub fn label(&self) -> String {
        match self {
            SweepValue::Epsilon(None) => "nonprivate".into(),
            SweepValue::Epsilon(Some(e)) => format!("eps{e}"),
            SweepValue::Frequency(f) => format!("freq{f}"),
            SweepValue::Protocol(p) => p.to_string(),
        }
    }

    pub fn apply(&self, config: &mut FLRunConfig) {
        match *self {
            SweepValue::Epsilon(None) => {
                config.privacy.epsilon = None;
                config.privacy.sigma = None;
                config.privacy.clip = None;
            }
            SweepValue::Epsilon(Some(e)) => {
                config.privacy.epsilon = Some(e);
                config.privacy.sigma = None;
                config.privacy.clip.get_or_insert(CLIP);
            }
            SweepValue::Frequency(f) => config.protocol.refactor_frequency = f,
            SweepValue::Protocol(p) => config.protocol.name = p,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SweepOptions {
    /// Accuracy level for the bits-to-target column.
    pub target_accuracy: Option<f64>,
    /// Also run FedLoRA on every seed to measure relative overhead.
    pub baseline: bool,
    /// Write every run's artifacts under `<root>/<label>/seed<k>`.
    pub out_root: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRun {
    pub label: String,
    pub seed: u64,
    pub final_accuracy: f64,
    pub mean_aggregation_seconds: f64,
    /// Per-round aggregation cost from stratified medians.
    pub robust_aggregation_seconds: f64,
    pub total_bits: u64,
    pub bits_to_target: Option<u64>,
    pub sigma: f64,
    pub certified_epsilon: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepCell {
    pub label: String,
    pub value: SweepValue,
    pub runs: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_aggregation_seconds: f64,
    pub robust_aggregation_seconds: f64,
    /// Relative aggregation overhead against the FedLoRA baseline.
    pub overhead: Option<f64>,
    pub mean_bits_to_target: Option<f64>,
    pub reached_target: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepFailure {
    pub label: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub runs: Vec<SweepRun>,
    pub cells: Vec<SweepCell>,
    pub baseline: Vec<SweepRun>,
    pub failures: Vec<SweepFailure>,
}

/// Aggregation cost per round, taking medians separately over refactorizing
/// and plain rounds.
pub fn robust_aggregation_seconds(logs: &[RoundLog]) -> f64 {
    let (heavy, light): (Vec<&RoundLog>, Vec<&RoundLog>) = logs.iter().partition(|l| l.refactorized);
    let heavy: Vec<f64> = heavy.iter().map(|l| l.aggregation_seconds).collect();
    let light: Vec<f64> = light.iter().map(|l| l.aggregation_seconds).collect();
    stratified_median(&[&heavy, &light])
}

fn execute(config: &FLRunConfig, label: &str, seed: u64, options: &SweepOptions) -> Result<SweepRun> {
    let mut cfg = config.clone();
    cfg.task.seed = seed;
    let (_, out) = run_experiment(&cfg)?;
    if let Some(root) = &options.out_root {
        write_run(&root.join(label).join(format!("seed{seed}")), &cfg, seed, &out)?;
    }
    let times = out.aggregation_times();
    Ok(SweepRun {
        label: label.to_string(),
        seed,
        final_accuracy: out.final_accuracy,
        mean_aggregation_seconds: mean(&times),
        robust_aggregation_seconds: robust_aggregation_seconds(&out.logs),
        total_bits: out.total_bits(),
        bits_to_target: options.target_accuracy.and_then(|t| {
            first_crossing(out.logs.iter().map(|l| (l.round, l.accuracy, l.cumulative_bits)), t).map(|c| c.bits)
        }),
        sigma: out.privacy.sigma,
        certified_epsilon: out.privacy.certified_epsilon,
    })
}

/// Runs every `(value, seed)` pair sequentially, so aggregation timings are
/// not distorted by concurrent runs. Failed runs are recorded and skipped.
pub fn sweep(base: &FLRunConfig, values: &[SweepValue], seeds: &[u64], options: &SweepOptions) -> SweepReport {
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    let mut record = |cfg: &FLRunConfig, label: String, seed: u64, sink: &mut Vec<SweepRun>| match execute(
        cfg, &label, seed, options,
    ) {
        Ok(r) => sink.push(r),
        Err(e) => failures.push(SweepFailure {
            label,
            seed,
            error: e.to_string(),
        }),
    };

    let mut baseline = Vec::new();
    if options.baseline {
        let mut cfg = base.clone();
        cfg.protocol.name = Protocol::FedLoRA;
        for &seed in seeds {
            record(&cfg, "baseline".into(), seed, &mut baseline);
        }
    }
    for value in values {
        let mut cfg = base.clone();
        value.apply(&mut cfg);
        for &seed in seeds {
            record(&cfg, value.label(), seed, &mut runs);
        }
    }

    let base_time = mean(
        &baseline
            .iter()
            .map(|r| r.robust_aggregation_seconds)
            .collect::<Vec<_>>(),
    );
    let cells = values
        .iter()
        .map(|value| {
            let label = value.label();
            let mine: Vec<&SweepRun> = runs.iter().filter(|r| r.label == label).collect();
            let acc: Vec<f64> = mine.iter().map(|r| r.final_accuracy).collect();
            let robust = mean(&mine.iter().map(|r| r.robust_aggregation_seconds).collect::<Vec<_>>());
            let reached: Vec<f64> = mine.iter().filter_map(|r| r.bits_to_target).map(|b| b as f64).collect();
            SweepCell {
                label: label.clone(),
                value: *value,
                runs: mine.len(),
                mean_accuracy: mean(&acc),
                std_accuracy: std_dev(&acc),
                mean_aggregation_seconds: mean(&mine.iter().map(|r| r.mean_aggregation_seconds).collect::<Vec<_>>()),
                robust_aggregation_seconds: robust,
                overhead: (!baseline.is_empty() && base_time > 0.0).then(|| robust / base_time - 1.0),
                mean_bits_to_target: (!reached.is_empty()).then(|| mean(&reached)),
                reached_target: reached.len(),
            }
        })
        .collect();
    SweepReport {
        runs,
        cells,
        baseline,
        failures,
    }
}

pub const SWEEP_HEADER: [&str; 10] = [
    "value",
    "runs",
    "mean_accuracy",
    "std_accuracy",
    "mean_aggregation_seconds",
    "robust_aggregation_seconds",
    "overhead",
    "mean_bits_to_target",
    "reached_target",
    "failures",
];

impl SweepReport {
    pub fn to_csv(&self) -> Result<String> {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:?}"));
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(SWEEP_HEADER)?;
        for c in &self.cells {
            let failed = self.failures.iter().filter(|f| f.label == c.label).count();
            w.write_record([
                c.label.clone(),
                c.runs.to_string(),
                format!("{:?}", c.mean_accuracy),
                format!("{:?}", c.std_accuracy),
                format!("{:e}", c.mean_aggregation_seconds),
                format!("{:e}", c.robust_aggregation_seconds),
                opt(c.overhead),
                opt(c.mean_bits_to_target),
                c.reached_target.to_string(),
                failed.to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }
}
