use serde::{Deserialize, Serialize};

use super::client::ClientState;
use super::config::{FLRunConfig, Protocol, ResolvedPrivacy};
use super::model::{accuracy, merge, Sample};
use super::server::{fedlora_round, fedpower_round, ffalora_round, RoundContext, ServerPrivacy};
use super::task::{Dataset, SyntheticTask};
use crate::error::{Error, Result};
use crate::factorize::LoRAPair;
use crate::linalg::{gaussian_matrix, DenseMatrix, RngStream};

const RUN_DOMAIN: u64 = 0xF1;
const STREAM_INIT: u64 = 0;
const STREAM_ROUND: u64 = 1;
const STREAM_SAMPLE_CLIENTS: u64 = 9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub sampled: Vec<usize>,
    pub accuracy: f64,
    pub cumulative_bits: u64,
    pub aggregation_seconds: f64,
    pub sigma: f64,
    /// Columns replaced during orthonormalization in this round.
    pub deficient: usize,
    pub refactorized: bool,
    pub skipped_steps: usize,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub logs: Vec<RoundLog>,
    pub base: DenseMatrix,
    pub pair: LoRAPair,
    /// `W⁰ + B^T A^T`.
    pub weight: DenseMatrix,
    pub base_accuracy: f64,
    pub final_accuracy: f64,
    pub privacy: ResolvedPrivacy,
}

impl RunOutput {
    pub fn total_bits(&self) -> u64 {
        self.logs.last().map_or(0, |l| l.cumulative_bits)
    }

    pub fn aggregation_times(&self) -> Vec<f64> {
        self.logs.iter().map(|l| l.aggregation_seconds).collect()
    }
}

/// Generates the task described by `config` and trains on it.
pub fn run_experiment(config: &FLRunConfig) -> Result<(SyntheticTask, RunOutput)> {
    let privacy = config.resolve_privacy()?;
    let task = SyntheticTask::generate(&config.task)?;
    let out = train_federated(
        config,
        &privacy,
        &task.base,
        &task.clients,
        &task.test,
        config.task.seed,
    )?;
    Ok((task, out))
}

/// Runs the configured protocol over arbitrary client datasets. Shadow models
/// for membership inference are trained through the same entry point.
pub fn train_federated(
    config: &FLRunConfig,
    privacy: &ResolvedPrivacy,
    base: &DenseMatrix,
    datasets: &[Dataset],
    test: &[Sample],
    seed: u64,
) -> Result<RunOutput> {
    config.validate()?;
    if datasets.is_empty() {
        return Err(Error::Config("no client datasets".into()));
    }
    let (m, n) = (config.task.m, config.task.n);
    if base.shape() != (m, n) {
        return Err(Error::Shape(format!(
            "base is {:?}, config expects ({m}, {n})",
            base.shape()
        )));
    }
    let r = config.protocol.r;
    let t = &config.training;
    let clients: Vec<ClientState> = datasets
        .iter()
        .enumerate()
        .map(|(id, data)| ClientState {
            id,
            data: data.clone(),
            eta: t.eta,
            local_rounds: t.local_rounds,
            q_sample: t.q_s,
            optimizer: t.optimizer,
        })
        .collect();
    let server = ServerPrivacy::new(privacy.sigma, privacy.clip, config.privacy.tight_sensitivity)?;
    let per_round = ((t.q_c * clients.len() as f64).ceil() as usize).clamp(1, clients.len());
    let per_client_bits = config.protocol.name.upload_values(m, n, r) * u64::from(config.bits_per_value);

    let root = RngStream::at(seed, vec![RUN_DOMAIN]);
    let init_std = t.init_std.unwrap_or(1.0 / (n as f64).sqrt());
    let a0 = gaussian_matrix(r, n, init_std, &mut root.child(STREAM_INIT));
    let mut pair = LoRAPair::new(a0, DenseMatrix::zeros(m, r))?;
    let frozen_a = pair.a().clone();

    let base_accuracy = accuracy(base, test);
    let mut logs = Vec::with_capacity(t.rounds);
    let mut bits = 0u64;
    for round in 1..=t.rounds {
        let rrng = root.child(STREAM_ROUND).child(round as u64);
        let sampled = rrng
            .child(STREAM_SAMPLE_CLIENTS)
            .choose_indices(clients.len(), per_round);
        let ctx = RoundContext {
            base,
            clients: &clients,
            sampled: &sampled,
            rng: &rrng,
        };
        let outcome = match config.protocol.name {
            Protocol::FedLoRA => fedlora_round(&ctx, &pair, &server)?,
            Protocol::FfaLoRA => ffalora_round(&ctx, &frozen_a, pair.b(), &server)?,
            Protocol::FedPower => {
                let refactor = round % config.protocol.refactor_frequency == 0;
                fedpower_round(&ctx, &pair, &server, config.protocol.k, refactor)?
            }
        };
        pair = outcome.pair;
        bits += per_client_bits * sampled.len() as u64;
        logs.push(RoundLog {
            round,
            accuracy: accuracy(&merge(base, &pair), test),
            sampled,
            cumulative_bits: bits,
            aggregation_seconds: outcome.aggregation_seconds,
            sigma: privacy.sigma,
            deficient: outcome.deficient,
            refactorized: outcome.refactorized,
            skipped_steps: outcome.skipped_steps,
        });
    }
    let weight = if t.rounds == 0 {
        base.clone()
    } else {
        merge(base, &pair)
    };
    let final_accuracy = logs.last().map_or(base_accuracy, |l| l.accuracy);
    Ok(RunOutput {
        logs,
        base: base.clone(),
        pair,
        weight,
        base_accuracy,
        final_accuracy,
        privacy: *privacy,
    })
}
