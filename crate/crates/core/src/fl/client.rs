use serde::{Deserialize, Serialize};

use super::model::{loss_and_grad, Sample};
use super::task::Dataset;
use crate::error::{Error, Result};
use crate::factorize::LoRAPair;
use crate::linalg::{DenseMatrix, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Sgd,
    /// Adam with `β = (0.9, 0.999)`, state reset at the start of every round.
    Adam,
}

/// Which adapter factors a client updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Both,
    /// `A` frozen, only `B` is trained.
    OnlyB,
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub data: Dataset,
    pub eta: f64,
    pub local_rounds: usize,
    /// Per-sample Poisson inclusion probability of a mini-batch.
    pub q_sample: f64,
    pub optimizer: Optimizer,
}

#[derive(Debug, Clone)]
pub struct LocalUpdate {
    pub pair: LoRAPair,
    /// Local steps skipped because the sampled batch was empty.
    pub skipped_steps: usize,
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamState {
    fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], eta: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            params[i] -= eta * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + EPS);
        }
    }
}

fn sgd_step(params: &mut [f64], grad: &[f64], eta: f64) {
    for (p, g) in params.iter_mut().zip(grad) {
        *p -= eta * g;
    }
}

/// `L` mini-batch steps on the client's data starting from the global pair.
pub fn local_train(
    client: &ClientState,
    base: &DenseMatrix,
    global: &LoRAPair,
    mode: TrainMode,
    rng: &mut RngStream,
) -> Result<LocalUpdate> {
    if !(client.q_sample > 0.0 && client.q_sample <= 1.0) {
        return Err(Error::Config(format!(
            "batch rate must lie in (0,1], got {}",
            client.q_sample
        )));
    }
    let (a0, b0) = (global.a(), global.b());
    if base.shape() != (b0.rows(), a0.cols()) {
        return Err(Error::Shape("global pair does not match the base weight".into()));
    }
    let (r, n, m) = (a0.rows(), a0.cols(), b0.rows());
    let mut a = a0.data().to_vec();
    let mut b = b0.data().to_vec();
    let mut adam_a = AdamState::new(a.len());
    let mut adam_b = AdamState::new(b.len());
    let mut skipped = 0;
    for _ in 0..client.local_rounds {
        let batch: Vec<&Sample> = if client.q_sample >= 1.0 {
            client.data.iter().collect()
        } else {
            client.data.iter().filter(|_| rng.bernoulli(client.q_sample)).collect()
        };
        if batch.is_empty() {
            skipped += 1;
            continue;
        }
        let pair = LoRAPair::new(DenseMatrix::new(r, n, a.clone())?, DenseMatrix::new(m, r, b.clone())?)?;
        let lg = loss_and_grad(base, &pair, &batch, mode == TrainMode::Both)?;
        match client.optimizer {
            Optimizer::Sgd => {
                sgd_step(&mut b, lg.grad_b.data(), client.eta);
                if mode == TrainMode::Both {
                    sgd_step(&mut a, lg.grad_a.data(), client.eta);
                }
            }
            Optimizer::Adam => {
                adam_b.step(&mut b, lg.grad_b.data(), client.eta);
                if mode == TrainMode::Both {
                    adam_a.step(&mut a, lg.grad_a.data(), client.eta);
                }
            }
        }
    }
    let a = DenseMatrix::new(r, n, a).map_err(|_| Error::NonFinite("local training diverged"))?;
    let b = DenseMatrix::new(m, r, b).map_err(|_| Error::NonFinite("local training diverged"))?;
    Ok(LocalUpdate {
        pair: LoRAPair::new(a, b)?,
        skipped_steps: skipped,
    })
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::linalg::gaussian_matrix;

    fn setup(eta: f64, q: f64) -> (ClientState, DenseMatrix, LoRAPair) {
        let mut rng = RngStream::new(3);
        let samples: Vec<Sample> = (0..20)
            .map(|i| Sample {
                id: i,
                x: (0..5).map(|_| rng.standard_normal()).collect(),
                y: (i % 3) as usize,
            })
            .collect();
        let client = ClientState {
            id: 0,
            data: Arc::new(samples),
            eta,
            local_rounds: 4,
            q_sample: q,
            optimizer: Optimizer::Sgd,
        };
        let base = gaussian_matrix(3, 5, 0.5, &mut rng);
        let pair = LoRAPair::new(
            gaussian_matrix(2, 5, 0.5, &mut rng),
            gaussian_matrix(3, 2, 0.5, &mut rng),
        )
        .unwrap();
        (client, base, pair)
    }

    #[test]
    fn zero_step_size_is_identity() {
        let (client, base, pair) = setup(0.0, 0.5);
        let out = local_train(&client, &base, &pair, TrainMode::Both, &mut RngStream::new(1)).unwrap();
        assert_eq!(out.pair, pair);
    }

    #[test]
    fn only_b_keeps_a() {
        let (client, base, pair) = setup(0.5, 1.0);
        let out = local_train(&client, &base, &pair, TrainMode::OnlyB, &mut RngStream::new(1)).unwrap();
        assert_eq!(out.pair.a(), pair.a());
        assert_ne!(out.pair.b(), pair.b());
    }

    #[test]
    fn training_lowers_loss() {
        let (client, base, pair) = setup(0.5, 1.0);
        let out = local_train(&client, &base, &pair, TrainMode::Both, &mut RngStream::new(1)).unwrap();
        let batch: Vec<&Sample> = client.data.iter().collect();
        let before = super::super::model::batch_loss(&base, &pair, &batch);
        let after = super::super::model::batch_loss(&base, &out.pair, &batch);
        assert!(after < before);
    }

    #[test]
    fn empty_batches_are_skipped() {
        let (mut client, base, pair) = setup(0.5, 1e-9);
        client.data = Arc::new(client.data[..1].to_vec());
        let out = local_train(&client, &base, &pair, TrainMode::Both, &mut RngStream::new(1)).unwrap();
        assert_eq!(out.skipped_steps, 4);
        assert_eq!(out.pair, pair);
    }

    #[test]
    fn adam_moves_parameters() {
        let (mut client, base, pair) = setup(0.01, 1.0);
        client.optimizer = Optimizer::Adam;
        let out = local_train(&client, &base, &pair, TrainMode::Both, &mut RngStream::new(1)).unwrap();
        assert_ne!(out.pair, pair);
    }

    #[test]
    fn invalid_batch_rate() {
        let (client, base, pair) = setup(0.1, 0.0);
        assert!(local_train(&client, &base, &pair, TrainMode::Both, &mut RngStream::new(1)).is_err());
    }
}
