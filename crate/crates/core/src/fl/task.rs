//! Synthetic classification task standing in for a pretrained model plus
//! private fine-tuning corpora.
//!
//! Labels are Gaussian cluster ids in a low-dimensional latent space. Each
//! latent point is lifted through a fixed random `tanh` feature map to
//! dimension `n` and normalized to unit length. The base weight `W⁰` is a
//! softmax regression fitted on a pretraining pool whose cluster centres are
//! shifted, so that fine-tuning on the client data has something to fix.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::model::{softmax_in_place, Sample};
use crate::error::{Error, Result};
use crate::linalg::{gaussian_matrix, DenseMatrix, RngStream};

pub type Dataset = Arc<Vec<Sample>>;

const STREAM_CENTERS: u64 = 0;
const STREAM_MAP: u64 = 1;
const STREAM_SHIFT: u64 = 2;
const STREAM_POOL: u64 = 3;

/// Pool labels used by [`SyntheticTask::draw_pool`].
pub mod pool {
    pub const PRETRAIN: u64 = 0;
    pub const TEST: u64 = 1;
    pub const CLIENT_BASE: u64 = 100;
    pub const AUX: u64 = 10;
    pub const HOLDOUT: u64 = 11;
}

fn default_latent_dim() -> usize {
    8
}
fn default_separation() -> f64 {
    1.2
}
fn default_test_size() -> usize {
    1000
}
fn default_pretrain_size() -> usize {
    1000
}
fn default_pretrain_shift() -> f64 {
    1.0
}
fn default_pretrain_steps() -> usize {
    200
}
fn default_pretrain_lr() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    /// Feature dimension.
    pub n: usize,
    /// Output (logit) dimension; must be at least `classes`.
    pub m: usize,
    pub classes: usize,
    pub samples_per_client: usize,
    pub clients: usize,
    pub seed: u64,
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    /// Std of the cluster centres relative to the unit within-cluster noise.
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default = "default_test_size")]
    pub test_size: usize,
    #[serde(default = "default_pretrain_size")]
    pub pretrain_size: usize,
    /// Std of the per-centre displacement applied to the pretraining data.
    #[serde(default = "default_pretrain_shift")]
    pub pretrain_shift: f64,
    #[serde(default = "default_pretrain_steps")]
    pub pretrain_steps: usize,
    #[serde(default = "default_pretrain_lr")]
    pub pretrain_lr: f64,
}

impl TaskConfig {
    pub fn new(n: usize, m: usize, classes: usize, samples_per_client: usize, clients: usize, seed: u64) -> Self {
        Self {
            n,
            m,
            classes,
            samples_per_client,
            clients,
            seed,
            latent_dim: default_latent_dim(),
            separation: default_separation(),
            test_size: default_test_size(),
            pretrain_size: default_pretrain_size(),
            pretrain_shift: default_pretrain_shift(),
            pretrain_steps: default_pretrain_steps(),
            pretrain_lr: default_pretrain_lr(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n == 0 || self.m == 0 || self.latent_dim == 0 {
            return fail("task dimensions must be positive".into());
        }
        if self.classes < 2 || self.classes > self.m {
            return fail(format!(
                "need 2 <= classes <= m, got classes={} m={}",
                self.classes, self.m
            ));
        }
        if self.clients == 0 || self.samples_per_client == 0 {
            return fail("need at least one client with at least one sample".into());
        }
        if self.test_size == 0 {
            return fail("test set must not be empty".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct FeatureMap {
    centers: Vec<Vec<f64>>,
    pretrain_centers: Vec<Vec<f64>>,
    lift: DenseMatrix,
    bias: Vec<f64>,
}

impl FeatureMap {
    fn features(&self, latent: &[f64]) -> Vec<f64> {
        let d = latent.len() as f64;
        let mut x: Vec<f64> = (0..self.lift.rows())
            .map(|j| {
                let pre: f64 = self.lift.row(j).iter().zip(latent).map(|(a, b)| a * b).sum();
                (pre / d.sqrt() + self.bias[j]).tanh()
            })
            .collect();
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        x.iter_mut().for_each(|v| *v /= norm);
        x
    }
}

/// Generated task: base model, per-client training sets and a test set.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub config: TaskConfig,
    pub base: DenseMatrix,
    pub clients: Vec<Dataset>,
    pub test: Dataset,
    map: FeatureMap,
}

impl SyntheticTask {
    pub fn generate(config: &TaskConfig) -> Result<Self> {
        config.validate()?;
        let root = RngStream::at(config.seed, vec![0x7A5C]);
        let d = config.latent_dim;
        let mut crng = root.child(STREAM_CENTERS);
        let centers: Vec<Vec<f64>> = (0..config.classes)
            .map(|_| (0..d).map(|_| config.separation * crng.standard_normal()).collect())
            .collect();
        let mut srng = root.child(STREAM_SHIFT);
        let pretrain_centers = centers
            .iter()
            .map(|c| {
                c.iter()
                    .map(|v| v + config.pretrain_shift * srng.standard_normal())
                    .collect()
            })
            .collect();
        let mut mrng = root.child(STREAM_MAP);
        let lift = gaussian_matrix(config.n, d, 1.0, &mut mrng);
        let bias = (0..config.n).map(|_| 0.1 * mrng.standard_normal()).collect();
        let map = FeatureMap {
            centers,
            pretrain_centers,
            lift,
            bias,
        };

        let mut task = SyntheticTask {
            config: config.clone(),
            base: DenseMatrix::zeros(config.m, config.n),
            clients: Vec::new(),
            test: Arc::new(Vec::new()),
            map,
        };
        let pretrain = task.sample_pool(pool::PRETRAIN, config.pretrain_size, true);
        task.base = pretrain_base(&pretrain, config);
        task.test = Arc::new(task.sample_pool(pool::TEST, config.test_size, false));
        // one contiguous pool split evenly, so client datasets are disjoint
        let total = config.clients * config.samples_per_client;
        let all = task.sample_pool(pool::CLIENT_BASE, total, false);
        task.clients = all
            .chunks(config.samples_per_client)
            .map(|c| Arc::new(c.to_vec()))
            .collect();
        Ok(task)
    }

    /// Fresh samples from the fine-tuning distribution, addressed by `label`.
    /// Distinct labels give disjoint sample ids.
    pub fn draw_pool(&self, label: u64, count: usize) -> Dataset {
        Arc::new(self.sample_pool(label, count, false))
    }

    /// All client samples, in client order.
    pub fn training_pool(&self) -> Vec<Sample> {
        self.clients.iter().flat_map(|c| c.iter().cloned()).collect()
    }

    fn sample_pool(&self, label: u64, count: usize, pretrain: bool) -> Vec<Sample> {
        let mut rng = RngStream::at(self.config.seed, vec![0x7A5C, STREAM_POOL, label]);
        let centers = if pretrain {
            &self.map.pretrain_centers
        } else {
            &self.map.centers
        };
        (0..count)
            .map(|i| {
                let y = (rng.uniform() * self.config.classes as f64) as usize % self.config.classes;
                let latent: Vec<f64> = centers[y].iter().map(|c| c + rng.standard_normal()).collect();
                Sample {
                    id: (label << 32) | i as u64,
                    x: self.map.features(&latent),
                    y,
                }
            })
            .collect()
    }
}

/// Full-batch gradient descent on softmax regression.
fn pretrain_base(data: &[Sample], config: &TaskConfig) -> DenseMatrix {
    let (m, n) = (config.m, config.n);
    let mut w = vec![0.0; m * n];
    if data.is_empty() {
        return DenseMatrix::zeros(m, n);
    }
    let inv = 1.0 / data.len() as f64;
    let mut logits = vec![0.0; m];
    for _ in 0..config.pretrain_steps {
        let mut grad = vec![0.0; m * n];
        for s in data {
            for (k, l) in logits.iter_mut().enumerate() {
                *l = w[k * n..(k + 1) * n].iter().zip(&s.x).map(|(a, b)| a * b).sum();
            }
            softmax_in_place(&mut logits);
            logits[s.y] -= 1.0;
            for k in 0..m {
                let g = logits[k] * inv;
                for (gw, xv) in grad[k * n..(k + 1) * n].iter_mut().zip(&s.x) {
                    *gw += g * xv;
                }
            }
        }
        for (wv, g) in w.iter_mut().zip(&grad) {
            *wv -= config.pretrain_lr * g;
        }
    }
    DenseMatrix::new(m, n, w).expect("pretraining stays finite")
}
