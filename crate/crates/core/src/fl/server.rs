//! Server-side aggregation for the three protocols.
//!
//! * FedLoRA: clip `A_i` and `B_i` separately, average each, add noise to each.
//! * FFA-LoRA: `A` frozen; clip, average and noise only `B`.
//! * FedPower: merge `ΔW_i = B_i A_i`, clip, average, then refactorize the
//!   average with [`power_dp`](crate::factorize::power_dp).

use std::time::Instant;

use rayon::prelude::*;

use super::client::{local_train, ClientState, LocalUpdate, TrainMode};
use crate::dp::{clip_frobenius, gaussian_mechanism};
use crate::error::{Error, Result};
use crate::factorize::{power_dp_inner, Factorization, LoRAPair, NORM_SLACK};
use crate::linalg::{frobenius_norm, DenseMatrix, RngStream};

const STREAM_CLIENT: u64 = 1;
const STREAM_NOISE_A: u64 = 2;
const STREAM_NOISE_B: u64 = 3;
const STREAM_REFACTOR: u64 = 4;

/// Noise and clipping applied by the server. `clip == None` disables clipping,
/// which is only allowed together with `sigma == 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServerPrivacy {
    pub sigma: f64,
    pub clip: Option<f64>,
    /// Calibrate noise to `C/|C|`, the sensitivity of an average over `|C|`
    /// clipped contributions, instead of `C`.
    pub tight_sensitivity: bool,
}

impl ServerPrivacy {
    pub fn non_private() -> Self {
        Self {
            sigma: 0.0,
            clip: None,
            tight_sensitivity: false,
        }
    }

    pub fn new(sigma: f64, clip: Option<f64>, tight_sensitivity: bool) -> Result<Self> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::Config(format!("sigma must be finite and >= 0, got {sigma}")));
        }
        if let Some(c) = clip {
            if !(c > 0.0) || !c.is_finite() {
                return Err(Error::Config(format!("clip must be finite and > 0, got {c}")));
            }
        } else if sigma > 0.0 {
            return Err(Error::Config(
                "noise without a clip threshold has unbounded sensitivity".into(),
            ));
        }
        Ok(Self {
            sigma,
            clip,
            tight_sensitivity,
        })
    }

    fn sensitivity(&self, contributors: usize) -> Option<f64> {
        self.clip.map(|c| {
            if self.tight_sensitivity {
                c / contributors as f64
            } else {
                c
            }
        })
    }

    fn clip(&self, m: &DenseMatrix) -> DenseMatrix {
        match self.clip {
            Some(c) => clip_frobenius(m, c),
            None => m.clone(),
        }
    }

    /// Gaussian mechanism on an aggregate whose norm is bounded by the clip.
    fn release(&self, m: &DenseMatrix, contributors: usize, rng: &mut RngStream) -> Result<DenseMatrix> {
        match self.sensitivity(contributors) {
            Some(sensitivity) if self.sigma > 0.0 => {
                debug_assert!(
                    frobenius_norm(m) <= self.clip.unwrap() + NORM_SLACK,
                    "aggregate exceeds its declared bound"
                );
                gaussian_mechanism(m, sensitivity, self.sigma, rng)
            }
            _ => Ok(m.clone()),
        }
    }
}

/// Everything a server round needs besides the global model.
#[derive(Debug, Clone, Copy)]
pub struct RoundContext<'a> {
    pub base: &'a DenseMatrix,
    pub clients: &'a [ClientState],
    pub sampled: &'a [usize],
    /// Stream for this round; clients and server draw from fixed children.
    pub rng: &'a RngStream,
}

#[derive(Debug, Clone)]
pub struct ServerOutcome {
    pub pair: LoRAPair,
    /// Wall time of aggregation only, excluding client training.
    pub aggregation_seconds: f64,
    pub deficient: usize,
    pub refactorized: bool,
    pub skipped_steps: usize,
    /// FedPower's pre-factorization aggregate, when one was formed.
    pub aggregate: Option<DenseMatrix>,
}

/// Trains every sampled client in parallel. Output order follows `ctx.sampled`.
pub fn train_clients(ctx: &RoundContext<'_>, global: &LoRAPair, mode: TrainMode) -> Result<Vec<LocalUpdate>> {
    if ctx.sampled.is_empty() {
        return Err(Error::Config("a round needs at least one sampled client".into()));
    }
    ctx.sampled
        .par_iter()
        .map(|&i| {
            let client = &ctx.clients[i];
            let mut rng = ctx.rng.child(STREAM_CLIENT).child(client.id as u64);
            local_train(client, ctx.base, global, mode, &mut rng)
        })
        .collect()
}

fn mean(mats: &[DenseMatrix]) -> Result<DenseMatrix> {
    let mut acc = mats[0].clone();
    for m in &mats[1..] {
        acc.add_assign(m)?;
    }
    acc.scale(1.0 / mats.len() as f64)
}

/// Component-wise FedLoRA aggregation of uploaded pairs.
pub fn fedlora_aggregate(uploads: &[LoRAPair], privacy: &ServerPrivacy, rng: &RngStream) -> Result<LoRAPair> {
    if uploads.is_empty() {
        return Err(Error::Config("nothing to aggregate".into()));
    }
    let a: Vec<DenseMatrix> = uploads.iter().map(|p| privacy.clip(p.a())).collect();
    let b: Vec<DenseMatrix> = uploads.iter().map(|p| privacy.clip(p.b())).collect();
    let a = privacy.release(&mean(&a)?, uploads.len(), &mut rng.child(STREAM_NOISE_A))?;
    let b = privacy.release(&mean(&b)?, uploads.len(), &mut rng.child(STREAM_NOISE_B))?;
    LoRAPair::new(a, b)
}

/// FFA-LoRA aggregation of uploaded `B` factors.
pub fn ffalora_aggregate(uploads: &[DenseMatrix], privacy: &ServerPrivacy, rng: &RngStream) -> Result<DenseMatrix> {
    if uploads.is_empty() {
        return Err(Error::Config("nothing to aggregate".into()));
    }
    let b: Vec<DenseMatrix> = uploads.iter().map(|m| privacy.clip(m)).collect();
    privacy.release(&mean(&b)?, uploads.len(), &mut rng.child(STREAM_NOISE_B))
}

/// `(1/|C|) Σ clip(B_i A_i)`.
pub fn fedpower_aggregate(uploads: &[LoRAPair], clip: Option<f64>) -> Result<DenseMatrix> {
    if uploads.is_empty() {
        return Err(Error::Config("nothing to aggregate".into()));
    }
    let merged: Vec<DenseMatrix> = uploads
        .iter()
        .map(|p| {
            let d = p.product();
            match clip {
                Some(c) => clip_frobenius(&d, c),
                None => d,
            }
        })
        .collect();
    mean(&merged)
}

/// Private rank-`r` refactorization of a FedPower aggregate.
pub fn fedpower_refactor(
    aggregate: &DenseMatrix,
    rank: usize,
    iters: usize,
    contributors: usize,
    privacy: &ServerPrivacy,
    rng: &RngStream,
) -> Result<Factorization> {
    let rng = rng.child(STREAM_REFACTOR);
    match (privacy.clip, privacy.sensitivity(contributors)) {
        (Some(bound), Some(sensitivity)) => {
            power_dp_inner(aggregate, rank, iters, privacy.sigma, bound, sensitivity, &rng)
        }
        _ => {
            let bound = frobenius_norm(aggregate).max(f64::MIN_POSITIVE);
            power_dp_inner(aggregate, rank, iters, 0.0, bound, bound, &rng)
        }
    }
}

pub fn fedlora_round(ctx: &RoundContext<'_>, global: &LoRAPair, privacy: &ServerPrivacy) -> Result<ServerOutcome> {
    let updates = train_clients(ctx, global, TrainMode::Both)?;
    let skipped_steps = updates.iter().map(|u| u.skipped_steps).sum();
    let uploads: Vec<LoRAPair> = updates.into_iter().map(|u| u.pair).collect();
    let start = Instant::now();
    let pair = fedlora_aggregate(&uploads, privacy, ctx.rng)?;
    Ok(ServerOutcome {
        pair,
        aggregation_seconds: start.elapsed().as_secs_f64(),
        deficient: 0,
        refactorized: false,
        skipped_steps,
        aggregate: None,
    })
}

pub fn ffalora_round(
    ctx: &RoundContext<'_>,
    frozen_a: &DenseMatrix,
    global_b: &DenseMatrix,
    privacy: &ServerPrivacy,
) -> Result<ServerOutcome> {
    let global = LoRAPair::new(frozen_a.clone(), global_b.clone())?;
    let updates = train_clients(ctx, &global, TrainMode::OnlyB)?;
    let skipped_steps = updates.iter().map(|u| u.skipped_steps).sum();
    let uploads: Vec<DenseMatrix> = updates.into_iter().map(|u| u.pair.into_parts().1).collect();
    let start = Instant::now();
    let b = ffalora_aggregate(&uploads, privacy, ctx.rng)?;
    let aggregation_seconds = start.elapsed().as_secs_f64();
    Ok(ServerOutcome {
        pair: LoRAPair::new(frozen_a.clone(), b)?,
        aggregation_seconds,
        deficient: 0,
        refactorized: false,
        skipped_steps,
        aggregate: None,
    })
}

/// One FedPower round. When `refactor_now` is false the server falls back to
/// FedLoRA aggregation with the same noise multiplier.
pub fn fedpower_round(
    ctx: &RoundContext<'_>,
    global: &LoRAPair,
    privacy: &ServerPrivacy,
    iters: usize,
    refactor_now: bool,
) -> Result<ServerOutcome> {
    let updates = train_clients(ctx, global, TrainMode::Both)?;
    let skipped_steps = updates.iter().map(|u| u.skipped_steps).sum();
    let uploads: Vec<LoRAPair> = updates.into_iter().map(|u| u.pair).collect();
    let start = Instant::now();
    if !refactor_now {
        let pair = fedlora_aggregate(&uploads, privacy, ctx.rng)?;
        return Ok(ServerOutcome {
            pair,
            aggregation_seconds: start.elapsed().as_secs_f64(),
            deficient: 0,
            refactorized: false,
            skipped_steps,
            aggregate: None,
        });
    }
    let aggregate = fedpower_aggregate(&uploads, privacy.clip)?;
    let f = fedpower_refactor(&aggregate, global.rank(), iters, uploads.len(), privacy, ctx.rng)?;
    let aggregation_seconds = start.elapsed().as_secs_f64();
    Ok(ServerOutcome {
        pair: f.pair,
        aggregation_seconds,
        deficient: f.deficient,
        refactorized: true,
        skipped_steps,
        aggregate: Some(aggregate),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::gaussian_matrix;

    fn scalar_pair(b: f64, a: f64) -> LoRAPair {
        LoRAPair::new(DenseMatrix::from_rows(&[[a]]), DenseMatrix::from_rows(&[[b]])).unwrap()
    }

    #[test]
    fn scalar_mismatch_witness() {
        let uploads = [scalar_pair(1.0, 1.0), scalar_pair(-1.0, -1.0)];
        let rng = RngStream::new(0);
        let merged = fedlora_aggregate(&uploads, &ServerPrivacy::non_private(), &rng).unwrap();
        assert_eq!(merged.product().get(0, 0), 0.0);
        let ideal = fedpower_aggregate(&uploads, None).unwrap();
        assert_eq!(ideal.get(0, 0), 1.0);
    }

    #[test]
    fn single_client_identity() {
        let mut rng = RngStream::new(1);
        let p = LoRAPair::new(
            gaussian_matrix(2, 5, 1.0, &mut rng),
            gaussian_matrix(4, 2, 1.0, &mut rng),
        )
        .unwrap();
        let privacy = ServerPrivacy::new(0.0, Some(1e9), false).unwrap();
        let out = fedlora_aggregate(std::slice::from_ref(&p), &privacy, &rng).unwrap();
        assert_eq!(out, p);
        let b = ffalora_aggregate(&[p.b().clone()], &privacy, &rng).unwrap();
        assert_eq!(&b, p.b());
    }

    #[test]
    fn identical_clients_have_no_cross_terms() {
        let mut rng = RngStream::new(2);
        let p = LoRAPair::new(
            gaussian_matrix(2, 5, 1.0, &mut rng),
            gaussian_matrix(4, 2, 1.0, &mut rng),
        )
        .unwrap();
        let uploads = vec![p.clone(), p.clone(), p.clone()];
        let fl = fedlora_aggregate(&uploads, &ServerPrivacy::non_private(), &rng).unwrap();
        assert!(fl.product().max_abs_diff(&p.product()) < 1e-12);
        let fp = fedpower_aggregate(&uploads, None).unwrap();
        assert!(fp.max_abs_diff(&p.product()) < 1e-12);
    }

    #[test]
    fn noise_requires_clip() {
        assert!(ServerPrivacy::new(1.0, None, false).is_err());
        assert!(ServerPrivacy::new(-1.0, Some(1.0), false).is_err());
        assert!(ServerPrivacy::new(1.0, Some(0.0), false).is_err());
    }

    #[test]
    fn noisy_release_has_expected_scale() {
        let uploads: Vec<DenseMatrix> = (0..3).map(|_| DenseMatrix::zeros(50, 40)).collect();
        let privacy = ServerPrivacy::new(1.5, Some(2.0), false).unwrap();
        let b = ffalora_aggregate(&uploads, &privacy, &RngStream::new(4)).unwrap();
        let std = (b.data().iter().map(|v| v * v).sum::<f64>() / 2000.0).sqrt();
        assert!((std - 3.0).abs() < 0.15, "std {std}");
        let tight = ServerPrivacy::new(1.5, Some(2.0), true).unwrap();
        let b = ffalora_aggregate(&uploads, &tight, &RngStream::new(4)).unwrap();
        let std = (b.data().iter().map(|v| v * v).sum::<f64>() / 2000.0).sqrt();
        assert!((std - 1.0).abs() < 0.05, "std {std}");
    }
}
