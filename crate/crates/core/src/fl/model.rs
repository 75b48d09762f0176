//! LoRA-adapted linear classifier: logits `h = W⁰x + B(Ax)`, softmax
//! cross-entropy loss, and its analytic gradients with respect to `A` and `B`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::factorize::LoRAPair;
use crate::linalg::{matmul, DenseMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub x: Vec<f64>,
    pub y: usize,
}

pub fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    z.iter_mut().for_each(|v| *v /= sum);
}

fn gemv(w: &DenseMatrix, x: &[f64], out: &mut [f64]) {
    for (r, o) in out.iter_mut().enumerate() {
        *o = w.row(r).iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

/// `-ln p_y`, computed stably from logits.
pub fn cross_entropy(logits: &[f64], y: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    (lse - logits[y]).max(0.0)
}

/// Softmax probabilities of a merged weight on one input.
pub fn probabilities(weight: &DenseMatrix, x: &[f64]) -> Vec<f64> {
    let mut z = vec![0.0; weight.rows()];
    gemv(weight, x, &mut z);
    softmax_in_place(&mut z);
    z
}

pub fn sample_loss(weight: &DenseMatrix, s: &Sample) -> f64 {
    let mut z = vec![0.0; weight.rows()];
    gemv(weight, &s.x, &mut z);
    cross_entropy(&z, s.y)
}

pub fn accuracy(weight: &DenseMatrix, data: &[Sample]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let mut z = vec![0.0; weight.rows()];
    let correct = data
        .iter()
        .filter(|s| {
            gemv(weight, &s.x, &mut z);
            argmax(&z) == s.y
        })
        .count();
    correct as f64 / data.len() as f64
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// `W⁰ + B·A`.
pub fn merge(base: &DenseMatrix, pair: &LoRAPair) -> DenseMatrix {
    let delta = matmul(pair.b(), pair.a()).expect("pair shape");
    base.add(&delta).expect("pair matches base shape")
}

/// Mean loss over `batch` and its gradients `(∇_A, ∇_B)`.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grad_a: DenseMatrix,
    pub grad_b: DenseMatrix,
}

pub fn batch_loss(base: &DenseMatrix, pair: &LoRAPair, batch: &[&Sample]) -> f64 {
    let (a, b) = (pair.a(), pair.b());
    let (mut u, mut z) = (vec![0.0; a.rows()], vec![0.0; base.rows()]);
    let total: f64 = batch
        .iter()
        .map(|s| {
            forward(base, a, b, &s.x, &mut u, &mut z);
            cross_entropy(&z, s.y)
        })
        .sum();
    total / batch.len() as f64
}

fn forward(base: &DenseMatrix, a: &DenseMatrix, b: &DenseMatrix, x: &[f64], u: &mut [f64], z: &mut [f64]) {
    gemv(a, x, u);
    gemv(base, x, z);
    for (k, zk) in z.iter_mut().enumerate() {
        *zk += b.row(k).iter().zip(u.iter()).map(|(p, q)| p * q).sum::<f64>();
    }
}

/// Analytic gradients by the chain rule: with `u = Ax`, `g = softmax(h) − e_y`,
/// `∇_B = g uᵀ` and `∇_A = (Bᵀ g) xᵀ`, averaged over the batch.
pub fn loss_and_grad(base: &DenseMatrix, pair: &LoRAPair, batch: &[&Sample], need_a: bool) -> Result<LossGrad> {
    let (a, b) = (pair.a(), pair.b());
    let (r, n, m) = (a.rows(), a.cols(), b.rows());
    let mut grad_a = vec![0.0; r * n];
    let mut grad_b = vec![0.0; m * r];
    let (mut u, mut z, mut v) = (vec![0.0; r], vec![0.0; m], vec![0.0; r]);
    let mut loss = 0.0;
    let inv = 1.0 / batch.len().max(1) as f64;
    for s in batch {
        forward(base, a, b, &s.x, &mut u, &mut z);
        loss += cross_entropy(&z, s.y);
        softmax_in_place(&mut z);
        z[s.y] -= 1.0;
        for k in 0..m {
            let gk = z[k] * inv;
            if gk == 0.0 {
                continue;
            }
            for (gb, uj) in grad_b[k * r..(k + 1) * r].iter_mut().zip(&u) {
                *gb += gk * uj;
            }
        }
        if need_a {
            v.iter_mut().for_each(|x| *x = 0.0);
            for (k, &zk) in z.iter().enumerate() {
                for (vj, bkj) in v.iter_mut().zip(b.row(k)) {
                    *vj += bkj * zk;
                }
            }
            for (j, &vj) in v.iter().enumerate() {
                let c = vj * inv;
                for (ga, xi) in grad_a[j * n..(j + 1) * n].iter_mut().zip(&s.x) {
                    *ga += c * xi;
                }
            }
        }
    }
    let diverged = |_| Error::NonFinite("gradient");
    Ok(LossGrad {
        loss: loss * inv,
        grad_a: DenseMatrix::new(r, n, grad_a).map_err(diverged)?,
        grad_b: DenseMatrix::new(m, r, grad_b).map_err(diverged)?,
    })
}
