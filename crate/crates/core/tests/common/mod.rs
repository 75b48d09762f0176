#![allow(dead_code)]

use fedpower::fl::{FLRunConfig, Sample};
use fedpower::harness::preset;
use fedpower::linalg::{gaussian_matrix, matmul, orthonormalize_columns, orthonormalize_rows, DenseMatrix, RngStream};
use nalgebra::DMatrix;

pub fn random_matrix(rows: usize, cols: usize, rng: &mut RngStream) -> DenseMatrix {
    gaussian_matrix(rows, cols, 1.0, rng)
}

pub fn orthonormal_columns(rows: usize, cols: usize, rng: &mut RngStream) -> DenseMatrix {
    let g = random_matrix(rows, cols, rng);
    orthonormalize_columns(&g, rng).unwrap().matrix
}

pub fn orthonormal_rows(rows: usize, cols: usize, rng: &mut RngStream) -> DenseMatrix {
    let g = random_matrix(rows, cols, rng);
    orthonormalize_rows(&g, rng).unwrap().matrix
}

/// Random rank-`rank` matrix with Frobenius norm `norm`.
pub fn low_rank(rows: usize, cols: usize, rank: usize, norm: f64, rng: &mut RngStream) -> DenseMatrix {
    let u = random_matrix(rows, rank, rng);
    let v = random_matrix(rank, cols, rng);
    let w = matmul(&u, &v).unwrap();
    let f = fedpower::linalg::frobenius_norm(&w);
    w.scale(norm / f).unwrap()
}

pub fn to_nalgebra(m: &DenseMatrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

/// Singular values in descending order.
pub fn singular_values(m: &DenseMatrix) -> Vec<f64> {
    let mut s: Vec<f64> = to_nalgebra(m).singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// `min ‖W − X‖_F` over rank-`r` matrices X.
pub fn optimal_truncation_error(m: &DenseMatrix, rank: usize) -> f64 {
    singular_values(m).iter().skip(rank).map(|s| s * s).sum::<f64>().sqrt()
}

pub fn naive_matmul(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    DenseMatrix::from_fn(a.rows(), b.cols(), |i, j| {
        (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum()
    })
}

pub fn random_samples(count: usize, n: usize, classes: usize, rng: &mut RngStream) -> Vec<Sample> {
    (0..count as u64)
        .map(|id| Sample {
            id,
            x: (0..n).map(|_| rng.standard_normal() / (n as f64).sqrt()).collect(),
            y: (rng.uniform() * classes as f64) as usize % classes,
        })
        .collect()
}

/// A preset shortened to `rounds` rounds; the accountant re-derives σ for the
/// shorter horizon.
pub fn scaled_preset(name: &str, rounds: usize, seed: u64) -> FLRunConfig {
    let mut c = preset(name).unwrap();
    c.training.rounds = rounds;
    c.task.seed = seed;
    c
}

/// Non-private run on few samples with full-batch local training, so the
/// released model memorises its training set.
pub fn overfit_control(seed: u64) -> FLRunConfig {
    let mut c = scaled_preset("nonprivate", 30, seed);
    c.task.samples_per_client = 20;
    c.training.q_s = 1.0;
    c.training.local_rounds = 20;
    c
}
