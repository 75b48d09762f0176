//! Fixtures shared by the benchmarks.

use fedpower::linalg::{frobenius_norm, gaussian_matrix, DenseMatrix, RngStream};
use fedpower::LoRAPair;

/// Random `m x n` matrix rescaled to Frobenius norm `norm`.
pub fn bounded_matrix(m: usize, n: usize, norm: f64, seed: u64) -> DenseMatrix {
    let w = gaussian_matrix(m, n, 1.0, &mut RngStream::new(seed));
    let f = frobenius_norm(&w);
    w.scale(norm / f).expect("finite scale")
}

/// `clients` random rank-`r` uploads for an `m x n` weight.
pub fn uploads(clients: usize, m: usize, n: usize, r: usize, seed: u64) -> Vec<LoRAPair> {
    let root = RngStream::new(seed);
    (0..clients as u64)
        .map(|i| {
            let mut rng = root.child(i);
            let a = gaussian_matrix(r, n, 1.0 / (n as f64).sqrt(), &mut rng);
            let b = gaussian_matrix(m, r, 0.1, &mut rng);
            LoRAPair::new(a, b).expect("shapes agree")
        })
        .collect()
}
