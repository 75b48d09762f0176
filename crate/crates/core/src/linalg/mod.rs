//! Dense linear algebra substrate: matrices, products, norms,
//! orthonormalization and reproducible Gaussian sampling.

pub mod fpmx;
mod matrix;
mod ortho;
mod rng;

pub use matrix::{frobenius_norm, matmul, matmul_transpose_a, matmul_transpose_b, DenseMatrix};
pub use ortho::{orthonormalize_columns, orthonormalize_rows, Orthonormalized, DEFICIENCY_TOL};
pub use rng::RngStream;

/// `rows × cols` matrix of i.i.d. `N(0, std²)` entries. `std == 0` gives exact zeros
/// without consuming draws.
pub fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut RngStream) -> DenseMatrix {
    assert!(
        std >= 0.0 && std.is_finite(),
        "gaussian_matrix: std must be finite and >= 0"
    );
    if std == 0.0 {
        return DenseMatrix::zeros(rows, cols);
    }
    let data = (0..rows * cols).map(|_| std * rng.standard_normal()).collect();
    DenseMatrix::from_raw(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_std_is_exact_zero() {
        let m = gaussian_matrix(3, 4, 0.0, &mut RngStream::new(1));
        assert!(m.is_zero());
    }

    #[test]
    fn moments_at_unit_std() {
        let m = gaussian_matrix(100, 1000, 1.0, &mut RngStream::new(2024));
        let n = m.data().len() as f64;
        let mean = m.data().iter().sum::<f64>() / n;
        let var = m.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.01, "std {}", var.sqrt());
    }

    #[test]
    fn deterministic_per_address() {
        let a = gaussian_matrix(4, 4, 2.0, &mut RngStream::at(9, vec![1, 2]));
        let b = gaussian_matrix(4, 4, 2.0, &mut RngStream::at(9, vec![1, 2]));
        assert_eq!(a.data(), b.data());
    }
}
