//! Rank-r refactorization engines.
//!
//! All four engines start from the same Gaussian sketch `Q` (drawn from the
//! `INIT` child of the caller's stream) and differ only in where noise enters:
//!
//! * [`power_iteration`]: no noise.
//! * [`power_dp`]: noise on the last projections, before the final row
//!   orthonormalization.
//! * [`factorize_input_perturb`]: noise on the input matrix.
//! * [`factorize_output_perturb`]: noise on the returned factors.

use serde::{Deserialize, Serialize};

use crate::dp::gaussian_mechanism;
use crate::error::{Error, Result};
use crate::linalg::{
    frobenius_norm, gaussian_matrix, matmul, matmul_transpose_a, matmul_transpose_b, orthonormalize_columns,
    orthonormalize_rows, DenseMatrix, RngStream,
};

/// Default number of subspace iterations.
pub const DEFAULT_ITERS: usize = 4;

/// Slack allowed when checking `‖W‖_F ≤ C_W`.
pub const NORM_SLACK: f64 = 1e-9;

const INIT: u64 = 0;
const ORTHO: u64 = 1;
const NOISE_B: u64 = 2;
const NOISE_A: u64 = 3;
const NOISE_INPUT: u64 = 4;
const FINAL: u64 = 5;

/// LoRA adapter `ΔW = B · A` with `A: r×n`, `B: m×r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoRAPair {
    a: DenseMatrix,
    b: DenseMatrix,
}

impl LoRAPair {
    pub fn new(a: DenseMatrix, b: DenseMatrix) -> Result<Self> {
        if a.rows() != b.cols() {
            return Err(Error::Shape(format!(
                "LoRA pair: A is {}x{}, B is {}x{}",
                a.rows(),
                a.cols(),
                b.rows(),
                b.cols()
            )));
        }
        Ok(Self { a, b })
    }

    pub fn a(&self) -> &DenseMatrix {
        &self.a
    }

    pub fn b(&self) -> &DenseMatrix {
        &self.b
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    /// `(m, n)` of the adapted weight.
    pub fn weight_shape(&self) -> (usize, usize) {
        (self.b.rows(), self.a.cols())
    }

    pub fn into_parts(self) -> (DenseMatrix, DenseMatrix) {
        (self.a, self.b)
    }

    /// `B · A`.
    pub fn product(&self) -> DenseMatrix {
        matmul(&self.b, &self.a).expect("shape checked at construction")
    }
}

/// Which refactorization engine to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Power,
    PowerDp,
    Input,
    Output,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "power" => Ok(Method::Power),
            "powerdp" => Ok(Method::PowerDp),
            "input" => Ok(Method::Input),
            "output" => Ok(Method::Output),
            other => Err(Error::Config(format!(
                "unknown factorization method {other:?} (expected power, powerdp, input, output)"
            ))),
        }
    }
}

/// Factorization plus diagnostics.
#[derive(Debug, Clone)]
pub struct Factorization {
    pub pair: LoRAPair,
    /// Orthonormalizations that replaced a dependent direction.
    pub deficient: usize,
}

/// Norms of the projections `W Qᵀ` and `Pᵀ W` observed in [`power_dp_traced`].
#[derive(Debug, Clone, Default)]
pub struct ProjectionTrace {
    pub right: Vec<f64>,
    pub left: Vec<f64>,
}

pub fn factorize(
    method: Method,
    w: &DenseMatrix,
    rank: usize,
    iters: usize,
    sigma: f64,
    clip: f64,
    rng: &RngStream,
) -> Result<Factorization> {
    match method {
        Method::Power => power_iteration(w, rank, iters, rng),
        Method::PowerDp => power_dp(w, rank, iters, sigma, clip, rng),
        Method::Input => factorize_input_perturb(w, rank, iters, sigma, clip, rng),
        Method::Output => factorize_output_perturb(w, rank, iters, sigma, clip, rng),
    }
}

fn check_rank(w: &DenseMatrix, rank: usize, iters: usize) -> Result<()> {
    let (m, n) = w.shape();
    if rank == 0 || rank > m.min(n) {
        return Err(Error::Shape(format!("rank {rank} invalid for a {m}x{n} matrix")));
    }
    if iters == 0 {
        return Err(Error::Config("need at least one power iteration".into()));
    }
    Ok(())
}

fn check_bounded(w: &DenseMatrix, clip: f64) -> Result<()> {
    if !(clip > 0.0) {
        return Err(Error::Domain(format!("norm bound must be > 0, got {clip}")));
    }
    let norm = frobenius_norm(w);
    if norm > clip + NORM_SLACK {
        return Err(Error::Contract(format!(
            "input norm {norm} exceeds the declared bound {clip}; clip before factorizing"
        )));
    }
    Ok(())
}

fn initial_sketch(rank: usize, n: usize, rng: &RngStream) -> DenseMatrix {
    gaussian_matrix(rank, n, 1.0, &mut rng.child(INIT))
}

/// Non-private simultaneous subspace iteration.
///
/// `Q ~ N(0,1)^{r×n}`; `k` times: `P = orth_cols(W Qᵀ)`, `Q = Pᵀ W`; then
/// `A = orth_rows(Q)` and `B = W Aᵀ`.
pub fn power_iteration(w: &DenseMatrix, rank: usize, iters: usize, rng: &RngStream) -> Result<Factorization> {
    check_rank(w, rank, iters)?;
    let mut ortho = rng.child(ORTHO);
    let mut deficient = 0;
    let mut q = initial_sketch(rank, w.cols(), rng);
    for _ in 0..iters {
        let p = orthonormalize_columns(&matmul_transpose_b(w, &q)?, &mut ortho)?;
        deficient += p.deficient;
        q = matmul_transpose_a(&p.matrix, w)?;
    }
    let a = orthonormalize_rows(&q, &mut rng.child(FINAL))?;
    deficient += a.deficient;
    let b = matmul_transpose_b(w, &a.matrix)?;
    Ok(Factorization {
        pair: LoRAPair::new(a.matrix, b)?,
        deficient,
    })
}

/// Private refactorization with in-processing noise.
///
/// Runs `k` clean subspace iterations, then releases
/// `B̃ = W Qᵀ + N(0, σ²C_W²)` and `Ã = orth_rows(A + N(0, σ²C_W²))`. `w` must
/// satisfy `‖w‖_F ≤ clip`.
pub fn power_dp(
    w: &DenseMatrix,
    rank: usize,
    iters: usize,
    sigma: f64,
    clip: f64,
    rng: &RngStream,
) -> Result<Factorization> {
    power_dp_traced(w, rank, iters, sigma, clip, rng).map(|(f, _)| f)
}

/// [`power_dp`] that also reports the projection norms seen after every
/// orthonormalization. Each is bounded by `clip` when the input is.
pub fn power_dp_traced(
    w: &DenseMatrix,
    rank: usize,
    iters: usize,
    sigma: f64,
    clip: f64,
    rng: &RngStream,
) -> Result<(Factorization, ProjectionTrace)> {
    power_dp_general(w, rank, iters, sigma, clip, clip, rng)
}

/// [`power_dp`] with the noise scale decoupled from the norm bound: the input
/// must satisfy `‖w‖_F ≤ bound` and noise has std `sigma · sensitivity`.
pub(crate) fn power_dp_inner(
    w: &DenseMatrix,
    rank: usize,
    iters: usize,
    sigma: f64,
    bound: f64,
    sensitivity: f64,
    rng: &RngStream,
) -> Result<Factorization> {
    power_dp_general(w, rank, iters, sigma, bound, sensitivity, rng).map(|(f, _)| f)
}

fn power_dp_general(
    w: &DenseMatrix,
    rank: usize,
    iters: usize,
    sigma: f64,
    clip: f64,
    sensitivity: f64,
    rng: &RngStream,
) -> Result<(Factorization, ProjectionTrace)> {
    check_rank(w, rank, iters)?;
    check_bounded(w, clip)?;
    let mut ortho = rng.child(ORTHO);
    let mut trace = ProjectionTrace::default();
    let mut deficient = 0;
    let mut q = initial_sketch(rank, w.cols(), rng);
    let mut a = None;
    for it in 0..iters {
        let p = orthonormalize_columns(&matmul_transpose_b(w, &q)?, &mut ortho)?;
        deficient += p.deficient;
        let projected = matmul_transpose_a(&p.matrix, w)?;
        trace.left.push(frobenius_norm(&projected));
        let q_next = if it + 1 == iters {
            // same stream position as the final orthonormalization in power_iteration
            orthonormalize_rows(&projected, &mut rng.child(FINAL))?
        } else {
            orthonormalize_rows(&projected, &mut ortho)?
        };
        deficient += q_next.deficient;
        q = q_next.matrix;
        trace.right.push(frobenius_norm(&matmul_transpose_b(w, &q)?));
        a = Some(projected);
    }
    let a = a.expect("at least one iteration");
    debug_assert!(trace.left.iter().chain(&trace.right).all(|&v| v <= clip + NORM_SLACK));

    let clean_b = matmul_transpose_b(w, &q)?;
    let noisy_b = gaussian_mechanism(&clean_b, sensitivity, sigma, &mut rng.child(NOISE_B))?;
    let noisy_a = gaussian_mechanism(&a, sensitivity, sigma, &mut rng.child(NOISE_A))?;
    let a_out = if sigma == 0.0 {
        // without noise the last orthonormalization above already is orth_rows(A)
        q
    } else {
        let out = orthonormalize_rows(&noisy_a, &mut rng.child(FINAL).child(1))?;
        deficient += out.deficient;
        out.matrix
    };
    Ok((
        Factorization {
            pair: LoRAPair::new(a_out, noisy_b)?,
            deficient,
        },
        trace,
    ))
}

/// Input perturbation: `power_iteration(W + N(0, σ²C_W²))`.
pub fn factorize_input_perturb(
    w: &DenseMatrix,
    rank: usize,
    iters: usize,
    sigma: f64,
    clip: f64,
    rng: &RngStream,
) -> Result<Factorization> {
    check_rank(w, rank, iters)?;
    check_bounded(w, clip)?;
    let noisy = gaussian_mechanism(w, clip, sigma, &mut rng.child(NOISE_INPUT))?;
    power_iteration(&noisy, rank, iters, rng)
}

/// Worst-case output sensitivities `(Δ_A, Δ_B) = (2√r, 2·C_W)`.
pub fn output_sensitivities(rank: usize, clip: f64) -> (f64, f64) {
    (2.0 * (rank as f64).sqrt(), 2.0 * clip)
}

/// Output perturbation: `power_iteration(W)` followed by
/// `Ã = A + N(0, σ²Δ_A²)`, `B̃ = B + N(0, σ²Δ_B²)` with no re-orthonormalization.
pub fn factorize_output_perturb(
    w: &DenseMatrix,
    rank: usize,
    iters: usize,
    sigma: f64,
    clip: f64,
    rng: &RngStream,
) -> Result<Factorization> {
    check_rank(w, rank, iters)?;
    check_bounded(w, clip)?;
    let clean = power_iteration(w, rank, iters, rng)?;
    let (delta_a, delta_b) = output_sensitivities(rank, clip);
    let (a, b) = clean.pair.into_parts();
    let a = gaussian_mechanism(&a, delta_a, sigma, &mut rng.child(NOISE_A))?;
    let b = gaussian_mechanism(&b, delta_b, sigma, &mut rng.child(NOISE_B))?;
    Ok(Factorization {
        pair: LoRAPair::new(a, b)?,
        deficient: clean.deficient,
    })
}

/// `‖W − B·A‖_F`.
pub fn reconstruction_error(w: &DenseMatrix, pair: &LoRAPair) -> f64 {
    frobenius_norm(&w.sub(&pair.product()).expect("pair shape matches w"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row_gram_error(a: &DenseMatrix) -> f64 {
        matmul_transpose_b(a, a)
            .unwrap()
            .max_abs_diff(&DenseMatrix::identity(a.rows()))
    }

    #[test]
    fn pair_shape_checked() {
        assert!(LoRAPair::new(DenseMatrix::zeros(2, 5), DenseMatrix::zeros(4, 3)).is_err());
        let p = LoRAPair::new(DenseMatrix::zeros(2, 5), DenseMatrix::zeros(4, 2)).unwrap();
        assert_eq!(p.rank(), 2);
        assert_eq!(p.weight_shape(), (4, 5));
    }

    #[test]
    fn diag_rank_two_error_is_dropped_singular_value() {
        let w = DenseMatrix::diag(&[3.0, 2.0, 1.0]);
        let f = power_iteration(&w, 2, 10, &RngStream::new(1)).unwrap();
        let err = reconstruction_error(&w, &f.pair);
        assert!((err - 1.0).abs() < 1e-6, "err {err}");
        assert!(row_gram_error(f.pair.a()) < 1e-8);
    }

    #[test]
    fn zero_input() {
        let w = DenseMatrix::zeros(4, 6);
        let f = power_iteration(&w, 2, 3, &RngStream::new(2)).unwrap();
        assert!(f.pair.b().is_zero());
        assert!(f.pair.product().is_zero());
        assert!(row_gram_error(f.pair.a()) < 1e-12);
        assert!(f.deficient > 0);
    }

    #[test]
    fn exact_low_rank_recovered() {
        let mut rng = RngStream::new(3);
        let b0 = gaussian_matrix(12, 3, 1.0, &mut rng);
        let a0 = gaussian_matrix(3, 9, 1.0, &mut rng);
        let w = matmul(&b0, &a0).unwrap();
        let f = power_iteration(&w, 3, 20, &RngStream::new(4)).unwrap();
        assert!(reconstruction_error(&w, &f.pair) <= 1e-6 * frobenius_norm(&w));
    }

    #[test]
    fn rank_validation() {
        let w = DenseMatrix::zeros(3, 5);
        assert!(matches!(
            power_iteration(&w, 4, 1, &RngStream::new(0)),
            Err(Error::Shape(_))
        ));
        assert!(power_iteration(&w, 0, 1, &RngStream::new(0)).is_err());
        assert!(power_iteration(&w, 2, 0, &RngStream::new(0)).is_err());
    }

    #[test]
    fn private_engines_require_clipped_input() {
        let w = DenseMatrix::diag(&[3.0, 2.0, 1.0]);
        for method in [Method::PowerDp, Method::Input, Method::Output] {
            let err = factorize(method, &w, 2, 4, 1.0, 2.0, &RngStream::new(0)).unwrap_err();
            assert!(matches!(err, Error::Contract(_)), "{method:?}");
        }
    }

    #[test]
    fn zero_sigma_powerdp_matches_power_iteration() {
        let mut rng = RngStream::new(5);
        let w = gaussian_matrix(10, 7, 1.0, &mut rng);
        let clip = frobenius_norm(&w);
        let seed = RngStream::new(6);
        let a = power_iteration(&w, 3, 5, &seed).unwrap();
        let b = power_dp(&w, 3, 5, 0.0, clip, &seed).unwrap();
        assert!(a.pair.a().max_abs_diff(b.pair.a()) < 1e-12);
        assert!(a.pair.b().max_abs_diff(b.pair.b()) < 1e-12);
    }

    #[test]
    fn noise_only_on_zero_signal() {
        let w = DenseMatrix::zeros(40, 30);
        let f = power_dp(&w, 4, 4, 1.0, 2.0, &RngStream::new(8)).unwrap();
        assert!(row_gram_error(f.pair.a()) < 1e-12);
        let b = f.pair.b();
        let std = (b.data().iter().map(|v| v * v).sum::<f64>() / b.data().len() as f64).sqrt();
        assert!((std - 2.0).abs() < 0.3, "std {std}");
    }

    #[test]
    fn output_sensitivity_scales_with_sqrt_rank() {
        let (a4, b4) = output_sensitivities(4, 2.0);
        let (a16, b16) = output_sensitivities(16, 2.0);
        assert_eq!(a16, 2.0 * a4);
        assert_eq!(b4, b16);
        assert_eq!(b4, 4.0);
    }

    #[test]
    fn zero_sigma_ablations_equal_power_iteration() {
        let mut rng = RngStream::new(9);
        let w = gaussian_matrix(8, 6, 0.2, &mut rng);
        let clip = frobenius_norm(&w) + 1.0;
        let seed = RngStream::new(10);
        let base = power_iteration(&w, 2, 4, &seed).unwrap();
        for method in [Method::Input, Method::Output] {
            let f = factorize(method, &w, 2, 4, 0.0, clip, &seed).unwrap();
            assert_eq!(f.pair, base.pair, "{method:?}");
        }
    }

    #[test]
    fn method_parse() {
        assert_eq!("powerdp".parse::<Method>().unwrap(), Method::PowerDp);
        assert!("svd".parse::<Method>().is_err());
    }
}
