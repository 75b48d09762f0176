//! Differential-privacy primitives: Frobenius clipping, the matrix Gaussian
//! mechanism and single-release noise calibration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{frobenius_norm, gaussian_matrix, DenseMatrix, RngStream};

/// Unit of privacy protected by a guarantee.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Adjacency {
    /// Neighbouring datasets differ in one training sample.
    #[default]
    Sample,
    /// Neighbouring datasets differ in one client's entire local dataset.
    Client,
}

/// Noise and clipping parameters governing one private run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacySpec {
    pub epsilon: f64,
    pub delta: f64,
    /// Noise multiplier; the per-entry noise std is `sigma * sensitivity`.
    pub sigma: f64,
    /// Frobenius clip threshold.
    pub clip: f64,
    pub adjacency: Adjacency,
}

impl PrivacySpec {
    pub fn new(epsilon: f64, delta: f64, sigma: f64, clip: f64, adjacency: Adjacency) -> Result<Self> {
        let spec = Self {
            epsilon,
            delta,
            sigma,
            clip,
            adjacency,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Domain(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Domain(format!("delta must lie in (0,1), got {}", self.delta)));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() {
            return Err(Error::Domain(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if !(self.clip > 0.0) {
            return Err(Error::Domain(format!("clip must be > 0, got {}", self.clip)));
        }
        Ok(())
    }
}

/// Scales `m` by `min(1, c / ‖m‖_F)`.
pub fn clip_frobenius(m: &DenseMatrix, c: f64) -> DenseMatrix {
    assert!(c > 0.0, "clip threshold must be positive");
    let norm = frobenius_norm(m);
    if norm <= c {
        return m.clone();
    }
    let mut out = m.scale(c / norm).expect("scaling by a factor below one stays finite");
    // rounding can leave the norm a few ulps above c
    let mut renorm = frobenius_norm(&out);
    while renorm > c {
        let fix = (c / renorm) * (1.0 - f64::EPSILON);
        out.data_mut().iter_mut().for_each(|v| *v *= fix);
        renorm = frobenius_norm(&out);
    }
    out
}

/// `m + N(0, (sigma · sensitivity)²)` entrywise. `sigma == 0` returns `m` unchanged.
pub fn gaussian_mechanism(m: &DenseMatrix, sensitivity: f64, sigma: f64, rng: &mut RngStream) -> Result<DenseMatrix> {
    if !(sensitivity > 0.0) {
        return Err(Error::Domain(format!("sensitivity must be > 0, got {sensitivity}")));
    }
    if !(sigma >= 0.0) {
        return Err(Error::Domain(format!("sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(m.clone());
    }
    let noise = gaussian_matrix(m.rows(), m.cols(), sigma * sensitivity, rng);
    m.add(&noise)
}

/// Smallest noise multiplier for which one Gaussian release with noise std
/// `sigma · Δ` is `(epsilon0, delta0)`-DP: `sqrt(2 ln(1.25/δ)) / ε`.
pub fn calibrate_sigma_single(epsilon0: f64, delta0: f64) -> Result<f64> {
    if !(epsilon0 > 0.0) {
        return Err(Error::Domain(format!("epsilon must be > 0, got {epsilon0}")));
    }
    if !(delta0 > 0.0 && delta0 < 1.0) {
        return Err(Error::Domain(format!("delta must lie in (0,1), got {delta0}")));
    }
    Ok((2.0 * (1.25 / delta0).ln()).sqrt() / epsilon0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn clip_examples() {
        assert!(clip_frobenius(&DenseMatrix::zeros(2, 2), 2.0).is_zero());
        let inside = DenseMatrix::from_rows(&[[0.6, 0.8]]);
        assert_eq!(clip_frobenius(&inside, 2.0), inside);
        let big = DenseMatrix::from_rows(&[[4.0, 0.0], [0.0, 0.0]]);
        let clipped = clip_frobenius(&big, 2.0);
        assert_eq!(clipped, DenseMatrix::from_rows(&[[2.0, 0.0], [0.0, 0.0]]));
        assert_eq!(frobenius_norm(&clipped), 2.0);
    }

    #[test]
    fn mechanism_without_noise_is_identity() {
        let m = DenseMatrix::from_rows(&[[1.5, -2.0], [0.25, 3.0]]);
        let out = gaussian_mechanism(&m, 2.0, 0.0, &mut RngStream::new(0)).unwrap();
        assert_eq!(out.data(), m.data());
    }

    #[test]
    fn mechanism_noise_scale() {
        let m = DenseMatrix::zeros(200, 500);
        let out = gaussian_mechanism(&m, 2.0, 1.0, &mut RngStream::new(77)).unwrap();
        let n = out.data().len() as f64;
        let std = (out.data().iter().map(|v| v * v).sum::<f64>() / n).sqrt();
        assert!((std - 2.0).abs() < 0.04, "std {std}");
    }

    #[test]
    fn mechanism_reproducible() {
        let m = DenseMatrix::zeros(3, 3);
        let a = gaussian_mechanism(&m, 1.0, 1.0, &mut RngStream::at(5, vec![1])).unwrap();
        let b = gaussian_mechanism(&m, 1.0, 1.0, &mut RngStream::at(5, vec![1])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mechanism_rejects_bad_sensitivity() {
        let m = DenseMatrix::zeros(1, 1);
        assert!(gaussian_mechanism(&m, 0.0, 1.0, &mut RngStream::new(0)).is_err());
    }

    #[test]
    fn calibration_examples() {
        let delta = 1.25 * (-0.5f64).exp();
        assert!((calibrate_sigma_single(1.0, delta).unwrap() - 1.0).abs() < 1e-15);
        // sqrt(2 ln 125000) evaluated independently
        let expected = (2.0 * 125_000f64.ln()).sqrt();
        let sigma = calibrate_sigma_single(1.0, 1e-5).unwrap();
        assert!((sigma - expected).abs() < 1e-15);
        assert!((sigma - 4.8448).abs() < 1e-4);
        assert_eq!(calibrate_sigma_single(2.0, 1e-5).unwrap(), sigma / 2.0);
        assert!(calibrate_sigma_single(1.0, 1.0).is_err());
        assert!(calibrate_sigma_single(1.0, 0.0).is_err());
        assert!(calibrate_sigma_single(-1.0, 0.5).is_err());
    }

    #[test]
    fn calibration_strictly_decreasing() {
        let mut prev = f64::INFINITY;
        for i in 1..50 {
            let s = calibrate_sigma_single(0.1 * i as f64, 1e-5).unwrap();
            assert!(s < prev);
            prev = s;
        }
        let mut prev = f64::INFINITY;
        for i in 1..30 {
            let s = calibrate_sigma_single(1.0, 1e-8 * 1.5f64.powi(i)).unwrap();
            assert!(s < prev);
            prev = s;
        }
    }

    #[test]
    fn spec_validation() {
        assert!(PrivacySpec::new(3.0, 1e-5, 1.0, 2.0, Adjacency::Sample).is_ok());
        assert!(PrivacySpec::new(0.0, 1e-5, 1.0, 2.0, Adjacency::Sample).is_err());
        assert!(PrivacySpec::new(3.0, 1.0, 1.0, 2.0, Adjacency::Sample).is_err());
        assert!(PrivacySpec::new(3.0, 1e-5, -1.0, 2.0, Adjacency::Sample).is_err());
        assert!(PrivacySpec::new(3.0, 1e-5, 1.0, 0.0, Adjacency::Client).is_err());
    }

    fn matrix_strategy() -> impl Strategy<Value = DenseMatrix> {
        (1usize..6, 1usize..6, any::<u64>(), 0.01f64..50.0)
            .prop_map(|(r, c, seed, s)| gaussian_matrix(r, c, s, &mut RngStream::new(seed)))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn clip_bounds_norm_idempotent_collinear(m in matrix_strategy(), c in 0.01f64..10.0) {
            let once = clip_frobenius(&m, c);
            prop_assert!(frobenius_norm(&once) <= c + 1e-12);
            prop_assert_eq!(clip_frobenius(&once, c), once.clone());
            let (nm, no) = (frobenius_norm(&m), frobenius_norm(&once));
            if nm > 0.0 {
                for (a, b) in m.data().iter().zip(once.data()) {
                    prop_assert!((a / nm - b / no).abs() <= 1e-12);
                }
            }
        }
    }
}
