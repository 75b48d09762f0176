//! Rényi-DP accounting for the Poisson-subsampled Gaussian mechanism.
//!
//! Per-step divergences follow the standard binomial expansion for integer
//! orders and the erfc series for fractional orders, as in the moments
//! accountant. Composition is additive per order; conversion to `(ε, δ)` uses
//! `ε = min_α rdp(α) + ln(1/δ)/(α − 1)`.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::dp::Adjacency;
use crate::error::{Error, Result};

/// Lower and upper ends of the noise-multiplier search in [`required_sigma`].
pub const SIGMA_BRACKET: (f64, f64) = (0.3, 1e6);

/// Order grid: 1.25 to 10.75 in quarter steps, every integer 11..=64, then a
/// sparse tail up to 512.
pub fn default_orders() -> Vec<f64> {
    let mut orders: Vec<f64> = (5..=43).map(|i| i as f64 * 0.25).collect();
    orders.extend((11..=64).map(f64::from));
    orders.extend([80.0, 96.0, 128.0, 192.0, 256.0, 384.0, 512.0]);
    orders
}

/// Per-order Rényi divergence of one mechanism invocation. An entry of
/// `f64::INFINITY` means the step has unbounded privacy loss at that order.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRdp {
    pub orders: Vec<f64>,
    pub rdp: Vec<f64>,
}

impl StepRdp {
    pub fn is_unbounded(&self) -> bool {
        self.rdp.iter().all(|v| v.is_infinite())
    }
}

/// Running composition state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountantState {
    pub orders: Vec<f64>,
    pub rdp: Vec<f64>,
    pub steps: u64,
}

impl Default for AccountantState {
    fn default() -> Self {
        Self::new(default_orders())
    }
}

impl AccountantState {
    pub fn new(orders: Vec<f64>) -> Self {
        assert!(orders.iter().all(|&a| a > 1.0), "Rényi orders must exceed 1");
        let rdp = vec![0.0; orders.len()];
        Self { orders, rdp, steps: 0 }
    }
}

/// Converted `(ε, δ)` guarantee and the order that achieved it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacyLoss {
    pub epsilon: f64,
    /// `None` when every order is unbounded.
    pub order: Option<f64>,
}

/// Sampling probability to account with for a given adjacency: a sample is
/// touched with probability `q_c · q_s`, a client with probability `q_c`.
pub fn effective_rate(adjacency: Adjacency, q_client: f64, q_sample: f64) -> f64 {
    match adjacency {
        Adjacency::Sample => q_client * q_sample,
        Adjacency::Client => q_client,
    }
}

pub fn step_rdp(sigma: f64, q: f64, orders: &[f64]) -> Result<StepRdp> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Domain(format!("sampling rate must lie in [0,1], got {q}")));
    }
    if !(sigma >= 0.0) {
        return Err(Error::Domain(format!("sigma must be >= 0, got {sigma}")));
    }
    let rdp = orders.iter().map(|&a| rdp_at_order(q, sigma, a)).collect();
    Ok(StepRdp {
        orders: orders.to_vec(),
        rdp,
    })
}

/// Adds `steps` copies of `step` to `state`.
pub fn compose(state: &AccountantState, step: &StepRdp, steps: u64) -> Result<AccountantState> {
    if state.orders != step.orders {
        return Err(Error::Shape("accountant and step use different order grids".into()));
    }
    let t = steps as f64;
    let rdp = state
        .rdp
        .iter()
        .zip(&step.rdp)
        .map(|(&acc, &s)| if steps == 0 { acc } else { acc + t * s })
        .collect();
    Ok(AccountantState {
        orders: state.orders.clone(),
        rdp,
        steps: state.steps + steps,
    })
}

pub fn rdp_to_dp(state: &AccountantState, delta: f64) -> Result<PrivacyLoss> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain(format!("delta must lie in (0,1), got {delta}")));
    }
    let log_inv_delta = (1.0 / delta).ln();
    let mut best = PrivacyLoss {
        epsilon: f64::INFINITY,
        order: None,
    };
    for (&alpha, &rdp) in state.orders.iter().zip(&state.rdp) {
        if !rdp.is_finite() {
            continue;
        }
        let eps = rdp + log_inv_delta / (alpha - 1.0);
        if eps < best.epsilon {
            best = PrivacyLoss {
                epsilon: eps,
                order: Some(alpha),
            };
        }
    }
    Ok(best)
}

/// ε after `steps` rounds at noise multiplier `sigma` and rate `q`.
pub fn epsilon_for(sigma: f64, q: f64, steps: u64, delta: f64, orders: &[f64]) -> Result<f64> {
    let step = step_rdp(sigma, q, orders)?;
    let state = compose(&AccountantState::new(orders.to_vec()), &step, steps)?;
    Ok(rdp_to_dp(&state, delta)?.epsilon)
}

/// Smallest noise multiplier in [`SIGMA_BRACKET`] whose `steps`-fold composition
/// at rate `q` certifies `(epsilon, delta)`. The returned value always satisfies
/// the target; the search stops once the bracket is narrower than `1e-4`
/// relative (and `1e-4` absolute).
pub fn required_sigma(epsilon: f64, delta: f64, q: f64, steps: u64, orders: &[f64]) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::Domain(format!("epsilon must be > 0, got {epsilon}")));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Domain(format!("sampling rate must lie in (0,1], got {q}")));
    }
    if steps == 0 {
        return Err(Error::Domain("need at least one step".into()));
    }
    let (mut lo, mut hi) = SIGMA_BRACKET;
    let eps_at = |s: f64| epsilon_for(s, q, steps, delta, orders);
    if eps_at(hi)? > epsilon {
        return Err(Error::Domain(format!(
            "epsilon {epsilon} unreachable with sigma <= {hi} (q={q}, T={steps}, delta={delta})"
        )));
    }
    if eps_at(lo)? <= epsilon {
        return Ok(lo);
    }
    while hi - lo > 1e-4 * hi.min(1.0) {
        let mid = if hi > 2.0 * lo {
            (lo * hi).sqrt()
        } else {
            0.5 * (lo + hi)
        };
        if eps_at(mid)? <= epsilon {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

fn rdp_at_order(q: f64, sigma: f64, alpha: f64) -> f64 {
    if q == 0.0 {
        return 0.0;
    }
    if sigma == 0.0 {
        return f64::INFINITY;
    }
    if q == 1.0 {
        return alpha / (2.0 * sigma * sigma);
    }
    let log_a = if alpha.fract() == 0.0 {
        log_a_integer(q, sigma, alpha as u64)
    } else {
        log_a_fractional(q, sigma, alpha)
    };
    let v = log_a / (alpha - 1.0);
    if v.is_nan() {
        f64::INFINITY
    } else {
        v.max(0.0)
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// `ln(e^a − e^b)` for `a ≥ b`.
fn log_sub(a: f64, b: f64) -> f64 {
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a <= b {
        return f64::NEG_INFINITY;
    }
    a + (-(b - a).exp()).ln_1p()
}

fn log_erfc(x: f64) -> f64 {
    if x < 25.0 {
        return erfc(x).ln();
    }
    // asymptotic expansion; relative error below 1e-12 for x >= 25
    let x2 = x * x;
    let series = 1.0 - 1.0 / (2.0 * x2) + 3.0 / (4.0 * x2 * x2) - 15.0 / (8.0 * x2 * x2 * x2)
        + 105.0 / (16.0 * x2 * x2 * x2 * x2);
    -x2 - (x * std::f64::consts::PI.sqrt()).ln() + series.ln()
}

fn log_a_integer(q: f64, sigma: f64, alpha: u64) -> f64 {
    let (ln_q, ln_1mq) = (q.ln(), (-q).ln_1p());
    let two_s2 = 2.0 * sigma * sigma;
    let mut log_a = f64::NEG_INFINITY;
    let mut log_coef = 0.0;
    let a = alpha as f64;
    for k in 0..=alpha {
        let kf = k as f64;
        if k > 0 {
            log_coef += (a - kf + 1.0).ln() - kf.ln();
        }
        let term = log_coef + kf * ln_q + (a - kf) * ln_1mq + (kf * kf - kf) / two_s2;
        log_a = log_add(log_a, term);
    }
    log_a
}

fn log_a_fractional(q: f64, sigma: f64, alpha: f64) -> f64 {
    let (ln_q, ln_1mq) = (q.ln(), (-q).ln_1p());
    let s2 = sigma * sigma;
    let z0 = s2 * (1.0 / q - 1.0).ln() + 0.5;
    let sqrt2s = std::f64::consts::SQRT_2 * sigma;
    let ln_half = 0.5f64.ln();
    let (mut log_a0, mut log_a1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    // binomial coefficient C(alpha, i) tracked as (ln|c|, sign)
    let mut log_coef = 0.0;
    let mut positive = true;
    for i in 0..100_000u32 {
        let fi = i as f64;
        if i > 0 {
            let factor = (alpha - fi + 1.0) / fi;
            log_coef += factor.abs().ln();
            if factor < 0.0 {
                positive = !positive;
            }
        }
        let j = alpha - fi;
        let log_t0 = log_coef + fi * ln_q + j * ln_1mq;
        let log_t1 = log_coef + j * ln_q + fi * ln_1mq;
        let log_e0 = ln_half + log_erfc((fi - z0) / sqrt2s);
        let log_e1 = ln_half + log_erfc((z0 - j) / sqrt2s);
        let log_s0 = log_t0 + (fi * fi - fi) / (2.0 * s2) + log_e0;
        let log_s1 = log_t1 + (j * j - j) / (2.0 * s2) + log_e1;
        if positive {
            log_a0 = log_add(log_a0, log_s0);
            log_a1 = log_add(log_a1, log_s1);
        } else {
            log_a0 = log_sub(log_a0, log_s0);
            log_a1 = log_sub(log_a1, log_s1);
        }
        if log_s0.max(log_s1) < -30.0 {
            break;
        }
    }
    log_add(log_a0, log_a1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_batch_closed_form() {
        let s = step_rdp(1.0, 1.0, &[2.0]).unwrap();
        assert_eq!(s.rdp, vec![1.0]);
        let s = step_rdp(3.0, 1.0, &[1.5, 7.25]).unwrap();
        assert_eq!(s.rdp, vec![1.5 / 18.0, 7.25 / 18.0]);
    }

    #[test]
    fn zero_rate_is_free() {
        let s = step_rdp(0.7, 0.0, &default_orders()).unwrap();
        assert!(s.rdp.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_sigma_is_unbounded() {
        let s = step_rdp(0.0, 0.3, &default_orders()).unwrap();
        assert!(s.is_unbounded());
        let state = compose(&AccountantState::default(), &s, 3).unwrap();
        let loss = rdp_to_dp(&state, 1e-5).unwrap();
        assert!(loss.epsilon.is_infinite());
        assert_eq!(loss.order, None);
    }

    #[test]
    fn integer_order_matches_direct_sum() {
        // alpha = 3 expansion written out by hand
        let (q, s): (f64, f64) = (0.2, 1.5);
        let e = |k: f64| ((k * k - k) / (2.0 * s * s)).exp();
        let a = (1.0 - q).powi(3) * e(0.0)
            + 3.0 * (1.0 - q).powi(2) * q * e(1.0)
            + 3.0 * (1.0 - q) * q * q * e(2.0)
            + q.powi(3) * e(3.0);
        let got = step_rdp(s, q, &[3.0]).unwrap().rdp[0];
        assert!((got - a.ln() / 2.0).abs() < 1e-14);
    }

    #[test]
    fn fractional_orders_interpolate_integer_neighbours() {
        let orders = [3.0, 3.5, 4.0];
        let s = step_rdp(2.0, 0.1, &orders).unwrap();
        assert!(s.rdp[0] <= s.rdp[1] && s.rdp[1] <= s.rdp[2], "{:?}", s.rdp);
    }

    #[test]
    fn fractional_series_agrees_at_integer_order() {
        // the erfc series is valid for integer orders too
        for &(q, s, a) in &[(0.1, 1.0, 4.0), (0.5, 4.0, 8.0), (0.01, 0.8, 12.0)] {
            let int = log_a_integer(q, s, a as u64);
            let frac = log_a_fractional(q, s, a);
            assert!(
                (int - frac).abs() < 1e-9 * int.abs().max(1.0),
                "{q} {s} {a}: {int} vs {frac}"
            );
        }
    }

    #[test]
    fn compose_examples() {
        let step = step_rdp(1.0, 1.0, &default_orders()).unwrap();
        let empty = AccountantState::default();
        assert_eq!(compose(&empty, &step, 0).unwrap().rdp, empty.rdp);
        let ten = compose(&empty, &step, 10).unwrap();
        let i = ten.orders.iter().position(|&a| a == 2.0).unwrap();
        assert_eq!(ten.rdp[i], 10.0);
        assert_eq!(ten.steps, 10);
        let split = compose(&compose(&empty, &step, 4).unwrap(), &step, 6).unwrap();
        assert_eq!(split.rdp, ten.rdp);
    }

    #[test]
    fn compose_rejects_grid_mismatch() {
        let step = step_rdp(1.0, 1.0, &[2.0]).unwrap();
        assert!(compose(&AccountantState::default(), &step, 1).is_err());
    }

    #[test]
    fn larger_delta_gives_smaller_epsilon() {
        let step = step_rdp(1.2, 0.05, &default_orders()).unwrap();
        let state = compose(&AccountantState::default(), &step, 100).unwrap();
        let a = rdp_to_dp(&state, 1e-6).unwrap().epsilon;
        let b = rdp_to_dp(&state, 1e-4).unwrap().epsilon;
        assert!(b < a);
    }

    #[test]
    fn required_sigma_errors() {
        let orders = default_orders();
        assert!(required_sigma(1e-9, 1e-5, 1.0, 10, &orders).is_err());
        assert!(required_sigma(1.0, 1e-5, 0.0, 10, &orders).is_err());
        assert!(required_sigma(1.0, 1e-5, 0.5, 0, &orders).is_err());
        assert!(required_sigma(-1.0, 1e-5, 0.5, 10, &orders).is_err());
    }

    #[test]
    fn required_sigma_clamps_to_bracket_floor() {
        let s = required_sigma(1e4, 1e-5, 0.01, 1, &default_orders()).unwrap();
        assert_eq!(s, SIGMA_BRACKET.0);
    }

    #[test]
    fn effective_rates() {
        assert_eq!(effective_rate(Adjacency::Sample, 0.5, 0.05), 0.025);
        assert_eq!(effective_rate(Adjacency::Client, 0.5, 0.05), 0.5);
    }
}
