//! Bit error accounting, exact binomial confidence bounds and the
//! frame-rate latency model.

use statrs::function::beta::beta_reg;
use thiserror::Error;

use crate::bits::BitString;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("accounting error: compared {tx} transmitted bits with {rx} received bits")]
pub struct LengthMismatch {
    pub tx: usize,
    pub rx: usize,
}

/// Hamming distance over length.
pub fn ber(tx_bits: &BitString, rx_bits: &BitString) -> Result<f64, LengthMismatch> {
    let d = tx_bits.hamming(rx_bits).ok_or(LengthMismatch {
        tx: tx_bits.len(),
        rx: rx_bits.len(),
    })?;
    if tx_bits.is_empty() {
        return Ok(0.0);
    }
    Ok(d as f64 / tx_bits.len() as f64)
}

/// Application latency when every capture is processed within one frame
/// interval: two captures per transmitted frame, `n_frame` frames.
pub fn latency_eq1(n_frame: usize, fps: f64) -> f64 {
    assert!(fps > 0.0, "fps must be positive");
    2.0 * n_frame as f64 / fps
}

pub const CONFIDENCE: f64 = 0.95;
pub const CI_METHOD: &str = "clopper-pearson";

/// Solves `f(p) = target` for increasing `f` on `[0, 1]` by bisection.
fn invert_increasing(f: impl Fn(f64) -> f64, target: f64) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Upper end of the two-sided 95% Clopper–Pearson interval, i.e. the
/// one-sided 97.5% upper bound on the error probability.
pub fn cp_upper_95(errors: u64, n: u64) -> f64 {
    assert!(n > 0 && errors <= n, "need 0 <= errors <= n, n > 0");
    if errors == n {
        return 1.0;
    }
    let alpha = (1.0 - CONFIDENCE) / 2.0;
    let (a, b) = ((errors + 1) as f64, (n - errors) as f64);
    // P(X <= k | p) = 1 - I_p(k + 1, n - k) = alpha
    invert_increasing(|p| beta_reg(a, b, p), 1.0 - alpha)
}

/// Lower end of the two-sided 95% Clopper–Pearson interval.
pub fn cp_lower_95(errors: u64, n: u64) -> f64 {
    assert!(n > 0 && errors <= n, "need 0 <= errors <= n, n > 0");
    if errors == 0 {
        return 0.0;
    }
    let alpha = (1.0 - CONFIDENCE) / 2.0;
    let (a, b) = (errors as f64, (n - errors + 1) as f64);
    invert_increasing(|p| beta_reg(a, b, p), alpha)
}

pub fn intervals_overlap(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 <= b.1 && b.0 <= a.1
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Binomial CDF by direct pmf recurrence; independent of the beta route.
    fn binom_cdf(k: u64, n: u64, p: f64) -> f64 {
        let mut pmf = (1.0 - p).powf(n as f64);
        let mut acc = pmf;
        for i in 0..k {
            pmf *= (n - i) as f64 / (i + 1) as f64 * p / (1.0 - p);
            acc += pmf;
        }
        acc
    }

    fn oracle_upper(k: u64, n: u64) -> f64 {
        // P(X <= k) decreases in p
        invert_increasing(|p| -binom_cdf(k, n, p), -0.025)
    }

    #[test]
    fn zero_errors_closed_form() {
        let n = 84_800;
        let closed = 1.0 - 0.025f64.powf(1.0 / n as f64);
        assert!((cp_upper_95(0, n) - closed).abs() < 1e-9 * closed + 1e-15);
        assert!((cp_upper_95(0, n) - 4.35e-5).abs() < 0.01e-5);
    }

    #[test]
    fn matches_binomial_oracle() {
        for &(k, n) in &[(1u64, 424u64), (12, 84_800), (3, 11_872), (40, 20_000), (5, 50)] {
            let got = cp_upper_95(k, n);
            let want = oracle_upper(k, n);
            assert!((got - want).abs() < 1e-7 * want, "k={k} n={n}: {got} vs {want}");
        }
    }

    #[test]
    fn degenerate_bounds() {
        assert_eq!(cp_upper_95(10, 10), 1.0);
        assert_eq!(cp_lower_95(0, 10), 0.0);
    }

    #[test]
    fn ber_examples() {
        let tx = BitString::from_bytes(&[0xA5; 53]);
        assert_eq!(ber(&tx, &tx).unwrap(), 0.0);
        let mut rx = tx.clone();
        rx.flip(100);
        assert!((ber(&tx, &rx).unwrap() - 1.0 / 424.0).abs() < 1e-15);
        assert!(ber(&tx, &BitString::from_bytes(&[0])).is_err());
        assert!((12.0f64 / 84_800.0 - 1.415e-4).abs() < 1e-6);
    }

    #[test]
    fn latency_model() {
        assert!((latency_eq1(53, 1000.0) - 0.106).abs() < 1e-15);
        assert!((latency_eq1(53, 100.0) - 1.06).abs() < 1e-12);
        assert_eq!(latency_eq1(0, 500.0), 0.0);
    }

    proptest! {
        #[test]
        fn upper_bound_dominates_estimate(n in 1u64..200_000, frac in 0.0f64..1.0) {
            let k = ((n as f64) * frac * 0.01) as u64;
            let u = cp_upper_95(k, n);
            prop_assert!(u >= k as f64 / n as f64);
            prop_assert!(u <= 1.0);
            prop_assert!(cp_lower_95(k, n) <= k as f64 / n as f64);
        }

        #[test]
        fn upper_bound_non_increasing_in_n(k in 0u64..50, n in 50u64..100_000, extra in 1u64..10_000) {
            prop_assert!(cp_upper_95(k, n + extra) <= cp_upper_95(k, n) * (1.0 + 1e-9));
        }
    }
}
