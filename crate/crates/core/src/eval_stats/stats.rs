use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Up to this many pairs every sign assignment is enumerated.
pub const EXACT_MAX_PAIRS: usize = 20;
pub const MIN_PAIRS: usize = 5;
pub const DEFAULT_SAMPLED_FLIPS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationTestResult {
    pub n_pairs: usize,
    pub mean_delta: f64,
    pub p_value: f64,
    /// Sign assignments evaluated; `2^n` when exact.
    pub num_permutations: u64,
    pub exact: bool,
    /// Seed of the sampled flips; `None` when exact.
    pub seed: Option<u64>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Two-sided sign-flip test of `mean(deltas) = 0`.
///
/// Exact over all `2^n` assignments when `n <= 20`; otherwise
/// `max(flips, 10_000)` random assignments drawn from `seed`, with
/// `p = (extreme + 1) / (draws + 1)`.
pub fn sign_flip_test(deltas: &[f64], seed: u64, flips: usize) -> Result<PermutationTestResult> {
    let n = deltas.len();
    if n < MIN_PAIRS {
        return Err(Error::Input(format!(
            "permutation test needs at least {MIN_PAIRS} pairs, got {n}"
        )));
    }
    if deltas.iter().any(|d| !d.is_finite()) {
        return Err(Error::Numeric("non-finite delta".into()));
    }
    let observed = mean(deltas);
    let threshold = observed.abs() * (1.0 - 1e-12) - 1e-15;
    let extreme = |signs: u64| {
        let s: f64 = deltas
            .iter()
            .enumerate()
            .map(|(i, d)| if signs >> i & 1 == 1 { -d } else { *d })
            .sum();
        (s / n as f64).abs() >= threshold
    };
    if n <= EXACT_MAX_PAIRS {
        let total = 1u64 << n;
        let count = (0..total).filter(|&s| extreme(s)).count() as u64;
        return Ok(PermutationTestResult {
            n_pairs: n,
            mean_delta: observed,
            p_value: count as f64 / total as f64,
            num_permutations: total,
            exact: true,
            seed: None,
        });
    }
    let draws = flips.max(DEFAULT_SAMPLED_FLIPS);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut count = 0u64;
    for _ in 0..draws {
        let s: f64 = deltas
            .iter()
            .map(|d| if rng.gen::<bool>() { -d } else { *d })
            .sum();
        if (s / n as f64).abs() >= threshold {
            count += 1;
        }
    }
    Ok(PermutationTestResult {
        n_pairs: n,
        mean_delta: observed,
        p_value: (count + 1) as f64 / (draws + 1) as f64,
        num_permutations: draws as u64,
        exact: false,
        seed: Some(seed),
    })
}

/// Sign-flip test on `treated[i] - control[i]`.
pub fn paired_permutation_test(
    treated: &[f64],
    control: &[f64],
    seed: u64,
) -> Result<PermutationTestResult> {
    if treated.len() != control.len() {
        return Err(Error::Input(format!(
            "unpaired data: {} treated vs {} control observations",
            treated.len(),
            control.len()
        )));
    }
    let deltas: Vec<f64> = treated.iter().zip(control).map(|(a, b)| a - b).collect();
    sign_flip_test(&deltas, seed, DEFAULT_SAMPLED_FLIPS)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_zero_is_null() {
        let r = sign_flip_test(&[0.0; 8], 0, 0).unwrap();
        assert_eq!(r.p_value, 1.0);
        assert!(r.exact);
    }

    #[test]
    fn all_positive_ten_pairs() {
        let r = sign_flip_test(&[0.01; 10], 0, 0).unwrap();
        assert_eq!(r.num_permutations, 1024);
        assert!((r.p_value - 2.0 / 1024.0).abs() < 1e-15);
    }

    #[test]
    fn sampled_branch_records_seed() {
        let d: Vec<f64> = (0..30)
            .map(|i| if i % 3 == 0 { -0.01 } else { 0.02 })
            .collect();
        let r = sign_flip_test(&d, 42, 0).unwrap();
        assert!(!r.exact);
        assert_eq!(r.seed, Some(42));
        assert_eq!(r.num_permutations, 10_000);
        assert!(r.p_value > 0.0 && r.p_value < 0.01);
        assert_eq!(r, sign_flip_test(&d, 42, 0).unwrap());
    }

    #[test]
    fn input_errors() {
        assert!(matches!(
            sign_flip_test(&[1.0; 4], 0, 0),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            paired_permutation_test(&[0.0; 6], &[0.0; 5], 0),
            Err(Error::Input(_))
        ));
    }
}
