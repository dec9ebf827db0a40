//! Credit extraction from bucketed replay returns.
//!
//! Within one context bucket, each candidate's replays are clipped and
//! averaged; the candidate's advantage is its mean return minus the
//! count-weighted mean of every *other* candidate's returns (the leave-one-out
//! baseline). Because the baseline never touches the candidate's own replays,
//! it is conditionally independent of the evaluated action, and because every
//! candidate in a bucket shares the same context, any context-level shift
//! cancels exactly. The full-sample variant (baseline over all candidates,
//! including self) is kept for the no-LOO ablation; at equal counts it equals
//! `(1 - 1/J)` times the LOO credit.

use serde::{Deserialize, Serialize};

use crate::protocol::ContextKey;

/// Bounds applied to every raw return before aggregation.
pub const RETURN_CLIP: (f64, f64) = (-10.0, 10.0);

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CreditError {
    #[error("cannot aggregate an empty return list")]
    EmptyReturns,
    #[error("leave-one-out baseline needs at least two candidates")]
    SingleCandidate,
    #[error("means and counts disagree in length: {means} vs {counts}")]
    LengthMismatch { means: usize, counts: usize },
    #[error("candidate {index} has zero replay count")]
    ZeroCount { index: usize },
}

/// One context-conditioned training tuple consumed by the optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreditTuple {
    pub event_type: usize,
    /// Acting role of the event type, carried so the optimizer can address
    /// the shared table without protocol access.
    pub role: usize,
    pub key: ContextKey,
    pub candidate: u32,
    pub advantage: f64,
    pub behavior_log_prob: f64,
}

/// Clamps a raw return to the configured clip range.
pub fn clip_return(r: f64) -> f64 {
    r.clamp(RETURN_CLIP.0, RETURN_CLIP.1)
}

/// Mean of clipped returns.
pub fn aggregate(returns: &[f64]) -> Result<f64, CreditError> {
    if returns.is_empty() {
        return Err(CreditError::EmptyReturns);
    }
    Ok(returns.iter().map(|&r| clip_return(r)).sum::<f64>() / returns.len() as f64)
}

fn check_lengths(means: &[f64], counts: &[usize]) -> Result<(), CreditError> {
    if means.len() != counts.len() {
        return Err(CreditError::LengthMismatch {
            means: means.len(),
            counts: counts.len(),
        });
    }
    if let Some(index) = counts.iter().position(|&c| c == 0) {
        return Err(CreditError::ZeroCount { index });
    }
    Ok(())
}

/// Count-weighted leave-one-out baseline for candidate `j`:
/// `sum_{j'!=j} c_{j'} mean_{j'} / sum_{j'!=j} c_{j'}`.
pub fn loo_baseline(means: &[f64], counts: &[usize], j: usize) -> Result<f64, CreditError> {
    check_lengths(means, counts)?;
    if means.len() < 2 {
        return Err(CreditError::SingleCandidate);
    }
    let mut weighted = 0.0;
    let mut total = 0usize;
    for (idx, (&m, &c)) in means.iter().zip(counts.iter()).enumerate() {
        if idx != j {
            weighted += c as f64 * m;
            total += c;
        }
    }
    Ok(weighted / total as f64)
}

/// Contextual counterfactual credit: per-candidate mean minus its LOO
/// baseline.
pub fn c3_credit(means: &[f64], counts: &[usize]) -> Result<Vec<f64>, CreditError> {
    (0..means.len())
        .map(|j| Ok(means[j] - loo_baseline(means, counts, j)?))
        .collect()
}

/// Ablation credit: per-candidate mean minus the coupled full-sample average
/// over all candidates (self included). A lone candidate self-centers to 0.
pub fn full_sample_credit(means: &[f64], counts: &[usize]) -> Result<Vec<f64>, CreditError> {
    check_lengths(means, counts)?;
    if means.is_empty() {
        return Err(CreditError::EmptyReturns);
    }
    let total: usize = counts.iter().sum();
    let baseline = means
        .iter()
        .zip(counts.iter())
        .map(|(&m, &c)| c as f64 * m)
        .sum::<f64>()
        / total as f64;
    Ok(means.iter().map(|&m| m - baseline).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn clip_interior_and_bounds() {
        assert_eq!(clip_return(0.7), 0.7);
        assert_eq!(clip_return(12.0), 10.0);
        assert_eq!(clip_return(-11.0), -10.0);
    }

    #[test]
    fn aggregate_is_mean() {
        assert_eq!(aggregate(&[1.0, 0.0]).unwrap(), 0.5);
        assert_eq!(aggregate(&[0.42]).unwrap(), 0.42);
        assert_eq!(aggregate(&[0.3, 0.3, 0.3]).unwrap(), 0.3);
        assert!(matches!(aggregate(&[]), Err(CreditError::EmptyReturns)));
    }

    #[test]
    fn aggregate_clips_first() {
        assert_eq!(aggregate(&[12.0, 8.0]).unwrap(), 9.0);
    }

    #[test]
    fn loo_baseline_hand_values() {
        // means (1,0,0,0), unit counts: baseline for j=0 averages the zeros
        let means = [1.0, 0.0, 0.0, 0.0];
        let counts = [1, 1, 1, 1];
        assert_eq!(loo_baseline(&means, &counts, 0).unwrap(), 0.0);

        // means (0.8, 0.4) with counts (3, 1)
        let means = [0.8, 0.4];
        let counts = [3, 1];
        assert_abs_diff_eq!(loo_baseline(&means, &counts, 0).unwrap(), 0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(loo_baseline(&means, &counts, 1).unwrap(), 0.8, epsilon = 1e-15);
    }

    #[test]
    fn loo_baseline_constant_means() {
        let means = [0.6, 0.6, 0.6];
        let counts = [2, 5, 1];
        for j in 0..3 {
            assert_abs_diff_eq!(loo_baseline(&means, &counts, j).unwrap(), 0.6, epsilon = 1e-15);
        }
    }

    #[test]
    fn loo_rejects_single_candidate() {
        assert!(matches!(
            loo_baseline(&[0.5], &[4], 0),
            Err(CreditError::SingleCandidate)
        ));
    }

    #[test]
    fn c3_credit_hand_values() {
        let a = c3_credit(&[1.0, 0.0, 0.0, 0.0], &[1, 1, 1, 1]).unwrap();
        assert_abs_diff_eq!(a[0], 1.0, epsilon = 1e-15);
        for &x in &a[1..] {
            assert_abs_diff_eq!(x, -1.0 / 3.0, epsilon = 1e-15);
        }

        let a = c3_credit(&[0.8, 0.4], &[3, 1]).unwrap();
        assert_abs_diff_eq!(a[0], 0.4, epsilon = 1e-15);
        assert_abs_diff_eq!(a[1], -0.4, epsilon = 1e-15);
    }

    #[test]
    fn c3_credit_zero_when_flat() {
        let a = c3_credit(&[0.25, 0.25, 0.25], &[1, 2, 3]).unwrap();
        for x in a {
            assert_eq!(x, 0.0);
        }
    }

    #[test]
    fn full_sample_hand_values() {
        let a = full_sample_credit(&[1.0, 0.0], &[1, 1]).unwrap();
        assert_eq!(a, vec![0.5, -0.5]);
        let a = full_sample_credit(&[0.7], &[5]).unwrap();
        assert_eq!(a, vec![0.0]);
    }

    #[test]
    fn baseline_ignores_own_returns() {
        // perturbing candidate j's mean must leave b_{-j} bit-identical
        let means = [0.9, 0.2, 0.6];
        let counts = [2, 3, 1];
        let b0 = loo_baseline(&means, &counts, 0).unwrap();
        let mut perturbed = means;
        perturbed[0] = -123.0;
        assert_eq!(b0.to_bits(), loo_baseline(&perturbed, &counts, 0).unwrap().to_bits());
    }

    proptest! {
        #[test]
        fn shift_invariance_any_counts(
            pairs in proptest::collection::vec((-1.0f64..1.0, 1usize..5), 2..6),
            shift in -2.0f64..2.0,
        ) {
            let means: Vec<f64> = pairs.iter().map(|&(m, _)| m).collect();
            let counts: Vec<usize> = pairs.iter().map(|&(_, c)| c).collect();
            let base = c3_credit(&means, &counts).unwrap();
            let shifted: Vec<f64> = means.iter().map(|m| m + shift).collect();
            let moved = c3_credit(&shifted, &counts).unwrap();
            for (a, b) in base.iter().zip(moved.iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn zero_sum_at_equal_counts(
            means in proptest::collection::vec(-1.0f64..1.0, 2..6),
            count in 1usize..4,
        ) {
            let counts = vec![count; means.len()];
            let a = c3_credit(&means, &counts).unwrap();
            prop_assert!(a.iter().sum::<f64>().abs() < 1e-12);
        }

        #[test]
        fn proportionality_at_equal_counts(
            means in proptest::collection::vec(-1.0f64..1.0, 2..6),
            count in 1usize..4,
        ) {
            let counts = vec![count; means.len()];
            let loo = c3_credit(&means, &counts).unwrap();
            let full = full_sample_credit(&means, &counts).unwrap();
            let j = means.len() as f64;
            for (f, l) in full.iter().zip(loo.iter()) {
                prop_assert!((f - (1.0 - 1.0 / j) * l).abs() < 1e-12);
            }
        }
    }
}
