//! Token engineering: importance scoring, top-k retention and the round-aware
//! retention schedule.

use std::fmt;
use std::sync::Arc;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::Registry;

/// Maps an `N x d` token matrix to `N` non-negative importance scores.
pub trait TokenScorer: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;
    fn score(&self, tokens: ArrayView2<'_, f64>) -> Vec<f64>;
}

/// Normalised L2 row magnitude: `s_k = |f_k| / sum_j |f_j|`.
#[derive(Clone, Copy, Debug, Default)]
pub struct L2Magnitude;

impl TokenScorer for L2Magnitude {
    fn name(&self) -> &'static str {
        "l2-norm"
    }

    fn score(&self, tokens: ArrayView2<'_, f64>) -> Vec<f64> {
        token_scores(tokens)
    }
}

/// Normalised L1 row magnitude.
#[derive(Clone, Copy, Debug, Default)]
pub struct L1Magnitude;

impl TokenScorer for L1Magnitude {
    fn name(&self) -> &'static str {
        "l1-norm"
    }

    fn score(&self, tokens: ArrayView2<'_, f64>) -> Vec<f64> {
        normalise(
            tokens
                .rows()
                .into_iter()
                .map(|r| r.iter().map(|v| v.abs()).sum())
                .collect(),
        )
    }
}

pub fn scorer_registry() -> Registry<Arc<dyn TokenScorer>> {
    let mut r: Registry<Arc<dyn TokenScorer>> = Registry::new("token scorer");
    r.register("l2-norm", |_| Ok(Arc::new(L2Magnitude)))
        .register("l1-norm", |_| Ok(Arc::new(L1Magnitude)));
    r
}

fn normalise(mags: Vec<f64>) -> Vec<f64> {
    let n = mags.len();
    let total: f64 = mags.iter().sum();
    if total == 0.0 || !total.is_finite() {
        return vec![1.0 / n as f64; n];
    }
    mags.into_iter().map(|m| m / total).collect()
}

/// Normalised L2 row norms. All-zero input yields uniform `1/N`.
pub fn token_scores(tokens: ArrayView2<'_, f64>) -> Vec<f64> {
    normalise(tokens.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect())
}

/// Linear decay of the retained-token fraction across rounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetentionSchedule {
    pub k_start: f64,
    pub k_end: f64,
    pub rounds: u32,
}

impl Default for RetentionSchedule {
    fn default() -> Self {
        Self {
            k_start: 0.80,
            k_end: 0.60,
            rounds: 15,
        }
    }
}

impl RetentionSchedule {
    pub fn new(k_start: f64, k_end: f64, rounds: u32) -> Result<Self> {
        let s = Self { k_start, k_end, rounds };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.k_end && self.k_end <= self.k_start && self.k_start <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "retention schedule needs 0 < k_end <= k_start <= 1, got k_start={} k_end={}",
                self.k_start, self.k_end
            )));
        }
        if self.rounds == 0 {
            return Err(Error::InvalidArgument("retention schedule needs rounds >= 1".into()));
        }
        Ok(())
    }

    pub fn ratio(&self, round: u32) -> Result<f64> {
        retention_ratio(round, self)
    }
}

/// `k(r) = k_start - (r/R)(k_start - k_end)`.
///
/// Evaluated as `(1-t) k_start + t k_end` so both endpoints are exact.
pub fn retention_ratio(round: u32, sched: &RetentionSchedule) -> Result<f64> {
    if round > sched.rounds {
        return Err(Error::InvalidArgument(format!(
            "round {round} beyond schedule length {}",
            sched.rounds
        )));
    }
    let t = round as f64 / sched.rounds as f64;
    Ok((1.0 - t) * sched.k_start + t * sched.k_end)
}

/// `ceil(k * n)`, clamped to `[1, n]`.
///
/// A relative slack of 1e-12 absorbs products such as `0.7 * 10 = 7.000000000000001`.
pub fn retained_count(k: f64, n: usize) -> usize {
    let x = k * n as f64;
    let m = (x - 1e-12 * x.abs().max(1.0)).ceil();
    (m.max(1.0) as usize).min(n)
}

/// Indices of the `ceil(k N)` highest scores, ties to the lower index, ascending.
pub fn select_tokens(scores: &[f64], k: f64) -> Vec<usize> {
    let m = retained_count(k, scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept = order[..m].to_vec();
    kept.sort_unstable();
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    #[test]
    fn scores_from_norms() {
        let t = array![[3.0, 0.0], [0.0, 4.0]];
        let s = token_scores(t.view());
        assert!((s[0] - 3.0 / 7.0).abs() < 1e-15);
        assert!((s[1] - 4.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn identical_and_zero_tokens_score_uniformly() {
        let t = Array2::from_elem((5, 3), 1.5);
        assert!(token_scores(t.view()).iter().all(|&s| (s - 0.2).abs() < 1e-15));
        let z = Array2::<f64>::zeros((4, 3));
        assert_eq!(token_scores(z.view()), vec![0.25; 4]);
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let s = RetentionSchedule::default();
        assert_eq!(retention_ratio(0, &s).unwrap(), 0.80);
        assert_eq!(retention_ratio(15, &s).unwrap(), 0.60);
        assert!((retention_ratio(9, &s).unwrap() - 0.68).abs() < 1e-12);
        assert!(retention_ratio(16, &s).is_err());
    }

    #[test]
    fn schedule_rejects_bad_bounds() {
        assert!(RetentionSchedule::new(0.6, 0.8, 15).is_err());
        assert!(RetentionSchedule::new(1.1, 0.8, 15).is_err());
        assert!(RetentionSchedule::new(0.8, 0.0, 15).is_err());
        assert!(RetentionSchedule::new(0.8, 0.6, 0).is_err());
        assert!(RetentionSchedule::new(1.0, 1.0, 1).is_ok());
    }

    #[test]
    fn ceiling_rule() {
        assert_eq!(retained_count(0.25, 10), 3);
        assert_eq!(retained_count(0.7, 10), 7);
        assert_eq!(retained_count(0.5, 16), 8);
        assert_eq!(retained_count(0.6, 16), 10);
        assert_eq!(retained_count(1e-9, 16), 1);
        assert_eq!(retained_count(1.0, 16), 16);
    }

    #[test]
    fn ties_go_to_lower_index() {
        assert_eq!(select_tokens(&[0.1, 0.4, 0.4, 0.1], 0.5), vec![1, 2]);
        assert_eq!(select_tokens(&[0.25; 4], 0.5), vec![0, 1]);
        assert_eq!(select_tokens(&[0.1, 0.2, 0.3, 0.4], 0.25), vec![3]);
    }

    #[test]
    fn registry_knows_default_scorer() {
        let r = scorer_registry();
        assert_eq!(r.build("l2-norm").unwrap().name(), "l2-norm");
        assert_eq!(r.build("l1-norm").unwrap().name(), "l1-norm");
        assert!(r.build("attention").is_err());
    }

    proptest! {
        #[test]
        fn scores_are_a_distribution(vals in proptest::collection::vec(-10.0f64..10.0, 1..64)) {
            let n = vals.len();
            let t = Array2::from_shape_vec((n, 1), vals).unwrap();
            let s = token_scores(t.view());
            prop_assert!(s.iter().all(|&v| v >= 0.0));
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn selection_matches_full_sort(scores in proptest::collection::vec(0u8..6, 1..40), k in 0.01f64..=1.0) {
            // Coarse integer scores force many ties.
            let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
            let got = select_tokens(&scores, k);
            let m = (k * scores.len() as f64 - 1e-12).ceil().max(1.0) as usize;
            let mut pairs: Vec<(f64, usize)> = scores.iter().copied().zip(0..).collect();
            // Stable sort on descending score keeps lower indices first within ties.
            pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            let mut want: Vec<usize> = pairs[..m.min(scores.len())].iter().map(|p| p.1).collect();
            want.sort();
            prop_assert_eq!(got, want);
        }
    }
}
