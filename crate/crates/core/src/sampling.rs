//! Ensemble-aware distribution of a sample budget across pyramid levels.
//!
//! For an object of size `S` (pixels), level `k` with reference size `s_k`
//! receives `N_k = α · softmax_k(−λ Δ_k²)` samples where
//! `Δ_k = |log₂(S / s_k)|`. `λ = 0` spreads the budget evenly; large `λ`
//! collapses it onto the level whose reference size is closest to `S`.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{SegmentationMask, DEFAULT_REFERENCE_SIZES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingParams {
    /// Total budget shared by all levels.
    pub alpha: f64,
    /// Concentration; zero gives a uniform plan.
    pub lambda: f64,
    pub reference_sizes: Vec<f64>,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams {
            alpha: 10.0,
            lambda: 1.0,
            reference_sizes: DEFAULT_REFERENCE_SIZES.to_vec(),
        }
    }
}

impl SamplingParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidParameter(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if self.reference_sizes.is_empty()
            || self.reference_sizes.iter().any(|s| !(*s > 0.0) || !s.is_finite())
            || self.reference_sizes.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(Error::InvalidParameter(
                "reference sizes must be positive and strictly increasing".into(),
            ));
        }
        Ok(())
    }
}

/// Real-valued per-level sample counts `N_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub expected: Vec<f64>,
}

impl SamplingPlan {
    pub fn total(&self) -> f64 {
        self.expected.iter().sum()
    }
}

/// `Δ_k = |log₂(S / s_k)|` for every level.
pub fn level_deltas(size: f64, params: &SamplingParams) -> Result<Vec<f64>> {
    if !(size > 0.0) || !size.is_finite() {
        return Err(Error::NonPositiveSize(size));
    }
    Ok(params
        .reference_sizes
        .iter()
        .map(|s| (size / s).log2().abs())
        .collect())
}

pub fn sample_counts(size: f64, params: &SamplingParams) -> Result<SamplingPlan> {
    params.validate()?;
    let deltas = level_deltas(size, params)?;
    let logits: Vec<f64> = deltas.iter().map(|d| -params.lambda * d * d).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let norm: f64 = weights.iter().sum();
    Ok(SamplingPlan {
        expected: weights.iter().map(|w| params.alpha * w / norm).collect(),
    })
}

/// Unbiased stochastic rounding: `floor(N) + Bernoulli(frac(N))`.
pub fn realize_counts_with<R: Rng + ?Sized>(plan: &SamplingPlan, rng: &mut R) -> Vec<usize> {
    plan.expected
        .iter()
        .map(|&n| {
            let n = n.max(0.0);
            let base = n.floor();
            let frac = n - base;
            // one draw per level keeps the stream layout independent of the values
            let u: f64 = rng.random();
            base as usize + usize::from(u < frac)
        })
        .collect()
}

pub fn realize_counts(plan: &SamplingPlan, seed: u64) -> Vec<usize> {
    realize_counts_with(plan, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Deterministic round-half-up.
pub fn round_counts(plan: &SamplingPlan) -> Vec<usize> {
    plan.expected
        .iter()
        .map(|&n| (n.max(0.0) + 0.5).floor() as usize)
        .collect()
}

/// Uniformly picks `counts[k]` distinct masked cells at every level, or every
/// masked cell when the level has fewer. Cells come back in row-major order.
pub fn select_cells_with<R: Rng + ?Sized>(
    mask: &SegmentationMask,
    counts: &[usize],
    rng: &mut R,
) -> Vec<Vec<(usize, usize)>> {
    mask.levels
        .iter()
        .zip(counts.iter().copied().chain(std::iter::repeat(0)))
        .map(|(lm, n)| {
            let cells = lm.masked_cells();
            if n >= cells.len() {
                return cells;
            }
            let mut picked = index::sample(rng, cells.len(), n).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| cells[i]).collect()
        })
        .collect()
}

pub fn select_cells(mask: &SegmentationMask, counts: &[usize], seed: u64) -> Vec<Vec<(usize, usize)>> {
    select_cells_with(mask, counts, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Point2D;
    use crate::grid::{rasterize_mask, PyramidSpec};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn params(lambda: f64) -> SamplingParams {
        SamplingParams {
            lambda,
            ..SamplingParams::default()
        }
    }

    #[test]
    fn deltas_for_size_64() {
        let d = level_deltas(64.0, &params(1.0)).unwrap();
        assert_eq!(d, vec![2.0, 1.0, 0.0, 1.0, 2.0]);
        for s in DEFAULT_REFERENCE_SIZES {
            let d = level_deltas(s, &params(1.0)).unwrap();
            assert!(d.contains(&0.0));
        }
        assert!(matches!(level_deltas(0.0, &params(1.0)), Err(Error::NonPositiveSize(_))));
        assert!(level_deltas(-3.0, &params(1.0)).is_err());
    }

    #[test]
    fn uniform_plan_at_zero_lambda() {
        for s in [3.0, 17.5, 64.0, 1000.0] {
            let plan = sample_counts(s, &params(0.0)).unwrap();
            assert!(plan.expected.iter().all(|&n| n == 2.0), "{plan:?}");
        }
    }

    #[test]
    fn lambda_one_size_64() {
        // weights e^{-4}, e^{-1}, 1, e^{-1}, e^{-4}
        let e = std::f64::consts::E;
        let norm = 1.0 + 2.0 / e + 2.0 / e.powi(4);
        let oracle = [10.0 / e.powi(4) / norm, 10.0 / e / norm, 10.0 / norm];
        let plan = sample_counts(64.0, &params(1.0)).unwrap();
        let want = [oracle[0], oracle[1], oracle[2], oracle[1], oracle[0]];
        for (a, b) in plan.expected.iter().zip(want) {
            assert_relative_eq!(*a, b, epsilon = 1e-12);
        }
        for (a, b) in plan.expected.iter().zip([0.1033, 2.0756, 5.6421, 2.0756, 0.1033]) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn hard_assignment_at_large_lambda() {
        let plan = sample_counts(32.0, &params(30.0)).unwrap();
        for (a, b) in plan.expected.iter().zip([0.0, 10.0, 0.0, 0.0, 0.0]) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_params() {
        assert!(sample_counts(64.0, &params(-1.0)).is_err());
        let mut p = params(1.0);
        p.reference_sizes = vec![32.0, 16.0];
        assert!(sample_counts(64.0, &p).is_err());
        p = params(1.0);
        p.alpha = 0.0;
        assert!(sample_counts(64.0, &p).is_err());
    }

    #[test]
    fn realize_integer_plan_is_exact() {
        let plan = SamplingPlan {
            expected: vec![2.0; 5],
        };
        for seed in 0..50 {
            assert_eq!(realize_counts(&plan, seed), vec![2; 5]);
        }
        let zero = SamplingPlan {
            expected: vec![0.0, 3.0],
        };
        assert_eq!(realize_counts(&zero, 9)[0], 0);
    }

    #[test]
    fn realize_is_unbiased() {
        let plan = SamplingPlan {
            expected: vec![5.6421],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let n = 100_000;
        let total: usize = (0..n).map(|_| realize_counts_with(&plan, &mut rng)[0]).sum();
        let mean = total as f64 / n as f64;
        assert!((mean - 5.6421).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn round_half_up() {
        let plan = SamplingPlan {
            expected: vec![0.1033, 2.0756, 5.6421, 0.5, 2.4999],
        };
        assert_eq!(round_counts(&plan), vec![0, 2, 6, 1, 2]);
    }

    fn four_cell_mask() -> SegmentationMask {
        let spec = PyramidSpec::new(64, 64, &[32], &[32.0]).unwrap();
        let sq = [
            Point2D::new(0.0, 0.0),
            Point2D::new(64.0, 0.0),
            Point2D::new(64.0, 64.0),
            Point2D::new(0.0, 64.0),
        ];
        rasterize_mask(&spec, &sq).unwrap()
    }

    #[test]
    fn selection_clamps_and_empties() {
        let mask = four_cell_mask();
        assert_eq!(select_cells(&mask, &[4], 0)[0].len(), 4);
        assert_eq!(select_cells(&mask, &[9], 0)[0], mask.levels[0].masked_cells());
        assert!(select_cells(&mask, &[0], 0)[0].is_empty());
        let a = select_cells(&mask, &[2], 77);
        assert_eq!(a, select_cells(&mask, &[2], 77));
        let s = &a[0];
        assert!(s[0] != s[1]);
    }

    #[test]
    fn selection_is_uniform() {
        let mask = four_cell_mask();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            let (r, c) = select_cells_with(&mask, &[1], &mut rng)[0][0];
            counts[r * 2 + c] += 1;
        }
        for c in counts {
            assert!((c as i64 - 2500).abs() <= 150, "{counts:?}");
        }
    }

    proptest! {
        #[test]
        fn plan_sums_to_alpha(size in 0.5f64..2000.0, lambda in 0.0f64..50.0) {
            let plan = sample_counts(size, &params(lambda)).unwrap();
            prop_assert!((plan.total() - 10.0).abs() < 1e-9);
            prop_assert!(plan.expected.iter().all(|n| *n >= 0.0));
        }

        #[test]
        fn concentration_grows_with_lambda(k in 0usize..5, l1 in 0.0f64..30.0, dl in 0.0f64..30.0) {
            let s = DEFAULT_REFERENCE_SIZES[k];
            let a = sample_counts(s, &params(l1)).unwrap().expected[k];
            let b = sample_counts(s, &params(l1 + dl)).unwrap().expected[k];
            prop_assert!(b >= a - 1e-12);
        }

        #[test]
        fn symmetric_deltas_give_symmetric_plan(lambda in 0.0f64..10.0) {
            let plan = sample_counts(64.0, &params(lambda)).unwrap();
            prop_assert!((plan.expected[0] - plan.expected[4]).abs() < 1e-12);
            prop_assert!((plan.expected[1] - plan.expected[3]).abs() < 1e-12);
        }
    }
}
