use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Positions of a road sequence hidden for reconstruction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub positions: Vec<usize>,
    pub span: usize,
    pub ratio: f64,
}

impl MaskPlan {
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.positions.binary_search(&i).is_ok()
    }
}

/// Number of masked positions for a sequence: `max(span, ⌊ratio·len⌋)`
/// rounded down to a multiple of `span`, keeping at least two positions
/// visible. Zero when `ratio` is 0 or `len < span + 2`.
pub fn mask_count(len: usize, ratio: f64, span: usize) -> usize {
    if span == 0 || ratio <= 0.0 || len < span + 2 {
        return 0;
    }
    let want = span.max((ratio * len as f64).floor() as usize).min(len - 2);
    want / span * span
}

/// Non-overlapping spans of length `span` at uniformly random starts.
pub fn plan_mask(len: usize, ratio: f64, span: usize, seed: u64) -> MaskPlan {
    let n = mask_count(len, ratio, span);
    let mut positions = Vec::with_capacity(n);
    if n > 0 {
        let k = n / span;
        let free = len - n;
        // Choosing k of (free + k) slots and expanding each chosen slot into a
        // span gives a uniform draw over non-overlapping placements.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut slots = sample(&mut rng, free + k, k).into_vec();
        slots.sort_unstable();
        for (i, s) in slots.into_iter().enumerate() {
            let start = s + i * (span - 1);
            positions.extend(start..start + span);
        }
    }
    MaskPlan { positions, span, ratio }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        let p = plan_mask(10, 0.2, 2, 7);
        assert_eq!(p.positions.len(), 2);
        assert_eq!(p.positions[1], p.positions[0] + 1);
        assert!(plan_mask(10, 0.0, 2, 7).is_empty());
        assert!(plan_mask(3, 0.2, 2, 7).is_empty());
        assert_eq!(plan_mask(4, 0.2, 2, 7).positions.len(), 2);
        assert_eq!(plan_mask(10, 0.2, 2, 7), plan_mask(10, 0.2, 2, 7));
    }

    proptest! {
        #[test]
        fn plan_invariants(len in 0usize..80, ratio in 0.0f64..0.9, span in 1usize..5, seed in any::<u64>()) {
            let p = plan_mask(len, ratio, span, seed);
            let n = p.positions.len();
            prop_assert_eq!(n % span, 0);
            prop_assert!(n < len.max(1));
            prop_assert!(p.positions.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(p.positions.iter().all(|&i| i < len));
            if n > 0 {
                prop_assert!(n + 2 <= len);
                // every maximal run has length ≥ span
                let mut run = 1;
                for w in p.positions.windows(2) {
                    if w[1] == w[0] + 1 { run += 1 } else { prop_assert!(run >= span); run = 1 }
                }
                prop_assert!(run >= span);
            }
        }
    }
}
