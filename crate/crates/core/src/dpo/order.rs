//! Curriculum ordering: descending score gap, stable under ties, chunked
//! into sequential mini-batches.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::domain::PreferenceTuple;
use crate::error::TrainError;

/// The sampling orders the trainer can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderingArm {
    /// Descending delta: easy (large-gap) pairs first.
    Curriculum,
    /// Seeded uniform shuffle.
    Shuffled,
    /// Ascending delta: hard pairs first.
    Anti,
}

impl OrderingArm {
    pub fn as_str(&self) -> &'static str {
        match self {
            OrderingArm::Curriculum => "curriculum",
            OrderingArm::Shuffled => "shuffled",
            OrderingArm::Anti => "anti",
        }
    }
}

impl fmt::Display for OrderingArm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OrderingArm {
    type Err = TrainError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "curriculum" => Ok(OrderingArm::Curriculum),
            "shuffled" => Ok(OrderingArm::Shuffled),
            "anti" => Ok(OrderingArm::Anti),
            other => Err(TrainError::UnknownOrdering(other.to_string())),
        }
    }
}

/// Stable sort of indices by delta, descending; ties keep ingestion order.
pub fn curriculum_order(tuples: &[PreferenceTuple]) -> Vec<usize> {
    let deltas: Vec<u8> = tuples.iter().map(|t| t.delta).collect();
    curriculum_order_by_delta(&deltas)
}

pub fn curriculum_order_by_delta(deltas: &[u8]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..deltas.len()).collect();
    order.sort_by(|&a, &b| deltas[b].cmp(&deltas[a]));
    order
}

/// Ascending counterpart used by the anti arm; ties keep ingestion order.
pub fn anti_order_by_delta(deltas: &[u8]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..deltas.len()).collect();
    order.sort_by(|&a, &b| deltas[a].cmp(&deltas[b]));
    order
}

/// Consecutive chunks of the ordered indices; the final partial batch is
/// kept, and concatenating all batches reproduces the input order exactly.
pub fn make_batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn stable_descending_example() {
        assert_eq!(curriculum_order_by_delta(&[12, 40, 3, 40]), vec![1, 3, 0, 2]);
    }

    #[test]
    fn equal_deltas_give_identity() {
        assert_eq!(curriculum_order_by_delta(&[7, 7, 7, 7]), vec![0, 1, 2, 3]);
    }

    #[test]
    fn empty_list_gives_empty_permutation() {
        assert!(curriculum_order_by_delta(&[]).is_empty());
    }

    #[test]
    fn batching_examples() {
        let order: Vec<usize> = (0..5).collect();
        assert_eq!(make_batches(&order, 2), vec![vec![0, 1], vec![2, 3], vec![4]]);
        assert_eq!(make_batches(&order, 9), vec![vec![0, 1, 2, 3, 4]]);
    }

    #[test]
    fn paper_scale_batch_arithmetic() {
        let order: Vec<usize> = (0..18_886).collect();
        let batches = make_batches(&order, 16);
        assert_eq!(batches.len(), 1_181);
        assert_eq!(batches.last().unwrap().len(), 6);
    }

    proptest! {
        #[test]
        fn order_is_a_permutation(deltas in proptest::collection::vec(0u8..=100, 0..200)) {
            let order = curriculum_order_by_delta(&deltas);
            let mut seen = vec![false; deltas.len()];
            for &i in &order {
                prop_assert!(!seen[i]);
                seen[i] = true;
            }
            prop_assert!(seen.iter().all(|&s| s));
        }

        #[test]
        fn order_is_descending_and_stable(deltas in proptest::collection::vec(0u8..=100, 0..200)) {
            let order = curriculum_order_by_delta(&deltas);
            for w in order.windows(2) {
                prop_assert!(deltas[w[0]] >= deltas[w[1]]);
                if deltas[w[0]] == deltas[w[1]] {
                    prop_assert!(w[0] < w[1], "ties must keep ingestion order");
                }
            }
        }

        #[test]
        fn batches_concatenate_to_the_order(
            deltas in proptest::collection::vec(0u8..=100, 0..200),
            batch in 1usize..32,
        ) {
            let order = curriculum_order_by_delta(&deltas);
            let flat: Vec<usize> = make_batches(&order, batch).into_iter().flatten().collect();
            prop_assert_eq!(flat, order);
        }
    }
}
