//! Single-relevant-item ranking metrics.

use crate::math::log2;

/// 1-based rank of `target`; ties with a lower item id rank ahead.
pub fn rank_of(scores: &[f32], target: usize) -> usize {
    let s = scores[target];
    let mut rank = 1;
    for (j, &v) in scores.iter().enumerate() {
        if v > s || (v == s && j < target) {
            rank += 1;
        }
    }
    rank
}

/// 1-based rank of `target` among itself and `negatives` (same tie rule).
pub fn rank_among(scores: &[f32], target: usize, negatives: &[usize]) -> usize {
    let s = scores[target];
    1 + negatives
        .iter()
        .filter(|&&j| scores[j] > s || (scores[j] == s && j < target))
        .count()
}

pub fn ndcg_at(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / log2(rank as f64 + 1.0)
    } else {
        0.0
    }
}

/// Running sums; partial accumulators merge associatively.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RankAccumulator {
    pub k: usize,
    pub cases: usize,
    pub ndcg_sum: f64,
    pub hits: usize,
}

impl RankAccumulator {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            ..Default::default()
        }
    }

    pub fn push(&mut self, rank: usize) {
        self.cases += 1;
        self.ndcg_sum += ndcg_at(rank, self.k);
        self.hits += (rank <= self.k) as usize;
    }

    pub fn merge(&mut self, other: &RankAccumulator) {
        debug_assert_eq!(self.k, other.k);
        self.cases += other.cases;
        self.ndcg_sum += other.ndcg_sum;
        self.hits += other.hits;
    }

    pub fn ndcg(&self) -> f64 {
        if self.cases == 0 {
            0.0
        } else {
            self.ndcg_sum / self.cases as f64
        }
    }

    pub fn hit(&self) -> f64 {
        if self.cases == 0 {
            0.0
        } else {
            self.hits as f64 / self.cases as f64
        }
    }
}

/// `(NDCG@k, Hit@k)` over 1-based ranks.
pub fn rank_metrics(ranks: &[usize], k: usize) -> (f64, f64) {
    let mut acc = RankAccumulator::new(k);
    for &r in ranks {
        acc.push(r);
    }
    (acc.ndcg(), acc.hit())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;
    use proptest::prelude::*;

    #[test]
    fn closed_forms() {
        assert_eq!(rank_metrics(&[1], 10), (1.0, 1.0));
        assert_eq!(rank_metrics(&[3], 10), (0.5, 1.0));
        assert_eq!(rank_metrics(&[11], 10), (0.0, 0.0));
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let s = [0.5, 0.9, 0.5, 0.5];
        assert_eq!(rank_of(&s, 1), 1);
        assert_eq!(rank_of(&s, 0), 2);
        assert_eq!(rank_of(&s, 2), 3);
        assert_eq!(rank_of(&s, 3), 4);
    }

    #[test]
    fn matches_brute_force_sort() {
        let mut rng = crate::rng::RngState::new(8);
        let mut ranks = Vec::new();
        let mut oracle_ndcg = 0.0;
        let mut oracle_hit = 0.0;
        for _ in 0..100 {
            // coarse scores force plenty of ties
            let scores: Vec<f32> = (0..40).map(|_| (rng.below(12)) as f32).collect();
            let target = rng.below(40);
            ranks.push(rank_of(&scores, target));
            let mut order: Vec<usize> = (0..40).collect();
            order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
            let pos = order.iter().position(|&i| i == target).unwrap() + 1;
            if pos <= 10 {
                oracle_hit += 1.0;
                oracle_ndcg += 1.0 / ((pos + 1) as f64).log2();
            }
        }
        let (n, h) = rank_metrics(&ranks, 10);
        assert!((n - oracle_ndcg / 100.0).abs() < 1e-12);
        assert!((h - oracle_hit / 100.0).abs() < 1e-12);
    }

    #[test]
    fn merge_is_additive() {
        let mut a = RankAccumulator::new(10);
        let mut b = RankAccumulator::new(10);
        let mut all = RankAccumulator::new(10);
        for r in [1, 4, 20] {
            a.push(r);
            all.push(r);
        }
        for r in [2, 2] {
            b.push(r);
            all.push(r);
        }
        a.merge(&b);
        assert_eq!(a, all);
    }

    proptest! {
        #[test]
        fn monotone_transform_preserves_rank(
            scores in proptest::collection::vec(-5.0f32..5.0, 2..30),
            t in 0usize..30,
        ) {
            let t = t % scores.len();
            // power-of-two scalings are exact in f32, so they stay strictly monotone
            let up: Vec<f32> = scores.iter().map(|&s| 4.0 * s).collect();
            let down: Vec<f32> = scores.iter().map(|&s| 0.25 * s).collect();
            prop_assert_eq!(rank_of(&scores, t), rank_of(&up, t));
            prop_assert_eq!(rank_of(&scores, t), rank_of(&down, t));
        }
    }
}
