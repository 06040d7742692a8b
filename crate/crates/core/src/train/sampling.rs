//! Noise distribution for negative sampling.

use rand::Rng;

/// Draws code `i` with probability `f_i^power / sum_j f_j^power`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnigramTable {
    cumulative: Vec<f64>,
}

impl UnigramTable {
    pub fn new(counts: &[u64], power: f64) -> Self {
        let mut acc = 0.0;
        let cumulative = counts
            .iter()
            .map(|&c| {
                acc += (c as f64).powf(power);
                acc
            })
            .collect();
        UnigramTable { cumulative }
    }

    pub fn len(&self) -> usize {
        self.cumulative.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cumulative.is_empty()
    }

    pub fn probability(&self, i: usize) -> f64 {
        let total = *self.cumulative.last().expect("non-empty table");
        let prev = if i == 0 { 0.0 } else { self.cumulative[i - 1] };
        (self.cumulative[i] - prev) / total
    }

    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        let total = *self.cumulative.last().expect("non-empty table");
        let u = rng.random::<f64>() * total;
        self.cumulative.partition_point(|&c| c <= u).min(self.cumulative.len() - 1)
    }

    /// `k` draws, skipping any equal to `target`.
    pub fn negatives(&self, rng: &mut impl Rng, k: usize, target: usize, out: &mut Vec<usize>) {
        out.clear();
        for _ in 0..k {
            let n = self.sample(rng);
            if n != target {
                out.push(n);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn empirical_frequencies_follow_smoothed_unigram() {
        let counts = [50u64, 100, 400, 1000, 37];
        let table = UnigramTable::new(&counts, 0.75);
        let total: f64 = counts.iter().map(|&c| (c as f64).powf(0.75)).sum();
        let mut hits = [0usize; 5];
        let mut r = rng::seeded(99);
        let n = 1_000_000;
        for _ in 0..n {
            hits[table.sample(&mut r)] += 1;
        }
        for i in 0..5 {
            let expected = (counts[i] as f64).powf(0.75) / total;
            assert!((table.probability(i) - expected).abs() < 1e-12);
            let observed = hits[i] as f64 / n as f64;
            assert!((observed - expected).abs() / expected < 0.02, "code {i}: {observed} vs {expected}");
        }
    }

    #[test]
    fn zero_count_codes_are_never_drawn() {
        let table = UnigramTable::new(&[0, 5, 0], 0.75);
        let mut r = rng::seeded(1);
        assert!((0..1000).all(|_| table.sample(&mut r) == 1));
    }
}
