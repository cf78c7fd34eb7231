//! Seeded synthetic token streams for training and evaluating the toy model.
//!
//! Each sequence mixes a sparse bigram chain (every token has a handful of
//! likely successors) with occasional copies from a fixed lag back, so a
//! model gains from attending to both the previous token and older context.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SUCCESSORS: usize = 4;
pub const COPY_LAG: usize = 8;
pub const COPY_PROB: f64 = 0.25;

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    vocab: usize,
    successors: Vec<[usize; SUCCESSORS]>,
    weights: WeightedIndex<f64>,
}

impl SyntheticCorpus {
    pub fn new(vocab: usize, seed: u64) -> Self {
        assert!(vocab > 0, "empty vocabulary");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let successors = (0..vocab)
            .map(|_| std::array::from_fn(|_| rng.random_range(0..vocab)))
            .collect();
        Self {
            vocab,
            successors,
            weights: WeightedIndex::new([0.55, 0.25, 0.15, 0.05]).expect("valid weights"),
        }
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn sample(&self, len: usize, rng: &mut impl Rng) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::with_capacity(len);
        for i in 0..len {
            let tok = if i == 0 {
                rng.random_range(0..self.vocab)
            } else if i >= COPY_LAG && rng.random_bool(COPY_PROB) {
                out[i - COPY_LAG]
            } else {
                let pick: usize = self.weights.sample(rng);
                self.successors[out[i - 1]][pick]
            };
            out.push(tok);
        }
        out
    }

    /// `count` prompts of `len` tokens, reproducible from `seed`.
    pub fn prompts(&self, count: usize, len: usize, seed: u64) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| self.sample(len, &mut rng)).collect()
    }
}
