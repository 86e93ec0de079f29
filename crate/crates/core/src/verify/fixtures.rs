//! Seeded random inputs for checks and tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::model::{LabeledInput, ModelConfig, QaInput, SequenceInput};

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// `len` tokens of which the first `valid` are real.
pub fn sequence(cfg: &ModelConfig, len: usize, valid: usize, seed: u64) -> SequenceInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut words = Vec::new();
    let mut chars = Vec::new();
    for i in 0..len {
        if i < valid {
            words.push(rng.gen_range(1..cfg.word_vocab_size));
            let n = rng.gen_range(1..5);
            chars.push((0..n).map(|_| rng.gen_range(1..cfg.char_vocab_size)).collect());
        } else {
            words.push(0);
            chars.push(Vec::new());
        }
    }
    SequenceInput {
        words,
        chars,
        mask: (0..len).map(|i| i < valid).collect(),
        subword: None,
    }
}

pub fn qa_input(cfg: &ModelConfig, q: usize, d: usize, seed: u64) -> QaInput {
    QaInput {
        question: sequence(cfg, q, q, seed),
        document: sequence(cfg, d, d, seed + 1000),
    }
}

/// A batch of random labelled examples with lengths varying by seed.
pub fn batch(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<LabeledInput> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let q = rng.gen_range(2..5);
            let d = rng.gen_range(4..8);
            let s = rng.gen_range(0..d);
            let e = (s + rng.gen_range(0..3)).min(d - 1);
            LabeledInput {
                input: qa_input(cfg, q, d, seed * 100 + i as u64),
                span: (s, e),
            }
        })
        .collect()
}
