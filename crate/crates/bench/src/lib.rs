//! Shared fixtures for the benchmarks.

use psdn_core::data::Utterance;
use psdn_core::nn::normal;
use psdn_core::synthgen::{Generator, GeneratorConfig};
use psdn_core::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    normal(&mut ChaCha8Rng::seed_from_u64(seed), rows, cols, 1.0)
}

pub fn generator() -> Generator {
    Generator::new(&GeneratorConfig::default()).expect("default generator config is valid")
}

/// `n` training utterances, half of them in the target accent.
pub fn balanced_batch(generator: &Generator, n: usize) -> Vec<Utterance> {
    let others: Vec<_> = generator.training_speakers().filter(|s| s.accent != 0).map(|s| (s.index, s.accent)).collect();
    (0..n)
        .map(|i| {
            let (speaker, accent) = if i % 2 == 0 { (0, 0) } else { others[i % others.len()] };
            generator.sample_utterance(accent, speaker, i as u64).expect("speaker exists")
        })
        .collect()
}
