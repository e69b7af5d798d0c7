#![allow(dead_code)]

use comln::embedding::{Activation, EmbeddingParams};
use comln::loss::Matrix;
use comln::tasks::{sample_episode, Episode, TaskGenConfig};
use comln::MetaParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A seeded task with `way` classes, `shot` train and `test_shots` test
/// examples per class, and an embedding network of the given widths
/// (`dims[0]` is the input width; a single entry means identity).
pub fn instance(seed: u64, way: usize, shot: usize, test_shots: usize, dims: &[usize], t: f64) -> (MetaParams, Episode) {
    let tasks = TaskGenConfig {
        way,
        shot,
        test_shots,
        input_dim: dims[0],
        class_spread: 1.0,
        noise_std: 0.5,
        seed,
    };
    let episode = sample_episode(&tasks, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let embedding = EmbeddingParams::init(dims, Activation::Tanh, &mut rng);
    let d = embedding.output_dim();
    let w0 = Matrix::from_fn(way, d, |_, _| rng.random_range(-0.5..0.5));
    (MetaParams::new(w0, embedding, t.ln()), episode)
}

pub fn identity_instance(seed: u64, way: usize, shot: usize, test_shots: usize, d: usize, t: f64) -> (MetaParams, Episode) {
    instance(seed, way, shot, test_shots, &[d], t)
}
