//! Input generators shared by the benchmarks.

use acpo_core::ResponseSample;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` points around `n / 4` directions, so merges happen at every scale.
pub fn clustered_vectors(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..(n / 4).max(1))
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    (0..n)
        .map(|_| {
            let c = centers.choose(&mut rng).expect("at least one center");
            c.iter().map(|x| x + rng.random_range(-0.15..0.15)).collect()
        })
        .collect()
}

const SUBJECTS: &[&str] = &["The museum", "The old bridge", "Dr. Hale", "The company", "The river"];
const PREDICATES: &[&str] = &[
    "was founded in 1887",
    "is located near the U.S. border",
    "won the award twice, e.g. in 1990 and 1994",
    "employs about 4.5 thousand people",
    "was renovated after the flood",
];

/// `m` responses of `sentences` sentences each, drawn from a small pool so
/// that many sentences repeat across responses.
pub fn responses(question_id: &str, m: usize, sentences: usize, seed: u64) -> Vec<ResponseSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..m)
        .map(|i| {
            let text: Vec<String> = (0..sentences)
                .map(|_| {
                    format!(
                        "{} {}.",
                        SUBJECTS.choose(&mut rng).expect("non-empty"),
                        PREDICATES.choose(&mut rng).expect("non-empty")
                    )
                })
                .collect();
            ResponseSample::new(question_id, i, text.join(" "), 1.0, 0)
        })
        .collect()
}
