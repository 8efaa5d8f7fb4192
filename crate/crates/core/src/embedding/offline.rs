use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{EmbedError, Embedder};
use crate::util::stable_hash64;

/// Deterministic embedder with no network dependency.
///
/// The vector for a text is a seeded standard-normal draw keyed by a 64-bit
/// hash of the text mixed with the run seed: equal texts coincide exactly,
/// distinct texts are near-orthogonal in high dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OfflineHashEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl OfflineHashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        OfflineHashEmbedder { dim, seed }
    }

    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let key = stable_hash64([self.seed.to_le_bytes().as_slice(), text.as_bytes()]);
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let mut v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        super::l2_normalize(&mut v);
        v
    }
}

impl Embedder for OfflineHashEmbedder {
    fn backend_id(&self) -> String {
        format!("offline-hash/dim={}/seed={}", self.dim, self.seed)
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn seeded_determinism() {
        let e = OfflineHashEmbedder::new(64, 7);
        let a = e.embed_one("the sky is blue");
        assert_eq!(a, e.embed_one("the sky is blue"));
        assert_eq!(a.len(), 64);
        assert_ne!(a, OfflineHashEmbedder::new(64, 8).embed_one("the sky is blue"));
    }

    #[test]
    fn unrelated_texts_are_far_apart() {
        let e = OfflineHashEmbedder::new(64, 1);
        let a = e.embed_one("de beers was founded in 1888");
        let b = e.embed_one("it controlled 90% of production");
        let cos: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!(cos.abs() < 0.5, "cos = {cos}");
    }

    #[test]
    fn no_collisions_over_random_strings() {
        use rand::Rng;
        let e = OfflineHashEmbedder::new(4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut texts = HashSet::new();
        let mut vectors = HashSet::new();
        while texts.len() < 100_000 {
            let len = rng.random_range(1..24);
            let t: String = (0..len).map(|_| rng.random_range('a'..='z')).collect();
            if texts.insert(t.clone()) {
                let key: Vec<u64> = e.embed_one(&t).iter().map(|x| x.to_bits()).collect();
                assert!(vectors.insert(key), "collision for {t:?}");
            }
        }
    }
}
