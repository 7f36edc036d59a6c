//! Deterministic word embeddings standing in for the language model's `f_T`.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::text::tokens;

pub trait TextEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    /// `[n_tokens x dim]`, at least one row for any input.
    fn embed(&self, text: &str) -> Array2<f64>;
}

/// Each lowercased word maps to a fixed N(0, 1/dim) vector seeded from
/// `(seed, fnv1a(word))`. Text with no word characters embeds as one `<empty>` token.
#[derive(Debug, Clone, PartialEq)]
pub struct HashEmbedder {
    pub dim: usize,
    pub seed: u64,
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(token.as_bytes()));
        let scale = 1.0 / (self.dim as f64).sqrt();
        (0..self.dim).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); scale * z }).collect::<Vec<f64>>()
    }
}

impl TextEmbedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Array2<f64> {
        let mut toks = tokens(text);
        if toks.is_empty() {
            toks.push("<empty>".to_string());
        }
        let mut out = Array2::zeros((toks.len(), self.dim));
        for (row, tok) in toks.iter().enumerate() {
            for (col, v) in self.token_vector(tok).into_iter().enumerate() {
                out[[row, col]] = v;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_word_same_vector() {
        let e = HashEmbedder::new(16, 7);
        let a = e.embed("Boy climbs");
        let b = e.embed("boy CLIMBS!");
        assert_eq!(a, b);
        assert_eq!(a.dim(), (2, 16));
        assert_ne!(a.row(0), a.row(1));
        assert_eq!(e.embed("?!").nrows(), 1);
    }

    #[test]
    fn seed_changes_vectors() {
        assert_ne!(HashEmbedder::new(8, 1).embed("x"), HashEmbedder::new(8, 2).embed("x"));
    }
}
