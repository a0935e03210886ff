use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::types::TextEmbedding;

const PAD: usize = 0;

/// Frozen text encoder: whitespace tokens hashed into a fixed vocabulary,
/// looked up in a seeded embedding table, plus sinusoidal positions.
///
/// Token id 0 is reserved for padding; the empty prompt encodes to an
/// all-padding matrix.
#[derive(Clone, Debug)]
pub struct HashingTextEncoder {
    tokens: usize,
    dims: usize,
    vocab: usize,
    table: Vec<f32>,
}

impl HashingTextEncoder {
    pub fn new(tokens: usize, dims: usize, vocab: usize, seed: u64) -> Self {
        assert!(vocab >= 2, "vocabulary needs room for padding and words");
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e47_e1c0_de00_0001);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let table = (0..vocab * dims).map(|_| normal.sample(&mut rng) as f32).collect();
        HashingTextEncoder { tokens, dims, vocab, table }
    }

    pub fn token_ids(&self, text: &str) -> Vec<usize> {
        let mut ids: Vec<usize> = text
            .split_whitespace()
            .map(|w| 1 + (fnv1a(&w.to_lowercase()) % (self.vocab as u64 - 1)) as usize)
            .take(self.tokens)
            .collect();
        ids.resize(self.tokens, PAD);
        ids
    }

    pub fn encode(&self, text: &str) -> Result<TextEmbedding> {
        if text.trim().is_empty() {
            return Err(Error::contract("cannot encode an empty prompt"));
        }
        Ok(self.encode_ids(&self.token_ids(text)))
    }

    pub fn unconditional(&self) -> TextEmbedding {
        self.encode_ids(&vec![PAD; self.tokens])
    }

    fn encode_ids(&self, ids: &[usize]) -> TextEmbedding {
        let mut data = Vec::with_capacity(self.tokens * self.dims);
        for (pos, &id) in ids.iter().enumerate() {
            let row = &self.table[id * self.dims..(id + 1) * self.dims];
            for (d, &v) in row.iter().enumerate() {
                data.push(v + 0.1 * positional(pos, d, self.dims));
            }
        }
        TextEmbedding::new(self.tokens, self.dims, data).expect("encoder output is well-formed")
    }
}

fn positional(pos: usize, d: usize, dims: usize) -> f32 {
    let freq = (-(10_000f64.ln()) * (2 * (d / 2)) as f64 / dims as f64).exp();
    let angle = pos as f64 * freq;
    (if d.is_multiple_of(2) { angle.sin() } else { angle.cos() }) as f32
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}
