//! Hashed-token text encoder with a 512-dim sentence embedding.
//!
//! Tokens are lowercased alphanumeric runs hashed into a fixed number of
//! buckets; the sentence embedding is the L2-normalized mean of the bucket
//! rows. Row 0 is reserved for padding and is what an empty input maps to.

use hoimotion_nn::{Graph, Matrix, ParamId, ParamStore, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TEXT_DIM: usize = 512;
/// Token budget of the coarse (short) encoder.
pub const SHORT_TOKEN_BUDGET: usize = 77;
/// Token budget of the fine-grained (long) encoder.
pub const LONG_TOKEN_BUDGET: usize = 256;
pub const DEFAULT_BUCKETS: usize = 2048;

/// Lowercases and splits on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// 64-bit FNV-1a; stable across platforms and releases, unlike `DefaultHasher`.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Debug)]
pub struct TextEncoder {
    pub store: ParamStore,
    table: ParamId,
    buckets: usize,
    max_tokens: usize,
}

impl TextEncoder {
    pub fn new(seed: u64, buckets: usize, max_tokens: usize) -> Self {
        assert!(buckets >= 2, "need a padding row and at least one token bucket");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut table = Matrix::randn(buckets, TEXT_DIM, 1.0, &mut rng);
        // a fixed, recognizable padding direction
        for (c, v) in table.row_mut(0).iter_mut().enumerate() {
            *v = if c == 0 { 1.0 } else { 0.0 };
        }
        let mut store = ParamStore::new();
        let table = store.add("text.table", table);
        Self { store, table, buckets, max_tokens }
    }

    /// Encoder for coarse sentences.
    pub fn short(seed: u64) -> Self {
        Self::new(seed, DEFAULT_BUCKETS, SHORT_TOKEN_BUDGET)
    }

    /// Encoder for the concatenated fine-grained phases.
    pub fn long(seed: u64) -> Self {
        Self::new(seed, DEFAULT_BUCKETS, LONG_TOKEN_BUDGET)
    }

    pub fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    pub fn freeze(&mut self) {
        self.store.set_frozen(self.table, true);
    }

    /// Bucket rows for `text`, truncated to the token budget; `[0]` when empty.
    pub fn token_ids(&self, text: &str) -> Vec<usize> {
        let ids: Vec<usize> = tokenize(text)
            .iter()
            .take(self.max_tokens)
            .map(|t| 1 + (fnv1a(t.as_bytes()) % (self.buckets as u64 - 1)) as usize)
            .collect();
        if ids.is_empty() {
            vec![0]
        } else {
            ids
        }
    }

    pub fn encode(&self, text: &str) -> Vec<f64> {
        let table = self.store.value(self.table);
        let ids = self.token_ids(text);
        let mut v = vec![0.0; TEXT_DIM];
        for &i in &ids {
            for (acc, x) in v.iter_mut().zip(table.row(i)) {
                *acc += x;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            v.iter_mut().for_each(|x| *x /= n);
        }
        v
    }

    /// Joins the phase sentences and encodes them with this encoder's budget.
    pub fn encode_phases(&self, phases: &[String]) -> Vec<f64> {
        self.encode(&phases.join(" "))
    }

    /// Mean-pooled (not normalized) embedding recorded on a tape, for
    /// fine-tuning the table.
    pub fn encode_graph(&self, g: &mut Graph, text: &str) -> Var {
        let table = g.param(&self.store, self.table);
        let rows = g.select_rows(table, &self.token_ids(text));
        g.mean_rows(rows)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}
