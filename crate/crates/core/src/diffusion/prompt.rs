use maskguide_nn::Tensor;

use super::model::TEXT_DIM;
use crate::{Error, Result};

/// Fixed-width prompt vector.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbedding(Vec<f32>);

impl TextEmbedding {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("text embedding must be non-empty and finite".into()));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    /// `[n, D, 1, 1]`, the same vector repeated for every batch item.
    pub fn to_tensor(&self, n: usize) -> Tensor {
        let data: Vec<f32> = (0..n).flat_map(|_| self.0.iter().copied()).collect();
        Tensor::from_vec([n, self.0.len(), 1, 1], data).expect("length matches shape")
    }

    pub fn stack(items: &[TextEmbedding]) -> Result<Tensor> {
        let d = items.first().map_or(TEXT_DIM, |e| e.dim());
        if items.iter().any(|e| e.dim() != d) {
            return Err(Error::Shape("text embeddings differ in width".into()));
        }
        let data: Vec<f32> = items.iter().flat_map(|e| e.0.iter().copied()).collect();
        Ok(Tensor::from_vec([items.len(), d, 1, 1], data)?)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Bag-of-tokens embedding: each lowercased alphanumeric token adds ±1 to a
/// hashed bucket. Token order does not matter and the empty prompt maps to
/// the zero vector.
pub fn embed_prompt(text: &str) -> TextEmbedding {
    embed_prompt_dim(text, TEXT_DIM)
}

pub fn embed_prompt_dim(text: &str, dim: usize) -> TextEmbedding {
    let mut v = vec![0.0f32; dim.max(1)];
    for tok in tokenize(text) {
        let h = fnv1a(tok.as_bytes());
        let bucket = (h % v.len() as u64) as usize;
        v[bucket] += if (h >> 40) & 1 == 0 { 1.0 } else { -1.0 };
    }
    TextEmbedding(v)
}
