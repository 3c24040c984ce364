//! Toy prompt encoder: whitespace tokens, each embedded by a vector drawn
//! from a stream keyed on the token's hash. No positional mixing, so changing
//! one word changes exactly one row.

use candle_core::{DType, Device, Tensor};
use sha2::{Digest, Sha256};

use crate::error::invalid;
use crate::{rng, Result};

pub const VOCAB_SIZE: u32 = 49_408;

#[derive(Debug, Clone)]
pub struct TextEmbedding {
    tokens: Vec<u32>,
    /// `(tokens, dim)`
    embedding: Tensor,
}

impl TextEmbedding {
    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn embedding(&self) -> &Tensor {
        &self.embedding
    }

    /// Mean over tokens, shape `(dim,)`.
    pub fn pooled(&self) -> Result<Tensor> {
        Ok(self.embedding.mean(0)?)
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            tokens: self.tokens.clone(),
            embedding: self.embedding.to_dtype(dtype)?,
        })
    }

    /// All-zero embedding of one token, used as the unconditional branch.
    pub fn null(dim: usize, dtype: DType) -> Result<Self> {
        Ok(Self {
            tokens: vec![0],
            embedding: Tensor::zeros((1, dim), dtype, &Device::Cpu)?,
        })
    }
}

fn token_hash(word: &str) -> u64 {
    let d = Sha256::digest(word.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

pub fn tokenize(prompt: &str) -> Vec<String> {
    prompt.split_whitespace().map(|w| w.to_lowercase()).collect()
}

pub fn embed_prompt(prompt: &str, dim: usize) -> Result<TextEmbedding> {
    let words = tokenize(prompt);
    if words.is_empty() {
        return Err(invalid("prompt is empty"));
    }
    let mut tokens = Vec::with_capacity(words.len());
    let mut rows = Vec::with_capacity(words.len() * dim);
    for w in &words {
        let h = token_hash(w);
        tokens.push((h % VOCAB_SIZE as u64) as u32);
        let mut r = rng::stream(h, "token-embedding");
        rows.extend(rng::gaussian_vec(&mut r, dim, 1.0));
    }
    let embedding = Tensor::from_vec(rows, (words.len(), dim), &Device::Cpu)?.to_dtype(DType::F32)?;
    Ok(TextEmbedding { tokens, embedding })
}
