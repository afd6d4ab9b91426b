//! Hashed character n-gram embeddings and vector utilities.

use std::hash::Hasher;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub dimension: usize,
    pub ngram_min: usize,
    pub ngram_max: usize,
    pub hash_seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            dimension: 256,
            ngram_min: 3,
            ngram_max: 5,
            hash_seed: 0,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dimension < 8 {
            return Err(Error::invalid("embedding dimension must be at least 8"));
        }
        if self.ngram_min < 1 || self.ngram_min > self.ngram_max {
            return Err(Error::invalid("need 1 <= ngram_min <= ngram_max"));
        }
        Ok(())
    }

    /// Stable fingerprint recorded alongside trained weights.
    pub fn fingerprint(&self) -> String {
        format!(
            "hashed-char-ngram/d{}/n{}-{}/s{}",
            self.dimension, self.ngram_min, self.ngram_max, self.hash_seed
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn zeros(dim: usize) -> Self {
        Embedding(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|v| *v == 0.0)
    }

    /// Scales to unit L2 norm; the zero vector is left as is.
    pub fn normalize(&mut self) {
        let n = self.norm();
        if n > 0.0 {
            self.0.iter_mut().for_each(|v| *v /= n);
        }
    }
}

/// Lowercases, maps every non-alphanumeric run to one space and pads both
/// ends so word boundaries become n-gram characters.
fn canonical_chars(text: &str) -> Vec<char> {
    let mut out = vec![' '];
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_alphanumeric() {
            out.push(c);
        } else if out.last() != Some(&' ') {
            out.push(' ');
        }
    }
    if out.last() != Some(&' ') {
        out.push(' ');
    }
    out
}

/// Signed feature-hashed bag of character n-grams, L2-normalized.
/// Text with no alphanumeric characters maps to the zero vector.
pub fn embed(text: &str, cfg: &EmbedderConfig) -> Embedding {
    let chars = canonical_chars(text);
    let mut v = Embedding::zeros(cfg.dimension);
    if chars.len() <= 1 {
        return v;
    }
    let mut buf = String::new();
    for n in cfg.ngram_min..=cfg.ngram_max {
        if chars.len() < n {
            continue;
        }
        for window in chars.windows(n) {
            buf.clear();
            buf.extend(window);
            let mut h = FnvHasher::with_key(0xcbf2_9ce4_8422_2325 ^ cfg.hash_seed);
            h.write(buf.as_bytes());
            let hash = h.finish();
            let idx = (hash % cfg.dimension as u64) as usize;
            let sign = if hash >> 63 == 0 { 1.0 } else { -1.0 };
            v.0[idx] += sign;
        }
    }
    v.normalize();
    v
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity; zero when either side is the zero vector.
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            left: a.dim(),
            right: b.dim(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot(&a.0, &b.0) / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine of two vectors already known to share a dimension.
pub(crate) fn cosine_unchecked(a: &Embedding, b: &Embedding) -> f64 {
    cosine(a, b).expect("embeddings from one config share a dimension")
}
