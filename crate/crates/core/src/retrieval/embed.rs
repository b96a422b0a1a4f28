use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::words;

/// L2-normalized document vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocEmbedding(Vec<f64>);

impl DocEmbedding {
    /// Normalizes `v`; fails on a zero or non-finite vector.
    pub fn from_raw(mut v: Vec<f64>) -> Result<Self> {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::Embedding("vector has no finite non-zero norm".into()));
        }
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(Self(v))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn cosine(&self, other: &DocEmbedding) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

/// Anything that maps text to a fixed-width unit vector.
pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<DocEmbedding>;
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Word unigrams and adjacent-word bigrams.
pub fn features(text: &str) -> Vec<String> {
    let w = words(text);
    let mut out = w.clone();
    out.extend(w.windows(2).map(|p| format!("{} {}", p[0], p[1])));
    out
}

/// Hashed unigram+bigram TF-IDF.
///
/// Without fitted document frequencies every bucket has weight 1, which
/// reduces to hashed term frequency.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HashedTfIdf {
    dim: usize,
    idf: Option<Vec<f64>>,
}

impl HashedTfIdf {
    pub const DEFAULT_DIM: usize = 1024;

    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("embedding_dim", "must be positive"));
        }
        Ok(Self { dim, idf: None })
    }

    /// Smoothed idf `ln((1 + n) / (1 + df)) + 1` per hash bucket.
    pub fn fit<'a>(dim: usize, docs: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut s = Self::new(dim)?;
        let mut df = vec![0usize; dim];
        let mut n = 0usize;
        for doc in docs {
            n += 1;
            let mut seen: Vec<usize> = features(doc).iter().map(|f| s.bucket(f)).collect();
            seen.sort_unstable();
            seen.dedup();
            for b in seen {
                df[b] += 1;
            }
        }
        s.idf = Some(
            df.iter()
                .map(|&d| ((1.0 + n as f64) / (1.0 + d as f64)).ln() + 1.0)
                .collect(),
        );
        Ok(s)
    }

    pub fn bucket(&self, feature: &str) -> usize {
        (fnv1a(feature.as_bytes()) % self.dim as u64) as usize
    }
}

impl Embedder for HashedTfIdf {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<DocEmbedding> {
        let feats = features(text);
        if feats.is_empty() {
            return Err(Error::Embedding("text has no word tokens".into()));
        }
        let mut tf: BTreeMap<usize, f64> = BTreeMap::new();
        for f in &feats {
            *tf.entry(self.bucket(f)).or_default() += 1.0;
        }
        let mut v = vec![0.0; self.dim];
        for (b, c) in tf {
            v[b] = c * self.idf.as_ref().map_or(1.0, |idf| idf[b]);
        }
        DocEmbedding::from_raw(v)
    }
}
