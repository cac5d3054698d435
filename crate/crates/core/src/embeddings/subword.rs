use std::path::Path;

use super::OovFlag;
use crate::container::Container;
use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const BEGIN_MARKER: char = '<';
pub const END_MARKER: char = '>';

/// 32-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u32 {
    let mut h: u32 = 0x811c_9dc5;
    for &b in bytes {
        h ^= b as u32;
        h = h.wrapping_mul(0x0100_0193);
    }
    h
}

/// Hashed character n-gram vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SubwordBank {
    pub min_n: usize,
    pub max_n: usize,
    pub bucket_count: usize,
    pub buckets: Mat<f32>,
}

impl SubwordBank {
    pub fn new(min_n: usize, max_n: usize, bucket_count: usize, buckets: Mat<f32>) -> Self {
        assert!(min_n >= 1 && min_n <= max_n, "invalid n-gram range {min_n}..={max_n}");
        assert_eq!(buckets.rows(), bucket_count);
        Self { min_n, max_n, bucket_count, buckets }
    }

    pub fn dim(&self) -> usize {
        self.buckets.cols()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::new(format!("kind = \"subwords\"\nmin_n = {}\nmax_n = {}\n", self.min_n, self.max_n));
        c.push("buckets", self.buckets.clone());
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut c = Container::load(path)?;
        let meta: toml::Table = c.config.parse().map_err(|e| Error::Checkpoint(format!("config block: {e}")))?;
        let get = |k: &str| meta.get(k).and_then(|v| v.as_integer()).filter(|&v| v >= 1).map(|v| v as usize);
        let (Some(min_n), Some(max_n)) = (get("min_n"), get("max_n")) else {
            return Err(Error::Checkpoint(format!("{} is not a subword bank", path.display())));
        };
        if min_n > max_n || meta.get("kind").and_then(|v| v.as_str()) != Some("subwords") {
            return Err(Error::Checkpoint(format!("{} is not a subword bank", path.display())));
        }
        let buckets = c.take("buckets")?;
        Ok(Self::new(min_n, max_n, buckets.rows(), buckets))
    }

    /// Character n-grams of `<word>` for every n in the configured range.
    pub fn ngrams(&self, word: &str) -> Vec<String> {
        ngrams(word, self.min_n, self.max_n)
    }

    pub fn bucket(&self, gram: &str) -> usize {
        fnv1a(gram.as_bytes()) as usize % self.bucket_count
    }

    pub fn bucket_ids(&self, word: &str) -> Vec<usize> {
        self.ngrams(word).iter().map(|g| self.bucket(g)).collect()
    }

    /// Mean of the word's n-gram bucket vectors. Hard OOV (zero vector) when
    /// every bucket it hits is zero.
    pub fn compose(&self, word: &str) -> Result<(Vec<f32>, OovFlag)> {
        if word.is_empty() {
            return Err(Error::Input("empty word".into()));
        }
        let ids = self.bucket_ids(word);
        let mut acc = vec![0.0f32; self.dim()];
        let mut live = false;
        for &b in &ids {
            let row = self.buckets.row(b);
            if row.iter().any(|&v| v != 0.0) {
                live = true;
            }
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        if !live || ids.is_empty() {
            return Ok((vec![0.0; self.dim()], OovFlag::Hard));
        }
        let k = ids.len() as f32;
        acc.iter_mut().for_each(|a| *a /= k);
        Ok((acc, OovFlag::Composed))
    }
}

pub(crate) fn ngrams(word: &str, min_n: usize, max_n: usize) -> Vec<String> {
    let chars: Vec<char> = std::iter::once(BEGIN_MARKER).chain(word.chars()).chain(std::iter::once(END_MARKER)).collect();
    let mut out = Vec::new();
    for n in min_n..=max_n {
        if n > chars.len() {
            break;
        }
        for w in chars.windows(n) {
            out.push(w.iter().collect());
        }
    }
    out
}
