//! Monolingual word embeddings: storage, subword composition for
//! out-of-vocabulary words, the text vector format, and a small skip-gram
//! trainer.

mod io;
mod skipgram;
mod subword;

use std::collections::HashMap;

pub use io::{load_vectors, save_vectors};
pub use skipgram::{train_skipgram, Probe, SkipgramConfig, SkipgramModel};
pub use subword::{fnv1a, SubwordBank};

use crate::error::{Error, Result};
use crate::tensor::{norm, Mat};

/// Word vectors for one language.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub language: String,
    words: Vec<String>,
    index: HashMap<String, usize>,
    matrix: Mat<f32>,
    pub unit_normalized: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OovFlag {
    /// Stored row.
    None,
    /// Composed from live subword buckets.
    Composed,
    /// No live subword bucket; the vector is zero.
    Hard,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NormalizeReport {
    pub zero_rows: Vec<usize>,
}

impl EmbeddingTable {
    pub fn new(language: impl Into<String>, words: Vec<String>, matrix: Mat<f32>) -> Result<Self> {
        if words.len() != matrix.rows() {
            return Err(Error::Input(format!("{} words but {} rows", words.len(), matrix.rows())));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate word `{w}`")));
            }
        }
        if !matrix.all_finite() {
            return Err(Error::Numerical("embedding matrix has non-finite entries".into()));
        }
        Ok(Self { language: language.into(), words, index, matrix, unit_normalized: false })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn matrix(&self) -> &Mat<f32> {
        &self.matrix
    }

    pub fn index_of(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn vector(&self, word: &str) -> Option<&[f32]> {
        self.index_of(word).map(|i| self.matrix.row(i))
    }

    /// Stored row if present, otherwise the subword composition.
    pub fn lookup_or_compose(&self, word: &str, bank: &SubwordBank) -> Result<(Vec<f32>, OovFlag)> {
        if word.is_empty() {
            return Err(Error::Input("empty word".into()));
        }
        match self.vector(word) {
            Some(v) => Ok((v.to_vec(), OovFlag::None)),
            None => bank.compose(word),
        }
    }

    /// Replace the matrix (same shape), e.g. after mapping into another space.
    pub fn with_matrix(&self, matrix: Mat<f32>) -> Result<Self> {
        if matrix.shape() != self.matrix.shape() {
            return Err(Error::Input("replacement matrix shape differs".into()));
        }
        let mut t = self.clone();
        t.matrix = matrix;
        t.unit_normalized = false;
        Ok(t)
    }

    /// Keep only `words` (in the given order).
    pub fn restrict(&self, words: &[String]) -> Result<Self> {
        let mut m = Mat::zeros(0, self.dim());
        for w in words {
            let v = self.vector(w).ok_or_else(|| Error::Lookup(format!("`{w}` not in table")))?;
            m.push_row(v);
        }
        let mut t = Self::new(self.language.clone(), words.to_vec(), m)?;
        t.unit_normalized = self.unit_normalized;
        Ok(t)
    }
}

/// Scale every nonzero row to unit L2 norm. Zero rows stay zero and are reported.
pub fn normalize_rows(table: &EmbeddingTable) -> (EmbeddingTable, NormalizeReport) {
    let mut out = table.clone();
    let mut report = NormalizeReport::default();
    for i in 0..out.matrix.rows() {
        if !normalize_in_place(out.matrix.row_mut(i)) {
            report.zero_rows.push(i);
        }
    }
    out.unit_normalized = true;
    (out, report)
}

/// Returns false for a zero vector, which is left untouched.
pub fn normalize_in_place(row: &mut [f32]) -> bool {
    // accumulate in f64 so re-normalizing an already unit row is a no-op to within rounding
    let n = row.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
    if n == 0.0 {
        return false;
    }
    for v in row.iter_mut() {
        *v = (*v as f64 / n) as f32;
    }
    true
}

pub fn row_norms(m: &Mat<f32>) -> Vec<f32> {
    (0..m.rows()).map(|i| norm(m.row(i))).collect()
}
