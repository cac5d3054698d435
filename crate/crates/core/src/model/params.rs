//! Named parameter tensors, their freezing groups, and the gradient container.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Mat, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    /// Pretrained word rows of the shared embedding matrix. Never trained.
    FrozenEmbeddings,
    /// Special-token rows (padding, boundaries, language tags).
    Specials,
    Encoder,
    /// Decoder self-attention and feed-forward blocks.
    Decoder,
    CrossAttention,
    OutputHead,
}

impl Group {
    pub const ALL: [Group; 6] =
        [Group::FrozenEmbeddings, Group::Specials, Group::Encoder, Group::Decoder, Group::CrossAttention, Group::OutputHead];

    pub fn name(self) -> &'static str {
        match self {
            Group::FrozenEmbeddings => "frozen_embeddings",
            Group::Specials => "specials",
            Group::Encoder => "encoder",
            Group::Decoder => "decoder",
            Group::CrossAttention => "cross_attention",
            Group::OutputHead => "output_head",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Group {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Group::ALL.into_iter().find(|g| g.name() == s).ok_or_else(|| Error::Config(format!("unknown parameter group `{s}`")))
    }
}

pub type ParamId = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub group: Group,
    pub value: Mat<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T: Scalar> {
    params: Vec<Param<T>>,
    index: HashMap<String, ParamId>,
    frozen: BTreeSet<Group>,
}

impl<T: Scalar> Default for Parameters<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Parameters<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), index: HashMap::new(), frozen: [Group::FrozenEmbeddings].into_iter().collect() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Mat<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, group, value });
        id
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index.get(name).copied().ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id]
    }

    pub fn value(&self, id: ParamId) -> &Mat<T> {
        &self.params[id].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat<T> {
        &mut self.params[id].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn set_frozen(&mut self, groups: &BTreeSet<Group>) {
        self.frozen = groups.clone();
        self.frozen.insert(Group::FrozenEmbeddings);
    }

    pub fn frozen(&self) -> &BTreeSet<Group> {
        &self.frozen
    }

    pub fn is_frozen(&self, group: Group) -> bool {
        self.frozen.contains(&group)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        !self.is_frozen(self.params[id].group)
    }

    pub fn cast<U: Scalar>(&self) -> Parameters<U> {
        Parameters {
            params: self.params.iter().map(|p| Param { name: p.name.clone(), group: p.group, value: p.value.cast() }).collect(),
            index: self.index.clone(),
            frozen: self.frozen.clone(),
        }
    }

    /// Count of scalar entries per group.
    pub fn group_sizes(&self) -> BTreeMap<Group, usize> {
        let mut out = BTreeMap::new();
        for p in &self.params {
            *out.entry(p.group).or_default() += p.value.data().len();
        }
        out
    }
}

/// Glorot/Xavier uniform: U(−a, a) with a = √(6 / (fan_in + fan_out)).
pub fn glorot<T: Scalar>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat<T> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| T::of(rng.random_range(-a..a))).collect())
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Sum of per-example gradients. Dense entries only exist for trainable
/// parameters; embedding-row entries only for trainable (special) rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T: Scalar> {
    pub dense: Vec<Option<Mat<T>>>,
    pub rows: BTreeMap<usize, Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn empty(n_params: usize) -> Self {
        Self { dense: vec![None; n_params], rows: BTreeMap::new() }
    }

    pub fn accumulate_dense(&mut self, id: ParamId, g: &Mat<T>) {
        match &mut self.dense[id] {
            Some(acc) => acc.add_assign(g),
            slot => *slot = Some(g.clone()),
        }
    }

    pub fn accumulate_row(&mut self, row: usize, g: &[T]) {
        let acc = self.rows.entry(row).or_insert_with(|| vec![T::zero(); g.len()]);
        for (a, &b) in acc.iter_mut().zip(g) {
            *a = *a + b;
        }
    }

    pub fn merge(&mut self, other: Gradients<T>) {
        for (id, g) in other.dense.into_iter().enumerate() {
            if let Some(g) = g {
                match &mut self.dense[id] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
        for (r, g) in other.rows {
            self.accumulate_row(r, &g);
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.dense.iter_mut().flatten() {
            g.scale(s);
        }
        for g in self.rows.values_mut() {
            g.iter_mut().for_each(|v| *v = *v * s);
        }
    }

    pub fn sq_norm(&self) -> T {
        let dense: T = self.dense.iter().flatten().map(|g| g.data().iter().map(|&v| v * v).sum::<T>()).sum();
        let rows: T = self.rows.values().map(|g| g.iter().map(|&v| v * v).sum::<T>()).sum();
        dense + rows
    }

    /// Name of the first tensor holding a non-finite entry.
    pub fn first_non_finite(&self, params: &Parameters<T>) -> Option<String> {
        for (id, g) in self.dense.iter().enumerate() {
            if let Some(g) = g {
                if !g.all_finite() {
                    return Some(params.get(id).name.clone());
                }
            }
        }
        self.rows.iter().find(|(_, g)| g.iter().any(|v| !v.is_finite())).map(|(r, _)| format!("vocab.embedding[{r}]"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glorot_respects_bound() {
        let m: Mat<f64> = glorot(10, 20, &mut seeded(1));
        let a = (6.0f64 / 30.0).sqrt();
        assert!(m.data().iter().all(|v| v.abs() < a));
    }

    #[test]
    fn word_rows_are_always_frozen() {
        let mut p: Parameters<f32> = Parameters::new();
        p.set_frozen(&BTreeSet::new());
        assert!(p.is_frozen(Group::FrozenEmbeddings));
        assert_eq!("cross_attention".parse::<Group>().unwrap(), Group::CrossAttention);
    }

    #[test]
    fn merging_gradients_adds() {
        let mut a: Gradients<f64> = Gradients::empty(2);
        a.accumulate_dense(0, &Mat::from_vec(1, 2, vec![1.0, 2.0]));
        a.accumulate_row(5, &[1.0]);
        let mut b = Gradients::empty(2);
        b.accumulate_dense(0, &Mat::from_vec(1, 2, vec![3.0, 4.0]));
        b.accumulate_dense(1, &Mat::from_vec(1, 1, vec![1.0]));
        b.accumulate_row(5, &[2.0]);
        a.merge(b);
        assert_eq!(a.dense[0].as_ref().unwrap().data(), &[4.0, 6.0]);
        assert!(a.dense[1].is_some());
        assert_eq!(a.rows[&5], vec![3.0]);
        assert_eq!(a.sq_norm(), 16.0 + 36.0 + 1.0 + 9.0);
    }
}
