//! Cross-domain similarity local scaling and its neighborhood statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::{dot, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CslsParams {
    pub k: usize,
    /// Only the first `candidate_pool` rows of each side enter neighbor
    /// searches for the penalty terms. Rows are frequency ordered, so this
    /// keeps the most frequent words.
    pub candidate_pool: Option<usize>,
}

impl Default for CslsParams {
    fn default() -> Self {
        Self { k: 10, candidate_pool: None }
    }
}

impl CslsParams {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("CSLS k must be at least 1".into()));
        }
        Ok(())
    }

    fn pool(&self, n: usize) -> usize {
        self.candidate_pool.map_or(n, |p| p.min(n))
    }
}

/// `r_t[i]`: mean cosine of mapped source row i to its k nearest targets.
/// `r_s[j]`: mean cosine of target row j to its k nearest mapped sources.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborStats {
    pub r_t: Vec<f64>,
    pub r_s: Vec<f64>,
}

/// Scale rows to unit length in f64; zero rows stay zero.
pub(crate) fn unit_rows(m: &Mat<f32>) -> Mat<f64> {
    let mut out: Mat<f64> = m.cast();
    for i in 0..out.rows() {
        let r = out.row_mut(i);
        let n = dot(r, r).sqrt();
        if n > 0.0 {
            r.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

/// Mean of the k largest values. Values are sorted before summation so the
/// result does not depend on the order they were produced in.
pub(crate) fn top_k_mean(mut sims: Vec<f64>, k: usize) -> f64 {
    let k = k.min(sims.len());
    if k == 0 {
        return 0.0;
    }
    if k < sims.len() {
        sims.select_nth_unstable_by(k - 1, |a, b| b.total_cmp(a));
        sims.truncate(k);
    }
    sims.sort_by(|a, b| b.total_cmp(a));
    sims.iter().sum::<f64>() / k as f64
}

/// Indices of the k largest values, best first (ties broken by index).
pub(crate) fn top_k_indices(sims: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..sims.len()).collect();
    let k = k.min(idx.len());
    let cmp = |a: &usize, b: &usize| sims[*b].total_cmp(&sims[*a]).then(a.cmp(b));
    if k < idx.len() && k > 0 {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx.truncate(k);
    idx
}

pub(crate) fn row_penalties(queries: &Mat<f64>, pool: &Mat<f64>, pool_rows: usize, k: usize) -> Vec<f64> {
    exec::map_range(queries.rows(), |i| {
        let q = queries.row(i);
        let sims: Vec<f64> = (0..pool_rows).map(|j| dot(q, pool.row(j))).collect();
        top_k_mean(sims, k)
    })
}

/// Penalty terms over already-mapped source rows and target rows.
pub fn neighbor_stats(mapped_src: &Mat<f32>, tgt: &Mat<f32>, params: &CslsParams) -> Result<NeighborStats> {
    let s = unit_rows(mapped_src);
    let t = unit_rows(tgt);
    neighbor_stats_unit(&s, &t, params)
}

pub(crate) fn neighbor_stats_unit(s: &Mat<f64>, t: &Mat<f64>, params: &CslsParams) -> Result<NeighborStats> {
    params.validate()?;
    let (ps, pt) = (params.pool(s.rows()), params.pool(t.rows()));
    if params.k > ps || params.k > pt {
        return Err(Error::Config(format!(
            "CSLS k = {} exceeds the neighbor pool ({ps} source, {pt} target rows)",
            params.k
        )));
    }
    Ok(NeighborStats { r_t: row_penalties(s, t, pt, params.k), r_s: row_penalties(t, s, ps, params.k) })
}

/// 2·cos(x, y) − r_T(x) − r_S(y).
pub fn csls(cos_xy: f64, r_t_x: f64, r_s_y: f64) -> f64 {
    2.0 * cos_xy - r_t_x - r_s_y
}
