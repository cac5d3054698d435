//! Mapping per-language embedding spaces into one pivot ("hub") space.
//!
//! Each map starts from the orthogonal Procrustes solution on a seed
//! dictionary and is then refined on the relaxed CSLS objective. Retrieval
//! quality is measured as CSLS precision at one.

mod csls;
mod rcsls;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use csls::{csls, neighbor_stats, CslsParams, NeighborStats};
pub use rcsls::RefineOptions;

use crate::container::Container;
use crate::embeddings::{normalize_in_place, EmbeddingTable};
use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::{dot, Mat};
use csls::{row_penalties, unit_rows};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BilingualDictionary {
    pub source_language: String,
    pub target_language: String,
    pub pairs: Vec<(String, String)>,
}

impl BilingualDictionary {
    pub fn new(source: &str, target: &str, pairs: Vec<(String, String)>) -> Result<Self> {
        if let Some((a, b)) = pairs.iter().find(|(a, b)| a.is_empty() || b.is_empty()) {
            return Err(Error::Input(format!("empty word in dictionary pair ({a:?}, {b:?})")));
        }
        Ok(Self { source_language: source.into(), target_language: target.into(), pairs })
    }

    /// One whitespace-separated `src tgt` pair per line; blank lines are skipped.
    pub fn load(path: &Path, source: &str, target: &str) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut pairs = Vec::new();
        for (k, line) in text.lines().enumerate() {
            let mut f = line.split_whitespace();
            match (f.next(), f.next(), f.next()) {
                (None, _, _) => continue,
                (Some(a), Some(b), None) => pairs.push((a.to_string(), b.to_string())),
                _ => return Err(Error::format(path, k + 1, "expected exactly two words")),
            }
        }
        Self::new(source, target, pairs)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body: String = self.pairs.iter().map(|(a, b)| format!("{a} {b}\n")).collect();
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    /// Source word → all listed translations, in first-seen order of sources.
    pub fn grouped(&self) -> Vec<(String, BTreeSet<String>)> {
        let mut order = Vec::new();
        let mut map: HashMap<&str, BTreeSet<String>> = HashMap::new();
        for (a, b) in &self.pairs {
            map.entry(a).or_insert_with(|| {
                order.push(a.clone());
                BTreeSet::new()
            });
            map.get_mut(a.as_str()).expect("inserted").insert(b.clone());
        }
        order.into_iter().map(|a| {
            let t = map.remove(a.as_str()).expect("grouped");
            (a, t)
        }).collect()
    }
}

/// x ↦ W x, applied to row vectors as x Wᵀ.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    pub source_language: String,
    pub target_language: String,
    pub matrix: Mat<f32>,
    pub orthogonal: bool,
}

impl LinearMap {
    pub fn identity(lang: &str, dim: usize) -> Self {
        Self { source_language: lang.into(), target_language: lang.into(), matrix: Mat::identity(dim), orthogonal: true }
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn apply_rows(&self, x: &Mat<f32>) -> Mat<f32> {
        x.matmul_t(&self.matrix)
    }

    /// Map every row of `table`, optionally re-normalizing mapped rows.
    pub fn apply(&self, table: &EmbeddingTable, renormalize: bool) -> Result<EmbeddingTable> {
        if table.dim() != self.dim() {
            return Err(Error::Config(format!("table dimension {} vs map dimension {}", table.dim(), self.dim())));
        }
        let mut m = self.apply_rows(table.matrix());
        if renormalize {
            for i in 0..m.rows() {
                normalize_in_place(m.row_mut(i));
            }
        }
        let mut out = table.with_matrix(m)?;
        out.unit_normalized = renormalize;
        Ok(out)
    }

    /// max |WᵀW − I|.
    pub fn orthogonality_error(&self) -> f64 {
        let w: Mat<f64> = self.matrix.cast();
        let wtw = w.t_matmul(&w);
        wtw.max_abs_diff(&Mat::identity(w.rows()))
    }
}

/// Orthogonal W minimizing ‖X Wᵀ − Y‖: W = U Vᵀ with U Σ Vᵀ = svd(Yᵀ X).
pub fn procrustes(x: &Mat<f32>, y: &Mat<f32>) -> Result<Mat<f32>> {
    if x.shape() != y.shape() {
        return Err(Error::Config(format!("paired rows differ in shape: {:?} vs {:?}", x.shape(), y.shape())));
    }
    if x.rows() == 0 {
        return Err(Error::Input("no paired rows".into()));
    }
    let (xf, yf): (Mat<f64>, Mat<f64>) = (x.cast(), y.cast());
    let m = yf.t_matmul(&xf);
    if m.frobenius() == 0.0 || !m.all_finite() {
        return Err(Error::Numerical("degenerate cross-covariance in Procrustes".into()));
    }
    let d = m.rows();
    let svd = DMatrix::from_row_slice(d, d, m.data()).svd(true, true);
    let (u, vt) = (svd.u.expect("requested U"), svd.v_t.expect("requested Vᵀ"));
    let w = u * vt;
    Ok(Mat::from_vec(d, d, (0..d * d).map(|k| w[(k / d, k % d)] as f32).collect()))
}

/// Rows of `src`/`tgt` for dictionary pairs whose words are both present.
pub fn paired_indices(dict: &BilingualDictionary, src: &EmbeddingTable, tgt: &EmbeddingTable) -> (Vec<(usize, usize)>, usize) {
    let mut pairs = Vec::new();
    let mut skipped = 0;
    for (a, b) in &dict.pairs {
        match (src.index_of(a), tgt.index_of(b)) {
            (Some(i), Some(j)) => pairs.push((i, j)),
            _ => skipped += 1,
        }
    }
    (pairs, skipped)
}

pub fn procrustes_map(dict: &BilingualDictionary, src: &EmbeddingTable, tgt: &EmbeddingTable) -> Result<LinearMap> {
    let (pairs, _) = paired_indices(dict, src, tgt);
    if pairs.is_empty() {
        return Err(Error::Input(format!("no usable {}→{} dictionary pairs", dict.source_language, dict.target_language)));
    }
    let x = src.matrix().select_rows(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
    let y = tgt.matrix().select_rows(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
    Ok(LinearMap {
        source_language: src.language.clone(),
        target_language: tgt.language.clone(),
        matrix: procrustes(&x, &y)?,
        orthogonal: true,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineReport {
    pub map: LinearMap,
    /// Loss after every accepted step, starting with the loss of the initial map.
    pub losses: Vec<f64>,
}

pub fn rcsls_loss(map: &LinearMap, dict: &BilingualDictionary, src: &EmbeddingTable, tgt: &EmbeddingTable, params: &CslsParams) -> Result<f64> {
    let (pairs, _) = paired_indices(dict, src, tgt);
    let (s, t) = (unit_rows(src.matrix()), unit_rows(tgt.matrix()));
    let p = rcsls::Problem { src: &s, tgt: &t, pairs: &pairs, params: *params };
    p.check()?;
    Ok(p.evaluate(&map.matrix.cast(), false).0)
}

/// Refine `w0` on the relaxed CSLS loss. The result is no longer orthogonal.
pub fn rcsls_refine(
    w0: &LinearMap,
    dict: &BilingualDictionary,
    src: &EmbeddingTable,
    tgt: &EmbeddingTable,
    params: &CslsParams,
    opts: &RefineOptions,
) -> Result<RefineReport> {
    let (pairs, _) = paired_indices(dict, src, tgt);
    let (s, t) = (unit_rows(src.matrix()), unit_rows(tgt.matrix()));
    let p = rcsls::Problem { src: &s, tgt: &t, pairs: &pairs, params: *params };
    let (w, losses) = rcsls::refine(&p, &w0.matrix.cast(), opts)?;
    let map = LinearMap { matrix: w.cast(), orthogonal: false, ..w0.clone() };
    Ok(RefineReport { map, losses })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PAt1 {
    pub accuracy: f64,
    pub evaluated: usize,
    /// Source words skipped because they or all their translations are out of vocabulary.
    pub skipped: usize,
}

/// CSLS retrieval over the whole target table; a hit is any listed translation.
pub fn eval_p_at_1(map: &LinearMap, src: &EmbeddingTable, tgt: &EmbeddingTable, dict: &BilingualDictionary, params: &CslsParams) -> Result<PAt1> {
    params.validate()?;
    let mapped = unit_rows(&map.apply_rows(src.matrix()));
    let t = unit_rows(tgt.matrix());
    let ps = params.candidate_pool.map_or(mapped.rows(), |p| p.min(mapped.rows()));
    if params.k > ps || params.k > t.rows().min(params.candidate_pool.unwrap_or(usize::MAX)) {
        return Err(Error::Config(format!("CSLS k = {} exceeds the neighbor pool", params.k)));
    }
    // r_T(x) is constant per query, so only r_S matters for the argmax
    let r_s = row_penalties(&t, &mapped, ps, params.k);

    let mut queries = Vec::new();
    let mut skipped = 0;
    for (word, translations) in dict.grouped() {
        let gold: BTreeSet<usize> = translations.iter().filter_map(|w| tgt.index_of(w)).collect();
        match src.index_of(&word) {
            Some(i) if !gold.is_empty() => queries.push((i, gold)),
            _ => skipped += 1,
        }
    }
    if queries.is_empty() {
        return Err(Error::Evaluation("no usable test pairs".into()));
    }
    let hits = exec::map(&queries, |(i, gold)| {
        let q = mapped.row(*i);
        let mut best = (f64::NEG_INFINITY, 0);
        for j in 0..t.rows() {
            let score = 2.0 * dot(q, t.row(j)) - r_s[j];
            if score > best.0 {
                best = (score, j);
            }
        }
        gold.contains(&best.1)
    });
    let n_hit = hits.iter().filter(|&&h| h).count();
    Ok(PAt1 { accuracy: n_hit as f64 / queries.len() as f64, evaluated: queries.len(), skipped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    pub csls: CslsParams,
    pub refine: Option<RefineOptions>,
    /// Re-normalize rows after mapping.
    pub renormalize: bool,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self { csls: CslsParams::default(), refine: Some(RefineOptions::default()), renormalize: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HubAlignment {
    pub pivot: String,
    pub maps: BTreeMap<String, LinearMap>,
    /// CSLS P@1 of each map on its own training dictionary.
    pub train_p_at_1: BTreeMap<String, f64>,
}

#[derive(Serialize, Deserialize)]
struct AlignmentMeta {
    kind: String,
    pivot: String,
    maps: Vec<MapMeta>,
}

#[derive(Serialize, Deserialize)]
struct MapMeta {
    language: String,
    orthogonal: bool,
    train_p_at_1: f64,
}

impl HubAlignment {
    pub fn map(&self, lang: &str) -> Result<&LinearMap> {
        self.maps.get(lang).ok_or_else(|| Error::Lookup(format!("no alignment for `{lang}`")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = AlignmentMeta {
            kind: "alignment".into(),
            pivot: self.pivot.clone(),
            maps: self
                .maps
                .iter()
                .map(|(l, m)| MapMeta {
                    language: l.clone(),
                    orthogonal: m.orthogonal,
                    train_p_at_1: self.train_p_at_1.get(l).copied().unwrap_or(f64::NAN),
                })
                .collect(),
        };
        let mut c = Container::new(toml::to_string(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?);
        for (l, m) in &self.maps {
            c.push(format!("align.{l}"), m.matrix.clone());
        }
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut c = Container::load(path)?;
        let meta: AlignmentMeta = toml::from_str(&c.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if meta.kind != "alignment" {
            return Err(Error::Checkpoint(format!("{} holds a `{}`, not an alignment", path.display(), meta.kind)));
        }
        let mut maps = BTreeMap::new();
        let mut train = BTreeMap::new();
        for m in meta.maps {
            let matrix = c.take(&format!("align.{}", m.language))?;
            if m.train_p_at_1.is_finite() {
                train.insert(m.language.clone(), m.train_p_at_1);
            }
            maps.insert(
                m.language.clone(),
                LinearMap { source_language: m.language, target_language: meta.pivot.clone(), matrix, orthogonal: m.orthogonal },
            );
        }
        Ok(Self { pivot: meta.pivot, maps, train_p_at_1: train })
    }
}

/// Align every table into the pivot's space. `dicts[ℓ]` maps ℓ to the pivot.
pub fn align_to_hub(
    tables: &BTreeMap<String, EmbeddingTable>,
    dicts: &BTreeMap<String, BilingualDictionary>,
    pivot: &str,
    cfg: &AlignConfig,
) -> Result<HubAlignment> {
    let hub = tables.get(pivot).ok_or_else(|| Error::Config(format!("pivot `{pivot}` has no embedding table")))?;
    let mut maps = BTreeMap::new();
    let mut train = BTreeMap::new();
    maps.insert(pivot.to_string(), LinearMap::identity(pivot, hub.dim()));
    for (lang, table) in tables {
        if lang == pivot {
            continue;
        }
        let dict = dicts.get(lang).ok_or_else(|| Error::Config(format!("no dictionary from `{lang}` to the pivot")))?;
        let map = align_one(table, hub, dict, cfg)?;
        let p = eval_p_at_1(&map, table, hub, dict, &cfg.csls)?;
        log::info!("aligned {lang} → {pivot}: train P@1 {:.3}", p.accuracy);
        train.insert(lang.clone(), p.accuracy);
        maps.insert(lang.clone(), LinearMap { target_language: pivot.to_string(), ..map });
    }
    Ok(HubAlignment { pivot: pivot.into(), maps, train_p_at_1: train })
}

pub fn align_one(src: &EmbeddingTable, tgt: &EmbeddingTable, dict: &BilingualDictionary, cfg: &AlignConfig) -> Result<LinearMap> {
    let w0 = procrustes_map(dict, src, tgt)?;
    match &cfg.refine {
        Some(opts) => Ok(rcsls_refine(&w0, dict, src, tgt, &cfg.csls, opts)?.map),
        None => Ok(w0),
    }
}
