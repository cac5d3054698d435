//! Corpus-level chrF++ and BLEU.
//!
//! Both follow the conventions of the common reference scorer: chrF++ uses
//! whitespace-free character n-grams up to 6, word n-grams up to 2 and
//! effective-order averaging with β = 2; BLEU uses 13a tokenization,
//! case-sensitive 1–4-gram precisions, exponential smoothing and the usual
//! brevity penalty.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Chrfpp,
    Bleu,
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chrfpp" | "chrf++" => Ok(Metric::Chrfpp),
            "bleu" => Ok(Metric::Bleu),
            _ => Err(Error::Config(format!("unknown metric `{s}` (expected chrfpp or bleu)"))),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Chrfpp => "chrfpp",
            Metric::Bleu => "bleu",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub metric: Metric,
    pub char_order: usize,
    pub word_order: usize,
    pub beta: f64,
    pub max_ngram_order: usize,
    pub lowercase: bool,
}

impl MetricConfig {
    pub fn chrfpp() -> Self {
        Self { metric: Metric::Chrfpp, char_order: 6, word_order: 2, beta: 2.0, max_ngram_order: 4, lowercase: false }
    }

    pub fn bleu() -> Self {
        Self { metric: Metric::Bleu, ..Self::chrfpp() }
    }

    pub fn for_metric(metric: Metric) -> Self {
        match metric {
            Metric::Chrfpp => Self::chrfpp(),
            Metric::Bleu => Self::bleu(),
        }
    }

    pub fn signature(&self) -> String {
        let case = if self.lowercase { "lc" } else { "mixed" };
        match self.metric {
            Metric::Chrfpp => {
                format!("nrefs:1|case:{case}|eff:yes|nc:{}|nw:{}|space:no|beta:{}", self.char_order, self.word_order, self.beta)
            }
            Metric::Bleu => format!("nrefs:1|case:{case}|eff:no|tok:13a|smooth:exp|n:{}", self.max_ngram_order),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: Metric,
    /// Corpus score in [0, 100].
    pub score: f64,
    pub sentence_scores: Vec<f64>,
    pub signature: String,
    pub config: MetricConfig,
}

fn check_lengths(hyps: &[String], refs: &[String]) -> Result<()> {
    if hyps.len() != refs.len() {
        return Err(Error::Input(format!("{} hypotheses but {} references", hyps.len(), refs.len())));
    }
    Ok(())
}

pub fn score(hyps: &[String], refs: &[String], cfg: &MetricConfig) -> Result<MetricReport> {
    match cfg.metric {
        Metric::Chrfpp => chrf_pp(hyps, refs, cfg),
        Metric::Bleu => bleu(hyps, refs, cfg),
    }
}

fn char_ngrams(s: &str, n: usize) -> HashMap<&str, usize> {
    let bounds: Vec<usize> = s.char_indices().map(|(i, _)| i).chain(std::iter::once(s.len())).collect();
    let mut out = HashMap::new();
    for i in 0..bounds.len().saturating_sub(n) {
        *out.entry(&s[bounds[i]..bounds[i + n]]).or_default() += 1;
    }
    out
}

fn word_ngrams(words: &[&str], n: usize) -> HashMap<String, usize> {
    let mut out = HashMap::new();
    for w in words.windows(n) {
        *out.entry(w.join(" ")).or_default() += 1;
    }
    out
}

fn is_ascii_punct(c: char) -> bool {
    c.is_ascii_punctuation()
}

/// Split one leading or trailing ASCII punctuation mark off each word.
fn chrf_words(s: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for w in s.split_whitespace() {
        let mut cs = w.chars();
        let (first, last) = (cs.next(), w.chars().next_back());
        if w.chars().count() == 1 {
            out.push(w);
        } else if last.is_some_and(is_ascii_punct) {
            let cut = w.len() - last.unwrap().len_utf8();
            out.extend([&w[..cut], &w[cut..]]);
        } else if first.is_some_and(is_ascii_punct) {
            let cut = first.unwrap().len_utf8();
            out.extend([&w[..cut], &w[cut..]]);
        } else {
            out.push(w);
        }
    }
    out
}

fn match_stats<K: std::hash::Hash + Eq>(h: &HashMap<K, usize>, r: &HashMap<K, usize>) -> [u64; 3] {
    let matched: usize = h.iter().map(|(g, &c)| r.get(g).map_or(0, |&rc| c.min(rc))).sum();
    [h.values().sum::<usize>() as u64, r.values().sum::<usize>() as u64, matched as u64]
}

/// Flattened [hyp, ref, match] counts per order: char orders then word orders.
fn chrf_stats(hyp: &str, reference: &str, cfg: &MetricConfig) -> Vec<u64> {
    let prep = |s: &str| if cfg.lowercase { s.to_lowercase() } else { s.to_string() };
    let (hyp, reference) = (prep(hyp), prep(reference));
    let squeeze = |s: &str| s.split_whitespace().collect::<String>();
    let (hc, rc) = (squeeze(&hyp), squeeze(&reference));
    let mut out = Vec::with_capacity(3 * (cfg.char_order + cfg.word_order));
    for n in 1..=cfg.char_order {
        out.extend(match_stats(&char_ngrams(&hc, n), &char_ngrams(&rc, n)));
    }
    let (hw, rw) = (chrf_words(&hyp), chrf_words(&reference));
    for n in 1..=cfg.word_order {
        out.extend(match_stats(&word_ngrams(&hw, n), &word_ngrams(&rw, n)));
    }
    out
}

fn chrf_from_stats(stats: &[u64], beta: f64) -> f64 {
    let factor = beta * beta;
    let (mut avg_p, mut avg_r, mut eff) = (0.0, 0.0, 0);
    for s in stats.chunks(3) {
        let (h, r, m) = (s[0] as f64, s[1] as f64, s[2] as f64);
        if s[0] > 0 && s[1] > 0 {
            avg_p += m / h;
            avg_r += m / r;
            eff += 1;
        }
    }
    if eff == 0 {
        return 0.0;
    }
    avg_p /= eff as f64;
    avg_r /= eff as f64;
    if avg_p + avg_r == 0.0 {
        return 0.0;
    }
    100.0 * (1.0 + factor) * avg_p * avg_r / (factor * avg_p + avg_r)
}

fn sum_stats(per: &[Vec<u64>], width: usize) -> Vec<u64> {
    let mut total = vec![0u64; width];
    for s in per {
        for (t, v) in total.iter_mut().zip(s) {
            *t += v;
        }
    }
    total
}

pub fn chrf_pp(hyps: &[String], refs: &[String], cfg: &MetricConfig) -> Result<MetricReport> {
    check_lengths(hyps, refs)?;
    let pairs: Vec<(&String, &String)> = hyps.iter().zip(refs).collect();
    let per = exec::map(&pairs, |(h, r)| chrf_stats(h, r, cfg));
    let total = sum_stats(&per, 3 * (cfg.char_order + cfg.word_order));
    Ok(MetricReport {
        metric: Metric::Chrfpp,
        score: chrf_from_stats(&total, cfg.beta),
        sentence_scores: per.iter().map(|s| chrf_from_stats(s, cfg.beta)).collect(),
        signature: cfg.signature(),
        config: cfg.clone(),
    })
}

static TOK_13A: LazyLock<[(Regex, &'static str); 4]> = LazyLock::new(|| {
    [
        (Regex::new(r"([\{-~\[-` -&\(-\+:-@/])").unwrap(), " ${1} "),
        (Regex::new(r"([^0-9])([\.,])").unwrap(), "${1} ${2} "),
        (Regex::new(r"([\.,])([^0-9])").unwrap(), " ${1} ${2}"),
        (Regex::new(r"([0-9])(-)").unwrap(), "${1} ${2} "),
    ]
});

/// mteval-v13a style tokenization.
pub fn tokenize_13a(line: &str) -> String {
    let mut s = line.replace("<skipped>", "").replace("-\n", "").replace('\n', " ");
    if s.contains('&') {
        s = s.replace("&quot;", "\"").replace("&amp;", "&").replace("&lt;", "<").replace("&gt;", ">");
    }
    let mut s = format!(" {s} ");
    for (re, rep) in TOK_13A.iter() {
        s = re.replace_all(&s, *rep).into_owned();
    }
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// [hyp_len, ref_len, correct₁..ₙ, total₁..ₙ].
fn bleu_stats(hyp: &str, reference: &str, cfg: &MetricConfig) -> Vec<u64> {
    let prep = |s: &str| {
        let s = if cfg.lowercase { s.to_lowercase() } else { s.to_string() };
        tokenize_13a(s.trim_end())
    };
    let (h, r) = (prep(hyp), prep(reference));
    let hw: Vec<&str> = h.split_whitespace().collect();
    let rw: Vec<&str> = r.split_whitespace().collect();
    let n_max = cfg.max_ngram_order;
    let mut out = vec![0u64; 2 + 2 * n_max];
    out[0] = hw.len() as u64;
    out[1] = rw.len() as u64;
    for n in 1..=n_max {
        let [total, _, correct] = match_stats(&word_ngrams(&hw, n), &word_ngrams(&rw, n));
        out[1 + n] = correct;
        out[1 + n_max + n] = total;
    }
    out
}

fn bleu_from_stats(stats: &[u64], n_max: usize) -> f64 {
    let (sys, rf) = (stats[0] as f64, stats[1] as f64);
    let correct = &stats[2..2 + n_max];
    let total = &stats[2 + n_max..];
    let bp = if sys < rf {
        if sys > 0.0 {
            (1.0 - rf / sys).exp()
        } else {
            0.0
        }
    } else {
        1.0
    };
    if correct.iter().all(|&c| c == 0) {
        return 0.0;
    }
    let mut precisions = vec![0.0; n_max];
    let mut smooth = 1.0;
    for n in 0..n_max {
        if total[n] == 0 {
            break;
        }
        precisions[n] = if correct[n] == 0 {
            smooth *= 2.0;
            100.0 / (smooth * total[n] as f64)
        } else {
            100.0 * correct[n] as f64 / total[n] as f64
        };
    }
    // a zero precision stands for log 0; the reference scorer uses a huge negative
    let log_sum: f64 = precisions.iter().map(|&p| if p == 0.0 { -9_999_999_999.0 } else { p.ln() }).sum();
    bp * (log_sum / n_max as f64).exp()
}

pub fn bleu(hyps: &[String], refs: &[String], cfg: &MetricConfig) -> Result<MetricReport> {
    check_lengths(hyps, refs)?;
    let pairs: Vec<(&String, &String)> = hyps.iter().zip(refs).collect();
    let per = exec::map(&pairs, |(h, r)| bleu_stats(h, r, cfg));
    let total = sum_stats(&per, 2 + 2 * cfg.max_ngram_order);
    Ok(MetricReport {
        metric: Metric::Bleu,
        score: bleu_from_stats(&total, cfg.max_ngram_order),
        sentence_scores: per.iter().map(|s| bleu_from_stats(s, cfg.max_ngram_order)).collect(),
        signature: cfg.signature(),
        config: cfg.clone(),
    })
}
