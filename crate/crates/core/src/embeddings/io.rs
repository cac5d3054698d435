//! Text vector format: header `<count> <dim>`, then one `word v1 .. vdim` row per line.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::EmbeddingTable;
use crate::error::{Error, Result};
use crate::tensor::Mat;

pub fn load_vectors(path: &Path, language: &str) -> Result<EmbeddingTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::format(path, 1, "missing header"))?;
    let mut h = header.split_whitespace();
    let parse_usize = |s: Option<&str>, what: &str| -> Result<usize> {
        s.and_then(|v| v.parse().ok()).ok_or_else(|| Error::format(path, 1, format!("header needs {what}")))
    };
    let count = parse_usize(h.next(), "a row count")?;
    let dim = parse_usize(h.next(), "a dimension")?;
    if h.next().is_some() {
        return Err(Error::format(path, 1, "header has extra fields"));
    }

    let mut words = Vec::with_capacity(count);
    let mut seen = std::collections::HashSet::with_capacity(count);
    let mut data = Vec::with_capacity(count * dim);
    for (k, line) in lines.enumerate() {
        let lineno = k + 2;
        if words.len() == count {
            if line.trim().is_empty() {
                continue;
            }
            return Err(Error::format(path, lineno, format!("more rows than the {count} declared")));
        }
        let mut parts = line.split(' ').filter(|s| !s.is_empty());
        let word = parts.next().ok_or_else(|| Error::format(path, lineno, "empty row"))?;
        let before = data.len();
        for p in parts {
            let v: f32 = p.parse().map_err(|_| Error::format(path, lineno, format!("bad float `{p}`")))?;
            if !v.is_finite() {
                return Err(Error::format(path, lineno, "non-finite value"));
            }
            data.push(v);
        }
        let got = data.len() - before;
        if got != dim {
            return Err(Error::format(path, lineno, format!("expected {dim} values, found {got}")));
        }
        if !seen.insert(word.to_string()) {
            return Err(Error::format(path, lineno, format!("duplicate word `{word}`")));
        }
        words.push(word.to_string());
    }
    if words.len() != count {
        return Err(Error::format(path, count + 1, format!("declared {count} rows, found {}", words.len())));
    }
    EmbeddingTable::new(language, words, Mat::from_vec(count, dim, data))
}

pub fn save_vectors(table: &EmbeddingTable, path: &Path) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "{} {}", table.len(), table.dim());
    for (i, w) in table.words().iter().enumerate() {
        out.push_str(w);
        for v in table.matrix().row(i) {
            // shortest representation that round-trips exactly
            let _ = write!(out, " {v}");
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &tempfile::TempDir, body: &str) -> std::path::PathBuf {
        let p = dir.path().join("v.vec");
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn parses_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "2 3\nfoo 1 2 3\nbar 0.5 -1 2e-3\n");
        let t = load_vectors(&p, "en").unwrap();
        assert_eq!((t.len(), t.dim()), (2, 3));
        assert_eq!(t.vector("bar").unwrap(), &[0.5, -1.0, 0.002]);
    }

    #[test]
    fn short_row_names_its_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "2 3\nfoo 1 2 3\nbar 1 2\n");
        match load_vectors(&p, "en") {
            Err(Error::Format { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_word_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "2 1\nfoo 1\nfoo 2\n");
        assert!(matches!(load_vectors(&p, "en"), Err(Error::Format { line: 3, .. })));
    }

    #[test]
    fn save_then_load_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let m = Mat::from_vec(2, 2, vec![0.1f32, -0.333_333_34, 1e-8, 12345.679]);
        let t = EmbeddingTable::new("en", vec!["a".into(), "b".into()], m).unwrap();
        let p = dir.path().join("out.vec");
        save_vectors(&t, &p).unwrap();
        let back = load_vectors(&p, "en").unwrap();
        assert_eq!(back.words(), t.words());
        assert!(back.matrix().max_abs_diff(t.matrix()) <= 1e-6);
    }
}
