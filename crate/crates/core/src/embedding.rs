//! The shared embedding artifact: a vocabulary-aligned matrix of concept
//! vectors, its text file format, and exact cosine nearest-neighbour search.
//!
//! File layout (UTF-8, LF):
//!
//! ```text
//! V d method seed corpus_fingerprint
//! CODE v1 v2 ... vd
//! ...
//! ```
//!
//! Rows follow vocabulary order and values use the shortest decimal that
//! round-trips to the same `f64`, so writes are byte-deterministic.

use std::cmp::Ordering;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::corpus::{ConceptVocabulary, CorpusError};
use crate::linalg::{dot, norm, LinalgError, Matrix};

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("row {row}: expected {expected} values, found {found}")]
    RowLength { row: usize, expected: usize, found: usize },
    #[error("row {row}: non-finite value")]
    NonFinite { row: usize },
    #[error("unknown code {0:?}")]
    UnknownCode(String),
    #[error("k={k} out of range [1, {max}]")]
    KOutOfRange { k: usize, max: usize },
    #[error("code {code:?}: {source}")]
    Cosine { code: String, source: LinalgError },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Vocabulary(#[from] CorpusError),
}

/// Which trainer produced an embedding set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Ae,
    Ncf,
    Cbow,
    Cbowa,
    Behrt,
    Random,
}

impl Method {
    pub const TRAINED: [Method; 5] = [Method::Ae, Method::Ncf, Method::Cbow, Method::Cbowa, Method::Behrt];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ae => "AE",
            Method::Ncf => "NCF",
            Method::Cbow => "CBOW",
            Method::Cbowa => "CBOWA",
            Method::Behrt => "BEHRT",
            Method::Random => "RANDOM",
        }
    }

    /// Token written in the file header. The attention CBOW is a
    /// reconstruction and says so.
    pub fn header_token(self) -> &'static str {
        match self {
            Method::Cbowa => "CBOWA(reconstructed)",
            m => m.name(),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "AE" => Ok(Method::Ae),
            "NCF" => Ok(Method::Ncf),
            "CBOW" => Ok(Method::Cbow),
            "CBOWA" | "CBOWA(RECONSTRUCTED)" => Ok(Method::Cbowa),
            "BEHRT" => Ok(Method::Behrt),
            "RANDOM" => Ok(Method::Random),
            other => Err(format!("unknown method {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddingMeta {
    pub method: Method,
    pub seed: u64,
    pub corpus_fingerprint: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    vocabulary: ConceptVocabulary,
    vectors: Matrix,
    pub meta: EmbeddingMeta,
}

impl EmbeddingSet {
    pub fn new(vocabulary: ConceptVocabulary, vectors: Matrix, meta: EmbeddingMeta) -> Result<Self, EmbeddingError> {
        if vectors.rows() != vocabulary.len() {
            return Err(EmbeddingError::Shape(format!(
                "{} rows for a vocabulary of {}",
                vectors.rows(),
                vocabulary.len()
            )));
        }
        if vectors.cols() == 0 {
            return Err(EmbeddingError::Shape("dimension must be positive".into()));
        }
        if let Some(row) = (0..vectors.rows()).find(|&i| vectors.row(i).iter().any(|v| !v.is_finite())) {
            return Err(EmbeddingError::NonFinite { row: row + 1 });
        }
        Ok(EmbeddingSet { vocabulary, vectors, meta })
    }

    /// Seeded uniform random vectors; the baseline every trained method is
    /// compared against.
    pub fn random(vocabulary: ConceptVocabulary, dim: usize, seed: u64, corpus_fingerprint: u64) -> Self {
        let mut rng = crate::rng::derive(seed, "random-embedding");
        let mut m = Matrix::zeros(vocabulary.len(), dim);
        crate::rng::fill_uniform(&mut rng, m.as_mut_slice(), 1.0 / (dim as f64).sqrt());
        EmbeddingSet::new(vocabulary, m, EmbeddingMeta { method: Method::Random, seed, corpus_fingerprint })
            .expect("random vectors are finite")
    }

    pub fn vocabulary(&self) -> &ConceptVocabulary {
        &self.vocabulary
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn len(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocabulary.is_empty()
    }

    pub fn vector(&self, code: &str) -> Option<&[f64]> {
        self.vocabulary.index_of(code).map(|i| self.vectors.row(i))
    }

    /// Cosine similarity between two codes.
    pub fn similarity(&self, a: &str, b: &str) -> Result<f64, EmbeddingError> {
        let va = self.vector(a).ok_or_else(|| EmbeddingError::UnknownCode(a.into()))?;
        let vb = self.vector(b).ok_or_else(|| EmbeddingError::UnknownCode(b.into()))?;
        crate::linalg::cosine(va, vb).map_err(|source| EmbeddingError::Cosine { code: a.into(), source })
    }

    /// Multiplies row `i` by `scales[i]`.
    pub fn rescaled(&self, scales: &[f64]) -> EmbeddingSet {
        let mut m = self.vectors.clone();
        for (i, &s) in scales.iter().enumerate() {
            for v in m.row_mut(i) {
                *v *= s;
            }
        }
        EmbeddingSet { vocabulary: self.vocabulary.clone(), vectors: m, meta: self.meta }
    }

    fn norms(&self) -> Result<Vec<f64>, EmbeddingError> {
        (0..self.len())
            .map(|i| {
                let n = norm(self.vectors.row(i));
                if n == 0.0 {
                    Err(EmbeddingError::Cosine { code: self.vocabulary.code(i).into(), source: LinalgError::ZeroVector })
                } else {
                    Ok(n)
                }
            })
            .collect()
    }

    /// Cosine of row `i` against every row, given precomputed norms.
    fn cosines_from(&self, i: usize, norms: &[f64]) -> Vec<f64> {
        let q = self.vectors.row(i);
        (0..self.len())
            .map(|j| (dot(q, self.vectors.row(j)) / (norms[i] * norms[j])).clamp(-1.0, 1.0))
            .collect()
    }

    /// Every other code ordered by descending cosine, ties by code.
    fn ranked_from(&self, i: usize, norms: &[f64]) -> Vec<(usize, f64)> {
        let cos = self.cosines_from(i, norms);
        let mut order: Vec<(usize, f64)> = (0..self.len()).filter(|&j| j != i).map(|j| (j, cos[j])).collect();
        order.sort_by(|a, b| by_similarity(*a, *b));
        order
    }

    pub fn nearest_neighbours(&self, query: &str, k: usize) -> Result<Neighbourhood, EmbeddingError> {
        let qi = self.vocabulary.index_of(query).ok_or_else(|| EmbeddingError::UnknownCode(query.into()))?;
        let max = self.len().saturating_sub(1);
        if k == 0 || k > max {
            return Err(EmbeddingError::KOutOfRange { k, max });
        }
        let norms = self.norms()?;
        let ranked = self.ranked_from(qi, &norms);
        Ok(Neighbourhood {
            query: query.to_string(),
            neighbours: ranked[..k].iter().map(|&(j, c)| (self.vocabulary.code(j).to_string(), c)).collect(),
        })
    }

    /// Full neighbour rankings for every code, computed once.
    pub fn neighbour_index(&self) -> Result<NeighbourIndex, EmbeddingError> {
        use rayon::prelude::*;
        let norms = self.norms()?;
        let ranked: Vec<Vec<(usize, f64)>> = (0..self.len()).into_par_iter().map(|i| self.ranked_from(i, &norms)).collect();
        let n = self.len();
        let mut rank = vec![usize::MAX; n * n];
        for (i, list) in ranked.iter().enumerate() {
            for (r, &(j, _)) in list.iter().enumerate() {
                rank[i * n + j] = r;
            }
        }
        Ok(NeighbourIndex { n, rank, ranked })
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<(), EmbeddingError> {
        writeln!(
            w,
            "{} {} {} {} {:016x}",
            self.len(),
            self.dim(),
            self.meta.method.header_token(),
            self.meta.seed,
            self.meta.corpus_fingerprint
        )?;
        let mut line = String::new();
        for (i, code) in self.vocabulary.codes().iter().enumerate() {
            line.clear();
            line.push_str(code);
            for v in self.vectors.row(i) {
                line.push(' ');
                line.push_str(&format!("{v:?}"));
            }
            line.push('\n');
            w.write_all(line.as_bytes())?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self, EmbeddingError> {
        let mut lines = reader.lines();
        let header = lines.next().ok_or(EmbeddingError::Format { line: 1, message: "empty file".into() })??;
        let fields: Vec<&str> = header.split(' ').collect();
        let bad_header = |m: &str| EmbeddingError::Format { line: 1, message: format!("bad header: {m}") };
        if fields.len() != 5 {
            return Err(bad_header("expected `V d method seed corpus_fingerprint`"));
        }
        let v: usize = fields[0].parse().map_err(|_| bad_header("V"))?;
        let d: usize = fields[1].parse().map_err(|_| bad_header("d"))?;
        let method: Method = fields[2].parse().map_err(|e: String| bad_header(&e))?;
        let seed: u64 = fields[3].parse().map_err(|_| bad_header("seed"))?;
        let corpus_fingerprint = u64::from_str_radix(fields[4], 16).map_err(|_| bad_header("corpus_fingerprint"))?;

        let mut codes = Vec::with_capacity(v);
        let mut data = Vec::with_capacity(v * d);
        for (i, line) in lines.enumerate() {
            let line = line?;
            let row = i + 1;
            if row > v {
                return Err(EmbeddingError::Format { line: row + 1, message: format!("more than {v} rows") });
            }
            let mut parts = line.split(' ');
            let code = parts.next().unwrap_or_default().to_string();
            let values: Vec<&str> = parts.collect();
            if values.len() != d {
                return Err(EmbeddingError::RowLength { row, expected: d, found: values.len() });
            }
            for s in values {
                let x: f64 = s
                    .parse()
                    .map_err(|_| EmbeddingError::Format { line: row + 1, message: format!("bad value {s:?}") })?;
                if !x.is_finite() {
                    return Err(EmbeddingError::NonFinite { row });
                }
                data.push(x);
            }
            codes.push(code);
        }
        if codes.len() != v {
            return Err(EmbeddingError::Format {
                line: codes.len() + 2,
                message: format!("expected {v} rows, found {}", codes.len()),
            });
        }
        let vocabulary = ConceptVocabulary::from_codes(codes.iter().cloned())?;
        if vocabulary.codes() != codes.as_slice() {
            return Err(EmbeddingError::Format {
                line: 2,
                message: "codes must be unique and in lexicographic order".into(),
            });
        }
        EmbeddingSet::new(vocabulary, Matrix::from_vec(v, d, data), EmbeddingMeta { method, seed, corpus_fingerprint })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EmbeddingError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EmbeddingError> {
        Self::read(BufReader::new(File::open(path)?))
    }
}

pub fn save_embeddings(e: &EmbeddingSet, path: impl AsRef<Path>) -> Result<(), EmbeddingError> {
    e.save(path)
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingSet, EmbeddingError> {
    EmbeddingSet::load(path)
}

/// Descending cosine, then ascending vocabulary position (= lexicographic code).
fn by_similarity(a: (usize, f64), b: (usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbourhood {
    pub query: String,
    pub neighbours: Vec<(String, f64)>,
}

/// Precomputed neighbour ranks for all codes of one embedding set.
#[derive(Debug, Clone)]
pub struct NeighbourIndex {
    n: usize,
    rank: Vec<usize>,
    ranked: Vec<Vec<(usize, f64)>>,
}

impl NeighbourIndex {
    /// 0-based position of `j` in `i`'s neighbour list.
    pub fn rank(&self, i: usize, j: usize) -> usize {
        self.rank[i * self.n + j]
    }

    pub fn ranked(&self, i: usize) -> &[(usize, f64)] {
        &self.ranked[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(codes: &[&str], rows: &[Vec<f64>]) -> EmbeddingSet {
        EmbeddingSet::new(
            ConceptVocabulary::from_codes(codes.iter().copied()).unwrap(),
            Matrix::from_rows(rows),
            EmbeddingMeta { method: Method::Random, seed: 1, corpus_fingerprint: 0xdead_beef },
        )
        .unwrap()
    }

    #[test]
    fn nearest_examples() {
        let e = set(&["A", "B", "C"], &[vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0]]);
        let n = e.nearest_neighbours("A", 1).unwrap();
        assert_eq!(n.neighbours.len(), 1);
        assert_eq!(n.neighbours[0].0, "B");
        let all = e.nearest_neighbours("A", 2).unwrap();
        assert_eq!(all.neighbours.iter().map(|(c, _)| c.as_str()).collect::<Vec<_>>(), ["B", "C"]);
    }

    #[test]
    fn ties_break_lexicographically() {
        let e = set(&["A", "B", "C"], &[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]]);
        let n = e.nearest_neighbours("A", 2).unwrap();
        assert_eq!(n.neighbours, vec![("B".to_string(), 0.0), ("C".to_string(), 0.0)]);
    }

    #[test]
    fn neighbour_errors() {
        let e = set(&["A", "B"], &[vec![1.0], vec![2.0]]);
        assert!(matches!(e.nearest_neighbours("Z", 1), Err(EmbeddingError::UnknownCode(_))));
        assert!(matches!(e.nearest_neighbours("A", 2), Err(EmbeddingError::KOutOfRange { .. })));
        assert!(matches!(e.nearest_neighbours("A", 0), Err(EmbeddingError::KOutOfRange { .. })));
        let z = set(&["A", "B"], &[vec![0.0], vec![2.0]]);
        assert!(matches!(z.nearest_neighbours("B", 1), Err(EmbeddingError::Cosine { .. })));
    }

    #[test]
    fn file_round_trip_and_determinism() {
        let e = set(&["E78", "I10", "M79"], &[vec![0.1, -2.5e-7], vec![1.0 / 3.0, 7.0], vec![-0.0, 1e300]]);
        let mut a = Vec::new();
        e.write(&mut a).unwrap();
        let mut b = Vec::new();
        e.write(&mut b).unwrap();
        assert_eq!(a, b);
        let text = String::from_utf8(a.clone()).unwrap();
        assert!(text.starts_with("3 2 RANDOM 1 00000000deadbeef\nE78 0.1 -2.5e-7\n"), "{text}");
        let back = EmbeddingSet::read(a.as_slice()).unwrap();
        assert_eq!(back.vocabulary(), e.vocabulary());
        for (x, y) in back.vectors().as_slice().iter().zip(e.vectors().as_slice()) {
            assert!((x - y).abs() <= 1e-9);
        }
        assert_eq!(back.meta, e.meta);
    }

    #[test]
    fn short_row_reports_row_number() {
        let text = "2 3 CBOW 0 0000000000000000\nA 1 2 3\nB 1 2\n";
        let err = EmbeddingSet::read(text.as_bytes()).unwrap_err();
        assert!(matches!(err, EmbeddingError::RowLength { row: 2, expected: 3, found: 2 }), "{err}");
        let nan = "1 1 CBOW 0 0000000000000000\nA NaN\n";
        assert!(matches!(EmbeddingSet::read(nan.as_bytes()), Err(EmbeddingError::NonFinite { row: 1 })));
    }

    #[test]
    fn cbowa_header_marks_reconstruction() {
        let mut e = set(&["A"], &[vec![1.0]]);
        e.meta.method = Method::Cbowa;
        let mut buf = Vec::new();
        e.write(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).contains("CBOWA(reconstructed)"));
        assert_eq!(EmbeddingSet::read(buf.as_slice()).unwrap().meta.method, Method::Cbowa);
    }

    fn brute_force(e: &EmbeddingSet, q: usize, k: usize) -> Vec<usize> {
        let n = e.len();
        let mut all: Vec<(usize, f64)> = (0..n)
            .filter(|&j| j != q)
            .map(|j| (j, crate::linalg::cosine(e.vectors().row(q), e.vectors().row(j)).unwrap()))
            .collect();
        // selection by repeated max scan, independent of the sort path
        let mut out = Vec::new();
        for _ in 0..k {
            let mut best = 0;
            for t in 1..all.len() {
                if all[t].1 > all[best].1 || (all[t].1 == all[best].1 && all[t].0 < all[best].0) {
                    best = t;
                }
            }
            out.push(all.remove(best).0);
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn knn_matches_brute_force(v in 2usize..=50, dim in 1usize..6, seed in any::<u64>(), kf in 0.0f64..1.0) {
            let codes: Vec<String> = (0..v).map(|i| format!("C{i:03}")).collect();
            let vocab = ConceptVocabulary::from_codes(codes).unwrap();
            let e = EmbeddingSet::random(vocab, dim, seed, 0);
            let k = 1 + ((v - 2) as f64 * kf) as usize;
            for q in 0..v {
                let got = e.nearest_neighbours(e.vocabulary().code(q), k).unwrap();
                let expect = brute_force(&e, q, k);
                let got_idx: Vec<usize> = got.neighbours.iter().map(|(c, _)| e.vocabulary().index_of(c).unwrap()).collect();
                prop_assert_eq!(&got_idx, &expect);
                prop_assert!(got.neighbours.windows(2).all(|w| w[0].1 >= w[1].1));
                prop_assert!(got.neighbours.iter().all(|(c, _)| c != &got.query));
            }
        }
    }
}
