//! Labelled disease-pair lists (comorbid or causal) used as ground truth for
//! neighbourhood hit-rates.
//!
//! CSV format, UTF-8:
//!
//! ```text
//! code_a,code_b,source,relation
//! I10,E78,jensen,comorbid
//! ```

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

pub const PAIR_HEADER: &str = "code_a,code_b,source,relation";

#[derive(Debug, Error)]
pub enum PairError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("row {row}: {message}")]
    Malformed { row: usize, message: String },
    #[error("row {row}: self-pair {code:?}")]
    SelfPair { row: usize, code: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Relation {
    Comorbid,
    Causal,
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Relation::Comorbid => "comorbid",
            Relation::Causal => "causal",
        })
    }
}

impl FromStr for Relation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "comorbid" => Ok(Relation::Comorbid),
            "causal" => Ok(Relation::Causal),
            other => Err(format!("relation must be comorbid or causal, got {other:?}")),
        }
    }
}

/// An unordered pair, stored with `a < b`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pair {
    pub source: String,
    pub a: String,
    pub b: String,
    pub relation: Relation,
}

impl Pair {
    /// Returns `None` for a self-pair.
    pub fn new(x: &str, y: &str, source: &str, relation: Relation) -> Option<Pair> {
        if x == y {
            return None;
        }
        let (a, b) = if x < y { (x, y) } else { (y, x) };
        Some(Pair { source: source.to_string(), a: a.to_string(), b: b.to_string(), relation })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairWarning {
    pub row: usize,
    pub message: String,
}

/// Set of unordered pairs, unique per source, sorted by (source, a, b).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PairList {
    pairs: Vec<Pair>,
}

impl PairList {
    /// Collapses duplicates (in either order) within a source, keeping the
    /// first occurrence. Returns the positions (0-based) of dropped pairs.
    pub fn from_pairs(pairs: impl IntoIterator<Item = Pair>) -> (PairList, Vec<usize>) {
        let mut seen = BTreeSet::new();
        let mut kept = Vec::new();
        let mut dropped = Vec::new();
        for (i, p) in pairs.into_iter().enumerate() {
            if seen.insert((p.source.clone(), p.a.clone(), p.b.clone())) {
                kept.push(p);
            } else {
                dropped.push(i);
            }
        }
        kept.sort();
        (PairList { pairs: kept }, dropped)
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Distinct (source, relation) groups in sorted order.
    pub fn groups(&self) -> Vec<(String, Relation)> {
        let set: BTreeSet<(String, Relation)> = self.pairs.iter().map(|p| (p.source.clone(), p.relation)).collect();
        set.into_iter().collect()
    }

    pub fn filter(&self, source: &str, relation: Relation) -> PairList {
        PairList { pairs: self.pairs.iter().filter(|p| p.source == source && p.relation == relation).cloned().collect() }
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<(), PairError> {
        writeln!(w, "{PAIR_HEADER}")?;
        for p in &self.pairs {
            writeln!(w, "{},{},{},{}", p.a, p.b, p.source, p.relation)?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PairError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

/// Parses a pair-list CSV. Row numbers count data rows from 1.
pub fn read_pairlist<R: BufRead>(reader: R) -> Result<(PairList, Vec<PairWarning>), PairError> {
    let mut lines = reader.lines();
    let header = lines.next().transpose()?;
    match header {
        Some(h) if h.trim_end_matches('\r') == PAIR_HEADER => {}
        _ => return Err(PairError::Malformed { row: 0, message: format!("header must be `{PAIR_HEADER}`") }),
    }
    let mut pairs = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = i + 1;
        let line = line?;
        let line = line.trim_end_matches('\r');
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 || fields.iter().any(|f| f.is_empty()) {
            return Err(PairError::Malformed { row, message: format!("expected 4 non-empty fields in {line:?}") });
        }
        let relation: Relation = fields[3].parse().map_err(|message| PairError::Malformed { row, message })?;
        let pair = Pair::new(fields[0], fields[1], fields[2], relation)
            .ok_or_else(|| PairError::SelfPair { row, code: fields[0].to_string() })?;
        pairs.push(pair);
    }
    let (list, dropped) = PairList::from_pairs(pairs);
    let warnings = dropped
        .into_iter()
        .map(|i| {
            let w = PairWarning { row: i + 1, message: "duplicate unordered pair ignored".into() };
            log::warn!("pair list row {}: {}", w.row, w.message);
            w
        })
        .collect();
    Ok((list, warnings))
}

pub fn load_pairlist(path: impl AsRef<Path>) -> Result<PairList, PairError> {
    Ok(read_pairlist(BufReader::new(File::open(path)?))?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pair() {
        let (l, w) = read_pairlist("code_a,code_b,source,relation\nI10,E78,jensen,comorbid\n".as_bytes()).unwrap();
        assert_eq!(l.len(), 1);
        assert!(w.is_empty());
        assert_eq!(l.pairs()[0].a, "E78");
        assert_eq!(l.pairs()[0].b, "I10");
    }

    #[test]
    fn reversed_duplicate_collapses_with_warning() {
        let text = "code_a,code_b,source,relation\nA,B,x,comorbid\nB,A,x,comorbid\nA,B,y,causal\n";
        let (l, w) = read_pairlist(text.as_bytes()).unwrap();
        assert_eq!(l.len(), 2);
        assert_eq!(w, vec![PairWarning { row: 2, message: "duplicate unordered pair ignored".into() }]);
        assert_eq!(l.groups(), vec![("x".to_string(), Relation::Comorbid), ("y".to_string(), Relation::Causal)]);
    }

    #[test]
    fn self_pair_and_bad_rows_rejected() {
        let err = read_pairlist("code_a,code_b,source,relation\nB,C,s,causal\nA,A,s,comorbid\n".as_bytes()).unwrap_err();
        assert!(matches!(err, PairError::SelfPair { row: 2, .. }));
        assert!(read_pairlist("code_a,code_b,source,relation\nA,B,s,friends\n".as_bytes()).is_err());
        assert!(read_pairlist("a,b\n".as_bytes()).is_err());
    }

    #[test]
    fn write_then_read() {
        let (l, _) = PairList::from_pairs(vec![
            Pair::new("I10", "E78", "planted", Relation::Comorbid).unwrap(),
            Pair::new("A00", "A01", "planted", Relation::Comorbid).unwrap(),
        ]);
        let mut buf = Vec::new();
        l.write(&mut buf).unwrap();
        assert_eq!(read_pairlist(buf.as_slice()).unwrap().0, l);
    }
}
