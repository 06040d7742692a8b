//! L-neighbourhood hit-rate of known disease pairs.
//!
//! A pair (a, b) hits at L when a is among b's L nearest codes by cosine or
//! b is among a's. Pairs with a code outside the embedding vocabulary are not
//! evaluable and are left out of the denominator.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use super::csv::{field, read_rows};
use super::pairs::{PairList, Relation};
use super::EvalError;
use crate::embedding::EmbeddingSet;

pub const HIT_RATE_HEADER: &str = "method,source,relation,L,hit_rate,n_evaluable";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HitRate {
    pub rate: f64,
    pub n_evaluable: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub l: usize,
    pub hit_rate: f64,
    pub n_evaluable: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HitRateCurve {
    pub source: String,
    pub relation: Option<Relation>,
    pub points: Vec<CurvePoint>,
}

fn check_l(e: &EmbeddingSet, l: usize) -> Result<(), EvalError> {
    let max = e.len().saturating_sub(1);
    if l == 0 || l > max {
        return Err(EvalError::NeighbourhoodOutOfRange { l, max });
    }
    Ok(())
}

fn evaluable<'a>(e: &EmbeddingSet, pairs: &'a PairList) -> Vec<(usize, usize)> {
    let v = e.vocabulary();
    pairs.pairs().iter().filter_map(|p| Some((v.index_of(&p.a)?, v.index_of(&p.b)?))).collect()
}

/// Hit-rate at a single neighbourhood size, answered by querying each
/// involved code's neighbourhood.
pub fn hit_rate(e: &EmbeddingSet, pairs: &PairList, l: usize) -> Result<HitRate, EvalError> {
    check_l(e, l)?;
    let v = e.vocabulary();
    let mut cache: HashMap<&str, Vec<String>> = HashMap::new();
    let mut neighbours = |code: &str| -> Result<Vec<String>, EvalError> {
        if let Some(n) = cache.get(code) {
            return Ok(n.clone());
        }
        let n: Vec<String> = e.nearest_neighbours(code, l)?.neighbours.into_iter().map(|(c, _)| c).collect();
        cache.insert(v.code(v.index_of(code).expect("evaluable")), n.clone());
        Ok(n)
    };
    let mut hits = 0usize;
    let mut n_evaluable = 0usize;
    for p in pairs.pairs() {
        if !(v.contains(&p.a) && v.contains(&p.b)) {
            continue;
        }
        n_evaluable += 1;
        if neighbours(&p.a)?.contains(&p.b) || neighbours(&p.b)?.contains(&p.a) {
            hits += 1;
        }
    }
    if n_evaluable == 0 {
        return Err(EvalError::NoEvaluablePairs);
    }
    Ok(HitRate { rate: hits as f64 / n_evaluable as f64, n_evaluable })
}

/// Hit-rate for every L in `l_min..=l_max` from a single ranking pass.
pub fn hit_rate_curve(e: &EmbeddingSet, pairs: &PairList, l_min: usize, l_max: usize) -> Result<HitRateCurve, EvalError> {
    if l_min > l_max {
        return Err(EvalError::InvalidArgument(format!("l_min {l_min} > l_max {l_max}")));
    }
    check_l(e, l_min)?;
    check_l(e, l_max)?;
    let idx = evaluable(e, pairs);
    if idx.is_empty() {
        return Err(EvalError::NoEvaluablePairs);
    }
    let index = e.neighbour_index()?;
    // best rank at which either member sees the other (0-based)
    let best: Vec<usize> = idx.iter().map(|&(a, b)| index.rank(a, b).min(index.rank(b, a))).collect();
    let n = idx.len();
    let points = (l_min..=l_max)
        .map(|l| {
            let hits = best.iter().filter(|&&r| r < l).count();
            CurvePoint { l, hit_rate: hits as f64 / n as f64, n_evaluable: n }
        })
        .collect();
    let groups = pairs.groups();
    let (source, relation) = match groups.as_slice() {
        [(s, r)] => (s.clone(), Some(*r)),
        _ => ("pooled".to_string(), None),
    };
    Ok(HitRateCurve { source, relation, points })
}

/// One curve per (source, relation) group of the list. Groups with no
/// evaluable pairs are skipped.
pub fn hit_rate_curves(e: &EmbeddingSet, pairs: &PairList, l_min: usize, l_max: usize) -> Result<Vec<HitRateCurve>, EvalError> {
    let mut out = Vec::new();
    for (source, relation) in pairs.groups() {
        match hit_rate_curve(e, &pairs.filter(&source, relation), l_min, l_max) {
            Ok(c) => out.push(c),
            Err(EvalError::NoEvaluablePairs) => log::warn!("pair source {source}/{relation}: no evaluable pairs"),
            Err(err) => return Err(err),
        }
    }
    if out.is_empty() {
        return Err(EvalError::NoEvaluablePairs);
    }
    Ok(out)
}

/// One row of the hit-rate report.
#[derive(Debug, Clone, PartialEq)]
pub struct HitRateRow {
    pub method: String,
    pub source: String,
    /// `pooled` curves have no relation and write an empty field.
    pub relation: Option<Relation>,
    pub l: usize,
    pub hit_rate: f64,
    pub n_evaluable: usize,
}

/// Rows under [`HIT_RATE_HEADER`] (the header itself is not written).
pub fn write_hit_rate_rows<W: Write>(mut w: W, method: &str, curves: &[HitRateCurve]) -> std::io::Result<()> {
    for c in curves {
        let relation = c.relation.map(|r| r.to_string()).unwrap_or_default();
        for p in &c.points {
            writeln!(w, "{method},{},{relation},{},{},{}", c.source, p.l, p.hit_rate, p.n_evaluable)?;
        }
    }
    Ok(())
}

pub fn read_hit_rate_rows<R: BufRead>(r: R) -> Result<Vec<HitRateRow>, EvalError> {
    read_rows(r, HIT_RATE_HEADER)?
        .into_iter()
        .map(|row| {
            let relation = match row[2].as_str() {
                "" => None,
                s => Some(s.parse().map_err(EvalError::InvalidArgument)?),
            };
            Ok(HitRateRow {
                method: row[0].clone(),
                source: row[1].clone(),
                relation,
                l: field(&row, 3, "L")?,
                hit_rate: field(&row, 4, "hit_rate")?,
                n_evaluable: field(&row, 5, "n_evaluable")?,
            })
        })
        .collect()
}
