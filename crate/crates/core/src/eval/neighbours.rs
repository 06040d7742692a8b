//! Top-k neighbour tables: for each probe code, its closest codes by cosine,
//! one row per (method, probe, rank).

use std::io::{BufRead, Write};

use super::csv::{field, read_rows};
use super::EvalError;
use crate::embedding::{EmbeddingSet, Neighbourhood};

pub const NEIGHBOUR_HEADER: &str = "method,query,rank,code,cosine";
pub const DEFAULT_K: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct NeighbourRow {
    pub method: String,
    pub query: String,
    /// 1-based.
    pub rank: usize,
    pub code: String,
    pub cosine: f64,
}

/// Neighbourhoods of `probes` (every code when empty), `k` each.
pub fn neighbour_table(e: &EmbeddingSet, probes: &[String], k: usize) -> Result<Vec<Neighbourhood>, EvalError> {
    let all;
    let probes = if probes.is_empty() {
        all = e.vocabulary().codes().to_vec();
        &all
    } else {
        probes
    };
    probes.iter().map(|q| Ok(e.nearest_neighbours(q, k)?)).collect()
}

pub fn write_neighbour_table<W: Write>(mut w: W, method: &str, table: &[Neighbourhood]) -> std::io::Result<()> {
    writeln!(w, "{NEIGHBOUR_HEADER}")?;
    for n in table {
        for (rank, (code, cos)) in n.neighbours.iter().enumerate() {
            writeln!(w, "{method},{},{},{code},{cos}", n.query, rank + 1)?;
        }
    }
    Ok(())
}

pub fn read_neighbour_table<R: BufRead>(r: R) -> Result<Vec<NeighbourRow>, EvalError> {
    read_rows(r, NEIGHBOUR_HEADER)?
        .into_iter()
        .map(|row| {
            Ok(NeighbourRow {
                method: row[0].clone(),
                query: row[1].clone(),
                rank: field(&row, 2, "rank")?,
                code: row[3].clone(),
                cosine: field(&row, 4, "cosine")?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ConceptVocabulary;

    #[test]
    fn table_round_trips_and_is_sorted() {
        let codes: Vec<String> = (0..15).map(|i| format!("A{i:02}")).collect();
        let e = EmbeddingSet::random(ConceptVocabulary::from_codes(codes).unwrap(), 5, 3, 0);
        let probes = vec!["A03".to_string(), "A11".to_string()];
        let table = neighbour_table(&e, &probes, DEFAULT_K).unwrap();
        let mut buf = Vec::new();
        write_neighbour_table(&mut buf, "RANDOM", &table).unwrap();
        let rows = read_neighbour_table(buf.as_slice()).unwrap();
        assert_eq!(rows.len(), 20);
        for q in &probes {
            let mine: Vec<&NeighbourRow> = rows.iter().filter(|r| &r.query == q).collect();
            assert_eq!(mine.len(), 10);
            assert!(mine.windows(2).all(|w| w[0].cosine >= w[1].cosine && w[1].rank == w[0].rank + 1));
            assert!(mine.iter().all(|r| &r.code != q));
        }
        assert_eq!(neighbour_table(&e, &[], 3).unwrap().len(), 15);
        assert!(neighbour_table(&e, &["Z99".to_string()], 3).is_err());
    }
}
