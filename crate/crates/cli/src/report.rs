//! Merges the per-stage CSVs of an output directory into one summary table.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::Path;

use anyhow::{Context, Result};

use embench_core::eval::csv::read_rows;
use embench_core::eval::downstream::read_score_rows;
use embench_core::eval::hit_rate::read_hit_rate_rows;
use embench_core::eval::reliability::read_reliability_rows;

use crate::commands::{DOWNSTREAM_FILE, HIT_RATE_FILE, RELIABILITY_FILE, TRAIN_LOG_FILE, TRAIN_LOG_HEADER};

pub const SUMMARY_FILE: &str = "summary.csv";
pub const SUMMARY_HEADER: &str = "section,method,item,statistic,value";
/// Neighbourhood sizes reported from each hit-rate curve.
pub const SUMMARY_LS: [usize; 5] = [1, 5, 10, 20, 50];

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub section: &'static str,
    pub method: String,
    pub item: String,
    pub statistic: String,
    pub value: f64,
}

impl fmt::Display for SummaryRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{},{}", self.section, self.method, self.item, self.statistic, self.value)
    }
}

/// Median of a non-empty sample (mean of the middle two for even sizes).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn open(dir: &Path, name: &str) -> Result<Option<BufReader<File>>> {
    let path = dir.join(name);
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(BufReader::new(File::open(&path).with_context(|| format!("opening {}", path.display()))?)))
}

/// Summary rows from whichever stage outputs exist in `dir`.
pub fn summarise(dir: &Path) -> Result<Vec<SummaryRow>> {
    let mut rows = Vec::new();

    if let Some(r) = open(dir, TRAIN_LOG_FILE)? {
        // last epoch per (method, seed)
        let mut last: BTreeMap<(String, String), (usize, f64)> = BTreeMap::new();
        for row in read_rows(r, TRAIN_LOG_HEADER).context(TRAIN_LOG_FILE)? {
            let epoch: usize = row[2].parse().context("train log epoch")?;
            let loss: f64 = row[3].parse().context("train log loss")?;
            let slot = last.entry((row[0].clone(), row[1].clone())).or_insert((0, f64::NAN));
            if epoch >= slot.0 {
                *slot = (epoch, loss);
            }
        }
        for ((method, seed), (_, loss)) in last {
            rows.push(SummaryRow { section: "train", method, item: format!("seed={seed}"), statistic: "final_loss".into(), value: loss });
        }
    }

    if let Some(r) = open(dir, HIT_RATE_FILE)? {
        for h in read_hit_rate_rows(r).context(HIT_RATE_FILE)? {
            if SUMMARY_LS.contains(&h.l) {
                let relation = h.relation.map(|r| r.to_string()).unwrap_or_default();
                rows.push(SummaryRow {
                    section: "hit_rate",
                    method: h.method,
                    item: format!("{}/{relation}", h.source),
                    statistic: format!("hit_rate@{}", h.l),
                    value: h.hit_rate,
                });
            }
        }
    }

    if let Some(r) = open(dir, DOWNSTREAM_FILE)? {
        let mut groups: BTreeMap<(String, String), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for s in read_score_rows(r).context(DOWNSTREAM_FILE)? {
            let g = groups
                .entry((format!("{}+{}", s.disease_emb, s.demo_emb), format!("{}:{}", s.task, s.target_code)))
                .or_default();
            g.0.push(s.average_precision);
            g.1.push(s.f1);
        }
        for ((method, item), (ap, f1)) in groups {
            for (statistic, values) in [("median_ap", &ap), ("median_f1", &f1)] {
                rows.push(SummaryRow { section: "downstream", method: method.clone(), item: item.clone(), statistic: statistic.into(), value: median(values) });
            }
        }
    }

    if let Some(r) = open(dir, RELIABILITY_FILE)? {
        for s in read_reliability_rows(r).context(RELIABILITY_FILE)? {
            rows.push(SummaryRow {
                section: "reliability",
                method: s.method,
                item: format!("fraction={}", s.sample_fraction),
                statistic: "sigma".into(),
                value: s.sigma,
            });
        }
    }
    Ok(rows)
}

pub fn write(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = std::io::BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    writeln!(w, "{SUMMARY_HEADER}")?;
    for r in rows {
        writeln!(w, "{r}")?;
    }
    w.flush()?;
    Ok(())
}
