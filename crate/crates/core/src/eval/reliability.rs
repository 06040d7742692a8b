//! Run-to-run variability of cosine similarities, and how it shrinks with
//! more training data.
//!
//! Run `r` subsamples patients without replacement and trains, both with
//! seed `base_seed + r`. For every evaluated code pair the cosine is
//! collected across runs and summarised by its mean and sample standard
//! deviation; sigma is the mean of those deviations. Runs execute in
//! parallel but are aggregated in run order.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::csv::{field, read_rows};
use super::pairs::PairList;
use super::EvalError;
use crate::corpus::Corpus;
use crate::embedding::EmbeddingSet;
use crate::linalg::{dot, norm};
use crate::rng;
use crate::train::Trainer;

pub const RELIABILITY_HEADER: &str = "method,sample_fraction,n_runs,n_pairs,sigma";
pub const PAIR_DETAIL_HEADER: &str = "method,sample_fraction,code_a,code_b,mean_cosine,sd_cosine";
pub const DEFAULT_FRACTIONS: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariabilityConfig {
    pub n_runs: usize,
    pub base_seed: u64,
    /// Share of patients each run trains on.
    pub sample_fraction: f64,
    /// Every run uses `base_seed`, for a zero-variance control.
    pub pin_seed: bool,
    /// Evaluate a seeded sample of at most this many pairs when no probe
    /// list is given.
    pub max_pairs: Option<usize>,
}

impl Default for VariabilityConfig {
    fn default() -> Self {
        VariabilityConfig { n_runs: 10, base_seed: 0, sample_fraction: 0.8, pin_seed: false, max_pairs: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairVariability {
    pub code_a: String,
    pub code_b: String,
    pub mean_cosine: f64,
    pub sd_cosine: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityReport {
    pub method: String,
    pub sample_fraction: f64,
    pub n_runs: usize,
    pub pairs: Vec<PairVariability>,
    pub sigma: f64,
    /// Probe pairs skipped because a run's vocabulary lacked a code.
    pub excluded_pairs: usize,
}

impl ReliabilityReport {
    pub fn n_pairs(&self) -> usize {
        self.pairs.len()
    }

    /// One row under [`RELIABILITY_HEADER`].
    pub fn summary_row(&self) -> String {
        format!("{},{},{},{},{}", self.method, self.sample_fraction, self.n_runs, self.n_pairs(), self.sigma)
    }

    /// Rows under [`PAIR_DETAIL_HEADER`].
    pub fn write_detail<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for p in &self.pairs {
            writeln!(w, "{},{},{},{},{},{}", self.method, self.sample_fraction, p.code_a, p.code_b, p.mean_cosine, p.sd_cosine)?;
        }
        Ok(())
    }
}

/// A parsed row of the reliability summary file.
#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityRow {
    pub method: String,
    pub sample_fraction: f64,
    pub n_runs: usize,
    pub n_pairs: usize,
    pub sigma: f64,
}

pub fn read_reliability_rows<R: BufRead>(r: R) -> Result<Vec<ReliabilityRow>, EvalError> {
    read_rows(r, RELIABILITY_HEADER)?
        .into_iter()
        .map(|row| {
            Ok(ReliabilityRow {
                method: row[0].clone(),
                sample_fraction: field(&row, 1, "sample_fraction")?,
                n_runs: field(&row, 2, "n_runs")?,
                n_pairs: field(&row, 3, "n_pairs")?,
                sigma: field(&row, 4, "sigma")?,
            })
        })
        .collect()
}

/// Parses the per-pair detail file; returns `(method, fraction, pair)`.
pub fn read_detail_rows<R: BufRead>(r: R) -> Result<Vec<(String, f64, PairVariability)>, EvalError> {
    read_rows(r, PAIR_DETAIL_HEADER)?
        .into_iter()
        .map(|row| {
            let pair = PairVariability {
                code_a: row[2].clone(),
                code_b: row[3].clone(),
                mean_cosine: field(&row, 4, "mean_cosine")?,
                sd_cosine: field(&row, 5, "sd_cosine")?,
            };
            Ok((row[0].clone(), field(&row, 1, "sample_fraction")?, pair))
        })
        .collect()
}

/// Patient indices of a seeded subsample, in corpus order.
pub fn subsample_indices(n: usize, fraction: f64, seed: u64) -> Vec<usize> {
    let k = ((fraction * n as f64).round() as usize).min(n);
    let mut idx = rng::permutation(&mut rng::derive(seed, "reliability-subsample"), n);
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Mean and sample standard deviation (Welford); identical inputs give
/// exactly zero.
pub fn mean_sd(values: impl IntoIterator<Item = f64>) -> (f64, f64, usize) {
    let (mut n, mut mean, mut m2) = (0usize, 0.0, 0.0);
    for x in values {
        n += 1;
        let delta = x - mean;
        mean += delta / n as f64;
        m2 += delta * (x - mean);
    }
    let sd = if n > 1 { (m2 / (n - 1) as f64).max(0.0).sqrt() } else { 0.0 };
    (mean, sd, n)
}

/// Unit rows indexed by code, for repeated cosine lookups.
struct UnitVectors<'a> {
    e: &'a EmbeddingSet,
    norms: Vec<f64>,
}

impl<'a> UnitVectors<'a> {
    fn new(e: &'a EmbeddingSet) -> Result<Self, EvalError> {
        let norms: Vec<f64> = (0..e.len()).map(|i| norm(e.vectors().row(i))).collect();
        if let Some(i) = norms.iter().position(|&n| n == 0.0) {
            return Err(EvalError::InvalidArgument(format!("zero vector for code {:?}", e.vocabulary().code(i))));
        }
        Ok(UnitVectors { e, norms })
    }

    fn cosine(&self, a: &str, b: &str) -> f64 {
        let (i, j) = (self.e.vocabulary().index_of(a).expect("in vocab"), self.e.vocabulary().index_of(b).expect("in vocab"));
        (dot(self.e.vectors().row(i), self.e.vectors().row(j)) / (self.norms[i] * self.norms[j])).clamp(-1.0, 1.0)
    }
}

fn run_seed(cfg: &VariabilityConfig, r: usize) -> u64 {
    if cfg.pin_seed {
        cfg.base_seed
    } else {
        cfg.base_seed + r as u64
    }
}

/// Trains every run and returns the embeddings in run order.
fn train_runs(trainer: &dyn Trainer, corpus: &Corpus, cfg: &VariabilityConfig) -> Result<Vec<EmbeddingSet>, EvalError> {
    (0..cfg.n_runs)
        .into_par_iter()
        .map(|r| {
            let seed = run_seed(cfg, r);
            let idx = subsample_indices(corpus.len(), cfg.sample_fraction, seed);
            if idx.is_empty() {
                return Err(EvalError::EmptySubsample(format!(
                    "fraction {} of {} patients",
                    cfg.sample_fraction,
                    corpus.len()
                )));
            }
            let sub = corpus.select_patients(&idx);
            trainer.train(&sub, seed).map(|o| o.embeddings).map_err(|e| EvalError::Run { run: r, source: Box::new(e.into()) })
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

/// Cosine variability across `cfg.n_runs` runs, over `probe` pairs or, if
/// none are given, every pair of codes present in all runs.
pub fn run_variability(trainer: &dyn Trainer, corpus: &Corpus, probe: Option<&PairList>, cfg: &VariabilityConfig) -> Result<ReliabilityReport, EvalError> {
    if cfg.n_runs == 0 {
        return Err(EvalError::InvalidArgument("n_runs must be at least 1".into()));
    }
    if !(cfg.sample_fraction > 0.0 && cfg.sample_fraction <= 1.0) {
        return Err(EvalError::InvalidArgument(format!("sample fraction {} outside (0, 1]", cfg.sample_fraction)));
    }
    if cfg.n_runs == 1 {
        log::warn!("a single run has no defined standard deviation; reporting 0");
    }
    let runs = train_runs(trainer, corpus, cfg)?;
    let units = runs.iter().map(UnitVectors::new).collect::<Result<Vec<_>, _>>()?;

    let mut common: BTreeSet<&str> = runs[0].vocabulary().codes().iter().map(String::as_str).collect();
    for e in &runs[1..] {
        common.retain(|c| e.vocabulary().contains(c));
    }
    let (pairs, excluded) = match probe {
        Some(list) => {
            let kept: Vec<(String, String)> = list
                .pairs()
                .iter()
                .filter(|p| common.contains(p.a.as_str()) && common.contains(p.b.as_str()))
                .map(|p| (p.a.clone(), p.b.clone()))
                .collect();
            let excluded = list.len() - kept.len();
            (kept, excluded)
        }
        None => {
            let codes: Vec<&str> = common.iter().copied().collect();
            let mut all: Vec<(String, String)> = Vec::new();
            for (i, a) in codes.iter().enumerate() {
                for b in &codes[i + 1..] {
                    all.push((a.to_string(), b.to_string()));
                }
            }
            if let Some(max) = cfg.max_pairs.filter(|&m| m < all.len()) {
                let mut keep = rng::permutation(&mut rng::derive(cfg.base_seed, "reliability-pairs"), all.len());
                keep.truncate(max);
                keep.sort_unstable();
                all = keep.into_iter().map(|i| all[i].clone()).collect();
            }
            (all, 0)
        }
    };
    if pairs.is_empty() {
        return Err(EvalError::EmptyIntersection);
    }
    let rows: Vec<PairVariability> = pairs
        .par_iter()
        .map(|(a, b)| {
            let (mean, sd, _) = mean_sd(units.iter().map(|u| u.cosine(a, b)));
            PairVariability { code_a: a.clone(), code_b: b.clone(), mean_cosine: mean, sd_cosine: sd }
        })
        .collect();
    let sigma = rows.iter().map(|p| p.sd_cosine).sum::<f64>() / rows.len() as f64;
    Ok(ReliabilityReport {
        method: trainer.method().name().to_string(),
        sample_fraction: cfg.sample_fraction,
        n_runs: cfg.n_runs,
        pairs: rows,
        sigma,
        excluded_pairs: excluded,
    })
}

/// [`run_variability`] over all code pairs at each sample fraction.
pub fn sample_size_sweep(trainer: &dyn Trainer, corpus: &Corpus, fractions: &[f64], cfg: &VariabilityConfig) -> Result<Vec<ReliabilityReport>, EvalError> {
    fractions
        .iter()
        .map(|&f| run_variability(trainer, corpus, None, &VariabilityConfig { sample_fraction: f, ..cfg.clone() }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{read_corpus, ConceptVocabulary, LoadOptions};
    use crate::embedding::{EmbeddingMeta, Method};
    use crate::eval::pairs::{Pair, Relation};
    use crate::linalg::Matrix;
    use crate::train::{TrainError, TrainOutput};

    /// Returns embeddings where cos(A, B) is `cosines[seed % len]`.
    struct Planted {
        cosines: Vec<f64>,
    }

    impl Trainer for Planted {
        fn method(&self) -> Method {
            Method::Random
        }

        fn train(&self, corpus: &Corpus, seed: u64) -> Result<TrainOutput, TrainError> {
            let c = self.cosines[seed as usize % self.cosines.len()];
            let vocab = ConceptVocabulary::from_codes(["A", "B", "C"]).unwrap();
            let m = Matrix::from_rows(&[vec![1.0, 0.0], vec![c, (1.0 - c * c).sqrt()], vec![0.0, 1.0]]);
            let meta = EmbeddingMeta { method: Method::Random, seed, corpus_fingerprint: corpus.fingerprint() };
            Ok(TrainOutput { embeddings: EmbeddingSet::new(vocab, m, meta)?, demographics: None, epoch_losses: vec![] })
        }
    }

    fn tiny_corpus(n: usize) -> Corpus {
        let lines: Vec<String> = (0..n)
            .map(|i| format!(r#"{{"id":"p{i}","sex":0,"region":0,"birth_year":1950,"visits":[{{"d":0,"codes":["A"]}}]}}"#))
            .collect();
        read_corpus(lines.join("\n").as_bytes(), LoadOptions { min_visits: 1 }).unwrap()
    }

    fn ab() -> PairList {
        PairList::from_pairs([Pair::new("A", "B", "probe", Relation::Comorbid).unwrap()]).0
    }

    #[test]
    fn hand_planted_cosines() {
        let t = Planted { cosines: vec![0.4, 0.6] };
        let cfg = VariabilityConfig { n_runs: 2, sample_fraction: 1.0, ..Default::default() };
        let rep = run_variability(&t, &tiny_corpus(5), Some(&ab()), &cfg).unwrap();
        let p = &rep.pairs[0];
        assert!((p.mean_cosine - 0.5).abs() < 1e-12);
        assert!((p.sd_cosine - 0.02f64.sqrt()).abs() < 1e-12);
        assert_eq!(rep.sigma, p.sd_cosine);
        assert!((rep.sigma - 0.1414).abs() < 1e-4);

        let summary = format!("{RELIABILITY_HEADER}\n{}\n", rep.summary_row());
        let row = &read_reliability_rows(summary.as_bytes()).unwrap()[0];
        assert_eq!((row.n_runs, row.n_pairs, row.sigma), (2, 1, rep.sigma));
        let mut detail = format!("{PAIR_DETAIL_HEADER}\n").into_bytes();
        rep.write_detail(&mut detail).unwrap();
        assert_eq!(read_detail_rows(detail.as_slice()).unwrap()[0].2, *p);
    }

    #[test]
    fn single_run_and_pinned_seed_give_zero() {
        let t = Planted { cosines: vec![0.1, 0.5, 0.9] };
        let c = tiny_corpus(5);
        let one = run_variability(&t, &c, None, &VariabilityConfig { n_runs: 1, ..Default::default() }).unwrap();
        assert!(one.pairs.iter().all(|p| p.sd_cosine == 0.0));
        let pinned = VariabilityConfig { n_runs: 4, pin_seed: true, ..Default::default() };
        let rep = run_variability(&t, &c, None, &pinned).unwrap();
        assert_eq!(rep.sigma, 0.0);
        assert_eq!(rep.n_pairs(), 3);
    }

    #[test]
    fn fixed_trainer_has_zero_sigma_at_every_fraction() {
        let t = Planted { cosines: vec![0.3] };
        let reps = sample_size_sweep(&t, &tiny_corpus(10), &DEFAULT_FRACTIONS, &VariabilityConfig { n_runs: 3, ..Default::default() }).unwrap();
        assert_eq!(reps.len(), 5);
        assert!(reps.iter().all(|r| r.sigma == 0.0));
        let full = run_variability(&t, &tiny_corpus(10), None, &VariabilityConfig { n_runs: 3, sample_fraction: 1.0, ..Default::default() }).unwrap();
        assert_eq!(reps[4], full);
    }

    #[test]
    fn welford_matches_two_pass() {
        let xs = [0.3, -1.2, 4.5, 2.25, 0.0, 7.0];
        let (m, sd, n) = mean_sd(xs);
        let mean = xs.iter().sum::<f64>() / 6.0;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 5.0;
        assert_eq!(n, 6);
        assert!((m - mean).abs() < 1e-12);
        assert!((sd - var.sqrt()).abs() < 1e-12);
        assert_eq!(mean_sd([0.7; 10]).1, 0.0);
    }

    #[test]
    fn subsamples_are_sorted_and_sized() {
        let s = subsample_indices(100, 0.2, 3);
        assert_eq!(s.len(), 20);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(subsample_indices(100, 1.0, 3), (0..100).collect::<Vec<_>>());
        assert_ne!(subsample_indices(100, 0.2, 4), s);
    }

    #[test]
    fn empty_subsample_and_missing_probe_codes() {
        let t = Planted { cosines: vec![0.5] };
        let cfg = VariabilityConfig { n_runs: 2, sample_fraction: 0.01, ..Default::default() };
        assert!(matches!(run_variability(&t, &tiny_corpus(5), None, &cfg), Err(EvalError::EmptySubsample(_))));
        let probe = PairList::from_pairs([
            Pair::new("A", "B", "p", Relation::Comorbid).unwrap(),
            Pair::new("A", "Z", "p", Relation::Comorbid).unwrap(),
        ])
        .0;
        let rep = run_variability(&t, &tiny_corpus(5), Some(&probe), &VariabilityConfig { n_runs: 2, ..Default::default() }).unwrap();
        assert_eq!((rep.n_pairs(), rep.excluded_pairs), (1, 1));
    }

    #[test]
    fn pair_sampling_is_seeded() {
        let t = Planted { cosines: vec![0.5, 0.2] };
        let cfg = VariabilityConfig { n_runs: 2, max_pairs: Some(2), ..Default::default() };
        let a = run_variability(&t, &tiny_corpus(5), None, &cfg).unwrap();
        assert_eq!(a.n_pairs(), 2);
        assert_eq!(a, run_variability(&t, &tiny_corpus(5), None, &cfg).unwrap());
    }
}
