//! Continuous bag-of-words with negative sampling over flattened patient
//! code sequences.
//!
//! For each target position a window size `b` is drawn from `[1, window]`;
//! the context vector is the mean of the input vectors within `b` positions
//! on either side. The target is scored against the context with a logistic
//! loss, alongside `negatives` noise codes drawn from the smoothed unigram
//! table. Input vectors start small and uniform, output vectors at zero, and
//! the learning rate decays linearly to `min_lr` over training.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::sampling::UnigramTable;
use super::{check_finite, TrainError, TrainOutput};
use crate::corpus::{ConceptVocabulary, Corpus};
use crate::embedding::{EmbeddingMeta, EmbeddingSet, Method};
use crate::linalg::{axpy, dot, log_sigmoid, sigmoid, Matrix};
use crate::nn::ParamSet;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CbowConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub epochs: usize,
    pub min_count: u64,
    /// Frequent-code downsampling threshold; 0 disables it.
    pub subsample_threshold: f64,
    pub unigram_power: f64,
    pub seed: u64,
}

impl Default for CbowConfig {
    fn default() -> Self {
        CbowConfig {
            dim: 110,
            window: 5,
            negatives: 5,
            lr: 0.025,
            min_lr: 1e-4,
            epochs: 5,
            min_count: 1,
            subsample_threshold: 0.0,
            unigram_power: 0.75,
            seed: 0,
        }
    }
}

/// One code sequence per patient: visits in order, codes within a visit in
/// lexicographic order.
pub fn flatten_sequences(corpus: &Corpus) -> Vec<Vec<usize>> {
    corpus
        .patients()
        .iter()
        .map(|p| {
            p.visits
                .iter()
                .flat_map(|v| {
                    let mut c = v.codes.clone();
                    // vocabulary indices are in code order
                    c.sort_unstable();
                    c
                })
                .collect()
        })
        .collect()
}

/// `sum_j weights[j] * table[rows[j]]`, accumulated in row order.
pub(crate) fn weighted_sum(table: &Matrix, rows: &[usize], weights: &[f64]) -> Vec<f64> {
    let mut h = vec![0.0; table.cols()];
    for (&r, &w) in rows.iter().zip(weights) {
        axpy(w, table.row(r), &mut h);
    }
    h
}

/// Input (context) and output (target) vector tables.
#[derive(Debug, Clone, PartialEq)]
pub struct CbowModel {
    pub input: Matrix,
    pub output: Matrix,
}

impl ParamSet for CbowModel {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![self.input.as_slice(), self.output.as_slice()]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.input.as_mut_slice(), self.output.as_mut_slice()]
    }
}

/// Negative-sampling loss of `target` against context vector `h`, with
/// `dL/dh` accumulated into `dh` and per-output-row gradient coefficients
/// `(row, dL/d(u_row . h))` returned.
pub(crate) fn ns_loss(output: &Matrix, h: &[f64], target: usize, negatives: &[usize], dh: Option<&mut [f64]>) -> (f64, Vec<(usize, f64)>) {
    let mut loss = 0.0;
    let mut coeffs = Vec::with_capacity(1 + negatives.len());
    for (row, label) in std::iter::once((target, true)).chain(negatives.iter().map(|&n| (n, false))) {
        let s = dot(output.row(row), h);
        if label {
            loss -= log_sigmoid(s);
            coeffs.push((row, sigmoid(s) - 1.0));
        } else {
            loss -= log_sigmoid(-s);
            coeffs.push((row, sigmoid(s)));
        }
    }
    if let Some(dh) = dh {
        for &(row, g) in &coeffs {
            axpy(g, output.row(row), dh);
        }
    }
    (loss, coeffs)
}

impl CbowModel {
    pub fn new(rng: &mut impl Rng, vocab: usize, dim: usize) -> Self {
        let mut input = Matrix::zeros(vocab, dim);
        rng::fill_uniform(rng, input.as_mut_slice(), 0.5 / dim as f64);
        CbowModel { input, output: Matrix::zeros(vocab, dim) }
    }

    /// Mean of the context input vectors.
    pub fn context_vector(&self, context: &[usize]) -> Vec<f64> {
        let w = 1.0 / context.len() as f64;
        weighted_sum(&self.input, context, &vec![w; context.len()])
    }

    pub fn loss(&self, target: usize, context: &[usize], negatives: &[usize]) -> f64 {
        ns_loss(&self.output, &self.context_vector(context), target, negatives, None).0
    }

    /// Loss and dense gradient for one (target, context, negatives) example.
    pub fn gradient(&self, target: usize, context: &[usize], negatives: &[usize]) -> (f64, CbowModel) {
        let h = self.context_vector(context);
        let mut dh = vec![0.0; h.len()];
        let (loss, coeffs) = ns_loss(&self.output, &h, target, negatives, Some(&mut dh));
        let mut grad = self.zeroed();
        for (row, g) in coeffs {
            axpy(g, &h, grad.output.row_mut(row));
        }
        let w = 1.0 / context.len() as f64;
        for &c in context {
            axpy(w, &dh, grad.input.row_mut(c));
        }
        (loss, grad)
    }

    /// In-place SGD on the rows one example touches.
    fn sgd_step(&mut self, target: usize, context: &[usize], negatives: &[usize], lr: f64) -> f64 {
        let h = self.context_vector(context);
        let mut dh = vec![0.0; h.len()];
        let (loss, coeffs) = ns_loss(&self.output, &h, target, negatives, Some(&mut dh));
        for (row, g) in coeffs {
            axpy(-lr * g, &h, self.output.row_mut(row));
        }
        let w = lr / context.len() as f64;
        for &c in context {
            axpy(-w, &dh, self.input.row_mut(c));
        }
        loss
    }
}

/// Sequences remapped onto the codes kept by `min_count`, and the kept
/// codes' counts.
struct Prepared {
    vocabulary: ConceptVocabulary,
    sequences: Vec<Vec<usize>>,
    counts: Vec<u64>,
}

fn prepare(sequences: &[Vec<usize>], vocab: &ConceptVocabulary, min_count: u64) -> Result<Prepared, TrainError> {
    let mut counts = vec![0u64; vocab.len()];
    for s in sequences {
        for &c in s {
            counts[c] += 1;
        }
    }
    let kept: Vec<usize> = (0..vocab.len()).filter(|&i| counts[i] >= min_count.max(1)).collect();
    if kept.is_empty() {
        return Err(TrainError::EmptyInput(Method::Cbow));
    }
    let mut remap = vec![usize::MAX; vocab.len()];
    for (new, &old) in kept.iter().enumerate() {
        remap[old] = new;
    }
    let sequences = sequences
        .iter()
        .map(|s| s.iter().filter(|&&c| remap[c] != usize::MAX).map(|&c| remap[c]).collect())
        .collect();
    let vocabulary = ConceptVocabulary::from_codes(kept.iter().map(|&i| vocab.code(i).to_string())).expect("valid codes");
    Ok(Prepared { vocabulary, sequences, counts: kept.iter().map(|&i| counts[i]).collect() })
}

/// Context positions for `t` within reduced window `b`.
pub fn window_context(seq: &[usize], t: usize, b: usize, out: &mut Vec<usize>) {
    out.clear();
    let lo = t.saturating_sub(b);
    let hi = (t + b).min(seq.len() - 1);
    for j in lo..=hi {
        if j != t {
            out.push(seq[j]);
        }
    }
}

/// Keep-probability per code for frequent-code downsampling.
fn keep_probabilities(counts: &[u64], threshold: f64) -> Option<Vec<f64>> {
    if threshold <= 0.0 {
        return None;
    }
    let total: u64 = counts.iter().sum();
    let t = threshold * total as f64;
    Some(counts.iter().map(|&c| ((c as f64 / t).sqrt() + 1.0) * t / c as f64).collect())
}

pub struct CbowFit {
    pub model: CbowModel,
    pub vocabulary: ConceptVocabulary,
    pub epoch_losses: Vec<f64>,
}

/// Trains on code sequences over `vocab`.
pub fn fit_cbow(sequences: &[Vec<usize>], vocab: &ConceptVocabulary, cfg: &CbowConfig) -> Result<CbowFit, TrainError> {
    if cfg.dim == 0 || cfg.window == 0 || !(cfg.lr > 0.0) {
        return Err(TrainError::InvalidConfig(format!("CBOW: {cfg:?}")));
    }
    if sequences.iter().all(Vec::is_empty) {
        return Err(TrainError::EmptyInput(Method::Cbow));
    }
    let prep = prepare(sequences, vocab, cfg.min_count)?;
    let table = UnigramTable::new(&prep.counts, cfg.unigram_power);
    let keep = keep_probabilities(&prep.counts, cfg.subsample_threshold);
    let mut model = CbowModel::new(&mut rng::derive(cfg.seed, "cbow-init"), prep.vocabulary.len(), cfg.dim);
    let mut rng = rng::derive(cfg.seed, "cbow-train");

    let total_tokens: usize = prep.sequences.iter().map(Vec::len).sum();
    let total_work = (total_tokens * cfg.epochs).max(1) as f64;
    let mut processed = 0usize;
    let (mut context, mut negatives, mut kept) = (Vec::new(), Vec::new(), Vec::new());
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (mut total, mut n) = (0.0, 0usize);
        for seq in &prep.sequences {
            let lr = cfg.lr - (cfg.lr - cfg.min_lr) * (processed as f64 / total_work);
            processed += seq.len();
            kept.clear();
            match &keep {
                Some(k) => kept.extend(seq.iter().copied().filter(|&c| rng.random::<f64>() < k[c])),
                None => kept.extend_from_slice(seq),
            }
            if kept.len() < 2 {
                continue;
            }
            for t in 0..kept.len() {
                let b = rng.random_range(1..=cfg.window);
                window_context(&kept, t, b, &mut context);
                table.negatives(&mut rng, cfg.negatives, kept[t], &mut negatives);
                let loss = model.sgd_step(kept[t], &context, &negatives, lr);
                check_finite(loss, Method::Cbow, epoch, n)?;
                total += loss;
                n += 1;
            }
        }
        losses.push(if n > 0 { total / n as f64 } else { 0.0 });
    }
    Ok(CbowFit { model, vocabulary: prep.vocabulary, epoch_losses: losses })
}

/// Mean loss over every position with the full window and seeded
/// negatives; no updates.
pub fn evaluate_loss(model: &CbowModel, sequences: &[Vec<usize>], counts: &[u64], cfg: &CbowConfig, seed: u64) -> f64 {
    let table = UnigramTable::new(counts, cfg.unigram_power);
    let mut rng = rng::derive(seed, "cbow-eval");
    let (mut context, mut negatives) = (Vec::new(), Vec::new());
    let (mut total, mut n) = (0.0, 0usize);
    for seq in sequences.iter().filter(|s| s.len() >= 2) {
        for t in 0..seq.len() {
            window_context(seq, t, cfg.window, &mut context);
            table.negatives(&mut rng, cfg.negatives, seq[t], &mut negatives);
            total += model.loss(seq[t], &context, &negatives);
            n += 1;
        }
    }
    total / n.max(1) as f64
}

pub fn train_cbow(corpus: &Corpus, cfg: &CbowConfig) -> Result<TrainOutput, TrainError> {
    let fit = fit_cbow(&flatten_sequences(corpus), corpus.vocabulary(), cfg)?;
    let meta = EmbeddingMeta { method: Method::Cbow, seed: cfg.seed, corpus_fingerprint: corpus.fingerprint() };
    Ok(TrainOutput {
        embeddings: EmbeddingSet::new(fit.vocabulary, fit.model.input, meta)?,
        demographics: None,
        epoch_losses: fit.epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{read_corpus, LoadOptions};
    use crate::nn::gradcheck;

    #[test]
    fn flattening_orders_within_visit() {
        let a = r#"{"id":"a","sex":0,"region":1,"birth_year":1950,"visits":[{"d":0,"codes":["I10","E78"]},{"d":5,"codes":["M79"]}]}"#;
        let b = r#"{"id":"a","sex":0,"region":1,"birth_year":1950,"visits":[{"d":0,"codes":["E78","I10"]},{"d":5,"codes":["M79"]}]}"#;
        let opts = LoadOptions { min_visits: 1 };
        let ca = read_corpus(a.as_bytes(), opts).unwrap();
        let cb = read_corpus(b.as_bytes(), opts).unwrap();
        let sa = flatten_sequences(&ca);
        let names: Vec<&str> = sa[0].iter().map(|&i| ca.vocabulary().code(i)).collect();
        assert_eq!(names, ["E78", "I10", "M79"]);
        assert_eq!(sa, flatten_sequences(&cb));

        let single = r#"{"id":"s","sex":0,"region":1,"birth_year":1950,"visits":[{"d":0,"codes":["I10"]}]}"#;
        assert_eq!(flatten_sequences(&read_corpus(single.as_bytes(), opts).unwrap())[0].len(), 1);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = rng::seeded(17);
        let mut model = CbowModel::new(&mut r, 5, 4);
        // non-zero outputs so every term is exercised
        rng::fill_uniform(&mut r, model.output.as_mut_slice(), 0.5);
        rng::fill_uniform(&mut r, model.input.as_mut_slice(), 0.5);
        let (target, context, negatives) = (2, vec![0, 3, 3, 4], vec![1, 4, 0]);
        let (_, grad) = model.gradient(target, &context, &negatives);
        let rep = gradcheck::check(&model, &grad, gradcheck::DEFAULT_STEP, |m| m.loss(target, &context, &negatives));
        assert!(rep.max_relative_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn window_truncates_at_boundaries() {
        let seq = vec![7, 8, 9];
        let mut ctx = Vec::new();
        window_context(&seq, 0, 10, &mut ctx);
        assert_eq!(ctx, vec![8, 9]);
        window_context(&seq, 2, 1, &mut ctx);
        assert_eq!(ctx, vec![8]);
    }

    #[test]
    fn repeated_pair_loss_drops_after_one_epoch() {
        let vocab = ConceptVocabulary::from_codes(["A", "B"]).unwrap();
        let seqs: Vec<Vec<usize>> = vec![vec![0, 1]; 1000];
        let cfg = CbowConfig { dim: 10, epochs: 1, seed: 5, ..Default::default() };
        let before = CbowModel::new(&mut rng::derive(5, "cbow-init"), 2, 10);
        let fit = fit_cbow(&seqs, &vocab, &cfg).unwrap();
        let counts = [1000, 1000];
        let l0 = evaluate_loss(&before, &seqs, &counts, &cfg, 1);
        let l1 = evaluate_loss(&fit.model, &seqs, &counts, &cfg, 1);
        assert!(l1 < l0, "{l1} !< {l0}");
    }

    #[test]
    fn min_count_drops_rare_codes() {
        let vocab = ConceptVocabulary::from_codes(["A", "B", "C"]).unwrap();
        let seqs = vec![vec![0, 1, 0, 1], vec![0, 2]];
        let cfg = CbowConfig { dim: 3, epochs: 1, min_count: 2, ..Default::default() };
        let fit = fit_cbow(&seqs, &vocab, &cfg).unwrap();
        assert_eq!(fit.vocabulary.codes(), &["A", "B"]);
    }

    #[test]
    fn empty_input_rejected() {
        let vocab = ConceptVocabulary::from_codes(["A"]).unwrap();
        assert!(matches!(fit_cbow(&[vec![]], &vocab, &CbowConfig::default()), Err(TrainError::EmptyInput(_))));
    }

    #[test]
    fn subsampling_keeps_rare_codes() {
        let keep = keep_probabilities(&[1, 1_000_000], 1e-3).unwrap();
        assert!(keep[0] > 1.0);
        assert!(keep[1] < 0.1);
    }
}
