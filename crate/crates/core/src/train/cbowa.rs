//! CBOW with a learned, time-aware context window.
//!
//! Each patient is a sequence of time-stamped events. The context of a
//! target event is every other event of the same patient whose day gap to the
//! target is within the largest time-bucket boundary. Context event `j` gets
//! the score `a[code_j] + b[bucket(gap_j)]`; the softmax of the scores weights
//! the context input vectors. With `a = b = 0` the weights are uniform and the
//! context is exactly the CBOW mean.

use serde::{Deserialize, Serialize};

use super::cbow::{ns_loss, weighted_sum};
use super::sampling::UnigramTable;
use super::{check_finite, TrainError, TrainOutput};
use crate::corpus::Corpus;
use crate::embedding::{EmbeddingMeta, EmbeddingSet, Method};
use crate::linalg::{axpy, dot, softmax_in_place, Matrix};
use crate::nn::ParamSet;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CbowaConfig {
    pub dim: usize,
    pub lr: f64,
    pub negatives: usize,
    pub epochs: usize,
    /// Increasing day-gap boundaries; gap `g` falls in the first bucket
    /// whose boundary is `>= g`.
    pub time_buckets: Vec<u32>,
    pub unigram_power: f64,
    pub seed: u64,
}

impl Default for CbowaConfig {
    fn default() -> Self {
        CbowaConfig {
            dim: 100,
            lr: 0.01,
            negatives: 5,
            epochs: 10,
            time_buckets: vec![7, 30, 90, 365],
            unigram_power: 0.75,
            seed: 0,
        }
    }
}

impl CbowaConfig {
    fn validate(&self) -> Result<(), TrainError> {
        let increasing = self.time_buckets.windows(2).all(|w| w[0] < w[1]);
        if self.dim == 0 || self.time_buckets.is_empty() || !increasing || !(self.lr > 0.0) {
            return Err(TrainError::InvalidConfig(format!("CBOWA: {self:?}")));
        }
        Ok(())
    }
}

/// A coded event: code index and day offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub code: usize,
    pub day: u32,
}

/// Time-stamped event sequences, one per patient, in visit order with codes
/// sorted within each visit.
pub fn event_sequences(corpus: &Corpus) -> Vec<Vec<Event>> {
    corpus
        .patients()
        .iter()
        .map(|p| {
            p.visits
                .iter()
                .flat_map(|v| {
                    let mut c = v.codes.clone();
                    c.sort_unstable();
                    c.into_iter().map(move |code| Event { code, day: v.date_offset_days })
                })
                .collect()
        })
        .collect()
}

pub fn bucket_of(boundaries: &[u32], gap: u32) -> Option<usize> {
    let b = boundaries.partition_point(|&x| x < gap);
    (b < boundaries.len()).then_some(b)
}

/// Context codes and their time buckets for event `t`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Context {
    pub codes: Vec<usize>,
    pub buckets: Vec<usize>,
}

pub fn context_of(events: &[Event], t: usize, boundaries: &[u32], out: &mut Context) {
    out.codes.clear();
    out.buckets.clear();
    let day = events[t].day;
    for (j, e) in events.iter().enumerate() {
        if j == t {
            continue;
        }
        if let Some(b) = bucket_of(boundaries, e.day.abs_diff(day)) {
            out.codes.push(e.code);
            out.buckets.push(b);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CbowaModel {
    pub input: Matrix,
    pub output: Matrix,
    /// Per-code attention score.
    pub code_score: Vec<f64>,
    /// Per-time-bucket attention score.
    pub bucket_score: Vec<f64>,
}

impl ParamSet for CbowaModel {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![self.input.as_slice(), self.output.as_slice(), &self.code_score, &self.bucket_score]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.input.as_mut_slice(), self.output.as_mut_slice(), &mut self.code_score, &mut self.bucket_score]
    }
}

impl CbowaModel {
    pub fn new(rng: &mut impl rand::Rng, vocab: usize, dim: usize, n_buckets: usize) -> Self {
        let mut input = Matrix::zeros(vocab, dim);
        rng::fill_uniform(rng, input.as_mut_slice(), 0.5 / dim as f64);
        CbowaModel { input, output: Matrix::zeros(vocab, dim), code_score: vec![0.0; vocab], bucket_score: vec![0.0; n_buckets] }
    }

    /// Softmax attention weights over the context.
    pub fn attention(&self, ctx: &Context) -> Vec<f64> {
        let mut s: Vec<f64> =
            ctx.codes.iter().zip(&ctx.buckets).map(|(&c, &b)| self.code_score[c] + self.bucket_score[b]).collect();
        softmax_in_place(&mut s);
        s
    }

    pub fn context_vector(&self, ctx: &Context) -> Vec<f64> {
        weighted_sum(&self.input, &ctx.codes, &self.attention(ctx))
    }

    pub fn loss(&self, target: usize, ctx: &Context, negatives: &[usize]) -> f64 {
        ns_loss(&self.output, &self.context_vector(ctx), target, negatives, None).0
    }

    /// Loss and the sparse pieces of the gradient: output-row coefficients
    /// against `h`, `dL/dh`, attention weights and score gradients.
    fn backward(&self, target: usize, ctx: &Context, negatives: &[usize]) -> (f64, Vec<f64>, Vec<(usize, f64)>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let alpha = self.attention(ctx);
        let h = weighted_sum(&self.input, &ctx.codes, &alpha);
        let mut dh = vec![0.0; h.len()];
        let (loss, coeffs) = ns_loss(&self.output, &h, target, negatives, Some(&mut dh));
        let dalpha: Vec<f64> = ctx.codes.iter().map(|&c| dot(self.input.row(c), &dh)).collect();
        let mean: f64 = alpha.iter().zip(&dalpha).map(|(a, d)| a * d).sum();
        let ds = alpha.iter().zip(&dalpha).map(|(a, d)| a * (d - mean)).collect();
        (loss, h, coeffs, dh, alpha, ds)
    }

    pub fn gradient(&self, target: usize, ctx: &Context, negatives: &[usize]) -> (f64, CbowaModel) {
        let (loss, h, coeffs, dh, alpha, ds) = self.backward(target, ctx, negatives);
        let mut g = self.zeroed();
        for (row, c) in coeffs {
            axpy(c, &h, g.output.row_mut(row));
        }
        for (j, (&code, &bucket)) in ctx.codes.iter().zip(&ctx.buckets).enumerate() {
            axpy(alpha[j], &dh, g.input.row_mut(code));
            g.code_score[code] += ds[j];
            g.bucket_score[bucket] += ds[j];
        }
        (loss, g)
    }

    fn sgd_step(&mut self, target: usize, ctx: &Context, negatives: &[usize], lr: f64) -> f64 {
        let (loss, h, coeffs, dh, alpha, ds) = self.backward(target, ctx, negatives);
        for (row, c) in coeffs {
            axpy(-lr * c, &h, self.output.row_mut(row));
        }
        for (j, (&code, &bucket)) in ctx.codes.iter().zip(&ctx.buckets).enumerate() {
            axpy(-lr * alpha[j], &dh, self.input.row_mut(code));
            self.code_score[code] -= lr * ds[j];
            self.bucket_score[bucket] -= lr * ds[j];
        }
        loss
    }
}

pub fn fit_cbowa(events: &[Vec<Event>], vocab_len: usize, cfg: &CbowaConfig) -> Result<(CbowaModel, Vec<f64>), TrainError> {
    cfg.validate()?;
    if !events.iter().any(|e| e.len() >= 2) {
        return Err(TrainError::EmptyInput(Method::Cbowa));
    }
    let mut counts = vec![0u64; vocab_len];
    for e in events.iter().flatten() {
        counts[e.code] += 1;
    }
    let table = UnigramTable::new(&counts, cfg.unigram_power);
    let mut model = CbowaModel::new(&mut rng::derive(cfg.seed, "cbowa-init"), vocab_len, cfg.dim, cfg.time_buckets.len());
    let mut rng = rng::derive(cfg.seed, "cbowa-train");
    let (mut ctx, mut negatives) = (Context::default(), Vec::new());
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (mut total, mut n) = (0.0, 0usize);
        for seq in events {
            for t in 0..seq.len() {
                context_of(seq, t, &cfg.time_buckets, &mut ctx);
                if ctx.codes.is_empty() {
                    continue;
                }
                table.negatives(&mut rng, cfg.negatives, seq[t].code, &mut negatives);
                let loss = model.sgd_step(seq[t].code, &ctx, &negatives, cfg.lr);
                check_finite(loss, Method::Cbowa, epoch, n)?;
                total += loss;
                n += 1;
            }
        }
        losses.push(if n > 0 { total / n as f64 } else { 0.0 });
    }
    Ok((model, losses))
}

pub fn train_cbowa(corpus: &Corpus, cfg: &CbowaConfig) -> Result<TrainOutput, TrainError> {
    let (model, epoch_losses) = fit_cbowa(&event_sequences(corpus), corpus.vocabulary().len(), cfg)?;
    let meta = EmbeddingMeta { method: Method::Cbowa, seed: cfg.seed, corpus_fingerprint: corpus.fingerprint() };
    Ok(TrainOutput {
        embeddings: EmbeddingSet::new(corpus.vocabulary().clone(), model.input, meta)?,
        demographics: None,
        epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck;
    use crate::train::cbow::CbowModel;

    fn ev(pairs: &[(usize, u32)]) -> Vec<Event> {
        pairs.iter().map(|&(code, day)| Event { code, day }).collect()
    }

    #[test]
    fn buckets_and_window() {
        let b = [7, 30, 90, 365];
        assert_eq!(bucket_of(&b, 0), Some(0));
        assert_eq!(bucket_of(&b, 7), Some(0));
        assert_eq!(bucket_of(&b, 8), Some(1));
        assert_eq!(bucket_of(&b, 365), Some(3));
        assert_eq!(bucket_of(&b, 366), None);
        let seq = ev(&[(0, 0), (1, 0), (2, 20), (3, 400)]);
        let mut ctx = Context::default();
        context_of(&seq, 1, &b, &mut ctx);
        assert_eq!(ctx.codes, vec![0, 2]);
        assert_eq!(ctx.buckets, vec![0, 1]);
        context_of(&seq, 2, &b, &mut ctx);
        assert_eq!(ctx.codes, vec![0, 1]);
        assert_eq!(ctx.buckets, vec![1, 1]);
        context_of(&seq, 3, &b, &mut ctx);
        assert!(ctx.codes.is_empty());
    }

    #[test]
    fn attention_is_normalised() {
        let mut r = rng::seeded(3);
        let mut m = CbowaModel::new(&mut r, 5, 4, 4);
        rng::fill_uniform(&mut r, &mut m.code_score, 3.0);
        rng::fill_uniform(&mut r, &mut m.bucket_score, 3.0);
        let ctx = Context { codes: vec![0, 1, 1, 4, 2], buckets: vec![0, 3, 2, 1, 0] };
        let a = m.attention(&ctx);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_scores_reproduce_cbow_context() {
        let m = CbowaModel::new(&mut rng::seeded(9), 6, 5, 4);
        let cbow = CbowModel { input: m.input.clone(), output: m.output.clone() };
        for codes in [vec![0], vec![1, 2, 3], vec![5, 5, 0, 4, 2, 1, 3]] {
            let ctx = Context { buckets: vec![0; codes.len()], codes };
            assert_eq!(m.context_vector(&ctx), cbow.context_vector(&ctx.codes));
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = rng::seeded(21);
        let mut m = CbowaModel::new(&mut r, 5, 4, 2);
        rng::fill_uniform(&mut r, m.input.as_mut_slice(), 0.5);
        rng::fill_uniform(&mut r, m.output.as_mut_slice(), 0.5);
        rng::fill_uniform(&mut r, &mut m.code_score, 1.0);
        rng::fill_uniform(&mut r, &mut m.bucket_score, 1.0);
        let ctx = Context { codes: vec![0, 3, 3, 4], buckets: vec![0, 1, 0, 1] };
        let negatives = [1, 4, 0];
        let (_, g) = m.gradient(2, &ctx, &negatives);
        let rep = gradcheck::check(&m, &g, gradcheck::DEFAULT_STEP, |p| p.loss(2, &ctx, &negatives));
        assert!(rep.max_relative_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn needs_a_patient_with_two_events() {
        let err = fit_cbowa(&[ev(&[(0, 0)])], 1, &CbowaConfig::default()).unwrap_err();
        assert!(matches!(err, TrainError::EmptyInput(Method::Cbowa)));
        let bad = CbowaConfig { time_buckets: vec![30, 7], ..Default::default() };
        assert!(matches!(fit_cbowa(&[ev(&[(0, 0), (1, 0)])], 2, &bad), Err(TrainError::InvalidConfig(_))));
    }

    #[test]
    fn seeded_training_is_deterministic() {
        let seqs = vec![ev(&[(0, 0), (1, 3), (2, 40), (0, 41)]), ev(&[(2, 0), (1, 0), (3, 10)])];
        let cfg = CbowaConfig { dim: 6, epochs: 3, seed: 4, ..Default::default() };
        let (a, la) = fit_cbowa(&seqs, 4, &cfg).unwrap();
        let (b, lb) = fit_cbowa(&seqs, 4, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
    }
}
