//! Transformer masked-language model over patient visit sequences.
//!
//! Each token's input is the sum of its code, age (one-year buckets), visit
//! position and visit segment embeddings. After training, the code rows of
//! the token table are the concept embeddings.

pub mod model;
pub mod tokens;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{check_finite, TrainError, TrainOutput};
use crate::corpus::Corpus;
use crate::embedding::{EmbeddingMeta, EmbeddingSet, Method};
use crate::nn::ParamSet;
use crate::rng;

pub use model::{BehrtModel, Shape};
pub use tokens::{build_behrt_sequences, mask_tokens, MaskedSequence, Token, TokenSequence};

/// Sequences per gradient work unit. Fixed so that the summation order, and
/// therefore the result, does not depend on the thread count.
const CHUNK: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BehrtConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
    pub max_seq: usize,
    pub mask_rate: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for BehrtConfig {
    fn default() -> Self {
        BehrtConfig {
            d_model: 100,
            heads: 10,
            layers: 4,
            ff_dim: 400,
            max_seq: 256,
            mask_rate: 0.15,
            lr: 0.05,
            epochs: 5,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl BehrtConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(TrainError::InvalidConfig(format!(
                "BEHRT: heads ({}) must divide d_model ({})",
                self.heads, self.d_model
            )));
        }
        if self.max_seq < 2 || self.batch_size == 0 || !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.mask_rate) {
            return Err(TrainError::InvalidConfig(format!("BEHRT: {self:?}")));
        }
        Ok(())
    }

    pub fn shape(&self, n_codes: usize) -> Shape {
        Shape {
            n_codes,
            d_model: self.d_model,
            heads: self.heads,
            layers: self.layers,
            ff_dim: self.ff_dim,
            max_seq: self.max_seq,
        }
    }
}

/// Gradient and summed loss of a batch; returns `(loss_sum, n_labels)`.
fn batch_gradient(model: &BehrtModel, batch: &[MaskedSequence], grad: &mut BehrtModel) -> (f64, usize) {
    let parts: Vec<(BehrtModel, f64)> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = model.zeroed();
            let loss = chunk.iter().map(|m| model.accumulate_gradient(&m.tokens, &m.labels, &mut g)).sum();
            (g, loss)
        })
        .collect();
    let mut loss = 0.0;
    for (g, l) in &parts {
        grad.add_scaled(1.0, g);
        loss += l;
    }
    (loss, batch.iter().map(|m| m.labels.len()).sum())
}

/// Trains on prepared sequences over `n_codes` real codes; returns the model
/// and the mean masked-token loss per epoch.
pub fn fit_behrt(sequences: &[TokenSequence], n_codes: usize, cfg: &BehrtConfig) -> Result<(BehrtModel, Vec<f64>), TrainError> {
    cfg.validate()?;
    let usable: Vec<&TokenSequence> = sequences.iter().filter(|s| s.tokens.iter().any(Token::is_code)).collect();
    if usable.is_empty() || n_codes == 0 {
        return Err(TrainError::EmptyInput(Method::Behrt));
    }
    let mut model = BehrtModel::new(&mut rng::derive(cfg.seed, "behrt-init"), cfg.shape(n_codes));
    let mut rng = rng::derive(cfg.seed, "behrt-train");
    let mut grad = model.zeroed();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = rng::permutation(&mut rng, usable.len());
        let (mut total, mut count) = (0.0, 0usize);
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<MaskedSequence> = idx
                .iter()
                .map(|&i| mask_tokens(usable[i], cfg.mask_rate, n_codes, &mut rng))
                .filter(|m| !m.labels.is_empty())
                .collect();
            if batch.is_empty() {
                continue;
            }
            grad.scale(0.0);
            let (loss, n) = batch_gradient(&model, &batch, &mut grad);
            check_finite(loss, Method::Behrt, epoch, step)?;
            model.add_scaled(-cfg.lr / n as f64, &grad);
            total += loss;
            count += n;
        }
        losses.push(if count > 0 { total / count as f64 } else { 0.0 });
    }
    Ok((model, losses))
}

/// Mean masked-token loss of `model` over fixed maskings of `sequences`.
pub fn evaluate_loss(model: &BehrtModel, sequences: &[TokenSequence], mask_rate: f64, seed: u64) -> f64 {
    let mut rng = rng::derive(seed, "behrt-eval");
    let (mut total, mut count) = (0.0, 0usize);
    for s in sequences {
        let m = mask_tokens(s, mask_rate, model.n_codes(), &mut rng);
        if !m.labels.is_empty() {
            total += model.loss(&m.tokens, &m.labels);
            count += m.labels.len();
        }
    }
    total / count.max(1) as f64
}

pub fn train_behrt(corpus: &Corpus, cfg: &BehrtConfig) -> Result<TrainOutput, TrainError> {
    let n_codes = corpus.vocabulary().len();
    let (model, epoch_losses) = fit_behrt(&build_behrt_sequences(corpus, cfg.max_seq.max(2)), n_codes, cfg)?;
    let meta = EmbeddingMeta { method: Method::Behrt, seed: cfg.seed, corpus_fingerprint: corpus.fingerprint() };
    Ok(TrainOutput {
        embeddings: EmbeddingSet::new(corpus.vocabulary().clone(), model.code_embeddings(), meta)?,
        demographics: None,
        epoch_losses,
    })
}
