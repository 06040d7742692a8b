//! Single-hidden-layer denoising autoencoder over per-patient disease count
//! vectors with one-hot demographics.
//!
//! Inputs are min-max normalised per feature, corrupted by masking noise,
//! encoded with a sigmoid layer and decoded with a second sigmoid layer; the
//! loss is the mean squared error against the clean normalised input. A
//! code's embedding is its column of the encoder weights.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_finite, DemographicTables, TrainError, TrainOutput};
use crate::corpus::{Corpus, N_BIRTH_YEARS, N_REGIONS, N_SEXES};
use crate::embedding::{EmbeddingMeta, EmbeddingSet, Method};
use crate::linalg::{sigmoid, Matrix};
use crate::nn::{Dense, ParamSet};
use crate::rng;

/// Width of the demographic one-hot block: 2 + 10 + 111.
pub const DEMOGRAPHIC_WIDTH: usize = N_SEXES + N_REGIONS + N_BIRTH_YEARS;

pub fn input_width(vocab_size: usize) -> usize {
    vocab_size + DEMOGRAPHIC_WIDTH
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AeConfig {
    pub hidden: usize,
    pub lr: f64,
    pub noise_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for AeConfig {
    fn default() -> Self {
        AeConfig { hidden: 10, lr: 0.1, noise_rate: 0.05, epochs: 7, seed: 0 }
    }
}

/// A patient's diagnosis counts plus demographic classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatientCountVector {
    pub disease_counts: Vec<u32>,
    pub sex: usize,
    pub region: usize,
    pub birth_year_index: usize,
}

impl PatientCountVector {
    pub fn demo_onehots(&self) -> Vec<f64> {
        let mut v = vec![0.0; DEMOGRAPHIC_WIDTH];
        v[self.sex] = 1.0;
        v[N_SEXES + self.region] = 1.0;
        v[N_SEXES + N_REGIONS + self.birth_year_index] = 1.0;
        v
    }

    /// Counts followed by the one-hot block.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.disease_counts.iter().map(|&c| f64::from(c)).collect();
        v.extend(self.demo_onehots());
        v
    }

    pub fn len(&self) -> usize {
        self.disease_counts.len() + DEMOGRAPHIC_WIDTH
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

pub fn count_vector(corpus: &Corpus, patient: usize, visits: std::ops::Range<usize>) -> PatientCountVector {
    let p = &corpus.patients()[patient];
    let mut disease_counts = vec![0u32; corpus.vocabulary().len()];
    for v in &p.visits[visits] {
        for &c in &v.codes {
            disease_counts[c] += 1;
        }
    }
    PatientCountVector {
        disease_counts,
        sex: usize::from(p.sex),
        region: usize::from(p.region),
        birth_year_index: p.birth_year_index(),
    }
}

pub fn build_count_vectors(corpus: &Corpus) -> Vec<PatientCountVector> {
    (0..corpus.len()).map(|i| count_vector(corpus, i, 0..corpus.patients()[i].visits.len())).collect()
}

/// Per-feature min-max scaling to [0, 1]; constant features map to 0.
#[derive(Debug, Clone, PartialEq)]
pub struct MinMax {
    min: Vec<f64>,
    range: Vec<f64>,
}

impl MinMax {
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let d = rows.first().map_or(0, Vec::len);
        let mut min = vec![f64::INFINITY; d];
        let mut max = vec![f64::NEG_INFINITY; d];
        for r in rows {
            for (j, &x) in r.iter().enumerate() {
                min[j] = min[j].min(x);
                max[j] = max[j].max(x);
            }
        }
        let range = min.iter().zip(&max).map(|(lo, hi)| hi - lo).collect();
        MinMax { min, range }
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.min.iter().zip(&self.range))
            .map(|(&x, (&lo, &r))| if r > 0.0 { (x - lo) / r } else { 0.0 })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutoEncoder {
    /// `hidden x input`.
    pub encoder: Dense,
    /// `input x hidden`.
    pub decoder: Dense,
}

impl ParamSet for AutoEncoder {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![self.encoder.w.as_slice(), self.encoder.b.as_slice(), self.decoder.w.as_slice(), self.decoder.b.as_slice()]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.encoder.w.as_mut_slice(),
            self.encoder.b.as_mut_slice(),
            self.decoder.w.as_mut_slice(),
            self.decoder.b.as_mut_slice(),
        ]
    }
}

impl AutoEncoder {
    pub fn new(rng: &mut impl Rng, input: usize, hidden: usize) -> Self {
        AutoEncoder { encoder: Dense::new(rng, input, hidden), decoder: Dense::new(rng, hidden, input) }
    }

    pub fn encode(&self, x: &[f64]) -> Vec<f64> {
        self.encoder.forward(x).into_iter().map(sigmoid).collect()
    }

    pub fn reconstruct(&self, x: &[f64]) -> Vec<f64> {
        self.decoder.forward(&self.encode(x)).into_iter().map(sigmoid).collect()
    }

    /// Mean squared error of reconstructing `target` from `input`.
    pub fn loss(&self, input: &[f64], target: &[f64]) -> f64 {
        let out = self.reconstruct(input);
        out.iter().zip(target).map(|(o, t)| (o - t).powi(2)).sum::<f64>() / target.len() as f64
    }

    /// Loss, accumulating its gradient into `grad`.
    pub fn loss_and_grad(&self, input: &[f64], target: &[f64], grad: &mut AutoEncoder) -> f64 {
        let h = self.encode(input);
        let out: Vec<f64> = self.decoder.forward(&h).into_iter().map(sigmoid).collect();
        let n = target.len() as f64;
        let mut loss = 0.0;
        let dz2: Vec<f64> = out
            .iter()
            .zip(target)
            .map(|(&o, &t)| {
                loss += (o - t).powi(2);
                2.0 * (o - t) / n * o * (1.0 - o)
            })
            .collect();
        let dh = self.decoder.backward(&h, &dz2, &mut grad.decoder);
        let dz1: Vec<f64> = dh.iter().zip(&h).map(|(&d, &a)| d * a * (1.0 - a)).collect();
        self.encoder.backward(input, &dz1, &mut grad.encoder);
        loss / n
    }

    /// Column `i` of the encoder weights.
    pub fn input_embedding(&self, i: usize) -> Vec<f64> {
        (0..self.encoder.w.rows()).map(|j| self.encoder.w.get(j, i)).collect()
    }

    fn embedding_block(&self, start: usize, len: usize) -> Matrix {
        let rows: Vec<Vec<f64>> = (start..start + len).map(|i| self.input_embedding(i)).collect();
        Matrix::from_rows(&rows)
    }
}

/// Zeroes each entry independently with probability `rate`.
pub fn corrupt(rng: &mut impl Rng, x: &[f64], rate: f64) -> Vec<f64> {
    x.iter().map(|&v| if rate > 0.0 && rng.random::<f64>() < rate { 0.0 } else { v }).collect()
}

/// Trains on already-built count vectors, returning the model and per-epoch
/// mean losses.
pub fn fit_ae(vectors: &[PatientCountVector], cfg: &AeConfig) -> Result<(AutoEncoder, Vec<f64>), TrainError> {
    if vectors.is_empty() {
        return Err(TrainError::EmptyInput(Method::Ae));
    }
    if cfg.hidden == 0 || !(0.0..=1.0).contains(&cfg.noise_rate) || !(cfg.lr > 0.0) {
        return Err(TrainError::InvalidConfig(format!("AE: {cfg:?}")));
    }
    let dense: Vec<Vec<f64>> = vectors.iter().map(PatientCountVector::to_dense).collect();
    let scaler = MinMax::fit(&dense);
    let data: Vec<Vec<f64>> = dense.iter().map(|r| scaler.apply(r)).collect();

    let mut init_rng = rng::derive(cfg.seed, "ae-init");
    let mut model = AutoEncoder::new(&mut init_rng, data[0].len(), cfg.hidden);
    let mut rng = rng::derive(cfg.seed, "ae-train");
    let mut grad = model.zeroed();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = rng::permutation(&mut rng, data.len());
        let mut total = 0.0;
        for (step, &i) in order.iter().enumerate() {
            let noisy = corrupt(&mut rng, &data[i], cfg.noise_rate);
            grad.scale(0.0);
            let loss = model.loss_and_grad(&noisy, &data[i], &mut grad);
            check_finite(loss, Method::Ae, epoch, step)?;
            model.add_scaled(-cfg.lr, &grad);
            total += loss;
        }
        losses.push(total / data.len() as f64);
    }
    Ok((model, losses))
}

pub fn train_ae(corpus: &Corpus, cfg: &AeConfig) -> Result<TrainOutput, TrainError> {
    let vectors = build_count_vectors(corpus);
    let (model, epoch_losses) = fit_ae(&vectors, cfg)?;
    let v = corpus.vocabulary().len();
    let meta = EmbeddingMeta { method: Method::Ae, seed: cfg.seed, corpus_fingerprint: corpus.fingerprint() };
    let embeddings = EmbeddingSet::new(corpus.vocabulary().clone(), model.embedding_block(0, v), meta)?;
    let demographics = DemographicTables {
        sex: model.embedding_block(v, N_SEXES),
        region: model.embedding_block(v + N_SEXES, N_REGIONS),
        birth_year: model.embedding_block(v + N_SEXES + N_REGIONS, N_BIRTH_YEARS),
    };
    Ok(TrainOutput { embeddings, demographics: Some(demographics), epoch_losses })
}
