//! Neural collaborative filtering over (sex, region, birth year, age,
//! disease) diagnosis records.
//!
//! Every observed (patient, visit, code) is a positive record. Negatives keep
//! the patient's demographics and resample (age, disease) uniformly until the
//! tuple is absent from the positive set. Each field is embedded, the
//! embeddings are concatenated and fed through a ReLU MLP with a single
//! sigmoid output trained with binary cross-entropy.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_finite, DemographicTables, TrainError, TrainOutput};
use crate::corpus::{Corpus, MIN_BIRTH_YEAR, N_BIRTH_YEARS, N_REGIONS, N_SEXES};
use crate::embedding::{EmbeddingMeta, EmbeddingSet, Method};
use crate::linalg::{axpy, Matrix};
use crate::nn::{bce_with_logit, init_uniform, Mlp, ParamSet};
use crate::rng;

/// Rejection-sampling attempts allowed per negative record.
pub const NEGATIVE_RETRY_CAP: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NcfConfig {
    pub layer_sizes: Vec<usize>,
    pub sex_dim: usize,
    pub region_dim: usize,
    pub birth_year_dim: usize,
    pub age_dim: usize,
    pub disease_dim: usize,
    pub negatives_per_positive: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for NcfConfig {
    fn default() -> Self {
        NcfConfig {
            layer_sizes: vec![100, 50, 10],
            sex_dim: 1,
            region_dim: 6,
            birth_year_dim: 22,
            age_dim: 23,
            disease_dim: 110,
            negatives_per_positive: 2,
            lr: 0.05,
            epochs: 5,
            seed: 0,
        }
    }
}

impl NcfConfig {
    fn embed_width(&self) -> usize {
        self.sex_dim + self.region_dim + self.birth_year_dim + self.age_dim + self.disease_dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DiagnosisRecord {
    pub sex: u8,
    pub region: u8,
    pub birth_year: u16,
    pub age_years: u32,
    pub disease: usize,
    pub label: bool,
}

impl DiagnosisRecord {
    fn key(&self) -> (u8, u8, u16, u32, usize) {
        (self.sex, self.region, self.birth_year, self.age_years, self.disease)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NcfRecords {
    pub records: Vec<DiagnosisRecord>,
    pub min_age: u32,
    pub max_age: u32,
    pub n_diseases: usize,
}

impl NcfRecords {
    pub fn n_ages(&self) -> usize {
        (self.max_age - self.min_age + 1) as usize
    }
}

pub fn build_ncf_records(corpus: &Corpus, negatives_per_positive: usize, seed: u64) -> Result<NcfRecords, TrainError> {
    let mut positives = Vec::new();
    let mut owner = Vec::new();
    for (pi, p) in corpus.patients().iter().enumerate() {
        for v in &p.visits {
            let age_years = p.age_years_at(v.date_offset_days);
            for &disease in &v.codes {
                positives.push(DiagnosisRecord {
                    sex: p.sex,
                    region: p.region,
                    birth_year: p.birth_year,
                    age_years,
                    disease,
                    label: true,
                });
                owner.push(pi);
            }
        }
    }
    if positives.is_empty() {
        return Err(TrainError::EmptyInput(Method::Ncf));
    }
    let min_age = positives.iter().map(|r| r.age_years).min().expect("non-empty");
    let max_age = positives.iter().map(|r| r.age_years).max().expect("non-empty");
    let n_diseases = corpus.vocabulary().len();
    let positive_set: HashSet<_> = positives.iter().map(DiagnosisRecord::key).collect();

    let mut rng = rng::derive(seed, "ncf-negatives");
    let mut records = Vec::with_capacity(positives.len() * (1 + negatives_per_positive));
    for (pos, &pi) in positives.iter().zip(&owner) {
        records.push(*pos);
        for _ in 0..negatives_per_positive {
            let mut found = None;
            for _ in 0..NEGATIVE_RETRY_CAP {
                let candidate = DiagnosisRecord {
                    age_years: rng.random_range(min_age..=max_age),
                    disease: rng.random_range(0..n_diseases),
                    label: false,
                    ..*pos
                };
                if !positive_set.contains(&candidate.key()) {
                    found = Some(candidate);
                    break;
                }
            }
            match found {
                Some(r) => records.push(r),
                None => {
                    return Err(TrainError::NegativeSamplingExhausted { patient: corpus.patients()[pi].id.clone() })
                }
            }
        }
    }
    Ok(NcfRecords { records, min_age, max_age, n_diseases })
}

#[derive(Debug, Clone, PartialEq)]
pub struct NcfModel {
    pub sex: Matrix,
    pub region: Matrix,
    pub birth_year: Matrix,
    pub age: Matrix,
    pub disease: Matrix,
    pub mlp: Mlp,
    min_age: u32,
}

impl ParamSet for NcfModel {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t =
            vec![self.sex.as_slice(), self.region.as_slice(), self.birth_year.as_slice(), self.age.as_slice(), self.disease.as_slice()];
        t.extend(self.mlp.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = vec![
            self.sex.as_mut_slice(),
            self.region.as_mut_slice(),
            self.birth_year.as_mut_slice(),
            self.age.as_mut_slice(),
            self.disease.as_mut_slice(),
        ];
        t.extend(self.mlp.tensors_mut());
        t
    }
}

impl NcfModel {
    pub fn new(rng: &mut impl Rng, cfg: &NcfConfig, n_ages: usize, min_age: u32, n_diseases: usize) -> Self {
        let table = |rng: &mut _, rows, dim: usize| init_uniform(rng, rows, dim, dim);
        NcfModel {
            sex: table(rng, N_SEXES, cfg.sex_dim),
            region: table(rng, N_REGIONS, cfg.region_dim),
            birth_year: table(rng, N_BIRTH_YEARS, cfg.birth_year_dim),
            age: table(rng, n_ages, cfg.age_dim),
            disease: table(rng, n_diseases, cfg.disease_dim),
            mlp: Mlp::new(rng, cfg.embed_width(), &cfg.layer_sizes),
            min_age,
        }
    }

    fn rows(&self, r: &DiagnosisRecord) -> [(usize, usize); 5] {
        [
            (0, usize::from(r.sex)),
            (1, usize::from(r.region)),
            (2, usize::from(r.birth_year - MIN_BIRTH_YEAR)),
            (3, (r.age_years - self.min_age) as usize),
            (4, r.disease),
        ]
    }

    fn table(&self, t: usize) -> &Matrix {
        [&self.sex, &self.region, &self.birth_year, &self.age, &self.disease][t]
    }

    fn table_mut(&mut self, t: usize) -> &mut Matrix {
        match t {
            0 => &mut self.sex,
            1 => &mut self.region,
            2 => &mut self.birth_year,
            3 => &mut self.age,
            _ => &mut self.disease,
        }
    }

    fn features(&self, r: &DiagnosisRecord) -> Vec<f64> {
        self.rows(r).iter().flat_map(|&(t, i)| self.table(t).row(i).iter().copied()).collect()
    }

    /// Predicted probability that the record is real.
    pub fn predict(&self, r: &DiagnosisRecord) -> f64 {
        self.mlp.predict(&self.features(r))
    }

    pub fn loss(&self, r: &DiagnosisRecord) -> f64 {
        bce_with_logit(self.mlp.forward(&self.features(r)).logit(), r.label).0
    }

    /// Loss, MLP gradient (accumulated into `mlp_grad`) and the gradient
    /// with respect to the concatenated embeddings.
    fn backward(&self, r: &DiagnosisRecord, mlp_grad: &mut Mlp) -> (f64, Vec<f64>) {
        let trace = self.mlp.forward(&self.features(r));
        let (loss, dz) = bce_with_logit(trace.logit(), r.label);
        let dx = self.mlp.backward(&trace, dz, mlp_grad);
        (loss, dx)
    }

    /// Dense gradient of the loss for one record.
    pub fn gradient(&self, r: &DiagnosisRecord) -> (f64, NcfModel) {
        let mut grad = self.zeroed();
        let (loss, dx) = self.backward(r, &mut grad.mlp);
        let mut offset = 0;
        for (t, i) in self.rows(r) {
            let d = self.table(t).cols();
            axpy(1.0, &dx[offset..offset + d], grad.table_mut(t).row_mut(i));
            offset += d;
        }
        (loss, grad)
    }

    /// One SGD step touching only the embedding rows the record uses.
    fn sgd_step(&mut self, r: &DiagnosisRecord, lr: f64, mlp_grad: &mut Mlp) -> f64 {
        mlp_grad.scale(0.0);
        let (loss, dx) = self.backward(r, mlp_grad);
        self.mlp.add_scaled(-lr, mlp_grad);
        let mut offset = 0;
        for (t, i) in self.rows(r) {
            let d = self.table(t).cols();
            axpy(-lr, &dx[offset..offset + d], self.table_mut(t).row_mut(i));
            offset += d;
        }
        loss
    }

    pub fn demographics(&self) -> DemographicTables {
        DemographicTables { sex: self.sex.clone(), region: self.region.clone(), birth_year: self.birth_year.clone() }
    }
}

pub fn fit_ncf(data: &NcfRecords, cfg: &NcfConfig) -> Result<(NcfModel, Vec<f64>), TrainError> {
    let n_pos = data.records.iter().filter(|r| r.label).count();
    if data.records.is_empty() {
        return Err(TrainError::EmptyInput(Method::Ncf));
    }
    if n_pos == 0 || n_pos == data.records.len() {
        return Err(TrainError::SingleClass);
    }
    let mut model = NcfModel::new(&mut rng::derive(cfg.seed, "ncf-init"), cfg, data.n_ages(), data.min_age, data.n_diseases);
    let mut rng = rng::derive(cfg.seed, "ncf-train");
    let mut mlp_grad = model.mlp.zeroed();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = rng::permutation(&mut rng, data.records.len());
        let mut total = 0.0;
        for (step, &i) in order.iter().enumerate() {
            let loss = model.sgd_step(&data.records[i], cfg.lr, &mut mlp_grad);
            check_finite(loss, Method::Ncf, epoch, step)?;
            total += loss;
        }
        losses.push(total / data.records.len() as f64);
    }
    Ok((model, losses))
}

/// Mean loss over a record set without updating the model.
pub fn mean_loss(model: &NcfModel, records: &[DiagnosisRecord]) -> f64 {
    records.iter().map(|r| model.loss(r)).sum::<f64>() / records.len() as f64
}

pub fn train_ncf(corpus: &Corpus, cfg: &NcfConfig) -> Result<TrainOutput, TrainError> {
    let data = build_ncf_records(corpus, cfg.negatives_per_positive, cfg.seed)?;
    let (model, epoch_losses) = fit_ncf(&data, cfg)?;
    let meta = EmbeddingMeta { method: Method::Ncf, seed: cfg.seed, corpus_fingerprint: corpus.fingerprint() };
    let embeddings = EmbeddingSet::new(corpus.vocabulary().clone(), model.disease.clone(), meta)?;
    Ok(TrainOutput { embeddings, demographics: Some(model.demographics()), epoch_losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{read_corpus, LoadOptions};
    use crate::nn::gradcheck;

    fn corpus(lines: &[&str]) -> Corpus {
        read_corpus(lines.join("\n").as_bytes(), LoadOptions { min_visits: 1 }).unwrap()
    }

    #[test]
    fn one_visit_records() {
        let c = corpus(&[
            r#"{"id":"a","sex":0,"region":1,"birth_year":1950,"visits":[{"d":0,"codes":["I10","E78"]}]}"#,
            r#"{"id":"b","sex":1,"region":4,"birth_year":1960,"visits":[{"d":400,"codes":["M79"]}]}"#,
        ]);
        let data = build_ncf_records(&c, 2, 1).unwrap();
        let positives: Vec<_> = data.records.iter().filter(|r| r.label).collect();
        assert_eq!(positives.len(), 3);
        assert_eq!(data.records.len(), 9);
        for neg in data.records.iter().filter(|r| !r.label) {
            assert!(positives.iter().all(|p| p.key() != neg.key()));
            assert!((data.min_age..=data.max_age).contains(&neg.age_years));
        }
        let only_pos = build_ncf_records(&c, 0, 1).unwrap();
        assert!(only_pos.records.iter().all(|r| r.label));
        assert_eq!(only_pos.records.len(), 3);
    }

    #[test]
    fn saturated_corpus_hits_retry_cap() {
        let c = corpus(&[
            r#"{"id":"dense","sex":0,"region":0,"birth_year":1950,"visits":[{"d":0,"codes":["I10"]},{"d":10,"codes":["I10"]}]}"#,
        ]);
        let err = build_ncf_records(&c, 1, 0).unwrap_err();
        assert!(matches!(err, TrainError::NegativeSamplingExhausted { ref patient } if patient == "dense"));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = NcfConfig {
            layer_sizes: vec![6, 5, 3],
            sex_dim: 1,
            region_dim: 2,
            birth_year_dim: 2,
            age_dim: 2,
            disease_dim: 3,
            ..Default::default()
        };
        let mut r = rng::seeded(8);
        let model = NcfModel::new(&mut r, &cfg, 3, 40, 4);
        for (label, disease) in [(true, 2), (false, 0)] {
            let rec = DiagnosisRecord { sex: 1, region: 7, birth_year: 1950, age_years: 41, disease, label };
            let (_, grad) = model.gradient(&rec);
            let rep = gradcheck::check(&model, &grad, gradcheck::DEFAULT_STEP, |m| m.loss(&rec));
            assert!(rep.max_relative_error < 1e-4, "{rep:?}");
        }
    }

    #[test]
    fn separable_toy_loss_descends() {
        // disease 0 is always real, disease 1 never
        let records: Vec<DiagnosisRecord> = (0..40)
            .map(|i| DiagnosisRecord {
                sex: (i % 2) as u8,
                region: (i % 10) as u8,
                birth_year: 1940 + (i % 5) as u16,
                age_years: 50 + (i % 3) as u32,
                disease: i % 2,
                label: i % 2 == 0,
            })
            .collect();
        let data = NcfRecords { records: records.clone(), min_age: 50, max_age: 52, n_diseases: 2 };
        let cfg = NcfConfig { epochs: 5, seed: 3, ..Default::default() };
        let init = NcfModel::new(&mut rng::derive(3, "ncf-init"), &cfg, 3, 50, 2);
        let before = mean_loss(&init, &records);
        let (model, _) = fit_ncf(&data, &cfg).unwrap();
        assert!(mean_loss(&model, &records) < before);
        for r in &records {
            let p = model.predict(r);
            assert!(p > 0.0 && p < 1.0);
        }
    }

    #[test]
    fn single_class_rejected() {
        let rec = DiagnosisRecord { sex: 0, region: 0, birth_year: 1950, age_years: 30, disease: 0, label: true };
        let data = NcfRecords { records: vec![rec], min_age: 30, max_age: 30, n_diseases: 1 };
        assert!(matches!(fit_ncf(&data, &NcfConfig::default()), Err(TrainError::SingleClass)));
    }

    #[test]
    fn disease_embedding_is_110_wide() {
        let c = corpus(&[
            r#"{"id":"a","sex":0,"region":1,"birth_year":1950,"visits":[{"d":0,"codes":["I10","E78"]},{"d":900,"codes":["M79"]}]}"#,
        ]);
        let out = train_ncf(&c, &NcfConfig { epochs: 1, ..Default::default() }).unwrap();
        assert_eq!(out.embeddings.dim(), 110);
        assert_eq!(out.demographics.unwrap().dims(), [1, 6, 22]);
        let again = train_ncf(&c, &NcfConfig { epochs: 1, ..Default::default() }).unwrap();
        assert_eq!(out.embeddings, again.embeddings);
    }
}
