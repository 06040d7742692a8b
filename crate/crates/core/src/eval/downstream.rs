//! Disease-onset prediction used to compare embeddings as classifier
//! initialisations.
//!
//! For a target code, each patient's label is whether the code appears in
//! the `horizon_days` window ending at their last visit; features are built
//! only from visits strictly before the window. The classifier's first layer
//! projects the (log-scaled) disease counts through a `V x d` block that is
//! either random or copied from pre-trained disease embeddings, and looks up
//! sex/region/birth-year embeddings; a ReLU MLP with a sigmoid output follows.

use std::fmt;
use std::io::BufRead;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::csv::{field, read_rows};
use super::metrics::{average_precision, f1_score};
use super::EvalError;
use crate::corpus::{ConceptVocabulary, Corpus, N_BIRTH_YEARS, N_REGIONS, N_SEXES};
use crate::embedding::EmbeddingSet;
use crate::linalg::{axpy, Matrix};
use crate::nn::{bce_with_logit, init_uniform, Mlp, ParamSet};
use crate::rng;
use crate::train::ae::{count_vector, PatientCountVector};
use crate::train::DemographicTables;
use crate::Method;

pub const HORIZON_DAYS: u32 = 183;
pub const SCORE_HEADER: &str = "task,target_code,disease_emb,demo_emb,ap,f1,n_test,prevalence,seed";
/// Demographic embedding widths used when no pre-trained tables are given.
pub const RANDOM_DEMOGRAPHIC_DIMS: [usize; 3] = [1, 6, 22];

#[derive(Debug, Clone, PartialEq)]
pub struct TaskExample {
    /// Index into the corpus.
    pub patient: usize,
    pub features: PatientCountVector,
    pub label: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTask {
    pub target_code: String,
    pub horizon_days: u32,
    pub vocabulary: ConceptVocabulary,
    pub examples: Vec<TaskExample>,
    /// Patients with no visit before their window.
    pub dropped: usize,
}

impl PredictionTask {
    pub fn n_positive(&self) -> usize {
        self.examples.iter().filter(|e| e.label).count()
    }
}

pub fn build_task(corpus: &Corpus, target_code: &str, horizon_days: u32) -> Result<PredictionTask, EvalError> {
    let target = corpus.vocabulary().index_of(target_code).ok_or_else(|| EvalError::UnknownTarget(target_code.into()))?;
    let mut examples = Vec::new();
    let mut dropped = 0;
    for (pi, p) in corpus.patients().iter().enumerate() {
        let Some(last) = p.last_visit_date() else {
            dropped += 1;
            continue;
        };
        let start = i64::from(last) - i64::from(horizon_days);
        // visits at or before `start` are history; the rest form the window
        let split = p.visits.partition_point(|v| i64::from(v.date_offset_days) <= start);
        if split == 0 {
            dropped += 1;
            continue;
        }
        let label = p.visits[split..].iter().any(|v| v.codes.contains(&target));
        examples.push(TaskExample { patient: pi, features: count_vector(corpus, pi, 0..split), label });
    }
    let positives = examples.iter().filter(|e| e.label).count();
    let negatives = examples.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(EvalError::DegenerateTask { positives, negatives });
    }
    Ok(PredictionTask {
        target_code: target_code.into(),
        horizon_days,
        vocabulary: corpus.vocabulary().clone(),
        examples,
        dropped,
    })
}

/// Train/validation/test indices into `task.examples`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// 64/16/20 split by patient, stratified by label.
pub fn split_task(task: &PredictionTask, seed: u64) -> Split {
    let mut r = rng::derive(seed, "downstream-split");
    let mut split = Split { train: Vec::new(), validation: Vec::new(), test: Vec::new() };
    for class in [true, false] {
        let idx: Vec<usize> = task.examples.iter().enumerate().filter(|(_, e)| e.label == class).map(|(i, _)| i).collect();
        let perm = rng::permutation(&mut r, idx.len());
        let n = idx.len();
        let n_test = if n >= 2 { ((0.2 * n as f64).round() as usize).max(1) } else { 0 };
        let n_val = ((0.16 * n as f64).round() as usize).min(n - n_test);
        for (k, &p) in perm.iter().enumerate() {
            let i = idx[p];
            if k < n_test {
                split.test.push(i);
            } else if k < n_test + n_val {
                split.validation.push(i);
            } else {
                split.train.push(i);
            }
        }
    }
    for v in [&mut split.train, &mut split.validation, &mut split.test] {
        v.sort_unstable();
    }
    split
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub layer_sizes: Vec<usize>,
    /// Width of the random disease block; pre-trained blocks must match it
    /// when set.
    pub disease_dim: Option<usize>,
    pub fine_tune: bool,
    pub lr: f64,
    pub epochs: usize,
    pub horizon_days: u32,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            layer_sizes: vec![100, 50, 10],
            disease_dim: None,
            fine_tune: true,
            lr: 0.01,
            epochs: 10,
            horizon_days: HORIZON_DAYS,
            seed: 0,
        }
    }
}

/// Where the first-layer weights come from.
#[derive(Debug, Clone, Copy, Default)]
pub struct Initialisation<'a> {
    pub disease: Option<&'a EmbeddingSet>,
    pub demographics: Option<(&'a DemographicTables, Method)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub disease: Matrix,
    pub sex: Matrix,
    pub region: Matrix,
    pub birth_year: Matrix,
    pub mlp: Mlp,
}

impl ParamSet for Classifier {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t = vec![self.disease.as_slice(), self.sex.as_slice(), self.region.as_slice(), self.birth_year.as_slice()];
        t.extend(self.mlp.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = vec![
            self.disease.as_mut_slice(),
            self.sex.as_mut_slice(),
            self.region.as_mut_slice(),
            self.birth_year.as_mut_slice(),
        ];
        t.extend(self.mlp.tensors_mut());
        t
    }
}

/// Log-scaled nonzero counts: `(code, ln(1 + count))`.
fn scaled_counts(x: &PatientCountVector) -> Vec<(usize, f64)> {
    x.disease_counts.iter().enumerate().filter(|(_, &c)| c > 0).map(|(i, &c)| (i, f64::from(c).ln_1p())).collect()
}

impl Classifier {
    /// Builds the first layer from `init` (random where absent) and a fresh
    /// MLP. Returns the classifier and the number of task codes that had no
    /// pre-trained row.
    pub fn new(vocab: &ConceptVocabulary, cfg: &ClassifierConfig, init: Initialisation<'_>) -> Result<(Classifier, usize), EvalError> {
        let dim = match (init.disease, cfg.disease_dim) {
            (Some(e), Some(d)) if e.dim() != d => {
                return Err(EvalError::DimensionMismatch(format!("disease embeddings have dim {}, classifier expects {d}", e.dim())))
            }
            (Some(e), _) => e.dim(),
            (None, Some(d)) => d,
            (None, None) => 110,
        };
        let mut r = rng::derive(cfg.seed, "downstream-init");
        let mut disease = init_uniform(&mut r, vocab.len(), dim, dim);
        let mut missing = 0;
        if let Some(e) = init.disease {
            for (i, code) in vocab.codes().iter().enumerate() {
                match e.vector(code) {
                    Some(v) => disease.row_mut(i).copy_from_slice(v),
                    None => missing += 1,
                }
            }
            if missing > 0 {
                log::warn!("{missing} of {} task codes have no pre-trained embedding; using random rows", vocab.len());
            }
        }
        let [ds, dr, db] = RANDOM_DEMOGRAPHIC_DIMS;
        let (sex, region, birth_year) = match init.demographics {
            Some((t, _)) => (t.sex.clone(), t.region.clone(), t.birth_year.clone()),
            None => (
                init_uniform(&mut r, N_SEXES, ds, ds),
                init_uniform(&mut r, N_REGIONS, dr, dr),
                init_uniform(&mut r, N_BIRTH_YEARS, db, db),
            ),
        };
        if sex.rows() != N_SEXES || region.rows() != N_REGIONS || birth_year.rows() != N_BIRTH_YEARS {
            return Err(EvalError::DimensionMismatch("demographic tables have the wrong number of classes".into()));
        }
        let width = dim + sex.cols() + region.cols() + birth_year.cols();
        let mlp = Mlp::new(&mut r, width, &cfg.layer_sizes);
        Ok((Classifier { disease, sex, region, birth_year, mlp }, missing))
    }

    fn features(&self, x: &PatientCountVector) -> Vec<f64> {
        let mut h = vec![0.0; self.disease.cols()];
        for (i, w) in scaled_counts(x) {
            axpy(w, self.disease.row(i), &mut h);
        }
        h.extend_from_slice(self.sex.row(x.sex));
        h.extend_from_slice(self.region.row(x.region));
        h.extend_from_slice(self.birth_year.row(x.birth_year_index));
        h
    }

    pub fn predict(&self, x: &PatientCountVector) -> f64 {
        self.mlp.predict(&self.features(x))
    }

    pub fn loss(&self, x: &PatientCountVector, label: bool) -> f64 {
        bce_with_logit(self.mlp.forward(&self.features(x)).logit(), label).0
    }

    /// Loss, with the gradient accumulated into `g`. First-layer tables
    /// receive gradients only when `embeddings_trainable`.
    pub fn accumulate_gradient(&self, x: &PatientCountVector, label: bool, g: &mut Classifier, embeddings_trainable: bool) -> f64 {
        let trace = self.mlp.forward(&self.features(x));
        let (loss, dz) = bce_with_logit(trace.logit(), label);
        let dx = self.mlp.backward(&trace, dz, &mut g.mlp);
        if embeddings_trainable {
            let d = self.disease.cols();
            for (i, w) in scaled_counts(x) {
                axpy(w, &dx[..d], g.disease.row_mut(i));
            }
            let (ds, dr) = (self.sex.cols(), self.region.cols());
            axpy(1.0, &dx[d..d + ds], g.sex.row_mut(x.sex));
            axpy(1.0, &dx[d + ds..d + ds + dr], g.region.row_mut(x.region));
            axpy(1.0, &dx[d + ds + dr..], g.birth_year.row_mut(x.birth_year_index));
        }
        loss
    }

    /// In-place SGD step touching only the rows the example uses.
    fn sgd_step(&mut self, x: &PatientCountVector, label: bool, lr: f64, fine_tune: bool, mlp_grad: &mut Mlp) -> f64 {
        mlp_grad.scale(0.0);
        let trace = self.mlp.forward(&self.features(x));
        let (loss, dz) = bce_with_logit(trace.logit(), label);
        let dx = self.mlp.backward(&trace, dz, mlp_grad);
        self.mlp.add_scaled(-lr, mlp_grad);
        if fine_tune {
            let d = self.disease.cols();
            for (i, w) in scaled_counts(x) {
                axpy(-lr * w, &dx[..d], self.disease.row_mut(i));
            }
            let (ds, dr) = (self.sex.cols(), self.region.cols());
            axpy(-lr, &dx[d..d + ds], self.sex.row_mut(x.sex));
            axpy(-lr, &dx[d + ds..d + ds + dr], self.region.row_mut(x.region));
            axpy(-lr, &dx[d + ds + dr..], self.birth_year.row_mut(x.birth_year_index));
        }
        loss
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub task: String,
    pub target_code: String,
    pub disease_emb: String,
    pub demo_emb: String,
    pub average_precision: f64,
    pub f1: f64,
    pub n_test: usize,
    pub prevalence: f64,
    pub seed: u64,
    pub missing_codes: usize,
}

impl fmt::Display for ScoreReport {
    /// One row under [`SCORE_HEADER`].
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{},{},{},{}",
            self.task,
            self.target_code,
            self.disease_emb,
            self.demo_emb,
            self.average_precision,
            self.f1,
            self.n_test,
            self.prevalence,
            self.seed
        )
    }
}

/// Parses a score file written as [`SCORE_HEADER`] plus one
/// [`ScoreReport`] row per line. `missing_codes` is not stored and reads
/// back as zero.
pub fn read_score_rows<R: BufRead>(r: R) -> Result<Vec<ScoreReport>, EvalError> {
    read_rows(r, SCORE_HEADER)?
        .into_iter()
        .map(|row| {
            Ok(ScoreReport {
                task: row[0].clone(),
                target_code: row[1].clone(),
                disease_emb: row[2].clone(),
                demo_emb: row[3].clone(),
                average_precision: field(&row, 4, "ap")?,
                f1: field(&row, 5, "f1")?,
                n_test: field(&row, 6, "n_test")?,
                prevalence: field(&row, 7, "prevalence")?,
                seed: field(&row, 8, "seed")?,
                missing_codes: 0,
            })
        })
        .collect()
}

fn scores(model: &Classifier, task: &PredictionTask, idx: &[usize]) -> (Vec<bool>, Vec<f64>) {
    idx.iter().map(|&i| (task.examples[i].label, model.predict(&task.examples[i].features))).unzip()
}

/// Validation criterion, compared lexicographically: AP (or 0 when the
/// validation split has no positives), then minus the mean loss.
fn selection_score(model: &Classifier, task: &PredictionTask, idx: &[usize]) -> (f64, f64) {
    let (labels, s) = scores(model, task, idx);
    let ap = average_precision(&labels, &s).unwrap_or(0.0);
    let loss = idx.iter().map(|&i| model.loss(&task.examples[i].features, task.examples[i].label)).sum::<f64>()
        / idx.len().max(1) as f64;
    (ap, -loss)
}

/// Trains with per-example SGD, keeps the epoch with the best validation
/// score, and scores it on the test split.
pub fn train_classifier(task: &PredictionTask, cfg: &ClassifierConfig, init: Initialisation<'_>) -> Result<ScoreReport, EvalError> {
    let positives = task.n_positive();
    if positives == 0 || positives == task.examples.len() {
        return Err(EvalError::DegenerateTask { positives, negatives: task.examples.len() - positives });
    }
    let split = split_task(task, cfg.seed);
    if split.train.is_empty() || split.test.is_empty() {
        return Err(EvalError::InvalidArgument(format!("task with {} patients is too small to split", task.examples.len())));
    }
    let (mut model, missing) = Classifier::new(&task.vocabulary, cfg, init)?;
    let mut mlp_grad = model.mlp.zeroed();
    let mut r = rng::derive(cfg.seed, "downstream-train");
    let select_on = if split.validation.is_empty() { &split.train } else { &split.validation };
    let mut best = (selection_score(&model, task, select_on), model.clone());
    for epoch in 0..cfg.epochs {
        let order = rng::permutation(&mut r, split.train.len());
        for (step, &k) in order.iter().enumerate() {
            let ex = &task.examples[split.train[k]];
            let loss = model.sgd_step(&ex.features, ex.label, cfg.lr, cfg.fine_tune, &mut mlp_grad);
            if !loss.is_finite() {
                log::error!("classifier diverged at epoch {epoch}, step {step}");
                return Err(EvalError::NonFinite("classifier training"));
            }
        }
        let score = selection_score(&model, task, select_on);
        if score > best.0 {
            best = (score, model.clone());
        }
    }
    let model = best.1;
    let (labels, s) = scores(&model, task, &split.test);
    let ap = average_precision(&labels, &s)?;
    let predictions: Vec<bool> = s.iter().map(|&p| p >= 0.5).collect();
    let f1 = f1_score(&labels, &predictions)?;
    let label_of = |e: Option<&EmbeddingSet>| e.map_or_else(|| "random".to_string(), |e| e.meta.method.name().to_string());
    Ok(ScoreReport {
        task: format!("onset{}", task.horizon_days),
        target_code: task.target_code.clone(),
        disease_emb: label_of(init.disease),
        demo_emb: init.demographics.map_or_else(|| "random".to_string(), |(_, m)| m.name().to_string()),
        average_precision: ap,
        f1,
        n_test: split.test.len(),
        prevalence: labels.iter().filter(|&&l| l).count() as f64 / labels.len() as f64,
        seed: cfg.seed,
        missing_codes: missing,
    })
}

/// Random draw helper for tests and harnesses that need a noisy patient.
pub fn random_count_vector(r: &mut impl Rng, vocab: usize) -> PatientCountVector {
    PatientCountVector {
        disease_counts: (0..vocab).map(|_| if r.random::<f64>() < 0.3 { r.random_range(1..4) } else { 0 }).collect(),
        sex: r.random_range(0..N_SEXES),
        region: r.random_range(0..N_REGIONS),
        birth_year_index: r.random_range(0..N_BIRTH_YEARS),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{read_corpus, LoadOptions};
    use crate::nn::gradcheck;

    fn corpus(lines: &[String]) -> Corpus {
        read_corpus(lines.join("\n").as_bytes(), LoadOptions { min_visits: 1 }).unwrap()
    }

    fn patient(id: &str, visits: &[(u32, &[&str])]) -> String {
        let v: Vec<String> = visits
            .iter()
            .map(|(d, cs)| format!(r#"{{"d":{d},"codes":[{}]}}"#, cs.iter().map(|c| format!("\"{c}\"")).collect::<Vec<_>>().join(",")))
            .collect();
        format!(r#"{{"id":"{id}","sex":0,"region":2,"birth_year":1950,"visits":[{}]}}"#, v.join(","))
    }

    #[test]
    fn hand_labelled_task() {
        let c = corpus(&[
            // target only inside the window
            patient("p1", &[(0, &["A01"]), (500, &["B01"]), (600, &["T01"])]),
            // target only before the window
            patient("p2", &[(0, &["T01"]), (500, &["B01"])]),
            // target both before and inside
            patient("p3", &[(0, &["T01"]), (400, &["T01"])]),
            // nothing before the window: dropped
            patient("p4", &[(0, &["A01"]), (100, &["T01"])]),
            // never the target
            patient("p5", &[(0, &["A01"]), (1000, &["B01"])]),
            // boundary: visit exactly horizon days before the last is history
            patient("p6", &[(0, &["A01"]), (183, &["T01"])]),
        ]);
        let task = build_task(&c, "T01", 183).unwrap();
        let t = c.vocabulary().index_of("T01").unwrap();
        let got: Vec<(&str, bool, u32)> = task
            .examples
            .iter()
            .map(|e| (c.patients()[e.patient].id.as_str(), e.label, e.features.disease_counts[t]))
            .collect();
        assert_eq!(got, vec![("p1", true, 0), ("p2", false, 1), ("p3", true, 1), ("p5", false, 0), ("p6", true, 0)]);
        assert_eq!(task.dropped, 1);
    }

    #[test]
    fn degenerate_and_unknown_targets() {
        let c = corpus(&[patient("a", &[(0, &["A01"]), (900, &["A01"])]), patient("b", &[(0, &["B01"]), (900, &["B01"])])]);
        assert!(matches!(build_task(&c, "A01", 183), Ok(_)));
        let only_hist = corpus(&[patient("a", &[(0, &["A01"]), (900, &["B01"])])]);
        let err = build_task(&only_hist, "A01", 183).unwrap_err();
        assert!(err.to_string().starts_with("degenerate task"));
        assert!(matches!(build_task(&c, "Z99", 183), Err(EvalError::UnknownTarget(_))));
    }

    fn toy_task(n: usize) -> PredictionTask {
        let vocab = ConceptVocabulary::from_codes(["A01", "B01", "C01", "D01"]).unwrap();
        let examples = (0..n)
            .map(|i| {
                let label = i % 3 == 0;
                let mut counts = vec![0, 0, 1, (i % 2) as u32];
                counts[if label { 0 } else { 1 }] = 2;
                TaskExample {
                    patient: i,
                    features: PatientCountVector { disease_counts: counts, sex: i % 2, region: i % 10, birth_year_index: 60 + i % 5 },
                    label,
                }
            })
            .collect();
        PredictionTask { target_code: "T01".into(), horizon_days: 183, vocabulary: vocab, examples, dropped: 0 }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let task = toy_task(4);
        let cfg = ClassifierConfig { layer_sizes: vec![5, 4, 3], disease_dim: Some(3), ..Default::default() };
        let (m, _) = Classifier::new(&task.vocabulary, &cfg, Initialisation::default()).unwrap();
        for ex in &task.examples[..2] {
            let mut g = m.zeroed();
            m.accumulate_gradient(&ex.features, ex.label, &mut g, true);
            let rep = gradcheck::check(&m, &g, gradcheck::DEFAULT_STEP, |p| p.loss(&ex.features, ex.label));
            assert!(rep.max_relative_error < 1e-4, "{rep:?}");
        }
    }

    #[test]
    fn separable_task_is_solved() {
        let task = toy_task(150);
        let cfg = ClassifierConfig { epochs: 30, lr: 0.05, seed: 2, ..Default::default() };
        let rep = train_classifier(&task, &cfg, Initialisation::default()).unwrap();
        assert_eq!(rep.average_precision, 1.0);
        assert_eq!(rep.f1, 1.0);
        assert_eq!(rep.n_test, 30);
        assert_eq!((rep.disease_emb.as_str(), rep.demo_emb.as_str()), ("random", "random"));
        let text = format!("{SCORE_HEADER}\n{rep}\n");
        assert_eq!(read_score_rows(text.as_bytes()).unwrap(), vec![rep]);
    }

    #[test]
    fn split_is_stratified_and_disjoint() {
        let task = toy_task(100);
        let s = split_task(&task, 4);
        let mut all: Vec<usize> = s.train.iter().chain(&s.validation).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        let pos = |v: &[usize]| v.iter().filter(|&&i| task.examples[i].label).count();
        // 34 positives, 66 negatives
        assert_eq!((pos(&s.test), s.test.len()), (7, 20));
        assert_eq!((pos(&s.validation), s.validation.len()), (5, 16));
        assert_eq!(split_task(&task, 4), s);
    }

    #[test]
    fn pretrained_rows_are_copied_and_dims_checked() {
        let task = toy_task(10);
        let vocab = ConceptVocabulary::from_codes(["A01", "B01", "Z01"]).unwrap();
        let e = EmbeddingSet::random(vocab, 4, 1, 0);
        let cfg = ClassifierConfig::default();
        let init = Initialisation { disease: Some(&e), demographics: None };
        let (m, missing) = Classifier::new(&task.vocabulary, &cfg, init).unwrap();
        assert_eq!(missing, 2);
        assert_eq!(m.disease.row(0), e.vector("A01").unwrap());
        let bad = ClassifierConfig { disease_dim: Some(5), ..Default::default() };
        assert!(matches!(Classifier::new(&task.vocabulary, &bad, init), Err(EvalError::DimensionMismatch(_))));
    }

    #[test]
    fn frozen_embeddings_stay_fixed() {
        let task = toy_task(60);
        let cfg = ClassifierConfig { fine_tune: false, epochs: 2, ..Default::default() };
        let (before, _) = Classifier::new(&task.vocabulary, &cfg, Initialisation::default()).unwrap();
        let mut m = before.clone();
        let mut g = m.mlp.zeroed();
        for ex in &task.examples {
            m.sgd_step(&ex.features, ex.label, 0.1, false, &mut g);
        }
        assert_eq!(m.disease, before.disease);
        assert_eq!(m.birth_year, before.birth_year);
        assert_ne!(m.mlp, before.mlp);
    }
}
