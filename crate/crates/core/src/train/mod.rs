//! The five embedding trainers and the common interface the evaluators use
//! to retrain them.

pub mod ae;
pub mod behrt;
pub mod cbow;
pub mod cbowa;
pub mod ncf;
pub mod sampling;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ConceptVocabulary, Corpus, N_BIRTH_YEARS, N_REGIONS, N_SEXES};
use crate::embedding::{EmbeddingError, EmbeddingMeta, EmbeddingSet, Method};
use crate::linalg::Matrix;

pub use ae::AeConfig;
pub use behrt::BehrtConfig;
pub use cbow::CbowConfig;
pub use cbowa::CbowaConfig;
pub use ncf::NcfConfig;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{method}: divergence at epoch {epoch}, step {step} (non-finite loss)")]
    Divergence { method: Method, epoch: usize, step: usize },
    #[error("{0}: empty training input")]
    EmptyInput(Method),
    #[error("training records contain a single class")]
    SingleClass,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("negative sampling exhausted its retry cap for patient {patient:?} (corpus too dense)")]
    NegativeSamplingExhausted { patient: String },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// Learned embeddings for the categorical demographics, one row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct DemographicTables {
    /// 2 rows.
    pub sex: Matrix,
    /// 10 rows.
    pub region: Matrix,
    /// 111 rows, birth years 1888..=1998.
    pub birth_year: Matrix,
}

impl DemographicTables {
    pub const KINDS: [&'static str; 3] = ["sex", "region", "birth_year"];

    pub fn dims(&self) -> [usize; 3] {
        [self.sex.cols(), self.region.cols(), self.birth_year.cols()]
    }

    pub fn tables(&self) -> [&Matrix; 3] {
        [&self.sex, &self.region, &self.birth_year]
    }

    fn class_codes(kind: &str) -> Vec<String> {
        let (n, offset) = match kind {
            "sex" => (N_SEXES, 0),
            "region" => (N_REGIONS, 0),
            _ => (N_BIRTH_YEARS, usize::from(crate::corpus::MIN_BIRTH_YEAR)),
        };
        (0..n).map(|i| format!("{kind}={}", i + offset)).collect()
    }

    /// The three tables as embedding sets whose codes are `sex=0`,
    /// `region=3`, `birth_year=1950`, ... so they share the file format.
    pub fn to_embedding_sets(&self, meta: EmbeddingMeta) -> Vec<(&'static str, EmbeddingSet)> {
        Self::KINDS
            .iter()
            .zip(self.tables())
            .map(|(&kind, table)| {
                let vocab = ConceptVocabulary::from_codes(Self::class_codes(kind)).expect("valid class codes");
                (kind, EmbeddingSet::new(vocab, table.clone(), meta).expect("finite demographic table"))
            })
            .collect()
    }

    pub fn from_embedding_sets(sex: &EmbeddingSet, region: &EmbeddingSet, birth_year: &EmbeddingSet) -> Result<Self, EmbeddingError> {
        let take = |kind: &str, e: &EmbeddingSet| -> Result<Matrix, EmbeddingError> {
            let codes = Self::class_codes(kind);
            let mut m = Matrix::zeros(codes.len(), e.dim());
            for (i, c) in codes.iter().enumerate() {
                let v = e.vector(c).ok_or_else(|| EmbeddingError::UnknownCode(c.clone()))?;
                m.row_mut(i).copy_from_slice(v);
            }
            Ok(m)
        };
        Ok(DemographicTables {
            sex: take("sex", sex)?,
            region: take("region", region)?,
            birth_year: take("birth_year", birth_year)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub embeddings: EmbeddingSet,
    /// Present for the trainers that see demographics (AE, NCF).
    pub demographics: Option<DemographicTables>,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Anything that turns a corpus into embeddings given a seed.
pub trait Trainer: Sync {
    fn method(&self) -> Method;
    fn train(&self, corpus: &Corpus, seed: u64) -> Result<TrainOutput, TrainError>;
}

/// One configured trainer, as selected in a run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TrainerConfig {
    Ae(AeConfig),
    Ncf(NcfConfig),
    Cbow(CbowConfig),
    Cbowa(CbowaConfig),
    Behrt(BehrtConfig),
    Random { dim: usize },
}

impl TrainerConfig {
    pub fn default_for(method: Method) -> TrainerConfig {
        match method {
            Method::Ae => TrainerConfig::Ae(AeConfig::default()),
            Method::Ncf => TrainerConfig::Ncf(NcfConfig::default()),
            Method::Cbow => TrainerConfig::Cbow(CbowConfig::default()),
            Method::Cbowa => TrainerConfig::Cbowa(CbowaConfig::default()),
            Method::Behrt => TrainerConfig::Behrt(BehrtConfig::default()),
            Method::Random => TrainerConfig::Random { dim: 110 },
        }
    }
}

impl Trainer for TrainerConfig {
    fn method(&self) -> Method {
        match self {
            TrainerConfig::Ae(_) => Method::Ae,
            TrainerConfig::Ncf(_) => Method::Ncf,
            TrainerConfig::Cbow(_) => Method::Cbow,
            TrainerConfig::Cbowa(_) => Method::Cbowa,
            TrainerConfig::Behrt(_) => Method::Behrt,
            TrainerConfig::Random { .. } => Method::Random,
        }
    }

    fn train(&self, corpus: &Corpus, seed: u64) -> Result<TrainOutput, TrainError> {
        match self {
            TrainerConfig::Ae(c) => ae::train_ae(corpus, &AeConfig { seed, ..c.clone() }),
            TrainerConfig::Ncf(c) => ncf::train_ncf(corpus, &NcfConfig { seed, ..c.clone() }),
            TrainerConfig::Cbow(c) => cbow::train_cbow(corpus, &CbowConfig { seed, ..c.clone() }),
            TrainerConfig::Cbowa(c) => cbowa::train_cbowa(corpus, &CbowaConfig { seed, ..c.clone() }),
            TrainerConfig::Behrt(c) => behrt::train_behrt(corpus, &BehrtConfig { seed, ..c.clone() }),
            TrainerConfig::Random { dim } => Ok(TrainOutput {
                embeddings: EmbeddingSet::random(corpus.vocabulary().clone(), *dim, seed, corpus.fingerprint()),
                demographics: None,
                epoch_losses: Vec::new(),
            }),
        }
    }
}

/// Fails with [`TrainError::Divergence`] on a non-finite loss.
pub(crate) fn check_finite(loss: f64, method: Method, epoch: usize, step: usize) -> Result<(), TrainError> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(TrainError::Divergence { method, epoch, step })
    }
}
