//! Disease-concept embeddings learned from coded visit histories, and the
//! benchmarks used to compare them.
//!
//! The crate is organised around the shared artifact, an [`EmbeddingSet`]:
//!
//! - [`corpus`] holds the patient/visit data model, its JSON-lines format and
//!   a synthetic generator with planted comorbidity clusters.
//! - [`embedding`] and [`linalg`] provide the embedding file format, cosine
//!   similarity and exact nearest-neighbour search.
//! - [`train`] contains the five trainers: a denoising autoencoder, neural
//!   collaborative filtering, CBOW, time-aware attention CBOW and a small
//!   BEHRT-style masked language model.
//! - [`eval`] contains the benchmarks: neighbourhood hit-rates against pair
//!   lists, t-SNE projection, the downstream transfer-learning harness and
//!   the run-to-run / sample-size reliability analyses.

pub mod corpus;
pub mod embedding;
pub mod eval;
pub mod linalg;
pub mod nn;
pub mod rng;
pub mod train;

pub use corpus::{ConceptVocabulary, Corpus, PatientRecord, Visit};
pub use embedding::{EmbeddingMeta, EmbeddingSet, Method, Neighbourhood};
