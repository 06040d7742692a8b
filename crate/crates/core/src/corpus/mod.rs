//! Patient visit corpora: the data model, the JSON-lines file format, and
//! descriptive statistics.
//!
//! A corpus file holds one patient per line:
//!
//! ```text
//! {"id":"p000001","sex":0,"region":3,"birth_year":1950,"visits":[{"d":0,"codes":["I10","E78"]},{"d":41,"codes":["M79"]}]}
//! ```
//!
//! `d` is the visit's offset in days from the patient's first record. The
//! vocabulary is never declared; it is the sorted set of codes observed.

mod generate;
mod stats;

pub use generate::{generate_corpus, GeneratorConfig};
pub use stats::CorpusStats;

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Calendar year at which day offset 0 is anchored when ages are needed.
pub const STUDY_START_YEAR: i32 = 1985;
pub const MIN_BIRTH_YEAR: u16 = 1888;
pub const MAX_BIRTH_YEAR: u16 = 1998;
pub const N_BIRTH_YEARS: usize = (MAX_BIRTH_YEAR - MIN_BIRTH_YEAR + 1) as usize;
pub const N_SEXES: usize = 2;
pub const N_REGIONS: usize = 10;
/// Cohort rule: patients need at least this many visits.
pub const DEFAULT_MIN_VISITS: usize = 5;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: duplicate patient id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: patient {id:?}: non-monotonic visit dates")]
    NonMonotonicDates { line: usize, id: String },
    #[error("line {line}: patient {id:?} has {visits} visits, fewer than the minimum {min}")]
    TooFewVisits { line: usize, id: String, visits: usize, min: usize },
    #[error("line {line}: patient {id:?}: {message}")]
    InvalidRecord { line: usize, id: String, message: String },
    #[error("invalid code {0:?}: codes must be non-empty and contain no whitespace, commas or quotes")]
    InvalidCode(String),
    #[error("invalid generator config: {field}: {message}")]
    InvalidConfig { field: &'static str, message: String },
}

/// Sorted, unique set of concept codes with a reverse index.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConceptVocabulary {
    codes: Vec<String>,
    index: HashMap<String, usize>,
}

impl ConceptVocabulary {
    /// Builds a vocabulary from any collection of codes; duplicates collapse
    /// and the order becomes lexicographic.
    pub fn from_codes<I, S>(codes: I) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut codes: Vec<String> = codes.into_iter().map(Into::into).collect();
        for c in &codes {
            validate_code(c)?;
        }
        codes.sort_unstable();
        codes.dedup();
        let index = codes.iter().enumerate().map(|(i, c)| (c.clone(), i)).collect();
        Ok(ConceptVocabulary { codes, index })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn codes(&self) -> &[String] {
        &self.codes
    }

    pub fn code(&self, i: usize) -> &str {
        &self.codes[i]
    }

    pub fn index_of(&self, code: &str) -> Option<usize> {
        self.index.get(code).copied()
    }

    pub fn contains(&self, code: &str) -> bool {
        self.index.contains_key(code)
    }
}

fn validate_code(c: &str) -> Result<(), CorpusError> {
    if c.is_empty() || c.chars().any(|ch| ch.is_whitespace() || ch == ',' || ch == '"') {
        return Err(CorpusError::InvalidCode(c.to_string()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Visit {
    pub date_offset_days: u32,
    /// Vocabulary indices, unique within the visit.
    pub codes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatientRecord {
    pub id: String,
    pub sex: u8,
    pub region: u8,
    pub birth_year: u16,
    pub visits: Vec<Visit>,
}

impl PatientRecord {
    /// Age in whole days at a given day offset, anchoring offset 0 at the
    /// start of [`STUDY_START_YEAR`]. Clamped at zero.
    pub fn age_days_at(&self, date_offset_days: u32) -> u32 {
        let years = (STUDY_START_YEAR - i32::from(self.birth_year)).max(0) as f64;
        (years * 365.25).ceil() as u32 + date_offset_days
    }

    /// Age in completed years at a given day offset.
    pub fn age_years_at(&self, date_offset_days: u32) -> u32 {
        (f64::from(self.age_days_at(date_offset_days)) / 365.25).floor() as u32
    }

    pub fn birth_year_index(&self) -> usize {
        usize::from(self.birth_year - MIN_BIRTH_YEAR)
    }

    pub fn last_visit_date(&self) -> Option<u32> {
        self.visits.last().map(|v| v.date_offset_days)
    }
}

/// A validated set of patients over a shared vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    vocabulary: ConceptVocabulary,
    patients: Vec<PatientRecord>,
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    pub min_visits: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { min_visits: DEFAULT_MIN_VISITS }
    }
}

/// On-disk shape of one patient line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawPatient {
    pub id: String,
    pub sex: u8,
    pub region: u8,
    pub birth_year: u16,
    pub visits: Vec<RawVisit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawVisit {
    pub d: u32,
    pub codes: Vec<String>,
}

impl Corpus {
    /// Validates raw records and derives the vocabulary from the codes they
    /// use. Line numbers in errors are 1-based positions in `raw`.
    pub fn from_raw(raw: Vec<RawPatient>, opts: LoadOptions) -> Result<Self, CorpusError> {
        let mut seen_ids = HashSet::with_capacity(raw.len());
        for (i, p) in raw.iter().enumerate() {
            validate_raw(p, i + 1, opts)?;
            if !seen_ids.insert(p.id.as_str()) {
                return Err(CorpusError::DuplicateId { line: i + 1, id: p.id.clone() });
            }
        }
        let vocabulary = ConceptVocabulary::from_codes(
            raw.iter().flat_map(|p| p.visits.iter().flat_map(|v| v.codes.iter().cloned())),
        )?;
        let patients = raw
            .into_iter()
            .map(|p| PatientRecord {
                visits: p
                    .visits
                    .into_iter()
                    .map(|v| Visit {
                        date_offset_days: v.d,
                        codes: v.codes.iter().map(|c| vocabulary.index[c]).collect(),
                    })
                    .collect(),
                id: p.id,
                sex: p.sex,
                region: p.region,
                birth_year: p.birth_year,
            })
            .collect();
        Ok(Corpus { vocabulary, patients })
    }

    pub fn empty() -> Self {
        Corpus { vocabulary: ConceptVocabulary::default(), patients: Vec::new() }
    }

    pub fn vocabulary(&self) -> &ConceptVocabulary {
        &self.vocabulary
    }

    pub fn patients(&self) -> &[PatientRecord] {
        &self.patients
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn to_raw(&self) -> Vec<RawPatient> {
        self.patients.iter().map(|p| self.raw_patient(p)).collect()
    }

    fn raw_patient(&self, p: &PatientRecord) -> RawPatient {
        RawPatient {
            id: p.id.clone(),
            sex: p.sex,
            region: p.region,
            birth_year: p.birth_year,
            visits: p
                .visits
                .iter()
                .map(|v| RawVisit {
                    d: v.date_offset_days,
                    codes: v.codes.iter().map(|&c| self.vocabulary.code(c).to_string()).collect(),
                })
                .collect(),
        }
    }

    /// A corpus of the given patients (in ascending index order) whose
    /// vocabulary is re-derived from what those patients use.
    pub fn select_patients(&self, indices: &[usize]) -> Corpus {
        let mut idx = indices.to_vec();
        idx.sort_unstable();
        idx.dedup();
        let raw = idx.iter().map(|&i| self.raw_patient(&self.patients[i])).collect();
        Corpus::from_raw(raw, LoadOptions { min_visits: 0 }).expect("subset of a valid corpus is valid")
    }

    /// Per-code number of (visit, code) entries.
    pub fn code_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.vocabulary.len()];
        for p in &self.patients {
            for v in &p.visits {
                for &c in &v.codes {
                    counts[c] += 1;
                }
            }
        }
        counts
    }

    /// Serialises to the JSON-lines format.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), CorpusError> {
        for p in &self.patients {
            let line = serde_json::to_string(&self.raw_patient(p))
                .map_err(|e| CorpusError::Io(std::io::Error::other(e)))?;
            w.write_all(line.as_bytes())?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory cannot fail");
        buf
    }

    /// 64-bit fingerprint of the serialised corpus, used to tag embeddings
    /// with the data they were trained on.
    pub fn fingerprint(&self) -> u64 {
        let digest = Sha256::digest(self.to_jsonl_bytes());
        u64::from_be_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
    }

    pub fn stats(&self) -> CorpusStats {
        CorpusStats::of(self)
    }
}

fn validate_raw(p: &RawPatient, line: usize, opts: LoadOptions) -> Result<(), CorpusError> {
    let invalid = |message: String| CorpusError::InvalidRecord { line, id: p.id.clone(), message };
    if p.id.is_empty() {
        return Err(CorpusError::Malformed { line, message: "empty patient id".into() });
    }
    if usize::from(p.sex) >= N_SEXES {
        return Err(invalid(format!("sex must be 0 or 1, got {}", p.sex)));
    }
    if usize::from(p.region) >= N_REGIONS {
        return Err(invalid(format!("region must be in [0,10), got {}", p.region)));
    }
    if !(MIN_BIRTH_YEAR..=MAX_BIRTH_YEAR).contains(&p.birth_year) {
        return Err(invalid(format!(
            "birth_year must be in [{MIN_BIRTH_YEAR},{MAX_BIRTH_YEAR}], got {}",
            p.birth_year
        )));
    }
    if p.visits.windows(2).any(|w| w[1].d < w[0].d) {
        return Err(CorpusError::NonMonotonicDates { line, id: p.id.clone() });
    }
    for (vi, v) in p.visits.iter().enumerate() {
        if v.codes.is_empty() {
            return Err(invalid(format!("visit {vi} has no codes")));
        }
        let mut seen = HashSet::with_capacity(v.codes.len());
        for c in &v.codes {
            validate_code(c)?;
            if !seen.insert(c.as_str()) {
                return Err(invalid(format!("visit {vi} repeats code {c}")));
            }
        }
    }
    if p.visits.len() < opts.min_visits {
        return Err(CorpusError::TooFewVisits {
            line,
            id: p.id.clone(),
            visits: p.visits.len(),
            min: opts.min_visits,
        });
    }
    Ok(())
}

pub fn read_corpus<R: BufRead>(reader: R, opts: LoadOptions) -> Result<Corpus, CorpusError> {
    let mut raw = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let parsed: RawPatient = serde_json::from_str(&line)
            .map_err(|e| CorpusError::Malformed { line: i + 1, message: e.to_string() })?;
        raw.push(parsed);
    }
    Corpus::from_raw(raw, opts)
}

pub fn load_corpus(path: impl AsRef<Path>, opts: LoadOptions) -> Result<Corpus, CorpusError> {
    read_corpus(BufReader::new(File::open(path)?), opts)
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(path)?);
    corpus.write_jsonl(&mut w)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(id: &str, dates: &[u32], codes: &[&[&str]]) -> String {
        let visits: Vec<RawVisit> = dates
            .iter()
            .zip(codes)
            .map(|(&d, cs)| RawVisit { d, codes: cs.iter().map(|s| s.to_string()).collect() })
            .collect();
        serde_json::to_string(&RawPatient { id: id.into(), sex: 0, region: 3, birth_year: 1950, visits })
            .unwrap()
    }

    fn parse(text: &str) -> Result<Corpus, CorpusError> {
        read_corpus(text.as_bytes(), LoadOptions::default())
    }

    #[test]
    fn minimal_file_loads() {
        let text = line("p1", &[0, 1, 2, 3, 4], &[&["I10"][..]; 5]);
        let c = parse(&text).unwrap();
        assert_eq!(c.vocabulary().len(), 1);
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn exact_key_layout() {
        let text = r#"{"id":"p000001","sex":0,"region":3,"birth_year":1950,"visits":[{"d":0,"codes":["I10","E78"]},{"d":41,"codes":["M79"]}]}"#;
        let c = read_corpus(text.as_bytes(), LoadOptions { min_visits: 1 }).unwrap();
        assert_eq!(c.vocabulary().codes(), &["E78", "I10", "M79"]);
        assert_eq!(c.patients()[0].visits[0].codes, vec![1, 0]);
        assert_eq!(String::from_utf8(c.to_jsonl_bytes()).unwrap(), format!("{text}\n"));
    }

    #[test]
    fn decreasing_dates_rejected() {
        let text = line("p1", &[10, 5, 20, 30, 40], &[&["I10"][..]; 5]);
        let err = parse(&text).unwrap_err();
        assert!(err.to_string().contains("non-monotonic visit dates"), "{err}");
    }

    #[test]
    fn too_few_visits_rejected_unless_overridden() {
        let text = line("short", &[0, 1], &[&["I10"][..]; 2]);
        let err = parse(&text).unwrap_err();
        assert!(matches!(err, CorpusError::TooFewVisits { ref id, .. } if id == "short"));
        assert!(read_corpus(text.as_bytes(), LoadOptions { min_visits: 2 }).is_ok());
    }

    #[test]
    fn duplicate_ids_and_unknown_keys_rejected() {
        let a = line("p1", &[0, 1, 2, 3, 4], &[&["I10"][..]; 5]);
        let err = parse(&format!("{a}\n{a}\n")).unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateId { line: 2, .. }));

        let extra = r#"{"id":"p","sex":0,"region":3,"birth_year":1950,"visits":[],"extra":1}"#;
        let err = read_corpus(extra.as_bytes(), LoadOptions { min_visits: 0 }).unwrap_err();
        assert!(matches!(err, CorpusError::Malformed { line: 1, .. }));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let a = line("p1", &[0, 1, 2, 3, 4], &[&["I10"][..]; 5]);
        let err = parse(&format!("{a}\nnot json\n")).unwrap_err();
        assert!(matches!(err, CorpusError::Malformed { line: 2, .. }), "{err}");
    }

    #[test]
    fn field_ranges_enforced() {
        let bad_region = r#"{"id":"p","sex":0,"region":10,"birth_year":1950,"visits":[]}"#;
        let bad_year = r#"{"id":"p","sex":1,"region":0,"birth_year":1887,"visits":[]}"#;
        let dup_code = r#"{"id":"p","sex":1,"region":0,"birth_year":1950,"visits":[{"d":0,"codes":["A","A"]}]}"#;
        let opts = LoadOptions { min_visits: 0 };
        for t in [bad_region, bad_year, dup_code] {
            assert!(matches!(read_corpus(t.as_bytes(), opts), Err(CorpusError::InvalidRecord { .. })), "{t}");
        }
    }

    #[test]
    fn empty_corpus_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        save_corpus(&Corpus::empty(), &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap().len(), 0);
        let c = load_corpus(&path, LoadOptions::default()).unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn ages_are_anchored_at_study_start() {
        let p = PatientRecord { id: "x".into(), sex: 0, region: 0, birth_year: 1950, visits: vec![] };
        assert_eq!(p.age_years_at(0), 35);
        assert_eq!(p.age_years_at(366), 36);
        let young = PatientRecord { birth_year: 1990, ..p };
        assert_eq!(young.age_days_at(10), 10);
    }

    #[test]
    fn select_patients_rederives_vocabulary() {
        let text = format!(
            "{}\n{}\n",
            line("a", &[0, 1, 2, 3, 4], &[&["I10"][..]; 5]),
            line("b", &[0, 1, 2, 3, 4], &[&["E78"][..]; 5])
        );
        let c = parse(&text).unwrap();
        let sub = c.select_patients(&[1]);
        assert_eq!(sub.vocabulary().codes(), &["E78"]);
        assert_eq!(sub.patients()[0].visits[0].codes, vec![0]);
    }
}
