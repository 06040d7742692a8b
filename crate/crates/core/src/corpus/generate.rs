//! Synthetic EHR-like corpora with planted comorbidity clusters.
//!
//! Codes are split into contiguous clusters. Each patient is assigned a few
//! clusters (their "conditions"); every visit picks one of them and fills its
//! codes from that cluster with probability `cluster_affinity`, otherwise
//! from a global Zipf distribution over a seeded popularity ranking. The
//! planted pair list contains every within-cluster pair.

use rand::Rng;
use rand_distr::{Distribution, Geometric, Poisson};
use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusError, LoadOptions, RawPatient, RawVisit, DEFAULT_MIN_VISITS};
use crate::eval::pairs::{Pair, PairList, Relation};
use crate::rng;

/// Largest universe expressible as `[A-Z][0-9][0-9]` codes.
pub const MAX_VOCAB: usize = 26 * 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_patients: usize,
    pub vocab_size: usize,
    pub n_clusters: usize,
    pub cluster_affinity: f64,
    pub mean_visits: f64,
    pub mean_codes_per_visit: f64,
    pub zipf_exponent: f64,
    /// Number of distinct clusters a patient's visits draw from.
    pub clusters_per_patient: usize,
    /// Mean gap between consecutive visits, in days.
    pub mean_visit_gap_days: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_patients: 1000,
            vocab_size: 200,
            n_clusters: 20,
            cluster_affinity: 0.9,
            mean_visits: 18.73,
            mean_codes_per_visit: 1.36,
            zipf_exponent: 1.0,
            clusters_per_patient: 2,
            mean_visit_gap_days: 60.0,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |field: &'static str, message: String| Err(CorpusError::InvalidConfig { field, message });
        if self.n_patients == 0 {
            return bad("n_patients", "must be positive".into());
        }
        if self.vocab_size == 0 || self.vocab_size > MAX_VOCAB {
            return bad("vocab_size", format!("must be in [1, {MAX_VOCAB}], got {}", self.vocab_size));
        }
        if self.n_clusters == 0 || self.n_clusters > self.vocab_size {
            return bad(
                "n_clusters",
                format!("must be in [1, vocab_size={}], got {}", self.vocab_size, self.n_clusters),
            );
        }
        if !(self.cluster_affinity > 0.0 && self.cluster_affinity <= 1.0) {
            return bad("cluster_affinity", format!("must be in (0,1], got {}", self.cluster_affinity));
        }
        if !(self.mean_visits.is_finite() && self.mean_visits > 0.0) {
            return bad("mean_visits", format!("must be positive, got {}", self.mean_visits));
        }
        if !(self.mean_codes_per_visit.is_finite() && self.mean_codes_per_visit > 0.0) {
            return bad("mean_codes_per_visit", format!("must be positive, got {}", self.mean_codes_per_visit));
        }
        if !(self.zipf_exponent.is_finite() && self.zipf_exponent >= 0.0) {
            return bad("zipf_exponent", format!("must be non-negative, got {}", self.zipf_exponent));
        }
        if self.clusters_per_patient == 0 {
            return bad("clusters_per_patient", "must be positive".into());
        }
        if !(self.mean_visit_gap_days.is_finite() && self.mean_visit_gap_days >= 0.0) {
            return bad("mean_visit_gap_days", format!("must be non-negative, got {}", self.mean_visit_gap_days));
        }
        Ok(())
    }

    /// Cluster of universe code `i`: contiguous blocks of near-equal size.
    pub fn cluster_of(&self, i: usize) -> usize {
        i * self.n_clusters / self.vocab_size
    }
}

/// Name of the `i`-th code in the synthetic universe: `A00`, `A01`, ... `Z99`.
pub fn synthetic_code(i: usize) -> String {
    assert!(i < MAX_VOCAB);
    format!("{}{:02}", char::from(b'A' + (i / 100) as u8), i % 100)
}

/// Rate of a Poisson whose zero-truncated mean equals `mean`.
fn zero_truncated_rate(mean: f64) -> f64 {
    if mean <= 1.0 {
        return 0.0;
    }
    let f = |l: f64| l / (1.0 - (-l).exp());
    let (mut lo, mut hi) = (1e-12, mean + 10.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < mean {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

struct CumulativeTable {
    cumulative: Vec<f64>,
    items: Vec<usize>,
}

impl CumulativeTable {
    fn new(weights: &[(usize, f64)]) -> Self {
        let mut acc = 0.0;
        let mut cumulative = Vec::with_capacity(weights.len());
        for &(_, w) in weights {
            acc += w;
            cumulative.push(acc);
        }
        CumulativeTable { cumulative, items: weights.iter().map(|&(i, _)| i).collect() }
    }

    fn sample(&self, rng: &mut impl Rng) -> usize {
        let total = *self.cumulative.last().expect("non-empty table");
        let u = rng.random::<f64>() * total;
        let pos = self.cumulative.partition_point(|&c| c <= u).min(self.items.len() - 1);
        self.items[pos]
    }
}

pub fn generate_corpus(cfg: &GeneratorConfig) -> Result<(Corpus, PairList), CorpusError> {
    cfg.validate()?;
    let mut rng = rng::seeded(cfg.seed);
    let v = cfg.vocab_size;
    let codes: Vec<String> = (0..v).map(synthetic_code).collect();

    let mut clusters: Vec<Vec<usize>> = vec![Vec::new(); cfg.n_clusters];
    for i in 0..v {
        clusters[cfg.cluster_of(i)].push(i);
    }

    let popularity = rng::permutation(&mut rng, v);
    let zipf_weights: Vec<(usize, f64)> = popularity
        .iter()
        .enumerate()
        .map(|(rank, &code)| (code, 1.0 / ((rank + 1) as f64).powf(cfg.zipf_exponent)))
        .collect();
    let zipf = CumulativeTable::new(&zipf_weights);

    let extra_visits = (cfg.mean_visits - DEFAULT_MIN_VISITS as f64).max(0.0);
    let visit_dist = Geometric::new(1.0 / (extra_visits + 1.0)).expect("p in (0,1]");
    let gap_dist = Geometric::new(1.0 / (cfg.mean_visit_gap_days + 1.0)).expect("p in (0,1]");
    let rate = zero_truncated_rate(cfg.mean_codes_per_visit);
    let code_count_dist = (rate > 0.0).then(|| Poisson::new(rate).expect("positive rate"));
    let per_patient = cfg.clusters_per_patient.min(cfg.n_clusters);

    let mut raw = Vec::with_capacity(cfg.n_patients);
    for pid in 0..cfg.n_patients {
        let sex: u8 = rng.random_range(0..2);
        let region: u8 = rng.random_range(0..10);
        let birth_year: u16 = rng.random_range(1910..=1969);
        let own_clusters: Vec<usize> = rng::permutation(&mut rng, cfg.n_clusters)[..per_patient].to_vec();

        let n_visits = DEFAULT_MIN_VISITS + visit_dist.sample(&mut rng) as usize;
        let mut day: u64 = 0;
        let mut visits = Vec::with_capacity(n_visits);
        for vi in 0..n_visits {
            if vi > 0 {
                day += gap_dist.sample(&mut rng);
            }
            let cluster = &clusters[own_clusters[rng.random_range(0..per_patient)]];
            let n_codes = match &code_count_dist {
                None => 1,
                Some(d) => loop {
                    let k = d.sample(&mut rng) as usize;
                    if k >= 1 {
                        break k.min(v);
                    }
                },
            };
            let mut chosen: Vec<usize> = Vec::with_capacity(n_codes);
            for _ in 0..n_codes {
                for _attempt in 0..100 {
                    let c = if rng.random::<f64>() < cfg.cluster_affinity {
                        cluster[rng.random_range(0..cluster.len())]
                    } else {
                        zipf.sample(&mut rng)
                    };
                    if !chosen.contains(&c) {
                        chosen.push(c);
                        break;
                    }
                }
            }
            chosen.sort_unstable();
            visits.push(RawVisit {
                d: u32::try_from(day).unwrap_or(u32::MAX),
                codes: chosen.iter().map(|&c| codes[c].clone()).collect(),
            });
        }
        raw.push(RawPatient { id: format!("p{:06}", pid + 1), sex, region, birth_year, visits });
    }

    let corpus = Corpus::from_raw(raw, LoadOptions::default())?;

    let mut pairs = Vec::new();
    for members in &clusters {
        for (i, &a) in members.iter().enumerate() {
            for &b in &members[i + 1..] {
                pairs.push(Pair::new(&codes[a], &codes[b], "planted", Relation::Comorbid).expect("distinct codes"));
            }
        }
    }
    let pairs = PairList::from_pairs(pairs).0;
    Ok((corpus, pairs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashMap;

    #[test]
    fn code_names() {
        assert_eq!(synthetic_code(0), "A00");
        assert_eq!(synthetic_code(110), "B10");
        assert_eq!(synthetic_code(2599), "Z99");
    }

    #[test]
    fn truncated_rate_matches_mean() {
        let l = zero_truncated_rate(1.36);
        assert!((l / (1.0 - (-l).exp()) - 1.36).abs() < 1e-9);
    }

    #[test]
    fn seeded_determinism() {
        let cfg = GeneratorConfig { seed: 7, n_patients: 50, ..Default::default() };
        let (a, pa) = generate_corpus(&cfg).unwrap();
        let (b, pb) = generate_corpus(&cfg).unwrap();
        assert_eq!(a.to_jsonl_bytes(), b.to_jsonl_bytes());
        assert_eq!(pa, pb);
        let (c, _) = generate_corpus(&GeneratorConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn too_many_clusters_rejected() {
        let cfg = GeneratorConfig { vocab_size: 10, n_clusters: 11, ..Default::default() };
        let err = generate_corpus(&cfg).unwrap_err();
        assert!(matches!(err, CorpusError::InvalidConfig { field: "n_clusters", .. }));
    }

    #[test]
    fn planted_pairs_are_within_cluster_and_unique() {
        let cfg = GeneratorConfig { vocab_size: 50, n_clusters: 7, n_patients: 10, ..Default::default() };
        let (_, pairs) = generate_corpus(&cfg).unwrap();
        let idx = |c: &str| (0..50).position(|i| synthetic_code(i) == c).unwrap();
        let mut expected = 0;
        for k in 0..7 {
            let n = (0..50).filter(|&i| cfg.cluster_of(i) == k).count();
            expected += n * (n - 1) / 2;
        }
        assert_eq!(pairs.len(), expected);
        for p in pairs.pairs() {
            assert_eq!(cfg.cluster_of(idx(&p.a)), cfg.cluster_of(idx(&p.b)));
            assert!(p.a < p.b);
        }
    }

    #[test]
    fn planted_pairs_co_occur_far_more_than_cross_cluster_pairs() {
        let cfg = GeneratorConfig {
            vocab_size: 200,
            n_clusters: 20,
            cluster_affinity: 0.9,
            n_patients: 5000,
            seed: 11,
            ..Default::default()
        };
        let (corpus, _) = generate_corpus(&cfg).unwrap();
        let vocab = corpus.vocabulary();
        let universe: Vec<usize> = vocab
            .codes()
            .iter()
            .map(|c| (0..200).position(|i| synthetic_code(i) == *c).unwrap())
            .collect();
        let mut co: HashMap<(usize, usize), u64> = HashMap::new();
        for p in corpus.patients() {
            for v in &p.visits {
                for (i, &a) in v.codes.iter().enumerate() {
                    for &b in &v.codes[i + 1..] {
                        let (x, y) = (universe[a].min(universe[b]), universe[a].max(universe[b]));
                        *co.entry((x, y)).or_default() += 1;
                    }
                }
            }
        }
        let (mut within, mut n_within, mut cross, mut n_cross) = (0u64, 0u64, 0u64, 0u64);
        for x in 0..200 {
            for y in x + 1..200 {
                let c = co.get(&(x, y)).copied().unwrap_or(0);
                if cfg.cluster_of(x) == cfg.cluster_of(y) {
                    within += c;
                    n_within += 1;
                } else {
                    cross += c;
                    n_cross += 1;
                }
            }
        }
        let within_rate = within as f64 / n_within as f64;
        let cross_rate = cross as f64 / n_cross as f64;
        assert!(within_rate >= 5.0 * cross_rate, "within {within_rate} cross {cross_rate}");
    }

    #[test]
    fn codes_per_visit_matches_target_mean() {
        let cfg = GeneratorConfig { n_patients: 10_000, mean_codes_per_visit: 1.36, seed: 3, ..Default::default() };
        let (corpus, _) = generate_corpus(&cfg).unwrap();
        let stats = corpus.stats();
        assert!((stats.codes_per_visit.mean - 1.36).abs() <= 0.05, "{}", stats.codes_per_visit.mean);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn generated_records_satisfy_invariants(
            n_patients in 1usize..30,
            vocab_size in 1usize..120,
            clusters_frac in 0.0f64..1.0,
            affinity in 0.05f64..=1.0,
            mean_visits in 1.0f64..25.0,
            mean_codes in 0.5f64..3.0,
            seed in any::<u64>(),
        ) {
            let n_clusters = 1 + ((vocab_size - 1) as f64 * clusters_frac) as usize;
            let cfg = GeneratorConfig {
                n_patients, vocab_size, n_clusters, cluster_affinity: affinity,
                mean_visits, mean_codes_per_visit: mean_codes, seed, ..Default::default()
            };
            let (corpus, pairs) = generate_corpus(&cfg).unwrap();
            prop_assert_eq!(corpus.len(), n_patients);
            for p in corpus.patients() {
                prop_assert!(p.visits.len() >= 5);
                prop_assert!(p.visits.windows(2).all(|w| w[0].date_offset_days <= w[1].date_offset_days));
                for v in &p.visits {
                    prop_assert!(!v.codes.is_empty());
                    let mut c = v.codes.clone();
                    c.dedup();
                    prop_assert_eq!(c.len(), v.codes.len());
                    prop_assert!(v.codes.iter().all(|&i| i < corpus.vocabulary().len()));
                }
            }
            for p in pairs.pairs() {
                prop_assert!(p.a != p.b);
            }
        }
    }
}
