//! Run configuration: one TOML file with a section per stage, overridable
//! from the command line.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use embench_core::corpus::{GeneratorConfig, DEFAULT_MIN_VISITS};
use embench_core::eval::downstream::ClassifierConfig;
use embench_core::eval::neighbours::DEFAULT_K;
use embench_core::eval::reliability::DEFAULT_FRACTIONS;
use embench_core::eval::tsne::TsneConfig;
use embench_core::train::{AeConfig, BehrtConfig, CbowConfig, CbowaConfig, NcfConfig, TrainerConfig};
use embench_core::Method;

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drives every stage; per-section `seed` keys are overwritten by it.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub corpus: CorpusSection,
    pub generate: GeneratorConfig,
    pub train: TrainSection,
    pub evaluate: EvaluateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("out"),
            corpus: CorpusSection::default(),
            generate: GeneratorConfig::default(),
            train: TrainSection::default(),
            evaluate: EvaluateSection::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    /// Existing corpus to use instead of `<output_dir>/corpus.jsonl`.
    pub path: Option<PathBuf>,
    pub min_visits: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection { path: None, min_visits: DEFAULT_MIN_VISITS }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub methods: Vec<String>,
    pub ae: AeConfig,
    pub ncf: NcfConfig,
    pub cbow: CbowConfig,
    pub cbowa: CbowaConfig,
    pub behrt: BehrtConfig,
    /// Width of `random` baseline embeddings.
    pub random_dim: Option<usize>,
}

impl TrainSection {
    pub fn trainer(&self, method: Method) -> TrainerConfig {
        match method {
            Method::Ae => TrainerConfig::Ae(self.ae.clone()),
            Method::Ncf => TrainerConfig::Ncf(self.ncf.clone()),
            Method::Cbow => TrainerConfig::Cbow(self.cbow.clone()),
            Method::Cbowa => TrainerConfig::Cbowa(self.cbowa.clone()),
            Method::Behrt => TrainerConfig::Behrt(self.behrt.clone()),
            Method::Random => TrainerConfig::Random { dim: self.random_dim.unwrap_or(110) },
        }
    }
}

/// The evaluations a run can request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Evaluation {
    Neighbours,
    HitRate,
    Tsne,
    Downstream,
    Reliability,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub run: Vec<Evaluation>,
    /// Embeddings to evaluate; defaults to `train.methods`.
    pub methods: Vec<String>,
    /// Pair lists; defaults to `<output_dir>/planted_pairs.csv`.
    pub pairs: Vec<PathBuf>,
    pub neighbours: NeighboursSection,
    pub hit_rate: HitRateSection,
    pub tsne: TsneConfig,
    pub downstream: DownstreamSection,
    pub reliability: ReliabilitySection,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection {
            run: vec![Evaluation::Neighbours, Evaluation::HitRate],
            methods: Vec::new(),
            pairs: Vec::new(),
            neighbours: NeighboursSection::default(),
            hit_rate: HitRateSection::default(),
            tsne: TsneConfig::default(),
            downstream: DownstreamSection::default(),
            reliability: ReliabilitySection::default(),
        }
    }
}

impl EvaluateSection {
    pub fn requested(&self, e: Evaluation) -> bool {
        self.run.contains(&e)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeighboursSection {
    /// Probe codes; every code when empty.
    pub probes: Vec<String>,
    pub k: usize,
}

impl Default for NeighboursSection {
    fn default() -> Self {
        NeighboursSection { probes: Vec::new(), k: DEFAULT_K }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HitRateSection {
    pub l_min: usize,
    /// Clamped to `V - 1`.
    pub l_max: usize,
}

impl Default for HitRateSection {
    fn default() -> Self {
        HitRateSection { l_min: 1, l_max: 50 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DownstreamSection {
    /// Most frequent code when empty.
    pub targets: Vec<String>,
    /// Classifier seeds are `seed + 0 .. seed + runs`.
    pub runs: usize,
    pub classifier: ClassifierConfig,
}

impl Default for DownstreamSection {
    fn default() -> Self {
        DownstreamSection { targets: Vec::new(), runs: 5, classifier: ClassifierConfig::default() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReliabilitySection {
    /// Trainers to rerun; defaults to the evaluated methods.
    pub methods: Vec<String>,
    pub n_runs: usize,
    pub fractions: Vec<f64>,
    pub pin_seed: bool,
    pub max_pairs: Option<usize>,
}

impl Default for ReliabilitySection {
    fn default() -> Self {
        ReliabilitySection { methods: Vec::new(), n_runs: 10, fractions: DEFAULT_FRACTIONS.to_vec(), pin_seed: false, max_pairs: None }
    }
}

pub fn parse_methods(names: &[String]) -> Result<Vec<Method>> {
    let mut out: Vec<Method> = Vec::new();
    for n in names {
        let m: Method = n.parse().map_err(anyhow::Error::msg)?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    Ok(out)
}

/// Sets `dotted.key = value` in a TOML table. The value is parsed as TOML
/// when possible (numbers, booleans, arrays) and taken as a string otherwise.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').with_context(|| format!("override {assignment:?} is not key=value"))?;
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in parents {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .with_context(|| format!("override {key:?}: {p:?} is not a section"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Reads `path` (or starts empty), applies the overrides and the seed, and
/// pushes the global seed into every section.
pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<RunConfig> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            text.parse::<toml::Table>().with_context(|| format!("parsing config {}", p.display()))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let mut cfg: RunConfig = table.try_into().context("invalid config")?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.generate.seed = cfg.seed;
    cfg.evaluate.tsne.seed = cfg.seed;
    cfg.evaluate.downstream.classifier.seed = cfg.seed;
    if cfg.evaluate.hit_rate.l_min == 0 {
        bail!("evaluate.hit_rate.l_min must be at least 1");
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_create_sections_and_parse_types() {
        let mut t = toml::Table::new();
        apply_override(&mut t, "train.cbow.dim=8").unwrap();
        apply_override(&mut t, "train.methods=[\"cbow\",\"ae\"]").unwrap();
        apply_override(&mut t, "output_dir=some/dir").unwrap();
        let cfg: RunConfig = t.try_into().unwrap();
        assert_eq!(cfg.train.cbow.dim, 8);
        assert_eq!(cfg.train.methods, ["cbow", "ae"]);
        assert_eq!(cfg.output_dir, PathBuf::from("some/dir"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut t = toml::Table::new();
        apply_override(&mut t, "train.cbow.dimm=8").unwrap();
        assert!(t.try_into::<RunConfig>().is_err());
        assert!(apply_override(&mut toml::Table::new(), "novalue").is_err());
    }

    #[test]
    fn global_seed_reaches_sections() {
        let cfg = load(None, &["seed=4".into()], None).unwrap();
        assert_eq!((cfg.generate.seed, cfg.evaluate.tsne.seed), (4, 4));
        let cfg = load(None, &["seed=4".into()], Some(9)).unwrap();
        assert_eq!(cfg.generate.seed, 9);
        assert_eq!(parse_methods(&["cbow".into(), "CBOW".into(), "ae".into()]).unwrap(), [Method::Cbow, Method::Ae]);
    }
}
