//! The four pipeline stages. Each writes into the output directory and
//! refreshes its manifest; a stage that fails part-way keeps whatever it
//! completed and reports every failure.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use log::{info, warn};

use embench_core::corpus::{generate_corpus, load_corpus, save_corpus, Corpus, LoadOptions};
use embench_core::eval::downstream::{self, build_task, train_classifier, Initialisation, SCORE_HEADER};
use embench_core::eval::hit_rate::{hit_rate_curves, write_hit_rate_rows, HIT_RATE_HEADER};
use embench_core::eval::neighbours::{neighbour_table, write_neighbour_table};
use embench_core::eval::pairs::{read_pairlist, PairList};
use embench_core::eval::reliability::{sample_size_sweep, VariabilityConfig, PAIR_DETAIL_HEADER, RELIABILITY_HEADER};
use embench_core::eval::tsne::tsne;
use embench_core::train::{DemographicTables, Trainer};
use embench_core::{EmbeddingSet, Method};

use crate::config::{parse_methods, Evaluation, RunConfig};
use crate::manifest;
use crate::report;

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const PAIRS_FILE: &str = "planted_pairs.csv";
pub const STATS_FILE: &str = "stats.txt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const TRAIN_LOG_HEADER: &str = "method,seed,epoch,loss";
pub const HIT_RATE_FILE: &str = "hit_rate.csv";
pub const DOWNSTREAM_FILE: &str = "downstream.csv";
pub const RELIABILITY_FILE: &str = "reliability.csv";
pub const RELIABILITY_DETAIL_FILE: &str = "reliability_detail.csv";

pub fn embedding_file(method: Method, seed: u64) -> String {
    format!("{}.{seed}.emb", method.name().to_ascii_lowercase())
}

pub fn demographic_file(method: Method, seed: u64, kind: &str) -> String {
    format!("{}.{seed}.{kind}.emb", method.name().to_ascii_lowercase())
}

fn slug(method: Method) -> String {
    method.name().to_ascii_lowercase()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn prepare_output(cfg: &RunConfig) -> Result<&Path> {
    std::fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating output directory {}", cfg.output_dir.display()))?;
    Ok(&cfg.output_dir)
}

fn corpus_path(cfg: &RunConfig) -> PathBuf {
    cfg.corpus.path.clone().unwrap_or_else(|| cfg.output_dir.join(CORPUS_FILE))
}

fn load_run_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let path = corpus_path(cfg);
    if !path.exists() {
        bail!("missing corpus {} (run `embench generate` or set corpus.path)", path.display());
    }
    let corpus = load_corpus(&path, LoadOptions { min_visits: cfg.corpus.min_visits })
        .with_context(|| format!("loading corpus {}", path.display()))?;
    info!("loaded {} patients over {} codes from {}", corpus.len(), corpus.vocabulary().len(), path.display());
    Ok(corpus)
}

/// Joins a list of per-item failures into one error, or succeeds.
fn settle(stage: &str, failures: Vec<String>) -> Result<()> {
    if failures.is_empty() {
        Ok(())
    } else {
        Err(anyhow!("{stage}: {} failure(s):\n  {}", failures.len(), failures.join("\n  ")))
    }
}

pub fn generate(cfg: &RunConfig) -> Result<()> {
    let dir = prepare_output(cfg)?;
    let (corpus, pairs) = generate_corpus(&cfg.generate)?;
    save_corpus(&corpus, dir.join(CORPUS_FILE))?;
    pairs.save(dir.join(PAIRS_FILE))?;
    let stats = corpus.stats().to_string();
    std::fs::write(dir.join(STATS_FILE), &stats)?;
    print!("{stats}");
    println!("planted pairs: {}", pairs.len());
    manifest::write(dir)
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let methods = parse_methods(&cfg.train.methods)?;
    if methods.is_empty() {
        bail!("no trainers requested (set train.methods)");
    }
    let dir = prepare_output(cfg)?;
    let corpus = load_run_corpus(cfg)?;
    let mut log_rows = read_train_log(&dir.join(TRAIN_LOG_FILE))?;
    let mut failures = Vec::new();
    for m in methods {
        info!("training {m} with seed {}", cfg.seed);
        let out = match cfg.train.trainer(m).train(&corpus, cfg.seed) {
            Ok(out) => out,
            Err(e) => {
                log::error!("{m}: {e}");
                failures.push(format!("{m}: {e}"));
                continue;
            }
        };
        out.embeddings.save(dir.join(embedding_file(m, cfg.seed)))?;
        if let Some(tables) = &out.demographics {
            for (kind, set) in tables.to_embedding_sets(out.embeddings.meta) {
                set.save(dir.join(demographic_file(m, cfg.seed, kind)))?;
            }
        }
        let method = m.name().to_string();
        log_rows.retain(|r| !(r.0 == method && r.1 == cfg.seed));
        log_rows.extend(out.epoch_losses.iter().enumerate().map(|(e, &l)| (method.clone(), cfg.seed, e + 1, l)));
        log_rows.sort_by(|a, b| (&a.0, a.1, a.2).cmp(&(&b.0, b.1, b.2)));
        write_train_log(&dir.join(TRAIN_LOG_FILE), &log_rows)?;
        println!("{m}: wrote {} ({} codes, dim {})", embedding_file(m, cfg.seed), out.embeddings.len(), out.embeddings.dim());
    }
    manifest::write(dir)?;
    settle("train", failures)
}

type LogRow = (String, u64, usize, f64);

fn read_train_log(path: &Path) -> Result<Vec<LogRow>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let rows = embench_core::eval::csv::read_rows(BufReader::new(File::open(path)?), TRAIN_LOG_HEADER)
        .with_context(|| format!("reading {}", path.display()))?;
    rows.into_iter()
        .map(|r| Ok((r[0].clone(), r[1].parse()?, r[2].parse()?, r[3].parse()?)))
        .collect::<Result<_>>()
        .with_context(|| format!("parsing {}", path.display()))
}

fn write_train_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "{TRAIN_LOG_HEADER}")?;
    for (m, s, e, l) in rows {
        writeln!(w, "{m},{s},{e},{l}")?;
    }
    w.flush()?;
    Ok(())
}

fn load_method_embeddings(cfg: &RunConfig, methods: &[Method]) -> Result<Vec<(Method, EmbeddingSet)>> {
    methods
        .iter()
        .map(|&m| {
            let path = cfg.output_dir.join(embedding_file(m, cfg.seed));
            if !path.exists() {
                bail!("missing embedding file {} (run `embench train` for {m} with seed {})", path.display(), cfg.seed);
            }
            Ok((m, EmbeddingSet::load(&path).with_context(|| format!("loading {}", path.display()))?))
        })
        .collect()
}

fn load_demographics(cfg: &RunConfig, m: Method) -> Result<Option<DemographicTables>> {
    let paths: Vec<PathBuf> =
        DemographicTables::KINDS.iter().map(|k| cfg.output_dir.join(demographic_file(m, cfg.seed, k))).collect();
    if !paths.iter().all(|p| p.exists()) {
        return Ok(None);
    }
    let sets = paths.iter().map(|p| EmbeddingSet::load(p).with_context(|| format!("loading {}", p.display()))).collect::<Result<Vec<_>>>()?;
    Ok(Some(DemographicTables::from_embedding_sets(&sets[0], &sets[1], &sets[2])?))
}

fn load_pairs(cfg: &RunConfig) -> Result<PairList> {
    let paths = if cfg.evaluate.pairs.is_empty() { vec![cfg.output_dir.join(PAIRS_FILE)] } else { cfg.evaluate.pairs.clone() };
    let mut all = Vec::new();
    for p in &paths {
        let file = File::open(p).with_context(|| format!("missing pair list {}", p.display()))?;
        let (list, warnings) = read_pairlist(BufReader::new(file)).with_context(|| format!("reading {}", p.display()))?;
        for w in warnings {
            warn!("{}: {w:?}", p.display());
        }
        all.extend(list.pairs().iter().cloned());
    }
    Ok(PairList::from_pairs(all).0)
}

pub fn evaluate(cfg: &RunConfig) -> Result<()> {
    let ev = &cfg.evaluate;
    if ev.run.is_empty() {
        bail!("no evaluations requested (set evaluate.run)");
    }
    let names = if ev.methods.is_empty() { &cfg.train.methods } else { &ev.methods };
    let methods = parse_methods(names)?;
    if methods.is_empty() {
        bail!("no methods to evaluate (set evaluate.methods or train.methods)");
    }
    let dir = prepare_output(cfg)?;
    let needs_embeddings = [Evaluation::Neighbours, Evaluation::HitRate, Evaluation::Tsne, Evaluation::Downstream]
        .iter()
        .any(|&e| ev.requested(e));
    let embeddings = if needs_embeddings { load_method_embeddings(cfg, &methods)? } else { Vec::new() };
    let pairs = if ev.requested(Evaluation::HitRate) { Some(load_pairs(cfg)?) } else { None };
    let corpus = if ev.requested(Evaluation::Downstream) || ev.requested(Evaluation::Reliability) {
        Some(load_run_corpus(cfg)?)
    } else {
        None
    };

    let mut failures = Vec::new();
    let mut record = |what: &str, r: Result<()>| {
        if let Err(e) = r {
            log::error!("{what}: {e:#}");
            failures.push(format!("{what}: {e:#}"));
        }
    };
    if ev.requested(Evaluation::Neighbours) {
        for (m, e) in &embeddings {
            record(&format!("neighbours {m}"), write_neighbours(cfg, *m, e));
        }
    }
    if let Some(pairs) = &pairs {
        record("hit_rate", write_hit_rates(cfg, &embeddings, pairs));
    }
    if ev.requested(Evaluation::Tsne) {
        for (m, e) in &embeddings {
            record(&format!("tsne {m}"), write_tsne(cfg, *m, e));
        }
    }
    if let (true, Some(corpus)) = (ev.requested(Evaluation::Downstream), &corpus) {
        record("downstream", write_downstream(cfg, corpus, &embeddings));
    }
    if let (true, Some(corpus)) = (ev.requested(Evaluation::Reliability), &corpus) {
        record("reliability", write_reliability(cfg, corpus, &methods));
    }
    manifest::write(dir)?;
    settle("evaluate", failures)
}

fn write_neighbours(cfg: &RunConfig, m: Method, e: &EmbeddingSet) -> Result<()> {
    let k = cfg.evaluate.neighbours.k.min(e.len().saturating_sub(1));
    let table = neighbour_table(e, &cfg.evaluate.neighbours.probes, k)?;
    let path = cfg.output_dir.join(format!("neighbours_{}.csv", slug(m)));
    let mut w = create(&path)?;
    write_neighbour_table(&mut w, m.name(), &table)?;
    w.flush()?;
    Ok(())
}

fn write_hit_rates(cfg: &RunConfig, embeddings: &[(Method, EmbeddingSet)], pairs: &PairList) -> Result<()> {
    let mut w = create(&cfg.output_dir.join(HIT_RATE_FILE))?;
    writeln!(w, "{HIT_RATE_HEADER}")?;
    let hr = &cfg.evaluate.hit_rate;
    for (m, e) in embeddings {
        let l_max = hr.l_max.min(e.len().saturating_sub(1));
        let curves = hit_rate_curves(e, pairs, hr.l_min.min(l_max), l_max).with_context(|| format!("{m}"))?;
        write_hit_rate_rows(&mut w, m.name(), &curves)?;
        if let Some(p) = curves[0].points.iter().find(|p| p.l == 10) {
            println!("{m}: hit-rate@10 = {:.4} over {} pairs ({})", p.hit_rate, p.n_evaluable, curves[0].source);
        }
    }
    w.flush()?;
    Ok(())
}

fn write_tsne(cfg: &RunConfig, m: Method, e: &EmbeddingSet) -> Result<()> {
    let projection = tsne(e, &cfg.evaluate.tsne)?;
    let mut w = create(&cfg.output_dir.join(format!("tsne_{}.csv", slug(m))))?;
    projection.write(&mut w)?;
    w.flush()?;
    info!("{m}: t-SNE KL {} -> {}", projection.kl_init, projection.kl_final);
    Ok(())
}

fn most_frequent_code(corpus: &Corpus) -> Result<String> {
    let counts = corpus.code_counts();
    let best = (0..counts.len()).max_by_key(|&i| (counts[i], std::cmp::Reverse(i))).context("corpus has no codes")?;
    Ok(corpus.vocabulary().code(best).to_string())
}

fn write_downstream(cfg: &RunConfig, corpus: &Corpus, embeddings: &[(Method, EmbeddingSet)]) -> Result<()> {
    let ds = &cfg.evaluate.downstream;
    let targets = if ds.targets.is_empty() { vec![most_frequent_code(corpus)?] } else { ds.targets.clone() };
    let demographics: Vec<Option<DemographicTables>> =
        embeddings.iter().map(|(m, _)| load_demographics(cfg, *m)).collect::<Result<_>>()?;
    let mut inits: Vec<Initialisation<'_>> = vec![Initialisation::default()];
    for ((m, e), demo) in embeddings.iter().zip(&demographics) {
        if *m == Method::Random {
            continue;
        }
        inits.push(Initialisation { disease: Some(e), demographics: None });
        if let Some(t) = demo {
            inits.push(Initialisation { disease: Some(e), demographics: Some((t, *m)) });
        }
    }
    let mut w = create(&cfg.output_dir.join(DOWNSTREAM_FILE))?;
    writeln!(w, "{SCORE_HEADER}")?;
    for target in &targets {
        let task = build_task(corpus, target, ds.classifier.horizon_days)?;
        info!("task {target}: {} patients, {} positive, {} dropped", task.examples.len(), task.n_positive(), task.dropped);
        for run in 0..ds.runs as u64 {
            let classifier = downstream::ClassifierConfig { seed: cfg.seed + run, ..ds.classifier.clone() };
            for init in &inits {
                let rep = train_classifier(&task, &classifier, *init)?;
                writeln!(w, "{rep}")?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn write_reliability(cfg: &RunConfig, corpus: &Corpus, evaluated: &[Method]) -> Result<()> {
    let rc = &cfg.evaluate.reliability;
    let methods = if rc.methods.is_empty() { evaluated.to_vec() } else { parse_methods(&rc.methods)? };
    let vc = VariabilityConfig {
        n_runs: rc.n_runs,
        base_seed: cfg.seed,
        pin_seed: rc.pin_seed,
        max_pairs: rc.max_pairs,
        ..Default::default()
    };
    let mut summary = create(&cfg.output_dir.join(RELIABILITY_FILE))?;
    let mut detail = create(&cfg.output_dir.join(RELIABILITY_DETAIL_FILE))?;
    writeln!(summary, "{RELIABILITY_HEADER}")?;
    writeln!(detail, "{PAIR_DETAIL_HEADER}")?;
    for m in methods {
        info!("reliability sweep for {m}");
        for rep in sample_size_sweep(&cfg.train.trainer(m), corpus, &rc.fractions, &vc).with_context(|| format!("{m}"))? {
            writeln!(summary, "{}", rep.summary_row())?;
            rep.write_detail(&mut detail)?;
            println!("{m}: sigma({}) = {:.6} over {} pairs", rep.sample_fraction, rep.sigma, rep.n_pairs());
        }
    }
    summary.flush()?;
    detail.flush()?;
    Ok(())
}

pub fn report(cfg: &RunConfig) -> Result<()> {
    let dir = prepare_output(cfg)?;
    let rows = report::summarise(dir)?;
    if rows.is_empty() {
        bail!("nothing to summarise in {} (run `embench train` / `embench evaluate` first)", dir.display());
    }
    report::write(&dir.join(report::SUMMARY_FILE), &rows)?;
    manifest::write(dir)?;
    // a closed pipe (e.g. `| head`) is not an error
    let mut out = std::io::stdout().lock();
    for r in &rows {
        if writeln!(out, "{r}").is_err() {
            break;
        }
    }
    Ok(())
}
