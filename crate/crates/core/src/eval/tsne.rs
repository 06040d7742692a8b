//! Exact t-SNE projection of an embedding set to two dimensions.
//!
//! Inputs are L2-normalised and compared by squared Euclidean distance,
//! which is monotone in cosine similarity. Every pairwise term is computed
//! (no tree approximation). Row-wise work runs in parallel; all reductions
//! happen sequentially in row order, so coordinates do not depend on the
//! thread count.

use std::io::{BufRead, Write};

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::embedding::EmbeddingSet;
use crate::linalg::{norm, Matrix};
use crate::rng;

pub const PROJECTION_HEADER: &str = "code,x,y,chapter";

/// Bisection stops once the conditional entropy is this close to
/// `ln(perplexity)`.
pub const ENTROPY_TOLERANCE: f64 = 1e-5;
const MAX_BISECTION_STEPS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
    pub step_size: f64,
    pub momentum: f64,
    pub final_momentum: f64,
    pub momentum_switch: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            iterations: 1000,
            early_exaggeration: 12.0,
            exaggeration_iterations: 250,
            step_size: 200.0,
            momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch: 250,
            seed: 0,
        }
    }
}

/// First character of a `[A-Z][0-9][0-9]` code, used as the chapter.
pub fn chapter_of(code: &str) -> Result<char, EvalError> {
    let b = code.as_bytes();
    if b.len() == 3 && b[0].is_ascii_uppercase() && b[1].is_ascii_digit() && b[2].is_ascii_digit() {
        Ok(char::from(b[0]))
    } else {
        Err(EvalError::MalformedCode(code.to_string()))
    }
}

/// Row-stochastic conditional affinities `p_{j|i}` with per-row Gaussian
/// precisions, and the entropy each row reached.
#[derive(Debug, Clone)]
pub struct Affinities {
    pub conditional: Matrix,
    pub entropies: Vec<f64>,
}

fn squared_distances(x: &Matrix) -> Matrix {
    let n = x.rows();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (0..n).map(|j| x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum()).collect())
        .collect();
    Matrix::from_rows(&rows)
}

/// Gaussian row `i` at precision `beta`: (probabilities, entropy).
fn gaussian_row(d: &[f64], i: usize, beta: f64) -> (Vec<f64>, f64) {
    // shift by the smallest off-diagonal distance; cancels in the ratio
    let dmin = d.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &v)| v).fold(f64::INFINITY, f64::min);
    let mut p: Vec<f64> = d.iter().enumerate().map(|(j, &v)| if j == i { 0.0 } else { (-beta * (v - dmin)).exp() }).collect();
    let sum: f64 = p.iter().sum();
    let weighted: f64 = p.iter().zip(d).map(|(pj, &v)| pj * (v - dmin)).sum();
    let entropy = sum.ln() + beta * weighted / sum;
    p.iter_mut().for_each(|v| *v /= sum);
    (p, entropy)
}

/// Bisects each row's precision until its entropy is `ln(perplexity)`.
pub fn conditional_affinities(dist2: &Matrix, perplexity: f64) -> Affinities {
    let target = perplexity.ln();
    let rows: Vec<(Vec<f64>, f64)> = (0..dist2.rows())
        .into_par_iter()
        .map(|i| {
            let d = dist2.row(i);
            let (mut beta, mut lo, mut hi) = (1.0, 0.0, f64::INFINITY);
            let mut best = gaussian_row(d, i, beta);
            for _ in 0..MAX_BISECTION_STEPS {
                let diff = best.1 - target;
                if diff.abs() <= ENTROPY_TOLERANCE {
                    break;
                }
                if diff > 0.0 {
                    // too flat: sharpen
                    lo = beta;
                    beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
                } else {
                    hi = beta;
                    beta = (beta + lo) / 2.0;
                }
                best = gaussian_row(d, i, beta);
            }
            best
        })
        .collect();
    let entropies = rows.iter().map(|r| r.1).collect();
    let conditional = Matrix::from_rows(&rows.into_iter().map(|r| r.0).collect::<Vec<_>>());
    Affinities { conditional, entropies }
}

/// `(p_{j|i} + p_{i|j}) / 2n`.
pub fn joint_affinities(conditional: &Matrix) -> Matrix {
    let n = conditional.rows();
    let mut p = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            p.set(i, j, (conditional.get(i, j) + conditional.get(j, i)) / (2.0 * n as f64));
        }
    }
    p
}

/// Student-t kernel rows `1/(1+|y_i-y_j|^2)` (zero diagonal) and their total.
fn kernel(y: &[[f64; 2]]) -> (Vec<Vec<f64>>, f64) {
    let rows: Vec<Vec<f64>> = (0..y.len())
        .into_par_iter()
        .map(|i| {
            (0..y.len())
                .map(|j| {
                    if i == j {
                        0.0
                    } else {
                        let (dx, dy) = (y[i][0] - y[j][0], y[i][1] - y[j][1]);
                        1.0 / (1.0 + dx * dx + dy * dy)
                    }
                })
                .collect()
        })
        .collect();
    let z = rows.iter().map(|r| r.iter().sum::<f64>()).sum();
    (rows, z)
}

/// KL(P || Q) for the current layout.
pub fn kl_divergence(p: &Matrix, y: &[[f64; 2]]) -> f64 {
    let (num, z) = kernel(y);
    let mut kl = 0.0;
    for (i, row) in num.iter().enumerate() {
        for (j, &w) in row.iter().enumerate() {
            let pij = p.get(i, j);
            if i != j && pij > 0.0 {
                kl += pij * (pij / (w / z).max(f64::MIN_POSITIVE)).ln();
            }
        }
    }
    kl
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionRow {
    pub code: String,
    pub x: f64,
    pub y: f64,
    pub chapter: char,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub rows: Vec<ProjectionRow>,
    pub kl_init: f64,
    pub kl_final: f64,
    pub seed: u64,
    /// Conditional entropy reached by each point's bandwidth search.
    pub entropies: Vec<f64>,
}

impl Projection {
    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{PROJECTION_HEADER}")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{}", r.code, r.x, r.y, r.chapter)?;
        }
        writeln!(w, "# kl_init={} kl_final={} seed={}", self.kl_init, self.kl_final, self.seed)
    }

    /// Parses the CSV written by [`Projection::write`]; entropies are not
    /// stored and come back empty.
    pub fn read<R: BufRead>(r: R) -> Result<Projection, EvalError> {
        let bad = |m: String| EvalError::InvalidArgument(format!("projection CSV: {m}"));
        let mut lines = r.lines();
        if lines.next().transpose().map_err(|e| bad(e.to_string()))?.as_deref() != Some(PROJECTION_HEADER) {
            return Err(bad("missing header".into()));
        }
        let mut out = Projection { rows: Vec::new(), kl_init: f64::NAN, kl_final: f64::NAN, seed: 0, entropies: Vec::new() };
        let mut trailer = false;
        for line in lines {
            let line = line.map_err(|e| bad(e.to_string()))?;
            if let Some(meta) = line.strip_prefix("# ") {
                for kv in meta.split_whitespace() {
                    let (k, v) = kv.split_once('=').ok_or_else(|| bad(format!("bad trailer field {kv:?}")))?;
                    let num = |v: &str| v.parse::<f64>().map_err(|e| bad(e.to_string()));
                    match k {
                        "kl_init" => out.kl_init = num(v)?,
                        "kl_final" => out.kl_final = num(v)?,
                        "seed" => out.seed = v.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                        _ => return Err(bad(format!("unknown trailer key {k:?}"))),
                    }
                }
                trailer = true;
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 || f[3].chars().count() != 1 {
                return Err(bad(format!("bad row {line:?}")));
            }
            let x: f64 = f[1].parse().map_err(|_| bad(format!("bad x in {line:?}")))?;
            let y: f64 = f[2].parse().map_err(|_| bad(format!("bad y in {line:?}")))?;
            if !x.is_finite() || !y.is_finite() {
                return Err(bad(format!("non-finite coordinate in {line:?}")));
            }
            out.rows.push(ProjectionRow { code: f[0].into(), x, y, chapter: f[3].chars().next().expect("one char") });
        }
        if !trailer {
            return Err(bad("missing metadata trailer".into()));
        }
        Ok(out)
    }
}

/// Unit-norm copy of the embedding matrix.
fn normalised(e: &EmbeddingSet) -> Result<Matrix, EvalError> {
    let mut x = e.vectors().clone();
    for i in 0..x.rows() {
        let n = norm(x.row(i));
        if n == 0.0 {
            return Err(EvalError::InvalidArgument(format!("zero vector for code {:?}", e.vocabulary().code(i))));
        }
        x.row_mut(i).iter_mut().for_each(|v| *v /= n);
    }
    Ok(x)
}

/// Optimises a 2-D layout for the row vectors of `x`.
pub fn tsne_matrix(x: &Matrix, cfg: &TsneConfig) -> Result<(Vec<[f64; 2]>, f64, f64, Vec<f64>), EvalError> {
    let n = x.rows();
    if n < 4 {
        return Err(EvalError::InvalidArgument(format!("t-SNE needs at least 4 points, got {n}")));
    }
    if !(cfg.perplexity > 0.0) || cfg.perplexity >= (n as f64 - 1.0) / 3.0 {
        return Err(EvalError::PerplexityTooLarge { perplexity: cfg.perplexity, n });
    }
    let aff = conditional_affinities(&squared_distances(x), cfg.perplexity);
    let p = joint_affinities(&aff.conditional);

    let mut r = rng::derive(cfg.seed, "tsne-init");
    let normal = Normal::new(0.0, 1e-4).expect("valid sigma");
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [normal.sample(&mut r), normal.sample(&mut r)]).collect();
    let kl_init = kl_divergence(&p, &y);

    let mut update = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    for it in 0..cfg.iterations {
        let exaggeration = if it < cfg.exaggeration_iterations { cfg.early_exaggeration } else { 1.0 };
        let momentum = if it < cfg.momentum_switch { cfg.momentum } else { cfg.final_momentum };
        let (num, z) = kernel(&y);
        let grad: Vec<[f64; 2]> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut g = [0.0; 2];
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let w = num[i][j];
                    let m = (exaggeration * p.get(i, j) - w / z) * w;
                    g[0] += 4.0 * m * (y[i][0] - y[j][0]);
                    g[1] += 4.0 * m * (y[i][1] - y[j][1]);
                }
                g
            })
            .collect();
        for i in 0..n {
            for k in 0..2 {
                if !grad[i][k].is_finite() {
                    return Err(EvalError::NonFinite("t-SNE gradient"));
                }
                let same_sign = (grad[i][k] > 0.0) == (update[i][k] > 0.0);
                gains[i][k] = if same_sign { gains[i][k] * 0.8 } else { gains[i][k] + 0.2 };
                gains[i][k] = gains[i][k].max(0.01);
                update[i][k] = momentum * update[i][k] - cfg.step_size * gains[i][k] * grad[i][k];
                y[i][k] += update[i][k];
            }
        }
        center(&mut y);
    }
    let kl_final = kl_divergence(&p, &y);
    Ok((y, kl_init, kl_final, aff.entropies))
}

fn center(y: &mut [[f64; 2]]) {
    let n = y.len() as f64;
    let mx = y.iter().map(|p| p[0]).sum::<f64>() / n;
    let my = y.iter().map(|p| p[1]).sum::<f64>() / n;
    for p in y.iter_mut() {
        p[0] -= mx;
        p[1] -= my;
    }
}

pub fn tsne(e: &EmbeddingSet, cfg: &TsneConfig) -> Result<Projection, EvalError> {
    let chapters = e.vocabulary().codes().iter().map(|c| chapter_of(c)).collect::<Result<Vec<_>, _>>()?;
    let (y, kl_init, kl_final, entropies) = tsne_matrix(&normalised(e)?, cfg)?;
    let rows = e
        .vocabulary()
        .codes()
        .iter()
        .zip(y)
        .zip(chapters)
        .map(|((code, [x, y]), chapter)| ProjectionRow { code: code.clone(), x, y, chapter })
        .collect();
    Ok(Projection { rows, kl_init, kl_final, seed: cfg.seed, entropies })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ConceptVocabulary;
    use crate::embedding::{EmbeddingMeta, Method};

    fn blobs(per: usize, seed: u64) -> (Matrix, Vec<usize>) {
        let mut r = rng::seeded(seed);
        let noise = Normal::new(0.0, 0.05).unwrap();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (label, centre) in [[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]].iter().enumerate() {
            for _ in 0..per {
                rows.push(centre.iter().map(|c| c + noise.sample(&mut r)).collect());
                labels.push(label);
            }
        }
        (Matrix::from_rows(&rows), labels)
    }

    fn silhouette(y: &[[f64; 2]], labels: &[usize]) -> f64 {
        let d = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        let n = y.len();
        (0..n)
            .map(|i| {
                let mean_to = |same: bool| {
                    let js: Vec<usize> = (0..n).filter(|&j| j != i && (labels[j] == labels[i]) == same).collect();
                    js.iter().map(|&j| d(y[i], y[j])).sum::<f64>() / js.len() as f64
                };
                let (a, b) = (mean_to(true), mean_to(false));
                (b - a) / a.max(b)
            })
            .sum::<f64>()
            / n as f64
    }

    #[test]
    fn chapters() {
        assert_eq!(chapter_of("I10").unwrap(), 'I');
        assert_eq!(chapter_of("M79").unwrap(), 'M');
        assert!(matches!(chapter_of("10A"), Err(EvalError::MalformedCode(_))));
        assert!(chapter_of("I1").is_err());
    }

    #[test]
    fn bandwidths_hit_target_entropy() {
        let (x, _) = blobs(30, 1);
        let aff = conditional_affinities(&squared_distances(&x), 10.0);
        for (i, h) in aff.entropies.iter().enumerate() {
            assert!((h - 10f64.ln()).abs() <= 1e-4, "{h}");
            assert!((aff.conditional.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert_eq!(aff.conditional.get(i, i), 0.0);
        }
        let p = joint_affinities(&aff.conditional);
        for i in 0..p.rows() {
            for j in 0..p.rows() {
                assert_eq!(p.get(i, j), p.get(j, i));
                assert!(p.get(i, j) >= 0.0);
            }
        }
    }

    #[test]
    fn separates_blobs_and_reduces_kl() {
        let (x, labels) = blobs(25, 2);
        let cfg = TsneConfig { perplexity: 10.0, iterations: 500, seed: 3, ..Default::default() };
        let (y, kl0, kl1, _) = tsne_matrix(&x, &cfg).unwrap();
        assert!(kl1 < kl0, "{kl1} !< {kl0}");
        assert!(silhouette(&y, &labels) > 0.8);
        let cx: f64 = y.iter().map(|p| p[0]).sum();
        assert!(cx.abs() < 1e-9);
    }

    #[test]
    fn seeded_runs_identical_and_thread_independent() {
        let (x, _) = blobs(10, 4);
        let cfg = TsneConfig { perplexity: 5.0, iterations: 100, seed: 9, ..Default::default() };
        let run = |threads| {
            rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| tsne_matrix(&x, &cfg).unwrap())
        };
        assert_eq!(run(1).0, run(4).0);
    }

    #[test]
    fn perplexity_constraint_enforced() {
        let (x, _) = blobs(5, 5);
        let cfg = TsneConfig { perplexity: 3.0, ..Default::default() };
        assert!(matches!(tsne_matrix(&x, &cfg), Err(EvalError::PerplexityTooLarge { .. })));
    }

    #[test]
    fn csv_round_trip() {
        let codes: Vec<String> = (0..12).map(|i| format!("{}{:02}", (b'A' + (i % 3) as u8) as char, i)).collect();
        let vocab = ConceptVocabulary::from_codes(codes).unwrap();
        let e = EmbeddingSet::random(vocab, 5, 1, 0);
        assert_eq!(e.meta, EmbeddingMeta { method: Method::Random, seed: 1, corpus_fingerprint: 0 });
        let proj = tsne(&e, &TsneConfig { perplexity: 3.0, iterations: 50, ..Default::default() }).unwrap();
        let mut buf = Vec::new();
        proj.write(&mut buf).unwrap();
        let back = Projection::read(buf.as_slice()).unwrap();
        assert_eq!(back.rows, proj.rows);
        assert_eq!((back.kl_init, back.kl_final), (proj.kl_init, proj.kl_final));
        assert_eq!(proj.rows[0].chapter, 'A');
    }
}
