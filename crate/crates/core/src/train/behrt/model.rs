//! Post-norm transformer encoder with a masked-code prediction head, with a
//! hand-written backward pass.

use rand::Rng;

use super::tokens::{Token, FIRST_CODE, MAX_AGE_YEARS};
use crate::linalg::{axpy, softmax_in_place, Matrix};
use crate::nn::{init_uniform, Dense, ParamSet};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

struct LnCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

impl LayerNorm {
    fn new(d: usize) -> Self {
        LayerNorm { gamma: vec![1.0; d], beta: vec![0.0; d] }
    }

    fn forward(&self, x: &Matrix) -> (Matrix, LnCache) {
        let d = x.cols();
        let mut xhat = Matrix::zeros(x.rows(), d);
        let mut y = Matrix::zeros(x.rows(), d);
        let mut inv_std = Vec::with_capacity(x.rows());
        for i in 0..x.rows() {
            let row = x.row(i);
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for j in 0..d {
                let h = (row[j] - mu) * is;
                xhat.set(i, j, h);
                y.set(i, j, self.gamma[j] * h + self.beta[j]);
            }
        }
        (y, LnCache { xhat, inv_std })
    }

    fn backward(&self, c: &LnCache, dy: &Matrix, g: &mut LayerNorm) -> Matrix {
        let d = dy.cols();
        let mut dx = Matrix::zeros(dy.rows(), d);
        for i in 0..dy.rows() {
            let (dyr, xh) = (dy.row(i), c.xhat.row(i));
            let mut dxhat = vec![0.0; d];
            for j in 0..d {
                g.gamma[j] += dyr[j] * xh[j];
                g.beta[j] += dyr[j];
                dxhat[j] = dyr[j] * self.gamma[j];
            }
            let m1 = dxhat.iter().sum::<f64>() / d as f64;
            let m2 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
            for j in 0..d {
                dx.set(i, j, c.inv_std[i] * (dxhat[j] - m1 - xh[j] * m2));
            }
        }
        dx
    }
}

/// `x W^T + b` for every row of `x`.
fn linear(x: &Matrix, l: &Dense) -> Matrix {
    let mut y = x.matmul_t(&l.w);
    y.add_row_vector(&l.b);
    y
}

/// Accumulates parameter gradients and returns `dL/dx`.
fn linear_backward(x: &Matrix, dy: &Matrix, l: &Dense, g: &mut Dense) -> Matrix {
    g.w.add_assign(&dy.t_matmul(x));
    dy.accumulate_col_sums(&mut g.b);
    dy.matmul(&l.w)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn columns(m: &Matrix, start: usize, width: usize) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), width);
    for i in 0..m.rows() {
        out.row_mut(i).copy_from_slice(&m.row(i)[start..start + width]);
    }
    out
}

fn add_columns(dst: &mut Matrix, start: usize, src: &Matrix) {
    for i in 0..src.rows() {
        axpy(1.0, src.row(i), &mut dst.row_mut(i)[start..start + src.cols()]);
    }
}

fn add(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = a.clone();
    out.add_assign(b);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub query: Dense,
    pub key: Dense,
    pub value: Dense,
    pub attn_out: Dense,
    pub ln1: LayerNorm,
    pub ff1: Dense,
    pub ff2: Dense,
    pub ln2: LayerNorm,
}

struct LayerCache {
    x: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    attn: Vec<Matrix>,
    ctx: Matrix,
    ln1: LnCache,
    y1: Matrix,
    z: Matrix,
    f: Matrix,
    ln2: LnCache,
}

impl EncoderLayer {
    fn new(rng: &mut impl Rng, d: usize, ff: usize) -> Self {
        EncoderLayer {
            query: Dense::new(rng, d, d),
            key: Dense::new(rng, d, d),
            value: Dense::new(rng, d, d),
            attn_out: Dense::new(rng, d, d),
            ln1: LayerNorm::new(d),
            ff1: Dense::new(rng, d, ff),
            ff2: Dense::new(rng, ff, d),
            ln2: LayerNorm::new(d),
        }
    }

    fn denses(&self) -> [&Dense; 6] {
        [&self.query, &self.key, &self.value, &self.attn_out, &self.ff1, &self.ff2]
    }

    fn forward(&self, x: Matrix, heads: usize) -> (Matrix, LayerCache) {
        let (n, d) = (x.rows(), x.cols());
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (q, k, v) = (linear(&x, &self.query), linear(&x, &self.key), linear(&x, &self.value));
        let mut ctx = Matrix::zeros(n, d);
        let mut attn = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = (columns(&q, h * dh, dh), columns(&k, h * dh, dh), columns(&v, h * dh, dh));
            let mut s = qh.matmul_t(&kh);
            for i in 0..n {
                let row = s.row_mut(i);
                row.iter_mut().for_each(|x| *x *= scale);
                softmax_in_place(row);
            }
            add_columns(&mut ctx, h * dh, &s.matmul(&vh));
            attn.push(s);
        }
        let (y1, ln1) = self.ln1.forward(&add(&x, &linear(&ctx, &self.attn_out)));
        let z = linear(&y1, &self.ff1);
        let f = Matrix::from_vec(z.rows(), z.cols(), z.as_slice().iter().map(|&v| gelu(v)).collect());
        let (out, ln2) = self.ln2.forward(&add(&y1, &linear(&f, &self.ff2)));
        (out, LayerCache { x, q, k, v, attn, ctx, ln1, y1, z, f, ln2 })
    }

    fn backward(&self, c: &LayerCache, dout: &Matrix, g: &mut EncoderLayer, heads: usize) -> Matrix {
        let d = dout.cols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let dr2 = self.ln2.backward(&c.ln2, dout, &mut g.ln2);
        let mut dz = linear_backward(&c.f, &dr2, &self.ff2, &mut g.ff2);
        for (v, &z) in dz.as_mut_slice().iter_mut().zip(c.z.as_slice()) {
            *v *= gelu_grad(z);
        }
        let mut dy1 = dr2;
        dy1.add_assign(&linear_backward(&c.y1, &dz, &self.ff1, &mut g.ff1));
        let dr1 = self.ln1.backward(&c.ln1, &dy1, &mut g.ln1);
        let dctx = linear_backward(&c.ctx, &dr1, &self.attn_out, &mut g.attn_out);

        let n = dout.rows();
        let (mut dq, mut dk, mut dv) = (Matrix::zeros(n, d), Matrix::zeros(n, d), Matrix::zeros(n, d));
        for (h, a) in c.attn.iter().enumerate() {
            let (qh, kh, vh) = (columns(&c.q, h * dh, dh), columns(&c.k, h * dh, dh), columns(&c.v, h * dh, dh));
            let dctx_h = columns(&dctx, h * dh, dh);
            let da = dctx_h.matmul_t(&vh);
            add_columns(&mut dv, h * dh, &a.t_matmul(&dctx_h));
            let mut ds = Matrix::zeros(n, n);
            for i in 0..n {
                let (ar, dar) = (a.row(i), da.row(i));
                let inner: f64 = ar.iter().zip(dar).map(|(x, y)| x * y).sum();
                for (j, o) in ds.row_mut(i).iter_mut().enumerate() {
                    *o = ar[j] * (dar[j] - inner) * scale;
                }
            }
            add_columns(&mut dq, h * dh, &ds.matmul(&kh));
            add_columns(&mut dk, h * dh, &ds.t_matmul(&qh));
        }
        let mut dx = dr1;
        dx.add_assign(&linear_backward(&c.x, &dq, &self.query, &mut g.query));
        dx.add_assign(&linear_backward(&c.x, &dk, &self.key, &mut g.key));
        dx.add_assign(&linear_backward(&c.x, &dv, &self.value, &mut g.value));
        dx
    }
}

/// Model dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub n_codes: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
    pub max_seq: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BehrtModel {
    /// Extended vocabulary: specials then real codes.
    pub token: Matrix,
    pub age: Matrix,
    pub position: Matrix,
    pub segment: Matrix,
    pub ln_emb: LayerNorm,
    pub layers: Vec<EncoderLayer>,
    /// Scores the `n_codes` real codes.
    pub output: Dense,
    heads: usize,
}

/// Activations of one forward pass.
pub struct Forward {
    pub hidden: Matrix,
    emb: LnCache,
    layers: Vec<LayerCache>,
}

impl Forward {
    /// Attention weights, `[layer][head]`, each `n x n`.
    pub fn attention(&self) -> Vec<&[Matrix]> {
        self.layers.iter().map(|c| c.attn.as_slice()).collect()
    }
}

impl ParamSet for BehrtModel {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t = vec![self.token.as_slice(), self.age.as_slice(), self.position.as_slice(), self.segment.as_slice()];
        t.extend([self.ln_emb.gamma.as_slice(), self.ln_emb.beta.as_slice()]);
        for l in &self.layers {
            for dense in l.denses() {
                t.extend([dense.w.as_slice(), dense.b.as_slice()]);
            }
            t.extend([l.ln1.gamma.as_slice(), l.ln1.beta.as_slice(), l.ln2.gamma.as_slice(), l.ln2.beta.as_slice()]);
        }
        t.extend([self.output.w.as_slice(), self.output.b.as_slice()]);
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = vec![
            self.token.as_mut_slice(),
            self.age.as_mut_slice(),
            self.position.as_mut_slice(),
            self.segment.as_mut_slice(),
        ];
        t.extend([self.ln_emb.gamma.as_mut_slice(), self.ln_emb.beta.as_mut_slice()]);
        for l in &mut self.layers {
            let EncoderLayer { query, key, value, attn_out, ln1, ff1, ff2, ln2 } = l;
            for dense in [query, key, value, attn_out, ff1, ff2] {
                t.extend([dense.w.as_mut_slice(), dense.b.as_mut_slice()]);
            }
            t.extend([ln1.gamma.as_mut_slice(), ln1.beta.as_mut_slice(), ln2.gamma.as_mut_slice(), ln2.beta.as_mut_slice()]);
        }
        t.extend([self.output.w.as_mut_slice(), self.output.b.as_mut_slice()]);
        t
    }
}

impl BehrtModel {
    /// Panics unless `heads` divides `d_model`; callers validate first.
    pub fn new(rng: &mut impl Rng, s: Shape) -> Self {
        assert!(s.heads > 0 && s.d_model % s.heads == 0, "heads must divide d_model");
        let d = s.d_model;
        let table = |rng: &mut _, rows| init_uniform(rng, rows, d, d);
        BehrtModel {
            token: table(rng, FIRST_CODE + s.n_codes),
            age: table(rng, MAX_AGE_YEARS + 1),
            position: table(rng, s.max_seq),
            segment: table(rng, 2),
            ln_emb: LayerNorm::new(d),
            layers: (0..s.layers).map(|_| EncoderLayer::new(rng, d, s.ff_dim)).collect(),
            output: Dense::new(rng, d, s.n_codes),
            heads: s.heads,
        }
    }

    pub fn n_codes(&self) -> usize {
        self.output.w.rows()
    }

    fn rows(&self, t: &Token) -> [usize; 4] {
        [t.id, t.age_bucket(), (t.visit as usize).min(self.position.rows() - 1), t.segment()]
    }

    fn tables(&self) -> [&Matrix; 4] {
        [&self.token, &self.age, &self.position, &self.segment]
    }

    pub fn forward(&self, tokens: &[Token]) -> Forward {
        let mut x = Matrix::zeros(tokens.len(), self.token.cols());
        for (i, t) in tokens.iter().enumerate() {
            for (table, r) in self.tables().into_iter().zip(self.rows(t)) {
                axpy(1.0, table.row(r), x.row_mut(i));
            }
        }
        let (mut h, emb) = self.ln_emb.forward(&x);
        let mut caches = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (out, c) = l.forward(h, self.heads);
            caches.push(c);
            h = out;
        }
        Forward { hidden: h, emb, layers: caches }
    }

    fn logits(&self, hidden: &Matrix, pos: usize) -> Vec<f64> {
        self.output.forward(hidden.row(pos))
    }

    /// Summed cross-entropy over the labelled positions.
    pub fn loss(&self, tokens: &[Token], labels: &[(usize, usize)]) -> f64 {
        let f = self.forward(tokens);
        labels
            .iter()
            .map(|&(pos, code)| {
                let mut z = self.logits(&f.hidden, pos);
                let z_code = z[code];
                softmax_in_place(&mut z) - z_code
            })
            .sum()
    }

    /// Summed cross-entropy over the labelled positions, with its gradient
    /// accumulated into `g`.
    pub fn accumulate_gradient(&self, tokens: &[Token], labels: &[(usize, usize)], g: &mut BehrtModel) -> f64 {
        let f = self.forward(tokens);
        let mut dh = Matrix::zeros(f.hidden.rows(), f.hidden.cols());
        let mut loss = 0.0;
        for &(pos, code) in labels {
            let mut p = self.logits(&f.hidden, pos);
            let z_code = p[code];
            loss += softmax_in_place(&mut p) - z_code;
            p[code] -= 1.0;
            let dx = self.output.backward(f.hidden.row(pos), &p, &mut g.output);
            axpy(1.0, &dx, dh.row_mut(pos));
        }
        for i in (0..self.layers.len()).rev() {
            dh = self.layers[i].backward(&f.layers[i], &dh, &mut g.layers[i], self.heads);
        }
        let dx = self.ln_emb.backward(&f.emb, &dh, &mut g.ln_emb);
        for (i, t) in tokens.iter().enumerate() {
            let [a, b, c, d] = self.rows(t);
            axpy(1.0, dx.row(i), g.token.row_mut(a));
            axpy(1.0, dx.row(i), g.age.row_mut(b));
            axpy(1.0, dx.row(i), g.position.row_mut(c));
            axpy(1.0, dx.row(i), g.segment.row_mut(d));
        }
        loss
    }

    /// Token-embedding rows of the real codes.
    pub fn code_embeddings(&self) -> Matrix {
        let d = self.token.cols();
        let start = FIRST_CODE * d;
        Matrix::from_vec(self.n_codes(), d, self.token.as_slice()[start..].to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::super::tokens::{code_token, CLS, MASK, SEP};
    use super::*;
    use crate::nn::gradcheck;
    use crate::rng;

    fn toy_shape() -> Shape {
        Shape { n_codes: 6, d_model: 8, heads: 2, layers: 1, ff_dim: 12, max_seq: 16 }
    }

    fn toy_tokens() -> Vec<Token> {
        let ids = [CLS, code_token(0), MASK, SEP, code_token(3), code_token(5), MASK, SEP];
        ids.iter()
            .enumerate()
            .map(|(i, &id)| Token { id, age_days: 365 * 40 + 200 * (i as u32 / 4), visit: i as u32 / 4 })
            .collect()
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let m = BehrtModel::new(&mut rng::seeded(1), Shape { layers: 2, ..toy_shape() });
        let f = m.forward(&toy_tokens());
        for layer in f.attention() {
            for a in layer {
                for i in 0..a.rows() {
                    assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let m = BehrtModel::new(&mut rng::seeded(2), toy_shape());
        let tokens = toy_tokens();
        let labels = [(2, 1), (6, 4), (5, 5)];
        let mut g = m.zeroed();
        let loss = m.accumulate_gradient(&tokens, &labels, &mut g);
        assert!((loss - m.loss(&tokens, &labels)).abs() < 1e-12);
        let rep = gradcheck::check(&m, &g, gradcheck::DEFAULT_STEP, |p| p.loss(&tokens, &labels));
        assert!(rep.max_relative_error < 1e-3, "{rep:?}");
    }

    #[test]
    fn permutation_equivariant_without_positional_terms() {
        let mut m = BehrtModel::new(&mut rng::seeded(3), Shape { layers: 2, ..toy_shape() });
        for t in [&mut m.age, &mut m.position, &mut m.segment] {
            t.as_mut_slice().fill(0.0);
        }
        let tokens = toy_tokens();
        let perm = [5, 2, 7, 0, 1, 6, 3, 4];
        let permuted: Vec<Token> = perm.iter().map(|&i| tokens[i]).collect();
        let (a, b) = (m.forward(&tokens).hidden, m.forward(&permuted).hidden);
        for (new, &old) in perm.iter().enumerate() {
            for (x, y) in b.row(new).iter().zip(a.row(old)) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn gelu_matches_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_192).abs() < 1e-6);
        let h = 1e-6;
        for x in [-2.0, -0.3, 0.7, 3.0] {
            let numeric = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_grad(x) - numeric).abs() < 1e-8);
        }
    }
}
