//! Small neural-network building blocks with hand-written backward passes:
//! dense layers, a ReLU multilayer perceptron with a single logit output,
//! parameter-set plumbing for SGD, and a finite-difference gradient checker.

use rand::Rng;

use crate::linalg::{axpy, sigmoid, Matrix};

/// A collection of parameter tensors that can be visited in a fixed order.
/// Gradients use the same type, so the two line up tensor by tensor.
pub trait ParamSet: Clone {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn zeroed(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// `self += alpha * other`.
    fn add_scaled(&mut self, alpha: f64, other: &Self) {
        for (t, o) in self.tensors_mut().into_iter().zip(other.tensors()) {
            axpy(alpha, o, t);
        }
    }

    fn scale(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            for v in t.iter_mut() {
                *v *= alpha;
            }
        }
    }

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn init_uniform(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    crate::rng::fill_uniform(rng, m.as_mut_slice(), 1.0 / (fan_in.max(1) as f64).sqrt());
    m
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out x in`.
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl Dense {
    pub fn new(rng: &mut impl Rng, input: usize, output: usize) -> Self {
        let w = init_uniform(rng, output, input, input);
        let mut b = vec![0.0; output];
        crate::rng::fill_uniform(rng, &mut b, 1.0 / (input.max(1) as f64).sqrt());
        Dense { w, b }
    }

    pub fn input_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.w.rows()).map(|o| crate::linalg::dot(self.w.row(o), x) + self.b[o]).collect()
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Dense) -> Vec<f64> {
        let mut dx = vec![0.0; self.w.cols()];
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.b[o] += g;
            axpy(g, x, grad.w.row_mut(o));
            axpy(g, self.w.row(o), &mut dx);
        }
        dx
    }
}

/// Dense layers with ReLU between them and a single linear output unit
/// interpreted as a logit.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    /// `inputs[l]` is the input to layer `l`; the last entry is the logit.
    inputs: Vec<Vec<f64>>,
}

impl MlpTrace {
    pub fn logit(&self) -> f64 {
        self.inputs.last().expect("non-empty trace")[0]
    }
}

impl Mlp {
    /// `input -> hidden[0] -> ... -> hidden[n-1] -> 1`.
    pub fn new(rng: &mut impl Rng, input: usize, hidden: &[usize]) -> Self {
        let mut sizes = vec![input];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let layers = sizes.windows(2).map(|w| Dense::new(rng, w[0], w[1])).collect();
        Mlp { layers }
    }

    pub fn forward(&self, x: &[f64]) -> MlpTrace {
        let mut inputs = vec![x.to_vec()];
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(inputs.last().expect("input"));
            if l < last {
                for v in &mut y {
                    *v = v.max(0.0);
                }
            }
            inputs.push(y);
        }
        MlpTrace { inputs }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        sigmoid(self.forward(x).logit())
    }

    /// Backpropagates `dL/dlogit`; accumulates into `grad`, returns `dL/dx`.
    pub fn backward(&self, trace: &MlpTrace, dlogit: f64, grad: &mut Mlp) -> Vec<f64> {
        let mut dy = vec![dlogit];
        for l in (0..self.layers.len()).rev() {
            let x = &trace.inputs[l];
            let mut dx = self.layers[l].backward(x, &dy, &mut grad.layers[l]);
            if l > 0 {
                // x = relu(z): gradient passes where the unit was active
                for (d, &a) in dx.iter_mut().zip(x) {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            dy = dx;
        }
        dy
    }
}

impl ParamSet for Mlp {
    fn tensors(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| [l.w.as_slice(), l.b.as_slice()]).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(|l| [l.w.as_mut_slice(), l.b.as_mut_slice()]).collect()
    }
}

/// Binary cross-entropy on a logit and `dL/dlogit`.
pub fn bce_with_logit(logit: f64, label: bool) -> (f64, f64) {
    let y = if label { 1.0 } else { 0.0 };
    // softplus(z) - y z
    let loss = logit.max(0.0) + (-logit.abs()).exp().ln_1p() - y * logit;
    (loss, sigmoid(logit) - y)
}

pub mod gradcheck {
    //! Central finite differences against analytic gradients.

    use super::ParamSet;

    pub const DEFAULT_STEP: f64 = 1e-5;
    /// Gradients smaller than this are compared on an absolute scale.
    pub const RELATIVE_FLOOR: f64 = 1e-6;

    #[derive(Debug, Clone, Copy, PartialEq)]
    pub struct Report {
        pub max_relative_error: f64,
        pub checked: usize,
        /// (tensor, element) of the worst entry.
        pub worst: (usize, usize),
        pub worst_analytic: f64,
        pub worst_numeric: f64,
    }

    pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
    }

    /// Compares every entry of `analytic` against `(L(p+h) - L(p-h)) / 2h`.
    pub fn check<P: ParamSet>(params: &P, analytic: &P, h: f64, loss: impl Fn(&P) -> f64) -> Report {
        let mut report =
            Report { max_relative_error: 0.0, checked: 0, worst: (0, 0), worst_analytic: 0.0, worst_numeric: 0.0 };
        let grads: Vec<Vec<f64>> = analytic.tensors().iter().map(|t| t.to_vec()).collect();
        let mut p = params.clone();
        for (ti, g) in grads.iter().enumerate() {
            for (ei, &a) in g.iter().enumerate() {
                let orig = p.tensors()[ti][ei];
                p.tensors_mut()[ti][ei] = orig + h;
                let plus = loss(&p);
                p.tensors_mut()[ti][ei] = orig - h;
                let minus = loss(&p);
                p.tensors_mut()[ti][ei] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                let err = relative_error(a, numeric);
                report.checked += 1;
                if err > report.max_relative_error || err.is_nan() {
                    report.max_relative_error = if err.is_nan() { f64::INFINITY } else { err };
                    report.worst = (ti, ei);
                    report.worst_analytic = a;
                    report.worst_numeric = numeric;
                }
            }
        }
        report
    }
}
