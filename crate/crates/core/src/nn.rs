//! Small building blocks shared by the encoder, decoder and validator.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::autograd::Var;

/// Walks every learnable tensor of a module in a fixed order.
pub trait Parameters {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var));

    fn named_params(&self) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, v| out.push((name.to_string(), v.clone())));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, v| n += v.value().len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl Parameters for Var {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var)) {
        f(prefix, self)
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var)) {
        f(prefix, self)
    }
}

impl<T: Parameters> Parameters for Option<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var)) {
        if let Some(inner) = self {
            inner.visit(prefix, f)
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var)) {
        if let Some(inner) = self {
            inner.visit_mut(prefix, f)
        }
    }
}

impl<T: Parameters> Parameters for Vec<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var)) {
        for (i, item) in self.iter().enumerate() {
            item.visit(&join(prefix, &i.to_string()), f)
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var)) {
        for (i, item) in self.iter_mut().enumerate() {
            item.visit_mut(&join(prefix, &i.to_string()), f)
        }
    }
}

/// Implements [`Parameters`] by visiting the listed fields in order.
#[macro_export]
macro_rules! impl_parameters {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::nn::Parameters for $ty {
            fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &$crate::autograd::Var)) {
                $( $crate::nn::Parameters::visit(&self.$field, &$crate::nn::join(prefix, stringify!($field)), f); )*
            }
            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut $crate::autograd::Var)) {
                $( $crate::nn::Parameters::visit_mut(&mut self.$field, &$crate::nn::join(prefix, stringify!($field)), f); )*
            }
        }
    };
}

/// Glorot-uniform matrix.
pub fn xavier<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Var {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("valid range");
    Var::param(Array2::from_shape_fn((rows, cols), |_| dist.sample(rng)))
}

pub fn zeros_param(rows: usize, cols: usize) -> Var {
    Var::param(Array2::zeros((rows, cols)))
}

/// Affine map `x·W + b` with `W: [in×out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl_parameters!(Linear { weight, bias });

impl Linear {
    pub fn new<R: Rng>(rng: &mut R, input: usize, output: usize, bias: bool) -> Self {
        Linear {
            weight: xavier(rng, input, output),
            bias: bias.then(|| zeros_param(1, output)),
        }
    }

    pub fn forward(&self, x: &Var) -> Var {
        let y = x.matmul(&self.weight);
        match &self.bias {
            Some(b) => y.add_row(b),
            None => y,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Row-wise layer normalization with learnable gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: Var,
    pub bias: Var,
}

impl_parameters!(LayerNorm { gain, bias });

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gain: Var::param(Array2::ones((1, dim))),
            bias: zeros_param(1, dim),
        }
    }

    pub fn forward(&self, x: &Var) -> Var {
        let d = x.cols();
        let mean = x.sum_cols().scale(1.0 / d as f64);
        let centered = x.sub(&mean.broadcast_cols(d));
        let var = centered.square().sum_cols().scale(1.0 / d as f64);
        let std = var.add_scalar(LAYER_NORM_EPS).sqrt();
        let rows = x.rows();
        centered
            .div_col(&std)
            .mul(&self.gain.broadcast_rows(rows))
            .add_row(&self.bias)
    }
}

/// Standard LSTM cell; gate order input, forget, candidate, output.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
}

impl_parameters!(LstmCell { w_ih, w_hh, bias });

impl LstmCell {
    pub fn new<R: Rng>(rng: &mut R, input: usize, hidden: usize) -> Self {
        let mut bias = Array2::zeros((1, 4 * hidden));
        // forget gate starts open
        bias.slice_mut(ndarray::s![.., hidden..2 * hidden]).fill(1.0);
        LstmCell {
            w_ih: xavier(rng, input, 4 * hidden),
            w_hh: xavier(rng, hidden, 4 * hidden),
            bias: Var::param(bias),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.rows()
    }

    /// One step over a batch; returns `(h, c)`.
    pub fn step(&self, x: &Var, h: &Var, c: &Var) -> (Var, Var) {
        let hd = self.hidden();
        let gates = x
            .matmul(&self.w_ih)
            .add(&h.matmul(&self.w_hh))
            .add_row(&self.bias);
        let i = gates.slice_cols(0, hd).sigmoid();
        let f = gates.slice_cols(hd, hd).sigmoid();
        let g = gates.slice_cols(2 * hd, hd).tanh();
        let o = gates.slice_cols(3 * hd, hd).sigmoid();
        let c_new = f.mul(c).add(&i.mul(&g));
        let h_new = o.mul(&c_new.tanh());
        (h_new, c_new)
    }
}

/// Kernel `tanh(q·Wψ + bψ) · tanh(k·Wφ + bφ)ᵀ` normalized over keys.
#[derive(Clone, Debug)]
pub struct Kernel {
    pub psi: Linear,
    pub phi: Linear,
}

impl_parameters!(Kernel { psi, phi });

impl Kernel {
    pub fn new<R: Rng>(rng: &mut R, query_dim: usize, key_dim: usize, space: usize) -> Self {
        Kernel {
            psi: Linear::new(rng, query_dim, space, true),
            phi: Linear::new(rng, key_dim, space, true),
        }
    }

    /// Raw kernel logits, block-diagonal over `blocks` groups of rows.
    pub fn logits(&self, queries: &Var, keys: &Var, blocks: usize) -> Var {
        let q = self.psi.forward(queries).tanh();
        let k = self.phi.forward(keys).tanh();
        q.bmm(&k, false, true, blocks)
    }

    /// Row-stochastic affinity matrix.
    pub fn affinity(&self, queries: &Var, keys: &Var, blocks: usize) -> Var {
        self.logits(queries, keys, blocks).softmax_rows()
    }
}

/// Constant `[blocks × blocks·group]` matrix summing each group of rows.
pub fn group_sum_matrix(blocks: usize, group: usize) -> Var {
    let mut m = Array2::zeros((blocks, blocks * group));
    for b in 0..blocks {
        for j in 0..group {
            m[[b, b * group + j]] = 1.0;
        }
    }
    Var::constant(m)
}

/// Row indices repeating each of `n` rows `times` times consecutively.
pub fn repeat_each(n: usize, times: usize) -> Vec<usize> {
    (0..n).flat_map(|i| std::iter::repeat_n(i, times)).collect()
}

/// Row indices tiling `0..n` a total of `times` times.
pub fn tile(n: usize, times: usize) -> Vec<usize> {
    (0..times).flat_map(|_| 0..n).collect()
}
