#![allow(dead_code)]

use lsg_core::gradcheck::{randn, with_params};
use lsg_core::nn::Parameters;
use lsg_core::Var;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Same structure, every tensor redrawn from N(0, scale²).
pub fn randomized<P: Parameters + Clone>(p: &P, rng: &mut ChaCha8Rng, scale: f64) -> P {
    let vars: Vec<Var> = p
        .named_params()
        .into_iter()
        .map(|(_, v)| Var::param(randn(rng, v.rows(), v.cols(), scale)))
        .collect();
    with_params(p, &vars)
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim(), "shape mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// `tanh(x·W + b)` for one row, by explicit loops.
pub fn tanh_affine(x: &[f64], w: &Array2<f64>, b: Option<&Array2<f64>>) -> Vec<f64> {
    (0..w.ncols())
        .map(|j| {
            let mut s = b.map_or(0.0, |b| b[[0, j]]);
            for (i, xi) in x.iter().enumerate() {
                s += xi * w[[i, j]];
            }
            s.tanh()
        })
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn row(m: &Array2<f64>, r: usize) -> Vec<f64> {
    m.row(r).to_vec()
}
