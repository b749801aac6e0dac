//! Adam and global-norm gradient clipping.

use ndarray::{Array2, Zip};

use crate::autograd::Var;
use crate::nn::Parameters;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam with bias correction; moments are stored in parameter visit order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub step: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(params: &(impl Parameters + ?Sized)) -> Self {
        let mut m = Vec::new();
        params.visit("", &mut |_, p| m.push(Array2::zeros(p.value().dim())));
        let v = m.clone();
        Adam { step: 0, m, v }
    }

    /// Applies one update with learning rate `lr`.
    pub fn update(&mut self, params: &mut impl Parameters, grads: &[Array2<f64>], lr: f64) {
        assert_eq!(grads.len(), self.m.len(), "one gradient per parameter");
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step as i32);
        let c2 = 1.0 - BETA2.powi(self.step as i32);
        let mut i = 0;
        params.visit_mut("", &mut |_, p| {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            let mut value = p.value().clone();
            Zip::from(&mut value)
                .and(&mut *m)
                .and(&mut *v)
                .and(g)
                .for_each(|x, m, v, &g| {
                    *m = BETA1 * *m + (1.0 - BETA1) * g;
                    *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                    *x -= lr * (*m / c1) / ((*v / c2).sqrt() + EPSILON);
                });
            *p = Var::param(value);
            i += 1;
        });
    }
}

pub fn global_norm(grads: &[Array2<f64>]) -> f64 {
    grads
        .iter()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Array2<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| x * k);
        }
    }
    norm
}
