//! Central finite-difference checks of reverse-mode gradients.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{grad, Var};
use crate::nn::Parameters;

pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `name[index]` of the worst entry.
    pub worst: String,
    pub entries: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }

    fn merge(self, other: GradCheck) -> GradCheck {
        let entries = self.entries + other.entries;
        let mut out = if other.max_rel_error > self.max_rel_error { other } else { self };
        out.entries = entries;
        out
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `grad(f(inputs))` with central differences of `f` over every
/// entry of every input. `f` must return a `1×1` value.
pub fn check(named: &[(String, Var)], f: impl Fn(&[Var]) -> Var, step: f64) -> GradCheck {
    let leaves: Vec<Var> = named.iter().map(|(_, v)| Var::param(v.value().clone())).collect();
    let refs: Vec<&Var> = leaves.iter().collect();
    let analytic = grad(&f(&leaves), &refs, false);

    let mut result = GradCheck {
        max_rel_error: 0.0,
        worst: String::new(),
        entries: 0,
    };
    for (i, (name, v)) in named.iter().enumerate() {
        let base = v.value();
        for (idx, _) in base.indexed_iter() {
            let eval = |delta: f64| {
                let mut x = base.clone();
                x[idx] += delta;
                let mut inputs = leaves.clone();
                inputs[i] = Var::constant(x);
                f(&inputs).item()
            };
            let numeric = (eval(step) - eval(-step)) / (2.0 * step);
            let err = relative_error(analytic[i].value()[idx], numeric);
            result = result.merge(GradCheck {
                max_rel_error: err,
                worst: format!("{name}[{},{}]", idx.0, idx.1),
                entries: 1,
            });
        }
    }
    result
}

/// A copy of `params` with its tensors replaced, in visit order.
pub fn with_params<P: Parameters + Clone>(params: &P, vars: &[Var]) -> P {
    let mut out = params.clone();
    let mut it = vars.iter();
    out.visit_mut("", &mut |_, v| *v = it.next().expect("one var per parameter").clone());
    assert!(it.next().is_none(), "more vars than parameters");
    out
}

/// Scalarizes `out` as `Σ out ⊙ R` with a fixed Gaussian `R`, so that every
/// output entry contributes a distinct weight.
pub fn probe<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> impl Fn(&Var) -> Var {
    let r = Var::constant(Array2::from_shape_simple_fn((rows, cols), || {
        StandardNormal.sample(rng)
    }));
    move |out: &Var| out.mul(&r).sum()
}

/// Random `[rows × cols]` standard-normal matrix scaled by `scale`.
pub fn randn<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}
