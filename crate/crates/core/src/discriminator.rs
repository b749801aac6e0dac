//! Discriminative language validator.
//!
//! A caption (one-hot or soft rows over the vocabulary) is encoded by a
//! residual 1-D convolution stack. Visual words are reconstructed from the
//! sentence features, compared pairwise with the generator's words through
//! low-rank bilinear pooling, and the object and motion channel scores are
//! mixed by a sentence-dependent weight.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::autograd::{grad, Var};
use crate::decoder::SoftCaption;
use crate::encoder::VisualWords;
use crate::error::{Error, Result};
use crate::impl_parameters;
use crate::nn::{group_sum_matrix, xavier, zeros_param, Kernel};

pub const CONV_BLOCKS: usize = 3;

/// Tolerance on row sums when checking caption rows.
const ROW_TOLERANCE: f64 = 1e-6;

/// Width-3 residual convolution `x + tanh(x₋W₀ + xW₁ + x₊W₂ + b)`.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub w_prev: Var,
    pub w_center: Var,
    pub w_next: Var,
    pub bias: Var,
}

impl_parameters!(ConvBlock { w_prev, w_center, w_next, bias });

impl ConvBlock {
    pub fn new<R: Rng>(rng: &mut R, dim: usize) -> Self {
        ConvBlock {
            w_prev: xavier(rng, dim, dim),
            w_center: xavier(rng, dim, dim),
            w_next: xavier(rng, dim, dim),
            bias: zeros_param(1, dim),
        }
    }

    /// Applies the block to `[B·T′ × Ds]`, zero-padding each caption.
    pub fn forward(&self, x: &Var, steps: usize) -> Var {
        let prev = x.shift_rows(1, steps).matmul(&self.w_prev);
        let next = x.shift_rows(-1, steps).matmul(&self.w_next);
        let pre = prev
            .add(&x.matmul(&self.w_center))
            .add(&next)
            .add_row(&self.bias);
        x.add(&pre.tanh())
    }
}

/// Bias-free low-rank bilinear pooling with a scalar head.
#[derive(Clone, Debug)]
pub struct Mlb {
    pub u: Var,
    pub v: Var,
    pub w: Var,
}

impl_parameters!(Mlb { u, v, w });

impl Mlb {
    pub fn new<R: Rng>(rng: &mut R, graph_dim: usize, dim: usize) -> Self {
        Mlb {
            u: xavier(rng, graph_dim, dim),
            v: xavier(rng, graph_dim, dim),
            w: xavier(rng, dim, 1),
        }
    }

    /// `σ(wᵀ(tanh(Uᵀp̃) ⊙ tanh(Vᵀp)))` per row pair, `[n × 1]`.
    pub fn score(&self, reconstructed: &Var, words: &Var) -> Var {
        let joint = reconstructed
            .matmul(&self.u)
            .tanh()
            .mul(&words.matmul(&self.v).tanh());
        joint.matmul(&self.w).sigmoid()
    }
}

#[derive(Clone, Debug)]
pub struct DiscParams {
    /// Vocabulary embedding `[V × Ds]`.
    pub embedding: Var,
    pub blocks: Vec<ConvBlock>,
    pub object_kernel: Kernel,
    pub motion_kernel: Kernel,
    /// Reconstruction maps `[Ds × Dg]`.
    pub w_oc: Var,
    pub w_mc: Var,
    pub mlb: Mlb,
    /// Channel weighting vectors `[Ds × 1]`.
    pub a_o: Var,
    pub a_m: Var,
}

impl_parameters!(DiscParams {
    embedding,
    blocks,
    object_kernel,
    motion_kernel,
    w_oc,
    w_mc,
    mlb,
    a_o,
    a_m,
});

/// Per-position features `[B·T′ × Ds]` and pooled features `[B × Ds]`.
#[derive(Clone, Debug)]
pub struct SentenceFeatures {
    pub positions: Var,
    pub pooled: Var,
    pub steps: usize,
    pub batch: usize,
}

/// Per-caption parts of the critic value, each `[B × 1]`.
#[derive(Clone, Debug)]
pub struct CriticParts {
    pub object: Var,
    pub motion: Var,
    pub weight: Var,
    pub value: Var,
}

/// Fails unless every row is nonnegative and sums to one.
pub fn check_distribution(rows: &Array2<f64>) -> Result<()> {
    for (r, row) in rows.rows().into_iter().enumerate() {
        if let Some(&bad) = row.iter().find(|&&p| p.is_nan() || p < -ROW_TOLERANCE) {
            return Err(Error::NotADistribution(format!("row {r} has entry {bad}")));
        }
        let s = row.sum();
        if s.is_nan() || (s - 1.0).abs() > ROW_TOLERANCE {
            return Err(Error::NotADistribution(format!("row {r} sums to {s}")));
        }
    }
    Ok(())
}

/// Constant `[B × B·T′]` averaging the valid positions of each caption.
pub fn pooling_matrix(mask: &[bool], steps: usize, batch: usize) -> Var {
    assert_eq!(mask.len(), steps * batch, "mask length");
    let mut m = Array2::zeros((batch, batch * steps));
    for b in 0..batch {
        let valid = mask[b * steps..(b + 1) * steps].iter().filter(|&&v| v).count();
        if valid == 0 {
            continue;
        }
        for t in 0..steps {
            if mask[b * steps + t] {
                m[[b, b * steps + t]] = 1.0 / valid as f64;
            }
        }
    }
    Var::constant(m)
}

/// `softmax_T′(ψ(P)·φ(S)ᵀ) · S · W` per caption; `words: [B·K × Dg]`.
pub fn reconstruct_words(kernel: &Kernel, words: &Var, positions: &Var, w: &Var, batch: usize) -> Var {
    let q = kernel.psi.forward(words).tanh();
    let k = kernel.phi.forward(positions).tanh();
    let a = q.bmm(&k, false, true, batch).softmax_rows();
    a.bmm(positions, false, false, batch).matmul(w)
}

/// Mean MLB score over the first `selected` word pairs of each video.
pub fn channel_score(
    mlb: &Mlb,
    reconstructed: &Var,
    words: &Var,
    per_video: usize,
    selected: usize,
    batch: usize,
) -> Result<Var> {
    if selected == 0 || selected > per_video {
        return Err(Error::Invalid(format!(
            "selected words {selected} outside 1..={per_video}"
        )));
    }
    let idx: Vec<usize> = (0..batch)
        .flat_map(|b| (0..selected).map(move |j| b * per_video + j))
        .collect();
    let scores = mlb.score(&reconstructed.gather_rows(&idx), &words.gather_rows(&idx));
    Ok(group_sum_matrix(batch, selected)
        .matmul(&scores)
        .scale(1.0 / selected as f64))
}

/// Uniform(0,1) interpolation weights, one per caption.
pub fn sample_interpolation<R: Rng>(rng: &mut R, batch: usize) -> Vec<f64> {
    let dist = Uniform::new(0.0, 1.0).expect("valid range");
    (0..batch).map(|_| dist.sample(rng)).collect()
}

/// `Ĉ = ε·C_r + (1−ε)·C_g` per caption, as plain values.
pub fn interpolate(real: &Array2<f64>, fake: &Array2<f64>, eps: &[f64], steps: usize) -> Array2<f64> {
    assert_eq!(real.dim(), fake.dim(), "interpolate: shapes differ");
    assert_eq!(real.nrows(), eps.len() * steps, "interpolate: one weight per caption");
    let mut out = fake.clone();
    for (r, mut row) in out.rows_mut().into_iter().enumerate() {
        let e = eps[r / steps];
        row.zip_mut_with(&real.row(r), |g, &c| *g = e * c + (1.0 - e) * *g);
    }
    out
}

/// `λ · mean_b (‖∇_Ĉ D(Ĉ)_b‖ − 1)²` for an arbitrary critic.
///
/// The gradient is taken with the graph retained, so the result can be
/// differentiated with respect to the critic's parameters.
pub fn gradient_penalty<F>(
    critic: F,
    real: &Array2<f64>,
    fake: &Array2<f64>,
    eps: &[f64],
    steps: usize,
    lambda: f64,
) -> Result<Var>
where
    F: Fn(&Var) -> Result<Var>,
{
    let batch = eps.len();
    let c_hat = Var::param(interpolate(real, fake, eps, steps));
    let d = critic(&c_hat)?;
    let g = grad(&d.sum(), &[&c_hat], true).remove(0);
    let norms = group_sum_matrix(batch, steps)
        .matmul(&g.square().sum_cols())
        .add_scalar(1e-12)
        .sqrt();
    Ok(norms.add_scalar(-1.0).square().mean().scale(lambda))
}

impl DiscParams {
    pub fn new<R: Rng>(
        rng: &mut R,
        vocab: usize,
        disc_dim: usize,
        graph_dim: usize,
        mlb_dim: usize,
    ) -> Self {
        let ds = disc_dim;
        DiscParams {
            embedding: xavier(rng, vocab, ds),
            blocks: (0..CONV_BLOCKS).map(|_| ConvBlock::new(rng, ds)).collect(),
            object_kernel: Kernel::new(rng, graph_dim, ds, ds),
            motion_kernel: Kernel::new(rng, graph_dim, ds, ds),
            w_oc: xavier(rng, ds, graph_dim),
            w_mc: xavier(rng, ds, graph_dim),
            mlb: Mlb::new(rng, graph_dim, mlb_dim),
            a_o: xavier(rng, ds, 1),
            a_m: xavier(rng, ds, 1),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.rows()
    }

    pub fn dim(&self) -> usize {
        self.embedding.cols()
    }

    pub fn sentence_features(&self, caption: &SoftCaption) -> Result<SentenceFeatures> {
        check_distribution(caption.rows.value())?;
        Ok(self.sentence_features_unchecked(caption))
    }

    /// As [`DiscParams::sentence_features`] without the row check.
    pub fn sentence_features_unchecked(&self, caption: &SoftCaption) -> SentenceFeatures {
        let steps = caption.steps;
        let mut x = caption.rows.matmul(&self.embedding);
        for block in &self.blocks {
            x = block.forward(&x, steps);
        }
        let pooled = pooling_matrix(&caption.mask, steps, caption.batch).matmul(&x);
        SentenceFeatures {
            positions: x,
            pooled,
            steps,
            batch: caption.batch,
        }
    }

    /// `β_s = σ((a_o − a_m)ᵀ S̄)`, `[B × 1]`.
    pub fn adaptive_weight(&self, pooled: &Var) -> Var {
        pooled.matmul(&self.a_o.sub(&self.a_m)).sigmoid()
    }

    pub fn critic_parts(
        &self,
        caption: &SoftCaption,
        words: &VisualWords,
        selected: usize,
    ) -> Result<CriticParts> {
        check_distribution(caption.rows.value())?;
        self.critic_parts_unchecked(caption, words, selected)
    }

    pub fn critic_parts_unchecked(
        &self,
        caption: &SoftCaption,
        words: &VisualWords,
        selected: usize,
    ) -> Result<CriticParts> {
        if caption.batch != words.batch {
            return Err(Error::Invalid(format!(
                "{} captions for {} videos",
                caption.batch, words.batch
            )));
        }
        let b = words.batch;
        let s = self.sentence_features_unchecked(caption);
        let rec_o = reconstruct_words(&self.object_kernel, &words.object, &s.positions, &self.w_oc, b);
        let rec_m = reconstruct_words(&self.motion_kernel, &words.motion, &s.positions, &self.w_mc, b);
        let object = channel_score(&self.mlb, &rec_o, &words.object, words.words, selected, b)?;
        let motion = channel_score(&self.mlb, &rec_m, &words.motion, words.words, selected, b)?;
        let weight = self.adaptive_weight(&s.pooled);
        let value = weight
            .mul(&object)
            .add(&weight.scale(-1.0).add_scalar(1.0).mul(&motion));
        Ok(CriticParts {
            object,
            motion,
            weight,
            value,
        })
    }

    /// `D(C|P)` per caption, `[B × 1]`.
    pub fn discriminate(&self, caption: &SoftCaption, words: &VisualWords, selected: usize) -> Result<Var> {
        Ok(self.critic_parts(caption, words, selected)?.value)
    }

    pub fn discriminate_unchecked(
        &self,
        caption: &SoftCaption,
        words: &VisualWords,
        selected: usize,
    ) -> Result<Var> {
        Ok(self.critic_parts_unchecked(caption, words, selected)?.value)
    }

    /// Gradient penalty of this critic between real and generated rows.
    pub fn gradient_penalty(
        &self,
        real: &SoftCaption,
        fake: &SoftCaption,
        words: &VisualWords,
        selected: usize,
        eps: &[f64],
        lambda: f64,
    ) -> Result<Var> {
        let critic = |rows: &Var| {
            let caption = SoftCaption {
                rows: rows.clone(),
                mask: real.mask.clone(),
                steps: real.steps,
                batch: real.batch,
            };
            self.discriminate(&caption, words, selected)
        };
        gradient_penalty(critic, real.rows.value(), fake.rows.value(), eps, real.steps, lambda)
    }
}
