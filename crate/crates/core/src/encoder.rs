//! Latent semantic graph encoder.
//!
//! Region proposals pass messages to frame-level appearance and motion
//! nodes (conditional graph), then the enhanced frame nodes are summarized
//! into `K` latent visual words per channel (latent aggregation).
//!
//! All tensors carry a leading batch of videos stacked vertically: frame
//! rows are `[B·T × D]`, region rows `[B·L × Dr]` with `L = T·N`, words
//! `[B·K × Dg]`. Kernels are evaluated block-diagonally, one block per video.

use ndarray::{Array2, Axis};
use rand::Rng;

use crate::autograd::Var;
use crate::data::{FeatureDims, VideoFeatures};
use crate::error::{Error, Result};
use crate::impl_parameters;
use crate::nn::{tile, xavier, Kernel, LayerNorm, Linear, LstmCell};

/// Identifies one of the four kernels of the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelSite {
    AppearanceGraph,
    MotionGraph,
    ObjectWords,
    MotionWords,
}

#[derive(Clone, Debug)]
pub struct LsgParams {
    pub appearance_proj: Linear,
    pub fusion: LstmCell,
    pub fusion_norm: LayerNorm,
    pub motion_proj: Linear,
    pub appearance_kernel: Kernel,
    pub motion_kernel: Kernel,
    /// Message weights `[Dg × Dr]`.
    pub w_a: Var,
    pub w_m: Var,
    pub appearance_norm: LayerNorm,
    pub motion_norm: LayerNorm,
    /// Latent seed nodes `[K × Dg]`.
    pub object_seeds: Var,
    pub motion_seeds: Var,
    pub object_word_kernel: Kernel,
    pub motion_word_kernel: Kernel,
    /// Aggregation weights `[Dg × Dg]`.
    pub w_op: Var,
    pub w_mp: Var,
    pub object_word_norm: LayerNorm,
    pub motion_word_norm: LayerNorm,
}

impl_parameters!(LsgParams {
    appearance_proj,
    fusion,
    fusion_norm,
    motion_proj,
    appearance_kernel,
    motion_kernel,
    w_a,
    w_m,
    appearance_norm,
    motion_norm,
    object_seeds,
    motion_seeds,
    object_word_kernel,
    motion_word_kernel,
    w_op,
    w_mp,
    object_word_norm,
    motion_word_norm,
});

/// Frame, motion and region rows for a batch of equally shaped videos.
#[derive(Clone, Debug)]
pub struct FeatureBatch {
    pub appearance: Var,
    pub motion: Var,
    pub regions: Var,
    pub batch: usize,
    pub frames: usize,
    pub regions_per_frame: usize,
}

impl FeatureBatch {
    pub fn new(videos: &[&VideoFeatures]) -> Result<Self> {
        let first = videos
            .first()
            .ok_or_else(|| Error::Invalid("empty feature batch".into()))?;
        let (t, n, dims) = (first.frames(), first.regions_per_frame(), first.dims());
        for v in videos {
            if v.frames() != t || v.regions_per_frame() != n || v.dims() != dims {
                return Err(Error::Shape {
                    video_id: v.video_id.clone(),
                    message: format!(
                        "batch requires uniform shapes: expected T={t}, N={n}, {dims:?}"
                    ),
                });
            }
        }
        let stack = |f: &dyn Fn(&VideoFeatures) -> Array2<f64>| {
            let parts: Vec<Array2<f64>> = videos.iter().map(|v| f(v)).collect();
            let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
            Var::constant(ndarray::concatenate(Axis(0), &views).expect("uniform widths"))
        };
        Ok(FeatureBatch {
            appearance: stack(&|v| v.appearance.clone()),
            motion: stack(&|v| v.motion.clone()),
            regions: stack(&|v| v.regions_flat()),
            batch: videos.len(),
            frames: t,
            regions_per_frame: n,
        })
    }

    /// Repeats video `index` `times` times.
    pub fn replicate(&self, index: usize, times: usize) -> FeatureBatch {
        let rows = |per: usize| -> Vec<usize> {
            (0..times)
                .flat_map(|_| index * per..(index + 1) * per)
                .collect()
        };
        let l = self.frames * self.regions_per_frame;
        FeatureBatch {
            appearance: self.appearance.gather_rows(&rows(self.frames)),
            motion: self.motion.gather_rows(&rows(self.frames)),
            regions: self.regions.gather_rows(&rows(l)),
            batch: times,
            frames: self.frames,
            regions_per_frame: self.regions_per_frame,
        }
    }
}

/// Enhanced frame-level nodes, `[B·T × Dg]` each.
#[derive(Clone, Debug)]
pub struct EnhancedProposals {
    pub appearance: Var,
    pub motion: Var,
}

/// Latent visual words, `[B·K × Dg]` per channel.
#[derive(Clone, Debug)]
pub struct VisualWords {
    pub object: Var,
    pub motion: Var,
    pub batch: usize,
    pub words: usize,
}

impl VisualWords {
    /// Stop-gradient copy.
    pub fn detached(&self) -> VisualWords {
        VisualWords {
            object: self.object.detach(),
            motion: self.motion.detach(),
            batch: self.batch,
            words: self.words,
        }
    }

    /// Rows of video `index` repeated `times` times.
    pub fn replicate(&self, index: usize, times: usize) -> VisualWords {
        let k = self.words;
        let idx: Vec<usize> = (0..times).flat_map(|_| index * k..(index + 1) * k).collect();
        VisualWords {
            object: self.object.gather_rows(&idx),
            motion: self.motion.gather_rows(&idx),
            batch: times,
            words: k,
        }
    }

    pub fn dim(&self) -> usize {
        self.object.cols()
    }
}

/// Row-stochastic frame-to-region affinity `[B·T × L]`.
pub fn kernel_affinity(kernel: &Kernel, frames: &Var, regions: &Var, blocks: usize) -> Var {
    kernel.affinity(frames, regions, blocks)
}

/// `frames + A(frames, regions) · regions · Wᵀ`, with every frame attending
/// to all `L` regions of its own video.
pub fn conditional_graph(
    kernel: &Kernel,
    frames: &Var,
    regions: &Var,
    w: &Var,
    blocks: usize,
) -> Var {
    let a = kernel_affinity(kernel, frames, regions, blocks);
    let messages = a.bmm(regions, false, false, blocks);
    frames.add(&messages.matmul_t(w))
}

/// `word_k = Σ_j softmax_j(ψ(seed_k)·φ(v̂_j)ᵀ) · W v̂_j`, per video.
pub fn latent_aggregate(
    kernel: &Kernel,
    enhanced: &Var,
    seeds: &Var,
    w: &Var,
    blocks: usize,
) -> Var {
    let k = seeds.rows();
    let queries = kernel.psi.forward(seeds).tanh().gather_rows(&tile(k, blocks));
    let keys = kernel.phi.forward(enhanced).tanh();
    let a = queries.bmm(&keys, false, true, blocks).softmax_rows();
    a.bmm(&enhanced.matmul_t(w), false, false, blocks)
}

impl LsgParams {
    pub fn new<R: Rng>(rng: &mut R, dims: FeatureDims, graph_dim: usize, words: usize) -> Self {
        let g = graph_dim;
        LsgParams {
            appearance_proj: Linear::new(rng, dims.appearance, g, true),
            fusion: LstmCell::new(rng, dims.appearance + dims.motion, g),
            fusion_norm: LayerNorm::new(g),
            motion_proj: Linear::new(rng, g, g, true),
            appearance_kernel: Kernel::new(rng, g, dims.region, g),
            motion_kernel: Kernel::new(rng, g, dims.region, g),
            w_a: xavier(rng, g, dims.region),
            w_m: xavier(rng, g, dims.region),
            appearance_norm: LayerNorm::new(g),
            motion_norm: LayerNorm::new(g),
            object_seeds: xavier(rng, words, g),
            motion_seeds: xavier(rng, words, g),
            object_word_kernel: Kernel::new(rng, g, g, g),
            motion_word_kernel: Kernel::new(rng, g, g, g),
            w_op: xavier(rng, g, g),
            w_mp: xavier(rng, g, g),
            object_word_norm: LayerNorm::new(g),
            motion_word_norm: LayerNorm::new(g),
        }
    }

    pub fn graph_dim(&self) -> usize {
        self.w_a.rows()
    }

    pub fn words(&self) -> usize {
        self.object_seeds.rows()
    }

    pub fn feature_dims(&self) -> FeatureDims {
        let region = self.w_a.cols();
        let appearance = self.appearance_proj.input_dim();
        FeatureDims {
            appearance,
            motion: self.fusion.w_ih.rows() - appearance,
            region,
        }
    }

    pub fn kernel(&self, site: KernelSite) -> &Kernel {
        match site {
            KernelSite::AppearanceGraph => &self.appearance_kernel,
            KernelSite::MotionGraph => &self.motion_kernel,
            KernelSite::ObjectWords => &self.object_word_kernel,
            KernelSite::MotionWords => &self.motion_word_kernel,
        }
    }

    /// Runs the recurrent cell over each video's frames on the concatenated
    /// appearance and motion rows; returns `[B·T × Dg]`.
    pub fn fuse_motion(&self, appearance: &Var, motion: &Var, batch: usize, frames: usize) -> Var {
        assert_eq!(appearance.rows(), motion.rows(), "fuse_motion: frame counts differ");
        assert_eq!(appearance.rows(), batch * frames);
        let x = Var::concat_cols(&[appearance.clone(), motion.clone()]);
        let hd = self.fusion.hidden();
        let (mut h, mut c) = (Var::zeros(batch, hd), Var::zeros(batch, hd));
        let mut outputs = Vec::with_capacity(frames);
        for t in 0..frames {
            let rows: Vec<usize> = (0..batch).map(|b| b * frames + t).collect();
            (h, c) = self.fusion.step(&x.gather_rows(&rows), &h, &c);
            outputs.push(h.clone());
        }
        // time-major -> video-major
        let order: Vec<usize> = (0..batch * frames)
            .map(|r| (r % frames) * batch + r / frames)
            .collect();
        let hidden = Var::concat_rows(&outputs).gather_rows(&order);
        self.motion_proj.forward(&self.fusion_norm.forward(&hidden))
    }

    pub fn encode(&self, batch: &FeatureBatch) -> (EnhancedProposals, VisualWords) {
        let b = batch.batch;
        let appearance = self.appearance_proj.forward(&batch.appearance);
        let motion = self.fuse_motion(&batch.appearance, &batch.motion, b, batch.frames);

        let enhanced_app = self.appearance_norm.forward(&conditional_graph(
            &self.appearance_kernel,
            &appearance,
            &batch.regions,
            &self.w_a,
            b,
        ));
        let enhanced_mot = self.motion_norm.forward(&conditional_graph(
            &self.motion_kernel,
            &motion,
            &batch.regions,
            &self.w_m,
            b,
        ));

        let object = self.object_word_norm.forward(&latent_aggregate(
            &self.object_word_kernel,
            &enhanced_app,
            &self.object_seeds,
            &self.w_op,
            b,
        ));
        let motion_words = self.motion_word_norm.forward(&latent_aggregate(
            &self.motion_word_kernel,
            &enhanced_mot,
            &self.motion_seeds,
            &self.w_mp,
            b,
        ));
        (
            EnhancedProposals {
                appearance: enhanced_app,
                motion: enhanced_mot,
            },
            VisualWords {
                object,
                motion: motion_words,
                batch: b,
                words: self.words(),
            },
        )
    }
}
