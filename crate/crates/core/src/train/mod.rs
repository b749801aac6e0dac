//! Alternating critic/generator training.
//!
//! Each minibatch runs the generator once, takes `n_disc` validator steps
//! on the detached generated captions, then one generator step on the
//! cross-entropy loss plus the weighted adversarial term.

pub mod checkpoint;
pub mod optim;

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{grad, no_grad, Var};
use crate::config::TrainConfig;
use crate::data::{CaptionRecord, Corpus, FeatureDims, VideoFeatures, Vocabulary};
use crate::decoder::SoftCaption;
use crate::discriminator::{sample_interpolation, DiscParams};
use crate::encoder::{FeatureBatch, VisualWords};
use crate::error::{Error, Result};
use crate::eval::{decode_videos, eval_pairs, exact_match};
use crate::metrics::cider;
use crate::model::{Generator, GeneratorOutput};
use crate::nn::Parameters;

pub use checkpoint::Checkpoint;
pub use optim::{clip_global_norm, global_norm, Adam};

const STREAM_GENERATOR_INIT: u64 = 1;
const STREAM_DISC_INIT: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;
const STREAM_PENALTY: u64 = 4;

/// Independent random stream for a purpose and epoch.
pub fn stream(seed: u64, purpose: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 32) | epoch);
    rng
}

/// Encoded training examples: one per (video, reference caption).
#[derive(Clone, Debug)]
pub struct Dataset {
    pub videos: Vec<VideoFeatures>,
    pub references: BTreeMap<String, Vec<String>>,
    /// `(video index, padded token ids)`.
    pub examples: Vec<(usize, Vec<usize>)>,
}

impl Dataset {
    pub fn new(corpus: &Corpus, vocab: &Vocabulary, max_len: usize) -> Result<Self> {
        let mut examples = Vec::new();
        for (i, v) in corpus.videos.iter().enumerate() {
            for c in corpus.references.get(&v.video_id).into_iter().flatten() {
                examples.push((i, vocab.encode(c, max_len)?));
            }
        }
        Ok(Dataset {
            videos: corpus.videos.clone(),
            references: corpus.references.clone(),
            examples,
        })
    }

    pub fn batches_per_epoch(&self, batch_size: usize) -> usize {
        self.examples.len().div_ceil(batch_size)
    }

    /// Features and captions for the given example indices.
    pub fn batch(&self, indices: &[usize]) -> Result<(FeatureBatch, Vec<Vec<usize>>)> {
        let videos: Vec<&VideoFeatures> = indices.iter().map(|&i| &self.videos[self.examples[i].0]).collect();
        let captions = indices.iter().map(|&i| self.examples[i].1.clone()).collect();
        Ok((FeatureBatch::new(&videos)?, captions))
    }
}

/// Losses of one generator step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub l_c: f64,
    /// `−mean D(C^g|P)`; absent when the validator is disabled.
    pub l_g_hat: Option<f64>,
    pub l_g: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchLog {
    pub l_d: Vec<f64>,
    pub gen: StepLosses,
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_c: f64,
    pub l_d: Option<f64>,
    pub l_d_max_abs: Option<f64>,
    pub l_g_hat: Option<f64>,
    pub val_cider: Option<f64>,
    pub val_exact_match: Option<f64>,
    pub gen_steps: u64,
    pub disc_steps: u64,
}

fn finite(term: &str, v: &Var) -> Result<f64> {
    let x = v.item();
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFiniteLoss { term: term.to_string() })
    }
}

fn param_grads(loss: &Var, params: &impl Parameters) -> Vec<Array2<f64>> {
    let vars: Vec<Var> = params.named_params().into_iter().map(|(_, v)| v).collect();
    let refs: Vec<&Var> = vars.iter().collect();
    grad(loss, &refs, false)
        .into_iter()
        .map(|g| g.value().clone())
        .collect()
}

/// Owns the full training state.
pub struct Trainer {
    pub state: Checkpoint,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, vocab: Vocabulary, dims: FeatureDims) -> Result<Self> {
        cfg.validate()?;
        let generator = Generator::new(
            &mut stream(cfg.seed, STREAM_GENERATOR_INIT, 0),
            dims,
            vocab.len(),
            &cfg,
        );
        let disc = DiscParams::new(
            &mut stream(cfg.seed, STREAM_DISC_INIT, 0),
            vocab.len(),
            cfg.disc_dim,
            cfg.graph_dim,
            cfg.mlb_dim,
        );
        Ok(Trainer {
            state: Checkpoint {
                gen_opt: Adam::new(&generator),
                disc_opt: Adam::new(&disc),
                config: cfg,
                epoch: 0,
                gen_steps: 0,
                disc_steps: 0,
                total_disc_steps: 0,
                vocab,
                feature_dims: dims,
                generator,
                disc,
            },
        })
    }

    pub fn from_checkpoint(state: Checkpoint) -> Self {
        Trainer { state }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.state.config
    }

    /// Validator learning rate, ramping linearly over all planned steps.
    pub fn disc_lr(&self) -> f64 {
        let cfg = &self.state.config;
        let span = self.state.total_disc_steps.saturating_sub(1).max(1) as f64;
        let frac = (self.state.disc_steps as f64 / span).min(1.0);
        cfg.lr_disc_start + (cfg.lr_disc_end - cfg.lr_disc_start) * frac
    }

    pub fn forward(&self, features: &FeatureBatch, captions: &[Vec<usize>]) -> GeneratorOutput {
        self.state
            .generator
            .forward_train(features, captions, self.state.config.free_running)
    }

    /// Ground-truth caption rows with the generated caption's mask.
    pub fn real_caption(out: &GeneratorOutput) -> SoftCaption {
        SoftCaption {
            rows: out.real.clone(),
            mask: out.soft.mask.clone(),
            steps: out.soft.steps,
            batch: out.soft.batch,
        }
    }

    /// `L_D = D(C^g|P) − D(C^r|P) + penalty`, then one validator update.
    /// `fake` and `words` must already be detached.
    pub fn discriminator_step(
        &mut self,
        real: &SoftCaption,
        fake: &SoftCaption,
        words: &VisualWords,
        eps: &[f64],
    ) -> Result<f64> {
        let cfg = &self.state.config;
        let k = cfg.selected();
        let disc = &self.state.disc;
        let d_fake = disc.discriminate(fake, words, k)?.mean();
        let d_real = disc.discriminate(real, words, k)?.mean();
        let penalty = disc.gradient_penalty(real, fake, words, k, eps, cfg.lambda)?;
        finite("validator score of generated captions", &d_fake)?;
        finite("validator score of real captions", &d_real)?;
        finite("gradient penalty", &penalty)?;
        let loss = d_fake.sub(&d_real).add(&penalty);
        let value = finite("L_D", &loss)?;
        let grads = param_grads(&loss, disc);
        let lr = self.disc_lr();
        self.state.disc_opt.update(&mut self.state.disc, &grads, lr);
        self.state.disc_steps += 1;
        Ok(value)
    }

    /// `−mean D(C^g|P)` with the visual words detached, so generator
    /// gradients enter only through the soft caption.
    pub fn adversarial_loss(&self, out: &GeneratorOutput) -> Result<Var> {
        let d = self
            .state
            .disc
            .discriminate(&out.soft, &out.words.detached(), self.state.config.selected())?;
        Ok(d.mean().neg())
    }

    /// `L_G = L_C + β·L̂_G`, then one generator update. With `β = 0` the
    /// adversarial term is left out of the graph entirely.
    pub fn generator_step(&mut self, out: &GeneratorOutput) -> Result<StepLosses> {
        let cfg = self.state.config.clone();
        let l_c = finite("L_C", &out.nll)?;
        let beta = cfg.adversarial_weight();
        let (loss, l_g_hat) = if beta > 0.0 {
            let adv = self.adversarial_loss(out)?;
            let l = finite("adversarial loss", &adv)?;
            (out.nll.add(&adv.scale(beta)), Some(l))
        } else if !cfg.no_disc {
            let _guard = no_grad();
            let adv = self.adversarial_loss(out)?;
            (out.nll.clone(), Some(finite("adversarial loss", &adv)?))
        } else {
            (out.nll.clone(), None)
        };
        let l_g = finite("L_G", &loss)?;
        let mut grads = param_grads(&loss, &self.state.generator);
        clip_global_norm(&mut grads, cfg.clip_norm);
        self.state
            .gen_opt
            .update(&mut self.state.generator, &grads, cfg.lr_gen);
        self.state.gen_steps += 1;
        Ok(StepLosses { l_c, l_g_hat, l_g })
    }

    /// One minibatch in the prescribed order.
    pub fn train_batch(
        &mut self,
        features: &FeatureBatch,
        captions: &[Vec<usize>],
        penalty_rng: &mut ChaCha8Rng,
    ) -> Result<BatchLog> {
        let out = self.forward(features, captions);
        // a diverged generator should be reported as such, not as bad rows
        finite("L_C", &out.nll)?;
        let mut l_d = Vec::new();
        if !self.state.config.no_disc {
            let real = Self::real_caption(&out);
            let fake = SoftCaption {
                rows: out.soft.rows.detach(),
                ..out.soft.clone()
            };
            let words = out.words.detached();
            for _ in 0..self.state.config.n_disc {
                let eps = sample_interpolation(penalty_rng, features.batch);
                l_d.push(self.discriminator_step(&real, &fake, &words, &eps)?);
            }
        }
        let gen = self.generator_step(&out)?;
        Ok(BatchLog { l_d, gen })
    }

    /// Runs one epoch over `data`, updating the epoch counter.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<(Vec<BatchLog>, EpochLog)> {
        let cfg = self.state.config.clone();
        if data.examples.is_empty() {
            return Err(Error::Invalid("no training captions".into()));
        }
        if self.state.total_disc_steps == 0 {
            self.state.total_disc_steps =
                (cfg.epochs * data.batches_per_epoch(cfg.batch_size) * cfg.n_disc) as u64;
        }
        let epoch = self.state.epoch as u64;
        let mut order: Vec<usize> = (0..data.examples.len()).collect();
        order.shuffle(&mut stream(cfg.seed, STREAM_SHUFFLE, epoch));
        let mut penalty_rng = stream(cfg.seed, STREAM_PENALTY, epoch);
        let mut logs = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let (features, captions) = data.batch(chunk)?;
            logs.push(self.train_batch(&features, &captions, &mut penalty_rng)?);
        }
        self.state.epoch += 1;

        let n = logs.len() as f64;
        let l_ds: Vec<f64> = logs.iter().flat_map(|l| l.l_d.iter().copied()).collect();
        let g_hats: Vec<f64> = logs.iter().filter_map(|l| l.gen.l_g_hat).collect();
        let mean = |xs: &[f64]| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
        let log = EpochLog {
            epoch: self.state.epoch,
            l_c: logs.iter().map(|l| l.gen.l_c).sum::<f64>() / n,
            l_d: mean(&l_ds),
            l_d_max_abs: l_ds.iter().map(|x| x.abs()).reduce(f64::max),
            l_g_hat: mean(&g_hats),
            val_cider: None,
            val_exact_match: None,
            gen_steps: self.state.gen_steps,
            disc_steps: self.state.disc_steps,
        };
        Ok((logs, log))
    }

    /// Greedy captions for `data`'s videos with CIDEr and exact match.
    pub fn validate(&self, data: &Dataset) -> Result<(f64, f64)> {
        let captions = decode_videos(
            &self.state.generator,
            &self.state.vocab,
            &data.videos,
            1,
            self.state.config.max_caption_len,
        )?;
        let records: Vec<CaptionRecord> = data
            .videos
            .iter()
            .zip(captions)
            .map(|(v, caption)| CaptionRecord {
                video_id: v.video_id.clone(),
                caption,
            })
            .collect();
        let c = cider(&eval_pairs(&records, &data.references)?)?;
        Ok((c, exact_match(&records, &data.references)))
    }

    /// Trains up to `config.epochs`, resuming from the current epoch.
    /// `on_epoch` sees every log and may persist state.
    pub fn fit(
        &mut self,
        train: &Dataset,
        val: Option<&Dataset>,
        mut on_epoch: impl FnMut(&Trainer, &EpochLog) -> Result<()>,
    ) -> Result<Vec<EpochLog>> {
        let mut out = Vec::new();
        while self.state.epoch < self.state.config.epochs {
            let (_, mut log) = self.train_epoch(train)?;
            if let Some(v) = val.filter(|v| !v.videos.is_empty()) {
                let (c, em) = self.validate(v)?;
                log.val_cider = Some(c);
                log.val_exact_match = Some(em);
            }
            on_epoch(self, &log)?;
            out.push(log);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_corpus, SynthConfig};

    fn tiny() -> (TrainConfig, Vocabulary, Dataset) {
        let synth = synth_corpus(&SynthConfig {
            num_scenes: 16,
            frames: 3,
            regions_per_frame: 2,
            appearance_dim: 6,
            motion_dim: 6,
            region_dim: 6,
            ..SynthConfig::default()
        })
        .unwrap();
        let corpus = Corpus::from_synth(&synth);
        let cfg = TrainConfig {
            graph_dim: 8,
            hidden_dim: 8,
            embed_dim: 4,
            disc_dim: 6,
            visual_words: 2,
            mlb_dim: 4,
            batch_size: 8,
            epochs: 1,
            n_disc: 5,
            ..TrainConfig::toy()
        };
        let vocab = Vocabulary::build(&corpus.all_captions(), 1).unwrap();
        let data = Dataset::new(&corpus, &vocab, cfg.max_caption_len).unwrap();
        (cfg, vocab, data)
    }

    #[test]
    fn smoke_epoch() {
        let (cfg, vocab, data) = tiny();
        let dims = data.videos[0].dims();
        let mut t = Trainer::new(cfg, vocab, dims).unwrap();
        let logs = t.fit(&data, Some(&data), |_, _| Ok(())).unwrap();
        assert_eq!(logs.len(), 1);
        let l = &logs[0];
        assert!(l.l_c.is_finite() && l.l_d.unwrap().is_finite());
        assert_eq!(t.state.disc_steps, 5 * data.batches_per_epoch(8) as u64);
        assert!(l.val_cider.is_some());
    }

    #[test]
    fn disc_lr_ramps_between_bounds() {
        let (cfg, vocab, data) = tiny();
        let mut t = Trainer::new(cfg.clone(), vocab, data.videos[0].dims()).unwrap();
        t.state.total_disc_steps = 11;
        assert_eq!(t.disc_lr(), cfg.lr_disc_start);
        t.state.disc_steps = 5;
        assert!((t.disc_lr() - (cfg.lr_disc_start + cfg.lr_disc_end) / 2.0).abs() < 1e-18);
        t.state.disc_steps = 10;
        assert_eq!(t.disc_lr(), cfg.lr_disc_end);
    }

    #[test]
    fn streams_differ_by_purpose_and_epoch() {
        use rand::Rng;
        let a: u64 = stream(1, 3, 0).random();
        let b: u64 = stream(1, 3, 1).random();
        let c: u64 = stream(1, 4, 0).random();
        assert!(a != b && a != c && b != c);
        assert_eq!(a, stream(1, 3, 0).random::<u64>());
    }
}
