//! The caption generator: encoder plus decoder, with teacher-forced
//! training outputs, greedy decoding and beam search.

use std::cmp::Ordering;

use ndarray::Array2;
use rand::Rng;

use crate::autograd::{no_grad, Var};
use crate::config::TrainConfig;
use crate::data::{Caption, FeatureDims, BOS, EOS, PAD};
use crate::decoder::{DecoderParams, DecoderState, SoftCaption};
use crate::encoder::{FeatureBatch, LsgParams, VisualWords};
use crate::impl_parameters;

#[derive(Clone, Debug)]
pub struct Generator {
    pub encoder: LsgParams,
    pub decoder: DecoderParams,
}

impl_parameters!(Generator { encoder, decoder });

/// Everything one training batch produces on the generator side.
#[derive(Clone, Debug)]
pub struct GeneratorOutput {
    pub words: VisualWords,
    /// Generated caption rows; pad rows are one-hot on `pad`.
    pub soft: SoftCaption,
    /// Ground-truth caption rows (one-hot), same layout as `soft.rows`.
    pub real: Var,
    /// Mean negative log-likelihood over non-pad targets.
    pub nll: Var,
}

/// A decoded token sequence (no `bos`; ends with `eos` unless truncated).
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
}

impl Hypothesis {
    /// Log-probability per generated token.
    pub fn normalized(&self) -> f64 {
        if self.tokens.is_empty() {
            0.0
        } else {
            self.log_prob / self.tokens.len() as f64
        }
    }

    pub fn ended(&self) -> bool {
        self.tokens.last() == Some(&EOS)
    }
}

fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn one_hot_rows(ids: &[usize], vocab: usize) -> Array2<f64> {
    let mut m = Array2::zeros((ids.len(), vocab));
    for (r, &id) in ids.iter().enumerate() {
        m[[r, id]] = 1.0;
    }
    m
}

impl Generator {
    pub fn new<R: Rng>(rng: &mut R, dims: FeatureDims, vocab: usize, cfg: &TrainConfig) -> Self {
        let encoder = LsgParams::new(rng, dims, cfg.graph_dim, cfg.visual_words);
        let decoder = DecoderParams::new(rng, vocab, cfg.embed_dim, cfg.graph_dim, cfg.hidden_dim);
        Generator { encoder, decoder }
    }

    pub fn vocab_size(&self) -> usize {
        self.decoder.vocab_size()
    }

    /// Runs the decoder over `captions` (all the same padded length).
    /// With `free_running` the decoder consumes its own argmax tokens after
    /// `bos`; otherwise the ground truth.
    pub fn forward_train(
        &self,
        features: &FeatureBatch,
        captions: &[Vec<usize>],
        free_running: bool,
    ) -> GeneratorOutput {
        let b = features.batch;
        assert_eq!(captions.len(), b, "one caption per video");
        let len = captions[0].len();
        assert!(len >= 2 && captions.iter().all(|c| c.len() == len));
        let steps = len - 1;
        let v = self.vocab_size();

        let (_, words) = self.encoder.encode(features);
        let ctx = self.decoder.context(&words);
        let mut state = DecoderState::zeros(b, self.decoder.hidden());
        let mut prev: Vec<usize> = captions.iter().map(|c| c[0]).collect();
        let mut per_step = Vec::with_capacity(steps);
        for t in 0..steps {
            let (logits, next) = self.decoder.step_logits(&ctx, &state, &prev);
            let lp = logits.log_softmax_rows();
            prev = if free_running {
                lp.value().rows().into_iter().map(argmax).collect()
            } else {
                captions.iter().map(|c| c[t + 1]).collect()
            };
            per_step.push(lp);
            state = next;
        }
        let order: Vec<usize> = (0..b * steps).map(|r| (r % steps) * b + r / steps).collect();
        let log_probs = Var::concat_rows(&per_step).gather_rows(&order);

        let target_lens: Vec<usize> = captions
            .iter()
            .map(|c| {
                Caption {
                    video_id: String::new(),
                    tokens: c.clone(),
                }
                .target_len()
            })
            .collect();
        let mask: Vec<bool> = (0..b * steps)
            .map(|r| r % steps < target_lens[r / steps])
            .collect();
        let targets: Vec<usize> = (0..b * steps)
            .map(|r| captions[r / steps][r % steps + 1])
            .collect();

        let mut pick = one_hot_rows(&targets, v);
        for (r, &valid) in mask.iter().enumerate() {
            if !valid {
                pick.row_mut(r).fill(0.0);
            }
        }
        let count = mask.iter().filter(|&&m| m).count().max(1);
        let nll = log_probs
            .mul(&Var::constant(pick))
            .sum()
            .scale(-1.0 / count as f64);

        let keep = Var::constant(Array2::from_shape_fn((b * steps, 1), |(r, _)| {
            if mask[r] {
                1.0
            } else {
                0.0
            }
        }));
        let mut pad_rows = Array2::zeros((b * steps, v));
        for (r, &valid) in mask.iter().enumerate() {
            if !valid {
                pad_rows[[r, PAD]] = 1.0;
            }
        }
        let rows = log_probs
            .exp()
            .mul_col(&keep)
            .add(&Var::constant(pad_rows));

        GeneratorOutput {
            words,
            soft: SoftCaption {
                rows,
                mask,
                steps,
                batch: b,
            },
            real: Var::constant(one_hot_rows(&targets, v)),
            nll,
        }
    }

    /// Teacher-forced loss and per-step distributions.
    pub fn teacher_forced_nll(
        &self,
        features: &FeatureBatch,
        captions: &[Vec<usize>],
    ) -> (Var, SoftCaption) {
        let out = self.forward_train(features, captions, false);
        (out.nll, out.soft)
    }

    pub fn encode_words(&self, features: &FeatureBatch) -> VisualWords {
        self.encoder.encode(features).1
    }

    /// Argmax decoding of every video; at most `max_len - 1` tokens.
    pub fn greedy(&self, features: &FeatureBatch, max_len: usize) -> Vec<Hypothesis> {
        let _guard = no_grad();
        let words = self.encode_words(features);
        self.greedy_from_words(&words, max_len)
    }

    fn greedy_from_words(&self, words: &VisualWords, max_len: usize) -> Vec<Hypothesis> {
        let b = words.batch;
        let ctx = self.decoder.context(words);
        let mut state = DecoderState::zeros(b, self.decoder.hidden());
        let mut hyps = vec![
            Hypothesis {
                tokens: Vec::new(),
                log_prob: 0.0,
            };
            b
        ];
        let mut prev = vec![BOS; b];
        for _ in 0..max_len.saturating_sub(1) {
            let (logits, next) = self.decoder.step_logits(&ctx, &state, &prev);
            let lp = logits.log_softmax_rows();
            for (i, row) in lp.value().rows().into_iter().enumerate() {
                let tok = argmax(row);
                prev[i] = tok;
                if !hyps[i].ended() {
                    hyps[i].tokens.push(tok);
                    hyps[i].log_prob += row[tok];
                }
            }
            state = next;
            if hyps.iter().all(Hypothesis::ended) {
                break;
            }
        }
        hyps
    }

    /// Length-normalized beam search for every video in `features`.
    ///
    /// The beam shrinks as hypotheses finish. The greedy hypothesis joins
    /// the final pool, so the result never scores below greedy decoding.
    pub fn beam_search(&self, features: &FeatureBatch, beam: usize, max_len: usize) -> Vec<Hypothesis> {
        assert!(beam >= 1, "beam must be at least 1");
        let _guard = no_grad();
        let words = self.encode_words(features);
        let greedy = self.greedy_from_words(&words, max_len);
        (0..words.batch)
            .map(|i| {
                let mut pool = self.beam_one(&words, i, beam, max_len);
                pool.push(greedy[i].clone());
                best_normalized(pool)
            })
            .collect()
    }

    fn beam_one(&self, words: &VisualWords, index: usize, beam: usize, max_len: usize) -> Vec<Hypothesis> {
        let mut alive = vec![Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
        }];
        let mut state = DecoderState::zeros(1, self.decoder.hidden());
        let mut finished = Vec::new();
        let steps = max_len.saturating_sub(1);
        for step in 0..steps {
            if alive.is_empty() {
                break;
            }
            let ctx = self.decoder.context(&words.replicate(index, alive.len()));
            let prev: Vec<usize> = alive
                .iter()
                .map(|h| h.tokens.last().copied().unwrap_or(BOS))
                .collect();
            let (logits, next) = self.decoder.step_logits(&ctx, &state, &prev);
            let lp = logits.log_softmax_rows();
            let lp = lp.value();

            let mut candidates: Vec<(f64, usize, usize)> = Vec::with_capacity(alive.len() * lp.ncols());
            for (row, h) in alive.iter().enumerate() {
                for tok in 0..lp.ncols() {
                    candidates.push((h.log_prob + lp[[row, tok]], row, tok));
                }
            }
            candidates.sort_by(|a, b| {
                b.0.total_cmp(&a.0)
                    .then(a.1.cmp(&b.1))
                    .then(a.2.cmp(&b.2))
            });
            let budget = beam - finished.len();
            let last = step + 1 == steps;
            let mut next_alive = Vec::new();
            let mut keep_rows = Vec::new();
            for &(score, row, tok) in candidates.iter().take(budget) {
                let mut tokens = alive[row].tokens.clone();
                tokens.push(tok);
                let hyp = Hypothesis {
                    tokens,
                    log_prob: score,
                };
                if tok == EOS || last {
                    finished.push(hyp);
                } else {
                    next_alive.push(hyp);
                    keep_rows.push(row);
                }
            }
            state = next.gather(&keep_rows);
            alive = next_alive;
        }
        finished.extend(alive);
        finished
    }
}

fn best_normalized(pool: Vec<Hypothesis>) -> Hypothesis {
    pool.into_iter()
        .reduce(|best, h| match h.normalized().total_cmp(&best.normalized()) {
            Ordering::Greater => h,
            _ => best,
        })
        .expect("nonempty pool")
}
