//! Two-layer caption decoder: an attention LSTM that weights the visual
//! words, followed by a language LSTM that predicts the next word.

use rand::Rng;

use crate::autograd::Var;
use crate::encoder::VisualWords;
use crate::impl_parameters;
use crate::nn::{group_sum_matrix, repeat_each, xavier, LayerNorm, Linear, LstmCell};

/// Additive attention `wᵀ tanh(Wq·query + Wk·word)`.
#[derive(Clone, Debug)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub score: Var,
}

impl_parameters!(Attention { query, key, score });

impl Attention {
    pub fn new<R: Rng>(rng: &mut R, query_dim: usize, word_dim: usize, att_dim: usize) -> Self {
        Attention {
            query: Linear::new(rng, query_dim, att_dim, false),
            key: Linear::new(rng, word_dim, att_dim, false),
            score: xavier(rng, att_dim, 1),
        }
    }

    /// Projects words once per sequence.
    pub fn keys(&self, words: &Var) -> Var {
        self.key.forward(words)
    }

    /// Context `[B × Dg]` and weights `[B × K]` for queries `[B × Dh]` over
    /// `[B·K × Dg]` words with precomputed `keys`.
    pub fn attend_with_keys(&self, query: &Var, words: &Var, keys: &Var, k: usize) -> (Var, Var) {
        let b = query.rows();
        let q = self.query.forward(query).gather_rows(&repeat_each(b, k));
        let scores = q.add(keys).tanh().matmul(&self.score);
        let weights = scores.reshape(b, k).softmax_rows();
        let context = weights.bmm(words, false, false, b);
        (context, weights)
    }

    pub fn attend(&self, query: &Var, words: &Var, k: usize) -> (Var, Var) {
        self.attend_with_keys(query, words, &self.keys(words), k)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub embedding: Var,
    pub attention_lstm: LstmCell,
    pub attention_norm: LayerNorm,
    pub object_attention: Attention,
    pub motion_attention: Attention,
    pub language_lstm: LstmCell,
    pub language_norm: LayerNorm,
    pub output: Linear,
}

impl_parameters!(DecoderParams {
    embedding,
    attention_lstm,
    attention_norm,
    object_attention,
    motion_attention,
    language_lstm,
    language_norm,
    output,
});

/// Recurrent state of both cells, `[B × Dh]` each.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pub attention_h: Var,
    pub attention_c: Var,
    pub language_h: Var,
    pub language_c: Var,
}

impl DecoderState {
    pub fn zeros(batch: usize, hidden: usize) -> Self {
        DecoderState {
            attention_h: Var::zeros(batch, hidden),
            attention_c: Var::zeros(batch, hidden),
            language_h: Var::zeros(batch, hidden),
            language_c: Var::zeros(batch, hidden),
        }
    }

    pub fn gather(&self, rows: &[usize]) -> Self {
        DecoderState {
            attention_h: self.attention_h.gather_rows(rows),
            attention_c: self.attention_c.gather_rows(rows),
            language_h: self.language_h.gather_rows(rows),
            language_c: self.language_c.gather_rows(rows),
        }
    }
}

/// `[Σ_k object_k, Σ_k motion_k]` per video, `[B × 2Dg]`.
pub fn global_visual(words: &VisualWords) -> Var {
    let sum = group_sum_matrix(words.batch, words.words);
    Var::concat_cols(&[sum.matmul(&words.object), sum.matmul(&words.motion)])
}

/// Per-sequence values reused at every step.
pub struct DecoderContext {
    pub words: VisualWords,
    pub global: Var,
    object_keys: Var,
    motion_keys: Var,
}

/// Per-step generated distributions, `[B·T′ × V]` video-major.
#[derive(Clone, Debug)]
pub struct SoftCaption {
    pub rows: Var,
    /// Per-row validity (non-pad target).
    pub mask: Vec<bool>,
    pub steps: usize,
    pub batch: usize,
}

impl DecoderParams {
    pub fn new<R: Rng>(
        rng: &mut R,
        vocab: usize,
        embed_dim: usize,
        graph_dim: usize,
        hidden: usize,
    ) -> Self {
        DecoderParams {
            embedding: xavier(rng, vocab, embed_dim),
            attention_lstm: LstmCell::new(rng, embed_dim + 2 * graph_dim + hidden, hidden),
            attention_norm: LayerNorm::new(hidden),
            object_attention: Attention::new(rng, hidden, graph_dim, graph_dim),
            motion_attention: Attention::new(rng, hidden, graph_dim, graph_dim),
            language_lstm: LstmCell::new(rng, 2 * graph_dim + hidden, hidden),
            language_norm: LayerNorm::new(hidden),
            output: Linear::new(rng, hidden, vocab, true),
        }
    }

    pub fn hidden(&self) -> usize {
        self.attention_lstm.hidden()
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.rows()
    }

    pub fn context(&self, words: &VisualWords) -> DecoderContext {
        DecoderContext {
            global: global_visual(words),
            object_keys: self.object_attention.keys(&words.object),
            motion_keys: self.motion_attention.keys(&words.motion),
            words: words.clone(),
        }
    }

    /// One decoding step; returns next-word logits `[B × V]`.
    pub fn step_logits(
        &self,
        ctx: &DecoderContext,
        state: &DecoderState,
        prev_tokens: &[usize],
    ) -> (Var, DecoderState) {
        let embedded = self.embedding.gather_rows(prev_tokens);
        self.step_embedded(ctx, state, &embedded)
    }

    pub fn step_embedded(
        &self,
        ctx: &DecoderContext,
        state: &DecoderState,
        embedded: &Var,
    ) -> (Var, DecoderState) {
        let k = ctx.words.words;
        let x = Var::concat_cols(&[embedded.clone(), ctx.global.clone(), state.language_h.clone()]);
        let (ah, ac) = self
            .attention_lstm
            .step(&x, &state.attention_h, &state.attention_c);
        let query = self.attention_norm.forward(&ah);
        let (c_obj, _) =
            self.object_attention
                .attend_with_keys(&query, &ctx.words.object, &ctx.object_keys, k);
        let (c_mot, _) =
            self.motion_attention
                .attend_with_keys(&query, &ctx.words.motion, &ctx.motion_keys, k);
        let y = Var::concat_cols(&[c_obj, c_mot, query]);
        let (lh, lc) = self
            .language_lstm
            .step(&y, &state.language_h, &state.language_c);
        let logits = self.output.forward(&self.language_norm.forward(&lh));
        (
            logits,
            DecoderState {
                attention_h: ah,
                attention_c: ac,
                language_h: lh,
                language_c: lc,
            },
        )
    }

    /// Next-word distribution `[B × V]` and the new state.
    pub fn decode_step(
        &self,
        state: &DecoderState,
        prev_embedding: &Var,
        words: &VisualWords,
    ) -> (Var, DecoderState) {
        let ctx = self.context(words);
        let (logits, next) = self.step_embedded(&ctx, state, prev_embedding);
        (logits.softmax_rows(), next)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn words(rng: &mut ChaCha8Rng, b: usize, k: usize, d: usize) -> VisualWords {
        let mut m = || Var::constant(Array2::from_shape_simple_fn((b * k, d), || StandardNormal.sample(rng)));
        VisualWords { object: m(), motion: m(), batch: b, words: k }
    }

    #[test]
    fn global_visual_single_word_is_concat() {
        let w = VisualWords {
            object: Var::constant(array![[1.0, 2.0]]),
            motion: Var::constant(array![[3.0, 4.0]]),
            batch: 1,
            words: 1,
        };
        assert_eq!(global_visual(&w).value(), &array![[1.0, 2.0, 3.0, 4.0]]);
    }

    #[test]
    fn global_visual_of_zero_words_is_zero() {
        let w = VisualWords {
            object: Var::zeros(6, 3),
            motion: Var::zeros(6, 3),
            batch: 2,
            words: 3,
        };
        let g = global_visual(&w);
        assert_eq!(g.shape(), (2, 6));
        assert!(g.value().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn global_visual_matches_loop_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = words(&mut rng, 2, 3, 4);
        let g = global_visual(&w);
        for b in 0..2 {
            for d in 0..4 {
                let mut so = 0.0;
                let mut sm = 0.0;
                for k in 0..3 {
                    so += w.object.value()[[b * 3 + k, d]];
                    sm += w.motion.value()[[b * 3 + k, d]];
                }
                assert_eq!(g.value()[[b, d]], so);
                assert_eq!(g.value()[[b, 4 + d]], sm);
            }
        }
    }

    #[test]
    fn identical_words_give_that_word() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let att = Attention::new(&mut rng, 3, 2, 4);
        let words = Var::constant(array![[0.5, -1.0], [0.5, -1.0], [0.5, -1.0]]);
        let (ctx, w) = att.attend(&Var::constant(array![[0.1, 0.2, 0.3]]), &words, 3);
        for j in 0..3 {
            assert!((w.value()[[0, j]] - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((ctx.value()[[0, 0]] - 0.5).abs() < 1e-15);
        assert!((ctx.value()[[0, 1]] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn attention_weights_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let att = Attention::new(&mut rng, 4, 5, 6);
        let w = words(&mut rng, 3, 4, 5);
        let q = Var::constant(Array2::from_shape_simple_fn((3, 4), || StandardNormal.sample(&mut rng)));
        let (_, weights) = att.attend(&q, &w.object, 4);
        for row in weights.value().rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn decode_step_is_deterministic_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dec = DecoderParams::new(&mut rng, 11, 5, 4, 6);
        let w = words(&mut rng, 2, 3, 4);
        let state = DecoderState::zeros(2, 6);
        let emb = dec.embedding.gather_rows(&[1, 1]);
        let (d1, _) = dec.decode_step(&state, &emb, &w);
        let (d2, _) = dec.decode_step(&state, &emb, &w);
        assert_eq!(d1.value(), d2.value());
        assert_eq!(d1.shape(), (2, 11));
        for row in d1.value().rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }
}
