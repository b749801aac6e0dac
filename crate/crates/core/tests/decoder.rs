mod common;

use common::*;
use lsg_core::data::{BOS, EOS, PAD};
use lsg_core::decoder::{global_visual, Attention, DecoderState};
use lsg_core::gradcheck::{check, randn, with_params, FD_STEP};
use lsg_core::nn::{Linear, Parameters};
use lsg_core::{DecoderParams, FeatureBatch, FeatureDims, Generator, TrainConfig, Var, VideoFeatures, VisualWords};
use ndarray::{array, Array2, Array3};
use proptest::prelude::*;

fn words(r: &mut rand_chacha::ChaCha8Rng, b: usize, k: usize, d: usize) -> VisualWords {
    VisualWords {
        object: Var::constant(randn(r, b * k, d, 1.0)),
        motion: Var::constant(randn(r, b * k, d, 1.0)),
        batch: b,
        words: k,
    }
}

#[test]
fn attention_matches_hand_oracle() {
    let att = Attention {
        query: Linear {
            weight: Var::param(array![[0.4, -0.1, 0.3], [0.2, 0.5, -0.6]]),
            bias: None,
        },
        key: Linear {
            weight: Var::param(array![[0.1, 0.0, -0.2], [0.3, -0.4, 0.5], [-0.2, 0.1, 0.2]]),
            bias: None,
        },
        score: Var::param(array![[1.0], [-0.5], [0.8]]),
    };
    let h = [0.7, -1.1];
    let w = array![[1.0, 0.5, -0.5], [-0.3, 0.2, 0.9]];
    let (ctx, weights) = att.attend(&Var::constant(array![[h[0], h[1]]]), &Var::constant(w.clone()), 2);

    let (wq, wk) = (att.query.weight.value(), att.key.weight.value());
    let score = att.score.value();
    let e: Vec<f64> = (0..2)
        .map(|k| {
            (0..3)
                .map(|a| {
                    let q: f64 = (0..2).map(|i| h[i] * wq[[i, a]]).sum();
                    let kk: f64 = (0..3).map(|d| w[[k, d]] * wk[[d, a]]).sum();
                    score[[a, 0]] * (q + kk).tanh()
                })
                .sum()
        })
        .collect();
    let alpha = softmax(&e);
    for (k, a) in alpha.iter().enumerate() {
        assert!((weights.value()[[0, k]] - a).abs() < 1e-12);
    }
    for d in 0..3 {
        let want = alpha[0] * w[[0, d]] + alpha[1] * w[[1, d]];
        assert!((ctx.value()[[0, d]] - want).abs() < 1e-12);
    }
}

#[test]
fn global_visual_sums_each_channel() {
    let mut r = rng(1);
    let w = words(&mut r, 1, 3, 2);
    let g = global_visual(&w);
    let (o, m) = (w.object.value(), w.motion.value());
    let want = array![[
        o[[0, 0]] + o[[1, 0]] + o[[2, 0]],
        o[[0, 1]] + o[[1, 1]] + o[[2, 1]],
        m[[0, 0]] + m[[1, 0]] + m[[2, 0]],
        m[[0, 1]] + m[[1, 1]] + m[[2, 1]]
    ]];
    assert!(max_abs_diff(g.value(), &want) < 1e-15);
}

#[test]
fn full_scale_decode_step() {
    let mut r = rng(2);
    let dec = DecoderParams::new(&mut r, 40, 300, 1024, 1024);
    let w = words(&mut r, 1, 9, 1024);
    let state = DecoderState::zeros(1, 1024);
    let emb = dec.embedding.gather_rows(&[BOS]);
    let (p, next) = dec.decode_step(&state, &emb, &w);
    assert_eq!(p.shape(), (1, 40));
    assert_eq!(next.language_h.shape(), (1, 1024));
    assert!((p.value().sum() - 1.0).abs() < 1e-6);
}

fn tiny_cfg() -> TrainConfig {
    TrainConfig {
        graph_dim: 4,
        hidden_dim: 5,
        embed_dim: 3,
        visual_words: 2,
        ..TrainConfig::toy()
    }
}

fn tiny_video(r: &mut rand_chacha::ChaCha8Rng, id: &str) -> VideoFeatures {
    VideoFeatures::new(
        id,
        randn(r, 3, 4, 1.0),
        randn(r, 3, 3, 1.0),
        Array3::from_shape_vec((3, 2, 4), randn(r, 6, 4, 1.0).into_raw_vec_and_offset().0).unwrap(),
    )
    .unwrap()
}

fn dims() -> FeatureDims {
    FeatureDims {
        appearance: 4,
        motion: 3,
        region: 4,
    }
}

#[test]
fn zero_output_layer_gives_log_vocab_loss() {
    let mut r = rng(3);
    let mut g = Generator::new(&mut r, dims(), 4, &tiny_cfg());
    g.decoder.output = Linear {
        weight: Var::param(Array2::zeros((5, 4))),
        bias: Some(Var::param(Array2::zeros((1, 4)))),
    };
    let v = tiny_video(&mut r, "a");
    let (nll, soft) = g.teacher_forced_nll(&FeatureBatch::new(&[&v]).unwrap(), &[vec![BOS, 3, 2, EOS]]);
    assert!((nll.item() - 4f64.ln()).abs() < 1e-12);
    assert!(soft.rows.value().iter().all(|&p| (p - 0.25).abs() < 1e-15));
}

#[test]
fn trailing_padding_does_not_change_the_loss() {
    let mut r = rng(4);
    let g = Generator::new(&mut r, dims(), 6, &tiny_cfg());
    let v = tiny_video(&mut r, "a");
    let fb = FeatureBatch::new(&[&v]).unwrap();
    let short = vec![BOS, 4, 5, EOS];
    let mut long = short.clone();
    long.extend([PAD, PAD, PAD]);
    let (a, _) = g.teacher_forced_nll(&fb, &[short]);
    let (b, soft) = g.teacher_forced_nll(&fb, &[long]);
    assert!((a.item() - b.item()).abs() < 1e-12);
    assert_eq!(soft.mask, vec![true, true, true, false, false, false]);
    for r in 3..6 {
        let row = soft.rows.value().row(r);
        assert_eq!(row[PAD], 1.0);
        assert_eq!(row.sum(), 1.0);
    }
    for r in 0..3 {
        assert!((soft.rows.value().row(r).sum() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut r = rng(5);
    let g = randomized(&Generator::new(&mut r, dims(), 6, &tiny_cfg()), &mut r, 0.4);
    let (a, b) = (tiny_video(&mut r, "a"), tiny_video(&mut r, "b"));
    let fb = FeatureBatch::new(&[&a, &b]).unwrap();
    let caps = [vec![BOS, 4, 5, EOS, PAD], vec![BOS, 5, EOS, PAD, PAD]];
    let named = g.named_params();
    let result = check(
        &named,
        |vars| with_params(&g, vars).teacher_forced_nll(&fb, &caps).0,
        FD_STEP,
    );
    assert!(result.passes(1e-4), "{result:?}");
}

#[test]
fn greedy_respects_the_length_limit() {
    let mut r = rng(6);
    let g = Generator::new(&mut r, dims(), 6, &tiny_cfg());
    let v = tiny_video(&mut r, "a");
    let fb = FeatureBatch::new(&[&v, &v]).unwrap();
    for max_len in 1..6 {
        for h in g.greedy(&fb, max_len) {
            assert!(h.tokens.len() < max_len.max(2));
        }
    }
    let greedy = g.greedy(&fb, 8);
    assert_eq!(greedy[0], greedy[1]);
    assert_eq!(g.beam_search(&fb, 1, 8), greedy);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn step_outputs_are_distributions(seed in any::<u64>(), b in 1usize..4, k in 1usize..4, token in 0usize..9) {
        let mut r = rng(seed);
        let dec = DecoderParams::new(&mut r, 9, 3, 4, 5);
        let w = words(&mut r, b, k, 4);
        let state = DecoderState {
            attention_h: Var::constant(randn(&mut r, b, 5, 1.0)),
            attention_c: Var::constant(randn(&mut r, b, 5, 1.0)),
            language_h: Var::constant(randn(&mut r, b, 5, 1.0)),
            language_c: Var::constant(randn(&mut r, b, 5, 1.0)),
        };
        let (p, _) = dec.decode_step(&state, &dec.embedding.gather_rows(&vec![token; b]), &w);
        for row in p.value().rows() {
            prop_assert!((row.sum() - 1.0).abs() <= 1e-6);
            prop_assert!(row.iter().all(|&x| x >= 0.0));
        }
    }
}
