mod common;

use common::*;
use lsg_core::data::{render_scenes, SceneSpec, SynthConfig};
use lsg_core::encoder::{conditional_graph, kernel_affinity, latent_aggregate, KernelSite};
use lsg_core::gradcheck::randn;
use lsg_core::nn::{Kernel, Linear};
use lsg_core::{FeatureBatch, FeatureDims, LsgParams, Var, VideoFeatures};
use ndarray::{array, Array2, Array3};
use proptest::prelude::*;

fn kernel_oracle(kernel: &Kernel, queries: &Array2<f64>, keys: &Array2<f64>) -> Array2<f64> {
    let (wq, bq) = (kernel.psi.weight.value(), kernel.psi.bias.as_ref().map(Var::value));
    let (wk, bk) = (kernel.phi.weight.value(), kernel.phi.bias.as_ref().map(Var::value));
    let q: Vec<Vec<f64>> = (0..queries.nrows()).map(|t| tanh_affine(&row(queries, t), wq, bq)).collect();
    let k: Vec<Vec<f64>> = (0..keys.nrows()).map(|j| tanh_affine(&row(keys, j), wk, bk)).collect();
    let mut a = Array2::zeros((q.len(), k.len()));
    for (t, qt) in q.iter().enumerate() {
        let logits: Vec<f64> = k.iter().map(|kj| dot(qt, kj)).collect();
        for (j, p) in softmax(&logits).into_iter().enumerate() {
            a[[t, j]] = p;
        }
    }
    a
}

#[test]
fn affinity_matches_hand_oracle() {
    let kernel = Kernel {
        psi: Linear {
            weight: Var::param(array![[0.5, -0.3], [0.2, 0.4]]),
            bias: Some(Var::param(array![[0.1, -0.1]])),
        },
        phi: Linear {
            weight: Var::param(array![[-0.2, 0.6], [0.3, 0.1]]),
            bias: Some(Var::param(array![[0.0, 0.2]])),
        },
    };
    let frames = array![[1.0, 2.0], [-1.0, 0.5]];
    let regions = array![[0.3, -0.4], [1.2, 0.7], [-0.5, 0.9]];
    let got = kernel_affinity(&kernel, &Var::constant(frames.clone()), &Var::constant(regions.clone()), 1);

    // first entry written out term by term
    let q0 = [(1.0f64 * 0.5 + 2.0 * 0.2 + 0.1).tanh(), (1.0f64 * -0.3 + 2.0 * 0.4 - 0.1).tanh()];
    let k = |r: [f64; 2]| [(r[0] * -0.2 + r[1] * 0.3).tanh(), (r[0] * 0.6 + r[1] * 0.1 + 0.2).tanh()];
    let l: Vec<f64> = [[0.3, -0.4], [1.2, 0.7], [-0.5, 0.9]]
        .iter()
        .map(|&r| {
            let kr = k(r);
            q0[0] * kr[0] + q0[1] * kr[1]
        })
        .collect();
    let z: f64 = l.iter().map(|x| x.exp()).sum();
    assert!((got.value()[[0, 0]] - l[0].exp() / z).abs() < 1e-10);

    let want = kernel_oracle(&kernel, &frames, &regions);
    assert!(max_abs_diff(got.value(), &want) < 1e-10);
}

#[test]
fn identical_regions_give_uniform_affinity() {
    let mut r = rng(1);
    let kernel = Kernel::new(&mut r, 4, 3, 4);
    let frames = Var::constant(randn(&mut r, 5, 4, 1.0));
    let one = randn(&mut r, 1, 3, 1.0);
    let regions = Var::constant(Array2::from_shape_fn((6, 3), |(_, c)| one[[0, c]]));
    let a = kernel_affinity(&kernel, &frames, &regions, 1);
    assert!(a.value().iter().all(|&x| (x - 1.0 / 6.0).abs() < 1e-15));
}

#[test]
fn conditional_graph_matches_double_loop() {
    let (t, n, dg, dr) = (2, 2, 3, 2);
    let l = t * n;
    let mut r = rng(2);
    let kernel = randomized(&Kernel::new(&mut r, dg, dr, dg), &mut r, 0.7);
    let frames = randn(&mut r, t, dg, 1.0);
    let regions = randn(&mut r, l, dr, 1.0);
    let w = randn(&mut r, dg, dr, 1.0);
    let got = conditional_graph(
        &kernel,
        &Var::constant(frames.clone()),
        &Var::constant(regions.clone()),
        &Var::constant(w.clone()),
        1,
    );
    let a = kernel_oracle(&kernel, &frames, &regions);
    let mut want = frames.clone();
    for ti in 0..t {
        for d in 0..dg {
            for j in 0..l {
                let msg: f64 = (0..dr).map(|e| w[[d, e]] * regions[[j, e]]).sum();
                want[[ti, d]] += a[[ti, j]] * msg;
            }
        }
    }
    assert!(max_abs_diff(got.value(), &want) < 1e-10);
}

#[test]
fn zero_regions_leave_frames_exactly() {
    let mut r = rng(3);
    let kernel = randomized(&Kernel::new(&mut r, 4, 3, 4), &mut r, 1.0);
    let frames = Var::constant(randn(&mut r, 3, 4, 1.0));
    let w = Var::constant(randn(&mut r, 4, 3, 1.0));
    let out = conditional_graph(&kernel, &frames, &Var::zeros(6, 3), &w, 1);
    assert_eq!(out.value(), frames.value());
}

#[test]
fn latent_aggregate_matches_loop() {
    let (k, t, dg) = (2, 3, 4);
    let mut r = rng(4);
    let kernel = randomized(&Kernel::new(&mut r, dg, dg, dg), &mut r, 0.7);
    let enhanced = randn(&mut r, t, dg, 1.0);
    let seeds = randn(&mut r, k, dg, 1.0);
    let w = randn(&mut r, dg, dg, 1.0);
    let got = latent_aggregate(
        &kernel,
        &Var::constant(enhanced.clone()),
        &Var::constant(seeds.clone()),
        &Var::constant(w.clone()),
        1,
    );
    let a = kernel_oracle(&kernel, &seeds, &enhanced);
    let mut want = Array2::zeros((k, dg));
    for ki in 0..k {
        for j in 0..t {
            for d in 0..dg {
                let wv: f64 = (0..dg).map(|e| w[[d, e]] * enhanced[[j, e]]).sum();
                want[[ki, d]] += a[[ki, j]] * wv;
            }
        }
    }
    assert!(max_abs_diff(got.value(), &want) < 1e-10);
}

#[test]
fn single_node_aggregate_is_the_projection() {
    let mut r = rng(5);
    let kernel = Kernel::new(&mut r, 4, 4, 4);
    let enhanced = Var::constant(randn(&mut r, 1, 4, 1.0));
    let w = Var::constant(randn(&mut r, 4, 4, 1.0));
    let words = latent_aggregate(&kernel, &enhanced, &Var::constant(randn(&mut r, 3, 4, 1.0)), &w, 1);
    let proj = enhanced.matmul_t(&w);
    for k in 0..3 {
        assert_eq!(words.value().row(k), proj.value().row(0));
    }
}

fn fuse_oracle(p: &LsgParams, app: &Array2<f64>, mot: &Array2<f64>) -> Array2<f64> {
    let cell = &p.fusion;
    let hd = cell.hidden();
    let (w_ih, w_hh, b) = (cell.w_ih.value(), cell.w_hh.value(), cell.bias.value());
    let (mut h, mut c) = (vec![0.0; hd], vec![0.0; hd]);
    let g = p.graph_dim();
    let mut out = Array2::zeros((app.nrows(), g));
    for t in 0..app.nrows() {
        let x: Vec<f64> = app.row(t).iter().chain(mot.row(t).iter()).copied().collect();
        let gate = |j: usize| {
            let mut s = b[[0, j]];
            for (i, xi) in x.iter().enumerate() {
                s += xi * w_ih[[i, j]];
            }
            for (i, hi) in h.iter().enumerate() {
                s += hi * w_hh[[i, j]];
            }
            s
        };
        let pre: Vec<f64> = (0..4 * hd).map(gate).collect();
        for j in 0..hd {
            let (i, f) = (sigmoid(pre[j]), sigmoid(pre[hd + j]));
            let (gg, o) = (pre[2 * hd + j].tanh(), sigmoid(pre[3 * hd + j]));
            c[j] = f * c[j] + i * gg;
            h[j] = o * c[j].tanh();
        }
        let mean = h.iter().sum::<f64>() / hd as f64;
        let var = h.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / hd as f64;
        let (gain, bias) = (p.fusion_norm.gain.value(), p.fusion_norm.bias.value());
        let normed: Vec<f64> = (0..hd)
            .map(|j| (h[j] - mean) / (var + 1e-5).sqrt() * gain[[0, j]] + bias[[0, j]])
            .collect();
        let (pw, pb) = (p.motion_proj.weight.value(), p.motion_proj.bias.as_ref().unwrap().value());
        for d in 0..g {
            out[[t, d]] = pb[[0, d]] + (0..hd).map(|j| normed[j] * pw[[j, d]]).sum::<f64>();
        }
    }
    out
}

fn dims(a: usize, m: usize, r: usize) -> FeatureDims {
    FeatureDims {
        appearance: a,
        motion: m,
        region: r,
    }
}

#[test]
fn fuse_motion_matches_unrolled_cell() {
    let mut r = rng(6);
    let p = randomized(&LsgParams::new(&mut r, dims(4, 4, 3), 8, 2), &mut r, 0.5);
    let (app, mot) = (randn(&mut r, 3, 4, 1.0), randn(&mut r, 3, 4, 1.0));
    let got = p.fuse_motion(&Var::constant(app.clone()), &Var::constant(mot.clone()), 1, 3);
    assert_eq!(got.shape(), (3, 8));
    assert!(max_abs_diff(got.value(), &fuse_oracle(&p, &app, &mot)) < 1e-10);

    // two stacked videos run independently
    let (app2, mot2) = (randn(&mut r, 3, 4, 1.0), randn(&mut r, 3, 4, 1.0));
    let stacked = p.fuse_motion(
        &Var::constant(ndarray::concatenate![ndarray::Axis(0), app, app2]),
        &Var::constant(ndarray::concatenate![ndarray::Axis(0), mot, mot2]),
        2,
        3,
    );
    let second = stacked.value().slice(ndarray::s![3..6, ..]).to_owned();
    assert!(max_abs_diff(&second, &fuse_oracle(&p, &app2, &mot2)) < 1e-10);
}

#[test]
fn fuse_motion_of_zeros_is_zero() {
    let mut r = rng(7);
    let mut p = LsgParams::new(&mut r, dims(4, 4, 3), 8, 2);
    p.fusion.bias = Var::param(Array2::zeros((1, 32)));
    let out = p.fuse_motion(&Var::zeros(3, 4), &Var::zeros(3, 4), 1, 3);
    assert!(out.value().iter().all(|&x| x == 0.0));
}

fn video(r: &mut rand_chacha::ChaCha8Rng, t: usize, n: usize, d: FeatureDims) -> VideoFeatures {
    VideoFeatures::new(
        "v",
        randn(r, t, d.appearance, 1.0),
        randn(r, t, d.motion, 1.0),
        Array3::from_shape_vec((t, n, d.region), randn(r, t * n, d.region, 1.0).into_raw_vec_and_offset().0)
            .unwrap(),
    )
    .unwrap()
}

#[test]
fn full_scale_encoder_shapes() {
    let mut r = rng(8);
    let d = dims(1536, 1024, 2048);
    let p = LsgParams::new(&mut r, d, 1024, 9);
    let v = video(&mut r, 26, 36, d);
    let (enhanced, words) = p.encode(&FeatureBatch::new(&[&v]).unwrap());
    assert_eq!(enhanced.appearance.shape(), (26, 1024));
    assert_eq!(words.object.shape(), (9, 1024));
    assert_eq!(words.motion.shape(), (9, 1024));
    assert!(words.object.value().iter().all(|x| x.is_finite()));
}

#[test]
fn single_word_per_channel() {
    let mut r = rng(9);
    let d = dims(5, 5, 5);
    let p = LsgParams::new(&mut r, d, 6, 1);
    let v = video(&mut r, 4, 2, d);
    let (_, words) = p.encode(&FeatureBatch::new(&[&v]).unwrap());
    assert_eq!(words.object.shape(), (1, 6));
    assert_eq!(words.words, 1);
}

#[test]
fn action_only_changes_leave_appearance_path_alone() {
    let cfg = SynthConfig {
        noise: 0.0,
        frames: 4,
        regions_per_frame: 3,
        appearance_dim: 6,
        motion_dim: 6,
        region_dim: 6,
        ..SynthConfig::default()
    };
    let scene = |action_id| SceneSpec {
        video_id: format!("a{action_id}"),
        object_ids: vec![2, 5],
        action_id,
        background_id: 1,
        seed: 42,
    };
    let videos = render_scenes(&cfg, &[scene(0), scene(3)]).unwrap();
    assert_eq!(videos[0].appearance, videos[1].appearance);
    assert_ne!(videos[0].motion, videos[1].motion);

    let mut r = rng(10);
    let p = randomized(&LsgParams::new(&mut r, videos[0].dims(), 8, 3), &mut r, 0.5);
    let (e0, w0) = p.encode(&FeatureBatch::new(&[&videos[0]]).unwrap());
    let (e1, w1) = p.encode(&FeatureBatch::new(&[&videos[1]]).unwrap());
    assert_eq!(e0.appearance.value(), e1.appearance.value());
    assert_eq!(w0.object.value(), w1.object.value());
    assert!(max_abs_diff(e0.motion.value(), e1.motion.value()) > 1e-6);
    assert!(max_abs_diff(w0.motion.value(), w1.motion.value()) > 1e-6);
}

#[test]
fn batched_encoding_matches_single_videos() {
    let mut r = rng(11);
    let d = dims(4, 3, 5);
    let p = randomized(&LsgParams::new(&mut r, d, 6, 2), &mut r, 0.5);
    let (a, b) = (video(&mut r, 3, 2, d), video(&mut r, 3, 2, d));
    let (_, both) = p.encode(&FeatureBatch::new(&[&a, &b]).unwrap());
    let (_, only_b) = p.encode(&FeatureBatch::new(&[&b]).unwrap());
    let second = both.object.value().slice(ndarray::s![2..4, ..]).to_owned();
    assert!(max_abs_diff(&second, only_b.object.value()) < 1e-12);
}

#[test]
fn every_site_has_its_own_kernel() {
    let mut r = rng(12);
    let p = LsgParams::new(&mut r, dims(3, 3, 3), 4, 2);
    let sites = [
        KernelSite::AppearanceGraph,
        KernelSite::MotionGraph,
        KernelSite::ObjectWords,
        KernelSite::MotionWords,
    ];
    for (i, a) in sites.iter().enumerate() {
        for b in &sites[i + 1..] {
            assert_ne!(p.kernel(*a).psi.weight.value(), p.kernel(*b).psi.weight.value());
        }
    }
}

fn permutation(len: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..len).collect();
    p.shuffle(&mut rng(seed));
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn affinity_rows_are_stochastic(seed in any::<u64>(), t in 1usize..5, l in 1usize..7, scale in 0.1f64..20.0) {
        let mut r = rng(seed);
        let kernel = randomized(&Kernel::new(&mut r, 3, 2, 3), &mut r, scale);
        let a = kernel_affinity(&kernel, &Var::constant(randn(&mut r, t, 3, scale)), &Var::constant(randn(&mut r, l, 2, scale)), 1);
        for row in a.value().rows() {
            prop_assert!((row.sum() - 1.0).abs() <= 1e-6);
            prop_assert!(row.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn softmax_ignores_per_row_shifts(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let mut r = rng(seed);
        let kernel = Kernel::new(&mut r, 3, 3, 3);
        let (q, k) = (Var::constant(randn(&mut r, 4, 3, 1.0)), Var::constant(randn(&mut r, 5, 3, 1.0)));
        let logits = kernel.logits(&q, &k, 1);
        let offsets = Var::constant(randn(&mut r, 4, 1, shift.abs()).mapv(|x| x + shift));
        let shifted = logits.add(&offsets.broadcast_cols(5)).softmax_rows();
        prop_assert!(max_abs_diff(shifted.value(), kernel.affinity(&q, &k, 1).value()) < 1e-12);
    }

    #[test]
    fn graph_ignores_region_order(seed in any::<u64>()) {
        let mut r = rng(seed);
        let kernel = randomized(&Kernel::new(&mut r, 4, 3, 4), &mut r, 1.0);
        let frames = Var::constant(randn(&mut r, 3, 4, 1.0));
        let regions = Var::constant(randn(&mut r, 6, 3, 1.0));
        let w = Var::constant(randn(&mut r, 4, 3, 1.0));
        let base = conditional_graph(&kernel, &frames, &regions, &w, 1);
        let perm = conditional_graph(&kernel, &frames, &regions.gather_rows(&permutation(6, seed ^ 1)), &w, 1);
        prop_assert!(max_abs_diff(base.value(), perm.value()) < 1e-10);
    }

    #[test]
    fn aggregation_ignores_frame_order(seed in any::<u64>()) {
        let mut r = rng(seed);
        let kernel = randomized(&Kernel::new(&mut r, 4, 4, 4), &mut r, 1.0);
        let enhanced = Var::constant(randn(&mut r, 5, 4, 1.0));
        let seeds = Var::constant(randn(&mut r, 2, 4, 1.0));
        let w = Var::constant(randn(&mut r, 4, 4, 1.0));
        let base = latent_aggregate(&kernel, &enhanced, &seeds, &w, 1);
        let perm = latent_aggregate(&kernel, &enhanced.gather_rows(&permutation(5, seed ^ 2)), &seeds, &w, 1);
        prop_assert!(max_abs_diff(base.value(), perm.value()) < 1e-10);
    }
}
