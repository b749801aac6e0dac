//! Deterministic synthetic scene corpus.
//!
//! Each scene places one to three objects in front of a background while an
//! action happens. Prototype vectors for objects, actions and backgrounds
//! are drawn once from the seed; every scene adds Gaussian noise on top.

use ndarray::{Array1, Array2, Array3};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::features::VideoFeatures;
use crate::error::{Error, Result};

const OBJECT_WORDS: &[&str] = &[
    "dog", "cat", "man", "woman", "child", "horse", "bird", "car", "ball", "monkey", "rabbit",
    "panda", "girl", "boy", "cow", "goat", "duck", "fox", "tiger", "lion", "bear", "sheep", "robot",
    "chef", "frog", "turtle", "pig", "mouse", "owl", "camel",
];

const ACTION_WORDS: &[&str] = &[
    "running", "jumping", "swimming", "dancing", "sleeping", "eating", "walking", "sitting",
    "climbing", "singing", "rolling", "flying", "cooking", "playing", "spinning",
];

/// Noun used for object `id`.
pub fn object_word(id: usize) -> String {
    OBJECT_WORDS
        .get(id)
        .map(|w| w.to_string())
        .unwrap_or_else(|| format!("object{id}"))
}

pub fn action_word(id: usize) -> String {
    ACTION_WORDS
        .get(id)
        .map(|w| w.to_string())
        .unwrap_or_else(|| format!("action{id}"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_scenes: usize,
    /// Object prototype bank size.
    pub objects: usize,
    /// Action prototype bank size.
    pub actions: usize,
    /// Background prototype bank size.
    pub backgrounds: usize,
    pub frames: usize,
    pub regions_per_frame: usize,
    pub appearance_dim: usize,
    pub motion_dim: usize,
    pub region_dim: usize,
    pub noise: f64,
    pub seed: u64,
    /// Also emit "a X is V and a Y is V" for multi-object scenes.
    pub compound_captions: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_scenes: 500,
            objects: 20,
            actions: 10,
            backgrounds: 5,
            frames: 8,
            regions_per_frame: 4,
            appearance_dim: 32,
            motion_dim: 32,
            region_dim: 32,
            noise: 0.1,
            seed: 7,
            compound_captions: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub video_id: String,
    /// Sorted, distinct, `1..=3` entries.
    pub object_ids: Vec<usize>,
    pub action_id: usize,
    pub background_id: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub videos: Vec<VideoFeatures>,
    /// `(video_id, caption)` records.
    pub captions: Vec<(String, String)>,
    pub scenes: Vec<SceneSpec>,
}

struct Prototypes {
    object_region: Array2<f64>,
    object_appearance: Array2<f64>,
    action: Array2<f64>,
    background: Array2<f64>,
}

fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// Captions describing a scene.
pub fn scene_captions(scene: &SceneSpec, compound: bool) -> Vec<String> {
    let verb = action_word(scene.action_id);
    let mut out: Vec<String> = scene
        .object_ids
        .iter()
        .map(|&o| format!("a {} is {verb}", object_word(o)))
        .collect();
    if compound && scene.object_ids.len() >= 2 {
        out.truncate(2);
        out.push(format!(
            "a {} is {verb} and a {} is {verb}",
            object_word(scene.object_ids[0]),
            object_word(scene.object_ids[1])
        ));
    }
    out
}

fn check_config(cfg: &SynthConfig) -> Result<()> {
    if cfg.objects == 0 || cfg.actions == 0 || cfg.backgrounds == 0 {
        return Err(Error::Config("prototype banks must be nonempty".into()));
    }
    if cfg.frames == 0 || cfg.regions_per_frame == 0 {
        return Err(Error::Config("frames and regions per frame must be positive".into()));
    }
    if cfg.appearance_dim == 0 || cfg.motion_dim == 0 || cfg.region_dim == 0 {
        return Err(Error::Config("feature dimensions must be positive".into()));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(Error::Config("noise must be finite and nonnegative".into()));
    }
    Ok(())
}

impl Prototypes {
    fn draw(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Self {
        Prototypes {
            object_region: gaussian_matrix(rng, cfg.objects, cfg.region_dim),
            object_appearance: gaussian_matrix(rng, cfg.objects, cfg.appearance_dim),
            action: gaussian_matrix(rng, cfg.actions, cfg.motion_dim),
            background: gaussian_matrix(rng, cfg.backgrounds, cfg.appearance_dim),
        }
    }
}

/// Features for hand-picked scenes, using the prototypes that
/// [`synth_corpus`] draws for the same configuration.
pub fn render_scenes(cfg: &SynthConfig, scenes: &[SceneSpec]) -> Result<Vec<VideoFeatures>> {
    check_config(cfg)?;
    let protos = Prototypes::draw(&mut ChaCha8Rng::seed_from_u64(cfg.seed), cfg);
    scenes
        .iter()
        .map(|s| {
            let in_banks = !s.object_ids.is_empty()
                && s.object_ids.len() <= 3
                && s.object_ids.iter().all(|&o| o < cfg.objects)
                && s.action_id < cfg.actions
                && s.background_id < cfg.backgrounds;
            if !in_banks {
                return Err(Error::Config(format!("scene {} is outside the prototype banks", s.video_id)));
            }
            render_scene(s, &protos, cfg)
        })
        .collect()
}

pub fn synth_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    if cfg.num_scenes == 0 {
        return Err(Error::Config("num_scenes must be at least 1".into()));
    }
    check_config(cfg)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let protos = Prototypes::draw(&mut rng, cfg);

    let mut corpus = SynthCorpus {
        videos: Vec::with_capacity(cfg.num_scenes),
        captions: Vec::new(),
        scenes: Vec::with_capacity(cfg.num_scenes),
    };
    for index in 0..cfg.num_scenes {
        let n_obj = rng.random_range(1..=3usize.min(cfg.objects));
        let mut object_ids = sample(&mut rng, cfg.objects, n_obj).into_vec();
        object_ids.sort_unstable();
        let scene = SceneSpec {
            video_id: format!("scene{index:05}"),
            object_ids,
            action_id: rng.random_range(0..cfg.actions),
            background_id: rng.random_range(0..cfg.backgrounds),
            seed: rng.random(),
        };
        let video = render_scene(&scene, &protos, cfg)?;
        for c in scene_captions(&scene, cfg.compound_captions) {
            corpus.captions.push((scene.video_id.clone(), c));
        }
        corpus.videos.push(video);
        corpus.scenes.push(scene);
    }
    Ok(corpus)
}

fn render_scene(scene: &SceneSpec, p: &Prototypes, cfg: &SynthConfig) -> Result<VideoFeatures> {
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(e.to_string()))?;
    let (t, n) = (cfg.frames, cfg.regions_per_frame);
    let objects = &scene.object_ids;

    let mut object_mean = Array1::<f64>::zeros(cfg.appearance_dim);
    for &o in objects {
        object_mean += &p.object_appearance.row(o);
    }
    object_mean /= objects.len() as f64;
    let base_app = &p.background.row(scene.background_id) + &object_mean;

    let mut appearance = Array2::zeros((t, cfg.appearance_dim));
    let mut motion = Array2::zeros((t, cfg.motion_dim));
    let mut regions = Array3::zeros((t, n, cfg.region_dim));
    for f in 0..t {
        for (d, v) in appearance.row_mut(f).iter_mut().enumerate() {
            *v = base_app[d] + noise.sample(&mut rng);
        }
        for (d, v) in motion.row_mut(f).iter_mut().enumerate() {
            *v = p.action[[scene.action_id, d]] + noise.sample(&mut rng);
        }
        for slot in 0..n {
            let o = objects[slot % objects.len()];
            for d in 0..cfg.region_dim {
                regions[[f, slot, d]] = p.object_region[[o, d]] + noise.sample(&mut rng);
            }
        }
    }
    VideoFeatures::new(scene.video_id.clone(), appearance, motion, regions)
}
