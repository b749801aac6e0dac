//! Fixtures shared by the benchmarks.

use lsg_core::data::{synth_corpus, SynthConfig};
use lsg_core::{Corpus, Dataset, FeatureBatch, Generator, TrainConfig, VideoFeatures, Vocabulary};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Synthetic corpus with the toy preset's model, ready to train.
pub struct Fixture {
    pub cfg: TrainConfig,
    pub vocab: Vocabulary,
    pub data: Dataset,
    pub generator: Generator,
}

impl Fixture {
    pub fn toy(scenes: usize) -> Self {
        let synth = synth_corpus(&SynthConfig {
            num_scenes: scenes,
            ..SynthConfig::default()
        })
        .expect("synth");
        let corpus = Corpus::from_synth(&synth);
        let cfg = TrainConfig::toy();
        let vocab = Vocabulary::build(&corpus.all_captions(), cfg.min_count).expect("vocab");
        let data = Dataset::new(&corpus, &vocab, cfg.max_caption_len).expect("dataset");
        let generator = Generator::new(
            &mut ChaCha8Rng::seed_from_u64(cfg.seed),
            data.videos[0].dims(),
            vocab.len(),
            &cfg,
        );
        Fixture {
            cfg,
            vocab,
            data,
            generator,
        }
    }

    pub fn videos(&self, n: usize) -> Vec<&VideoFeatures> {
        self.data.videos.iter().take(n).collect()
    }

    pub fn features(&self, n: usize) -> FeatureBatch {
        FeatureBatch::new(&self.videos(n)).expect("uniform shapes")
    }

    /// The first `n` examples as a training batch.
    pub fn batch(&self, n: usize) -> (FeatureBatch, Vec<Vec<usize>>) {
        let idx: Vec<usize> = (0..n).collect();
        self.data.batch(&idx).expect("batch")
    }
}
