//! Trains on the synthetic corpus and prints per-epoch validation scores.
//!
//! Usage: `cargo run --release -p lsg-core --example toy_run [beta] [epochs] [k]`

use std::time::Instant;

use lsg_core::data::{synth_corpus, SynthConfig};
use lsg_core::{Corpus, Dataset, TrainConfig, Trainer, Vocabulary};

fn main() -> lsg_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let beta: f64 = args.get(1).map_or(0.0, |s| s.parse().expect("beta"));
    let epochs: usize = args.get(2).map_or(30, |s| s.parse().expect("epochs"));
    let k: usize = args.get(3).map_or(4, |s| s.parse().expect("k"));

    let corpus = Corpus::from_synth(&synth_corpus(&SynthConfig::default())?);
    let (train, val) = corpus.split_seen(5);
    let cfg = TrainConfig {
        beta,
        no_disc: beta == 0.0,
        epochs,
        visual_words: k,
        ..TrainConfig::toy()
    };
    let vocab = Vocabulary::build(&train.all_captions(), cfg.min_count)?;
    println!("train {} val {} vocab {}", train.len(), val.len(), vocab.len());
    let train_data = Dataset::new(&train, &vocab, cfg.max_caption_len)?;
    let val_data = Dataset::new(&val, &vocab, cfg.max_caption_len)?;
    let mut trainer = Trainer::new(cfg, vocab, train.videos[0].dims())?;
    let start = Instant::now();
    trainer.fit(&train_data, Some(&val_data), |_, log| {
        println!(
            "epoch {:>2} L_C {:.4} L_D {:?} |L_D|max {:?} L_G^ {:?} CIDEr {:.3} EM {:.3} ({:.1}s)",
            log.epoch,
            log.l_c,
            log.l_d,
            log.l_d_max_abs,
            log.l_g_hat,
            log.val_cider.unwrap_or(f64::NAN),
            log.val_exact_match.unwrap_or(f64::NAN),
            start.elapsed().as_secs_f64()
        );
        Ok(())
    })?;
    Ok(())
}
