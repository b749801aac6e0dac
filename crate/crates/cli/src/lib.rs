//! `lsg` command-line entry points: synth, train, generate, evaluate.

pub mod layers;
pub mod manifest;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use lsg_core::data::{
    load_bundle, read_captions, synth_corpus, write_bundle, write_captions, CaptionRecord, SynthConfig,
    CAPTIONS_FILE,
};
use lsg_core::eval::{decode_videos, eval_pairs, format_report, score};
use lsg_core::train::Checkpoint;
use lsg_core::{Corpus, Dataset, TrainConfig, Trainer, Vocabulary};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use manifest::RunManifest;

pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const SPLIT_FILE: &str = "split.json";

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation or configuration; exit code 2.
    Usage(String),
    /// Failure while doing the work; exit code 1.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<lsg_core::Error> for CliError {
    fn from(e: lsg_core::Error) -> Self {
        match e {
            lsg_core::Error::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

#[derive(Parser, Debug)]
#[command(name = "lsg", version, about = "Video captioning with latent semantic graphs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum Command {
    /// Write a synthetic feature bundle and captions file.
    Synth(SynthArgs),
    /// Train a captioner on a bundle.
    Train(TrainArgs),
    /// Caption every video of a bundle with a checkpoint.
    Generate(GenerateArgs),
    /// Score generated captions against references.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 500)]
    pub scenes: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub objects: usize,
    #[arg(long, default_value_t = 10)]
    pub actions: usize,
    #[arg(long, default_value_t = 5)]
    pub backgrounds: usize,
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    #[arg(long, default_value_t = 4)]
    pub regions: usize,
    /// Width of appearance, motion and region features.
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    /// Add "a X is V and a Y is V" captions for multi-object scenes.
    #[arg(long)]
    pub compound: bool,
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Preset {
    /// Full-scale defaults.
    Paper,
    /// Small model for the synthetic corpus.
    Toy,
}

/// Overrides for individual config fields.
#[derive(Args, Debug, Default)]
pub struct ConfigFlags {
    #[arg(long)]
    pub graph_dim: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub disc_dim: Option<usize>,
    /// Visual words per channel.
    #[arg(long = "k")]
    pub visual_words: Option<usize>,
    /// Visual words compared by the validator.
    #[arg(long = "k-select")]
    pub selected_words: Option<usize>,
    #[arg(long)]
    pub mlb_dim: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long = "ndisc")]
    pub n_disc: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_gen: Option<f64>,
    #[arg(long)]
    pub lr_disc_start: Option<f64>,
    #[arg(long)]
    pub lr_disc_end: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub max_caption_len: Option<usize>,
    #[arg(long)]
    pub min_count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Train without the validator (forces beta = 0).
    #[arg(long)]
    pub no_disc: bool,
    #[arg(long)]
    pub free_running: bool,
}

impl ConfigFlags {
    pub fn to_layer(&self) -> Map<String, Value> {
        let mut m = Map::new();
        macro_rules! put {
            ($($field:ident),*) => {
                $( if let Some(v) = self.$field { m.insert(stringify!($field).into(), serde_json::json!(v)); } )*
            };
        }
        put!(
            graph_dim, hidden_dim, embed_dim, disc_dim, visual_words, selected_words, mlb_dim, lambda,
            beta, n_disc, batch_size, lr_gen, lr_disc_start, lr_disc_end, epochs, beam, max_caption_len,
            min_count, seed, clip_norm
        );
        if self.no_disc {
            m.insert("no_disc".into(), Value::Bool(true));
        }
        if self.free_running {
            m.insert("free_running".into(), Value::Bool(true));
        }
        m
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Bundle directory with captions.jsonl.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoint, log and manifest.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Preset::Paper)]
    pub preset: Preset,
    /// TOML file of config keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Hold out every n-th video whose captions all occur in training;
    /// 0 disables validation.
    #[arg(long, default_value_t = 5)]
    pub val_every: usize,
    /// Continue from the checkpoint in --out.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many completed epochs without changing the config.
    #[arg(long)]
    pub stop_after: Option<usize>,
    #[arg(long)]
    pub force: bool,
    #[command(flatten)]
    pub flags: ConfigFlags,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Captions file to write (one JSON record per line).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub beam: usize,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Restrict to one side of a split.json written by `train`.
    #[arg(long, requires = "split")]
    pub split_file: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub split: Option<SplitSide>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitSide {
    Train,
    Val,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub candidates: PathBuf,
    #[arg(long)]
    pub references: PathBuf,
    /// Row label in the report.
    #[arg(long, default_value = "eval")]
    pub name: String,
    /// JSON report path; defaults next to the candidates file.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

/// Video ids of each side of the held-out split.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitRecord {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Generate(a) => cmd_generate(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

pub fn cmd_synth(a: &SynthArgs) -> Result<(), CliError> {
    let manifest = RunManifest::start("synth").output("bundle", &a.out);
    let cfg = SynthConfig {
        num_scenes: a.scenes,
        objects: a.objects,
        actions: a.actions,
        backgrounds: a.backgrounds,
        frames: a.frames,
        regions_per_frame: a.regions,
        appearance_dim: a.dim,
        motion_dim: a.dim,
        region_dim: a.dim,
        noise: a.noise,
        seed: a.seed,
        compound_captions: a.compound,
    };
    if a.out.join(lsg_core::data::features::MANIFEST_FILE).exists() && !a.force {
        return Err(CliError::Usage(format!(
            "{} already holds a bundle; pass --force to overwrite",
            a.out.display()
        )));
    }
    let corpus = synth_corpus(&cfg)?;
    write_bundle(&a.out, &corpus.videos)?;
    let records: Vec<CaptionRecord> = corpus
        .captions
        .iter()
        .map(|(v, c)| CaptionRecord {
            video_id: v.clone(),
            caption: c.clone(),
        })
        .collect();
    write_captions(a.out.join(CAPTIONS_FILE), &records)?;
    let mut manifest = manifest;
    manifest.seed = Some(a.seed);
    manifest.finish(&a.out.join(RUN_MANIFEST))?;
    println!(
        "wrote {} videos and {} captions to {}",
        corpus.videos.len(),
        records.len(),
        a.out.display()
    );
    Ok(())
}

pub fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig, CliError> {
    let preset = match a.preset {
        Preset::Paper => TrainConfig::default(),
        Preset::Toy => TrainConfig::toy(),
    };
    layers::resolve(
        &preset,
        a.config.as_deref(),
        layers::env_layer(std::env::vars()),
        a.flags.to_layer(),
    )
}

fn append_line(path: &Path, line: &str) -> Result<(), CliError> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| io_err(path, e))?;
    writeln!(f, "{line}").map_err(|e| io_err(path, e))
}

/// Keeps the first `n` lines of `path`.
fn truncate_lines(path: &Path, n: usize) -> Result<(), CliError> {
    let text = fs::read_to_string(path).unwrap_or_default();
    let kept: String = text.lines().take(n).map(|l| format!("{l}\n")).collect();
    fs::write(path, kept).map_err(|e| io_err(path, e))
}

pub fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    if let Some(c) = &a.config {
        require_file(c, "config file")?;
    }
    let cfg = resolve_train_config(a)?;
    require_file(&a.data.join(lsg_core::data::features::MANIFEST_FILE), "bundle manifest")?;
    require_file(&a.data.join(CAPTIONS_FILE), "captions file")?;
    if a.val_every == 1 {
        return Err(CliError::Usage("--val-every must be 0 or at least 2".into()));
    }
    let ckpt_path = a.out.join(CHECKPOINT_FILE);
    let log_path = a.out.join(LOG_FILE);
    if ckpt_path.exists() && !a.resume && !a.force {
        return Err(CliError::Usage(format!(
            "{} exists; pass --resume to continue or --force to overwrite",
            ckpt_path.display()
        )));
    }
    let manifest = RunManifest::start("train")
        .with_config(&cfg)
        .input("data", &a.data)
        .output("checkpoint", &ckpt_path)
        .output("log", &log_path);

    let corpus = Corpus::load(&a.data)?;
    if corpus.is_empty() {
        return Err(CliError::Runtime("bundle has no videos".into()));
    }
    let (train, val) = if a.val_every >= 2 {
        corpus.split_seen(a.val_every)
    } else {
        (corpus.clone(), corpus.subset(|_| false))
    };
    for w in cfg.warnings(train.videos[0].frames()) {
        eprintln!("warning: {w}");
    }
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;

    let mut trainer = if a.resume && ckpt_path.exists() {
        let ckpt = Checkpoint::load(&ckpt_path)?;
        if ckpt.config != cfg {
            return Err(CliError::Usage(format!(
                "resolved config (hash {}) differs from the checkpoint's (hash {})",
                cfg.hash(),
                ckpt.config.hash()
            )));
        }
        truncate_lines(&log_path, ckpt.epoch)?;
        Trainer::from_checkpoint(ckpt)
    } else {
        let _ = fs::remove_file(&log_path);
        let vocab = Vocabulary::build(&train.all_captions(), cfg.min_count)?;
        Trainer::new(cfg.clone(), vocab, train.videos[0].dims())?
    };
    let split = SplitRecord {
        train: train.videos.iter().map(|v| v.video_id.clone()).collect(),
        val: val.videos.iter().map(|v| v.video_id.clone()).collect(),
    };
    let split_path = a.out.join(SPLIT_FILE);
    fs::write(&split_path, serde_json::to_string_pretty(&split).expect("serializes") + "\n")
        .map_err(|e| io_err(&split_path, e))?;

    let vocab = trainer.state.vocab.clone();
    let train_data = Dataset::new(&train, &vocab, cfg.max_caption_len)?;
    let val_data = Dataset::new(&val, &vocab, cfg.max_caption_len)?;
    eprintln!(
        "training on {} videos ({} captions), validating on {}; vocabulary {}",
        train.len(),
        train_data.examples.len(),
        val.len(),
        vocab.len()
    );
    let mut last = None;
    while trainer.state.epoch < cfg.epochs {
        if a.stop_after.is_some_and(|n| trainer.state.epoch >= n) {
            break;
        }
        let (_, mut log) = trainer.train_epoch(&train_data)?;
        if !val_data.videos.is_empty() {
            let (c, em) = trainer.validate(&val_data)?;
            log.val_cider = Some(c);
            log.val_exact_match = Some(em);
        }
        append_line(&log_path, &serde_json::to_string(&log).expect("log serializes"))?;
        trainer.state.save(&ckpt_path)?;
        eprintln!(
            "epoch {:>3}  L_C {:.4}  L_D {}  val CIDEr {}  exact {}",
            log.epoch,
            log.l_c,
            log.l_d.map_or("-".into(), |x| format!("{x:.4}")),
            log.val_cider.map_or("-".into(), |x| format!("{x:.4}")),
            log.val_exact_match.map_or("-".into(), |x| format!("{x:.3}")),
        );
        last = Some(log);
    }
    if last.is_none() {
        // nothing left to do, but keep the checkpoint on disk consistent
        trainer.state.save(&ckpt_path)?;
    }
    manifest
        .output("split", &split_path)
        .finish(&a.out.join(RUN_MANIFEST))?;
    if let Some(log) = last {
        println!("{}", serde_json::to_string(&log).expect("log serializes"));
    }
    Ok(())
}

fn read_split(path: &Path, side: SplitSide) -> Result<HashSet<String>, CliError> {
    require_file(path, "split file")?;
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let s: SplitRecord = serde_json::from_str(&text)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Ok(match side {
        SplitSide::Train => s.train,
        SplitSide::Val => s.val,
    }
    .into_iter()
    .collect())
}

pub fn cmd_generate(a: &GenerateArgs) -> Result<(), CliError> {
    require_file(&a.checkpoint, "checkpoint")?;
    require_file(&a.data.join(lsg_core::data::features::MANIFEST_FILE), "bundle manifest")?;
    if a.beam == 0 {
        return Err(CliError::Usage("--beam must be at least 1".into()));
    }
    if a.out.exists() && !a.force {
        return Err(CliError::Usage(format!(
            "{} exists; pass --force to overwrite",
            a.out.display()
        )));
    }
    let keep = match (&a.split_file, a.split) {
        (Some(p), Some(side)) => Some(read_split(p, side)?),
        (None, Some(_)) => return Err(CliError::Usage("--split needs --split-file".into())),
        _ => None,
    };
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let mut videos = load_bundle(&a.data)?;
    if let Some(keep) = &keep {
        videos.retain(|v| keep.contains(&v.video_id));
    }
    if let Some(v) = videos.iter().find(|v| v.dims() != ckpt.feature_dims) {
        return Err(CliError::Runtime(format!(
            "video {} has feature dims {:?} but the checkpoint expects {:?}",
            v.video_id,
            v.dims(),
            ckpt.feature_dims
        )));
    }
    let max_len = a.max_len.unwrap_or(ckpt.config.max_caption_len);
    let captions = decode_videos(&ckpt.generator, &ckpt.vocab, &videos, a.beam, max_len)?;
    let records: Vec<CaptionRecord> = videos
        .iter()
        .zip(captions)
        .map(|(v, caption)| CaptionRecord {
            video_id: v.video_id.clone(),
            caption,
        })
        .collect();
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    write_captions(&a.out, &records)?;
    let mut manifest = RunManifest::start("generate")
        .with_config(&ckpt.config)
        .input("checkpoint", &a.checkpoint)
        .input("data", &a.data)
        .output("captions", &a.out);
    manifest.inputs.insert("beam".into(), a.beam.to_string());
    manifest.finish(&a.out.with_extension("manifest.json"))?;
    println!("wrote {} captions to {}", records.len(), a.out.display());
    Ok(())
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<(), CliError> {
    require_file(&a.candidates, "candidates file")?;
    require_file(&a.references, "references file")?;
    let candidates = read_captions(&a.candidates)?;
    let references: BTreeMap<String, Vec<String>> =
        lsg_core::data::group_captions(&read_captions(&a.references)?);
    let pairs = eval_pairs(&candidates, &references)?;
    let report = score(&a.name, &pairs)?;
    print!("{}", format_report(std::slice::from_ref(&report)));
    let report_path = a
        .report
        .clone()
        .unwrap_or_else(|| a.candidates.with_extension("report.json"));
    fs::write(
        &report_path,
        serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
    )
    .map_err(|e| io_err(&report_path, e))?;
    RunManifest::start("evaluate")
        .input("candidates", &a.candidates)
        .input("references", &a.references)
        .output("report", &report_path)
        .finish(&report_path.with_extension("manifest.json"))
}
