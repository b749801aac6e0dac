//! Feature bundles, captions, vocabulary and the synthetic corpus.

pub mod features;
pub mod synth;
pub mod vocab;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use features::{load_bundle, write_bundle, FeatureDims, VideoFeatures};
pub use synth::{render_scenes, synth_corpus, SceneSpec, SynthConfig, SynthCorpus};
pub use vocab::{normalize, Caption, Vocabulary, BOS, EOS, PAD, UNK};

use crate::error::{Error, Result};

pub const CAPTIONS_FILE: &str = "captions.jsonl";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub video_id: String,
    pub caption: String,
}

/// Reads one `{video_id, caption}` JSON record per line.
pub fn read_captions(path: impl AsRef<Path>) -> Result<Vec<CaptionRecord>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CaptionRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            what: format!("{}:{}", path.display(), lineno + 1),
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_captions(path: impl AsRef<Path>, records: &[CaptionRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("record serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Groups caption strings by video id.
pub fn group_captions(records: &[CaptionRecord]) -> BTreeMap<String, Vec<String>> {
    let mut map: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for r in records {
        map.entry(r.video_id.clone()).or_default().push(r.caption.clone());
    }
    map
}

/// Videos with their reference captions.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub videos: Vec<VideoFeatures>,
    pub references: BTreeMap<String, Vec<String>>,
}

impl Corpus {
    pub fn new(videos: Vec<VideoFeatures>, records: &[CaptionRecord]) -> Self {
        Corpus {
            videos,
            references: group_captions(records),
        }
    }

    pub fn from_synth(s: &SynthCorpus) -> Self {
        let records: Vec<CaptionRecord> = s
            .captions
            .iter()
            .map(|(v, c)| CaptionRecord {
                video_id: v.clone(),
                caption: c.clone(),
            })
            .collect();
        Corpus::new(s.videos.clone(), &records)
    }

    /// Loads `dir/manifest.json` and `dir/captions.jsonl`.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let videos = load_bundle(dir)?;
        let records = read_captions(dir.join(CAPTIONS_FILE))?;
        Ok(Corpus::new(videos, &records))
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn all_captions(&self) -> Vec<&str> {
        self.videos
            .iter()
            .filter_map(|v| self.references.get(&v.video_id))
            .flatten()
            .map(String::as_str)
            .collect()
    }

    /// Keeps the videos whose id satisfies `keep`.
    pub fn subset(&self, keep: impl Fn(&str) -> bool) -> Corpus {
        let videos: Vec<_> = self
            .videos
            .iter()
            .filter(|v| keep(&v.video_id))
            .cloned()
            .collect();
        let references = videos
            .iter()
            .filter_map(|v| {
                self.references
                    .get(&v.video_id)
                    .map(|r| (v.video_id.clone(), r.clone()))
            })
            .collect();
        Corpus { videos, references }
    }

    /// Splits off every `every`-th video as held-out, keeping a video out
    /// only when each of its normalized captions also occurs among the
    /// training captions. Returns `(train, held_out)`.
    pub fn split_seen(&self, every: usize) -> (Corpus, Corpus) {
        assert!(every >= 2, "split stride must be at least 2");
        let norm = |c: &String| normalize(c).join(" ");
        let candidate = |i: usize| i % every == every - 1;
        let seen: HashSet<String> = self
            .videos
            .iter()
            .enumerate()
            .filter(|(i, _)| !candidate(*i))
            .filter_map(|(_, v)| self.references.get(&v.video_id))
            .flatten()
            .map(norm)
            .collect();
        let held: HashSet<&str> = self
            .videos
            .iter()
            .enumerate()
            .filter(|(i, v)| {
                candidate(*i)
                    && self
                        .references
                        .get(&v.video_id)
                        .is_some_and(|refs| refs.iter().all(|c| seen.contains(&norm(c))))
            })
            .map(|(_, v)| v.video_id.as_str())
            .collect();
        (
            self.subset(|id| !held.contains(id)),
            self.subset(|id| held.contains(id)),
        )
    }
}
