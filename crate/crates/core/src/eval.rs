//! Decoding a corpus and scoring it against references.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::data::{normalize, CaptionRecord, Corpus, VideoFeatures, Vocabulary};
use crate::encoder::FeatureBatch;
use crate::error::{Error, Result};
use crate::metrics::{bleu4, cider, rouge_l, EvalPair};
use crate::model::Generator;

/// Videos decoded per forward pass.
pub const DECODE_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub split: String,
    pub videos: usize,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
}

pub fn score(split: &str, pairs: &[EvalPair]) -> Result<MetricReport> {
    Ok(MetricReport {
        split: split.to_string(),
        videos: pairs.len(),
        bleu4: bleu4(pairs)?,
        rouge_l: rouge_l(pairs)?,
        cider: cider(pairs)?,
    })
}

/// One row per split in `B@4  M  R  C` order; METEOR is not computed.
pub fn format_report(reports: &[MetricReport]) -> String {
    let mut out = String::new();
    writeln!(out, "# CIDEr computed without stemming").unwrap();
    writeln!(out, "{:<12} {:>7} {:>8} {:>8} {:>8} {:>8}", "split", "videos", "B@4", "M", "R", "C").unwrap();
    for r in reports {
        writeln!(
            out,
            "{:<12} {:>7} {:>8.4} {:>8} {:>8.4} {:>8.4}",
            r.split, r.videos, r.bleu4, "n/a", r.rouge_l, r.cider
        )
        .unwrap();
    }
    out
}

/// Decodes every video; `beam == 1` is plain greedy decoding.
pub fn decode_videos(
    generator: &Generator,
    vocab: &Vocabulary,
    videos: &[VideoFeatures],
    beam: usize,
    max_len: usize,
) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(videos.len());
    let mut start = 0;
    while start < videos.len() {
        // chunks never mix feature shapes
        let shape = |v: &VideoFeatures| (v.frames(), v.regions_per_frame(), v.dims());
        let first = shape(&videos[start]);
        let mut end = start + 1;
        while end < videos.len() && end - start < DECODE_CHUNK && shape(&videos[end]) == first {
            end += 1;
        }
        let refs: Vec<&VideoFeatures> = videos[start..end].iter().collect();
        let batch = FeatureBatch::new(&refs)?;
        let hyps = if beam == 1 {
            generator.greedy(&batch, max_len)
        } else {
            generator.beam_search(&batch, beam, max_len)
        };
        out.extend(hyps.iter().map(|h| vocab.decode_string(&h.tokens)));
        start = end;
    }
    Ok(out)
}

/// Pairs each generated caption with the references of its video.
pub fn eval_pairs(
    records: &[CaptionRecord],
    references: &BTreeMap<String, Vec<String>>,
) -> Result<Vec<EvalPair>> {
    records
        .iter()
        .map(|r| {
            let refs = references
                .get(&r.video_id)
                .ok_or_else(|| Error::Invalid(format!("no references for video {}", r.video_id)))?;
            EvalPair::new(r.video_id.clone(), &r.caption, refs)
        })
        .collect()
}

/// Fraction of captions equal to one of their references after
/// normalization.
pub fn exact_match(records: &[CaptionRecord], references: &BTreeMap<String, Vec<String>>) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let hits = records
        .iter()
        .filter(|r| {
            let c = normalize(&r.caption);
            references
                .get(&r.video_id)
                .is_some_and(|refs| refs.iter().any(|x| normalize(x) == c))
        })
        .count();
    hits as f64 / records.len() as f64
}

/// Decodes `corpus` and scores it.
pub fn evaluate(
    generator: &Generator,
    vocab: &Vocabulary,
    corpus: &Corpus,
    beam: usize,
    max_len: usize,
    split: &str,
) -> Result<(Vec<CaptionRecord>, MetricReport)> {
    let captions = decode_videos(generator, vocab, &corpus.videos, beam, max_len)?;
    let records: Vec<CaptionRecord> = corpus
        .videos
        .iter()
        .zip(captions)
        .map(|(v, caption)| CaptionRecord {
            video_id: v.video_id.clone(),
            caption,
        })
        .collect();
    let report = score(split, &eval_pairs(&records, &corpus.references)?)?;
    Ok((records, report))
}

/// The caption a video-blind captioner would emit: the most frequent
/// training words, as many as the rounded mean caption length.
pub fn unigram_baseline<S: AsRef<str>>(captions: &[S]) -> String {
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut total_len = 0;
    for c in captions {
        let toks = normalize(c.as_ref());
        total_len += toks.len();
        for t in toks {
            *counts.entry(t).or_default() += 1;
        }
    }
    if captions.is_empty() {
        return String::new();
    }
    let len = (total_len as f64 / captions.len() as f64).round() as usize;
    let mut words: Vec<(String, usize)> = counts.into_iter().collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    words
        .into_iter()
        .take(len)
        .map(|(w, _)| w)
        .collect::<Vec<_>>()
        .join(" ")
}
