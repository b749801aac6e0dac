//! Corpus-level BLEU-4, ROUGE-L and CIDEr.
//!
//! CIDEr here does not stem tokens. Document frequencies come from the
//! references of the pairs being scored.

use std::collections::{HashMap, HashSet};

use crate::data::normalize;
use crate::error::{Error, Result};

pub const MAX_N: usize = 4;
pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_SCALE: f64 = 10.0;

/// A candidate caption with its references, already tokenized.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPair {
    pub video_id: String,
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

fn tokens(s: &str) -> Vec<String> {
    normalize(s)
}

impl EvalPair {
    /// Normalizes and tokenizes raw strings. References must not be empty.
    pub fn new(video_id: impl Into<String>, candidate: &str, references: &[impl AsRef<str>]) -> Result<Self> {
        let video_id = video_id.into();
        let references: Vec<Vec<String>> = references
            .iter()
            .map(|r| tokens(r.as_ref()))
            .filter(|r| !r.is_empty())
            .collect();
        if references.is_empty() {
            return Err(Error::Invalid(format!("video {video_id} has no references")));
        }
        Ok(EvalPair {
            video_id,
            candidate: tokens(candidate),
            references,
        })
    }
}

type Counts<'a> = HashMap<&'a [String], usize>;

fn ngrams(tokens: &[String], n: usize) -> Counts<'_> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

fn check_corpus(pairs: &[EvalPair]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::Invalid("empty evaluation corpus".into()));
    }
    if let Some(p) = pairs.iter().find(|p| p.references.is_empty()) {
        return Err(Error::Invalid(format!("video {} has no references", p.video_id)));
    }
    Ok(())
}

/// Reference length closest to `len`, preferring the shorter on ties.
fn closest_ref_len(len: usize, refs: &[Vec<String>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(len), r))
        .expect("nonempty references")
}

/// Corpus BLEU with uniform 1–4-gram weights, no smoothing.
pub fn bleu4(pairs: &[EvalPair]) -> Result<f64> {
    check_corpus(pairs)?;
    let mut matched = [0usize; MAX_N];
    let mut total = [0usize; MAX_N];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for p in pairs {
        cand_len += p.candidate.len();
        ref_len += closest_ref_len(p.candidate.len(), &p.references);
        for n in 1..=MAX_N {
            let cand = ngrams(&p.candidate, n);
            let refs: Vec<Counts> = p.references.iter().map(|r| ngrams(r, n)).collect();
            for (g, &c) in &cand {
                let max_ref = refs.iter().map(|r| r.get(g).copied().unwrap_or(0)).max().unwrap_or(0);
                matched[n - 1] += c.min(max_ref);
                total[n - 1] += c;
            }
        }
    }
    if matched.contains(&0) {
        return Ok(0.0);
    }
    let log_precision: f64 = (0..MAX_N)
        .map(|i| (matched[i] as f64 / total[i] as f64).ln())
        .sum::<f64>()
        / MAX_N as f64;
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(bp * log_precision.exp())
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// LCS F-measure with recall weight `beta`.
pub fn rouge_l_f(candidate: &[String], reference: &[String], beta: f64) -> f64 {
    let lcs = lcs_len(candidate, reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / candidate.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Mean over pairs of the best ROUGE-L F-measure against any reference.
pub fn rouge_l(pairs: &[EvalPair]) -> Result<f64> {
    check_corpus(pairs)?;
    let sum: f64 = pairs
        .iter()
        .map(|p| {
            p.references
                .iter()
                .map(|r| rouge_l_f(&p.candidate, r, ROUGE_BETA))
                .fold(0.0, f64::max)
        })
        .sum();
    Ok(sum / pairs.len() as f64)
}

/// TF-IDF weights for one n-gram order.
fn tfidf<'a>(counts: &Counts<'a>, df: &HashMap<&[String], usize>, docs: f64) -> HashMap<&'a [String], f64> {
    let total: usize = counts.values().sum();
    counts
        .iter()
        .map(|(&g, &c)| {
            let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
            (g, c as f64 / total as f64 * (docs / d).ln())
        })
        .collect()
}

/// Cosine similarity. Identical nonempty n-gram counts score exactly 1,
/// which also covers two zero vectors (every n-gram in every document).
/// Orders with no n-grams on either side score 0.
fn similarity(a: &HashMap<&[String], f64>, b: &HashMap<&[String], f64>, same_counts: bool) -> f64 {
    if same_counts {
        return 1.0;
    }
    let dot: f64 = a.iter().map(|(g, x)| x * b.get(g).copied().unwrap_or(0.0)).sum();
    let na = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).min(1.0)
}

/// Consensus score: TF-IDF cosine per n, averaged over references and
/// n = 1..4, scaled by 10, averaged over pairs.
pub fn cider(pairs: &[EvalPair]) -> Result<f64> {
    check_corpus(pairs)?;
    let docs = pairs.len() as f64;
    let mut total = 0.0;
    let mut per_pair = vec![0.0; pairs.len()];
    for n in 1..=MAX_N {
        let mut df: HashMap<&[String], usize> = HashMap::new();
        for p in pairs {
            let seen: HashSet<&[String]> = p.references.iter().flat_map(|r| ngrams(r, n).into_keys()).collect();
            for g in seen {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        for (i, p) in pairs.iter().enumerate() {
            let cand_counts = ngrams(&p.candidate, n);
            let cand = tfidf(&cand_counts, &df, docs);
            let mut s = 0.0;
            for r in &p.references {
                let ref_counts = ngrams(r, n);
                s += similarity(&cand, &tfidf(&ref_counts, &df, docs), !cand_counts.is_empty() && cand_counts == ref_counts);
            }
            per_pair[i] += s / p.references.len() as f64;
        }
    }
    for s in per_pair {
        total += s / MAX_N as f64 * CIDER_SCALE;
    }
    Ok(total / pairs.len() as f64)
}
