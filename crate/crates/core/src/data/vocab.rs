use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Maximum encoded caption length, counting `bos` and `eos`.
pub const DEFAULT_MAX_CAPTION_LEN: usize = 26;

/// Lowercases, drops ASCII punctuation and splits on whitespace.
pub fn normalize(raw: &str) -> Vec<String> {
    raw.to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
}

impl From<VocabRepr> for Vocabulary {
    fn from(r: VocabRepr) -> Self {
        Vocabulary::from_tokens(r.tokens)
    }
}

impl From<Vocabulary> for VocabRepr {
    fn from(v: Vocabulary) -> Self {
        VocabRepr {
            tokens: v.id_to_token,
        }
    }
}

impl Vocabulary {
    /// Builds from a full id-ordered token list (specials first).
    fn from_tokens(id_to_token: Vec<String>) -> Self {
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            id_to_token,
            token_to_id,
        }
    }

    /// Keeps tokens seen at least `min_count` times. Ids are assigned by
    /// descending frequency, ties broken alphabetically.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_count: usize) -> Result<Self> {
        if min_count == 0 {
            return Err(Error::Config("min_count must be at least 1".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for line in corpus {
            for tok in normalize(line.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count && !SPECIALS.contains(&t.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t))
            .collect();
        Ok(Self::from_tokens(tokens))
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    /// Non-special tokens in id order.
    pub fn words(&self) -> &[String] {
        &self.id_to_token[SPECIALS.len()..]
    }

    /// `[bos, w…, eos]` truncated to `max_len` then right-padded with `pad`.
    pub fn encode(&self, raw: &str, max_len: usize) -> Result<Vec<usize>> {
        if max_len < 2 {
            return Err(Error::Config("caption length must be at least 2".into()));
        }
        let mut ids = Vec::with_capacity(max_len);
        ids.push(BOS);
        ids.extend(normalize(raw).iter().map(|t| self.id(t)));
        ids.push(EOS);
        ids.truncate(max_len);
        ids.resize(max_len, PAD);
        Ok(ids)
    }

    /// Words between `bos` and the first `eos`, pads dropped.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .copied()
            .skip_while(|&i| i == BOS)
            .take_while(|&i| i != EOS)
            .filter(|&i| i != PAD && i != BOS)
            .map(|i| self.token(i).unwrap_or(SPECIALS[UNK]).to_string())
            .collect()
    }

    pub fn decode_string(&self, ids: &[usize]) -> String {
        self.decode(ids).join(" ")
    }
}

/// Caption token ids for one video.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Caption {
    pub video_id: String,
    pub tokens: Vec<usize>,
}

impl Caption {
    pub fn encode(
        video_id: impl Into<String>,
        raw: &str,
        vocab: &Vocabulary,
        max_len: usize,
    ) -> Result<Self> {
        Ok(Caption {
            video_id: video_id.into(),
            tokens: vocab.encode(raw, max_len)?,
        })
    }

    /// Number of positions after `bos` that carry a target (up to and
    /// including `eos`, or to the end when truncated).
    pub fn target_len(&self) -> usize {
        self.tokens
            .iter()
            .skip(1)
            .position(|&t| t == PAD)
            .unwrap_or(self.tokens.len().saturating_sub(1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn min_count_two_keeps_repeated_words() {
        let v = Vocabulary::build(&["a dog runs", "a dog sits"], 2).unwrap();
        assert_eq!(v.words(), ["a", "dog"]);
        assert_eq!(v.len(), 6);
    }

    #[test]
    fn min_count_one_keeps_everything() {
        let v = Vocabulary::build(&["a dog runs", "a dog sits"], 1).unwrap();
        let mut w = v.words().to_vec();
        w.sort();
        assert_eq!(w, ["a", "dog", "runs", "sits"]);
    }

    #[test]
    fn rare_word_maps_to_unk() {
        let v = Vocabulary::build(&["a zebra", "a dog", "a dog"], 2).unwrap();
        assert_eq!(v.id("zebra"), UNK);
        let ids = v.encode("zebra", 4).unwrap();
        assert_eq!(ids, [BOS, UNK, EOS, PAD]);
    }

    #[test]
    fn empty_corpus_has_only_specials() {
        let v = Vocabulary::build::<&str>(&[], 2).unwrap();
        assert_eq!(v.len(), 4);
        assert_eq!(v.token(PAD), Some("<pad>"));
        assert_eq!(v.token(UNK), Some("<unk>"));
    }

    #[test]
    fn encode_short_sentence() {
        let v = Vocabulary::build(&["a man plays"], 1).unwrap();
        let ids = v.encode("A man plays.", 6).unwrap();
        assert_eq!(
            ids,
            [BOS, v.id("a"), v.id("man"), v.id("plays"), EOS, PAD]
        );
    }

    #[test]
    fn long_sentence_is_truncated_without_eos() {
        let words: Vec<String> = (0..30).map(|i| format!("w{i}")).collect();
        let raw = words.join(" ");
        let v = Vocabulary::build(&[raw.as_str()], 1).unwrap();
        let ids = v.encode(&raw, 26).unwrap();
        assert_eq!(ids.len(), 26);
        assert_eq!(ids[0], BOS);
        assert!(!ids.contains(&EOS));
        assert_eq!(ids[25], v.id("w24"));
        let c = Caption { video_id: "x".into(), tokens: ids };
        assert_eq!(c.target_len(), 25);
    }

    #[test]
    fn empty_string_encodes_to_bos_eos() {
        let v = Vocabulary::build(&["x"], 1).unwrap();
        assert_eq!(v.encode("", 5).unwrap(), [BOS, EOS, PAD, PAD, PAD]);
        let c = Caption { video_id: "x".into(), tokens: v.encode("", 5).unwrap() };
        assert_eq!(c.target_len(), 1);
    }

    #[test]
    fn punctuation_is_stripped() {
        assert_eq!(normalize("Hello, World!  It's"), ["hello", "world", "its"]);
    }

    #[test]
    fn serde_round_trip() {
        let v = Vocabulary::build(&["b a", "a"], 1).unwrap();
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<Vocabulary>(&json).unwrap(), v);
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(words in prop::collection::vec("[a-z]{1,6}", 0..40), max_len in 2usize..30) {
            let raw = words.join(" ");
            let v = Vocabulary::build(&[raw.as_str()], 1).unwrap();
            let ids = v.encode(&raw, max_len).unwrap();
            let back = v.decode(&ids);
            let keep = words.len().min(max_len - 1);
            prop_assert_eq!(back, words[..keep].to_vec());
        }
    }
}
