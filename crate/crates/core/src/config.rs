//! Training and model hyperparameters.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::data::vocab::DEFAULT_MAX_CAPTION_LEN;
use crate::error::{Error, Result};

/// Every hyperparameter of the model and the alternating training loop.
///
/// Defaults follow the published full-scale setup where one exists
/// (graph size 1024, LSTM hidden 1024, embedding 300, validator features
/// 512, batch 128, beam 5, Adam at 8e-4 with the validator ramping from
/// 2e-4 to 8e-4). The remaining values are local choices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub graph_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub disc_dim: usize,
    /// Visual words per channel (K).
    pub visual_words: usize,
    /// Words compared by the validator (K′ ≤ K); `None` means all K.
    pub selected_words: Option<usize>,
    pub mlb_dim: usize,
    /// Gradient-penalty weight.
    pub lambda: f64,
    /// Adversarial weight in the generator loss.
    pub beta: f64,
    /// Validator updates per generator update.
    pub n_disc: usize,
    pub batch_size: usize,
    pub lr_gen: f64,
    pub lr_disc_start: f64,
    pub lr_disc_end: f64,
    pub epochs: usize,
    pub beam: usize,
    pub max_caption_len: usize,
    pub min_count: usize,
    pub seed: u64,
    /// Global-norm clip for generator gradients.
    pub clip_norm: f64,
    /// Skip the validator entirely (forces `beta = 0`).
    pub no_disc: bool,
    /// Build generated captions from the model's own argmax tokens
    /// instead of teacher forcing.
    pub free_running: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            graph_dim: 1024,
            hidden_dim: 1024,
            embed_dim: 300,
            disc_dim: 512,
            visual_words: 9,
            selected_words: None,
            mlb_dim: 256,
            lambda: 10.0,
            beta: 0.01,
            n_disc: 5,
            batch_size: 128,
            lr_gen: 8e-4,
            lr_disc_start: 2e-4,
            lr_disc_end: 8e-4,
            epochs: 30,
            beam: 5,
            max_caption_len: DEFAULT_MAX_CAPTION_LEN,
            min_count: 2,
            seed: 1,
            clip_norm: 5.0,
            no_disc: false,
            free_running: false,
        }
    }
}

impl TrainConfig {
    /// Desk-scale setup used for the synthetic corpus.
    pub fn toy() -> Self {
        TrainConfig {
            graph_dim: 64,
            hidden_dim: 64,
            embed_dim: 16,
            disc_dim: 32,
            visual_words: 4,
            mlb_dim: 32,
            batch_size: 32,
            max_caption_len: 8,
            min_count: 1,
            ..TrainConfig::default()
        }
    }

    /// K′.
    pub fn selected(&self) -> usize {
        self.selected_words.unwrap_or(self.visual_words)
    }

    /// Effective adversarial weight.
    pub fn adversarial_weight(&self) -> f64 {
        if self.no_disc {
            0.0
        } else {
            self.beta
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("graph_dim", self.graph_dim),
            ("hidden_dim", self.hidden_dim),
            ("embed_dim", self.embed_dim),
            ("disc_dim", self.disc_dim),
            ("visual_words", self.visual_words),
            ("selected_words", self.selected()),
            ("mlb_dim", self.mlb_dim),
            ("n_disc", self.n_disc),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("beam", self.beam),
            ("min_count", self.min_count),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.max_caption_len < 2 {
            return Err(Error::Config("max_caption_len must be at least 2".into()));
        }
        if self.selected() > self.visual_words {
            return Err(Error::Config(format!(
                "selected_words ({}) exceeds visual_words ({})",
                self.selected(), self.visual_words
            )));
        }
        let reals = [
            ("lambda", self.lambda),
            ("lr_gen", self.lr_gen),
            ("lr_disc_start", self.lr_disc_start),
            ("lr_disc_end", self.lr_disc_end),
            ("clip_norm", self.clip_norm),
        ];
        for (name, v) in reals {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive and finite")));
            }
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::Config("beta must be nonnegative and finite".into()));
        }
        if self.lr_disc_start > self.lr_disc_end {
            return Err(Error::Config(
                "lr_disc_start must not exceed lr_disc_end".into(),
            ));
        }
        Ok(())
    }

    /// Non-fatal remarks about the configuration for videos of `frames`.
    pub fn warnings(&self, frames: usize) -> Vec<String> {
        let mut out = Vec::new();
        if self.visual_words >= frames {
            out.push(format!(
                "visual_words ({}) is not much smaller than the frame count ({frames})",
                self.visual_words
            ));
        }
        out
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Layers key/value overrides on top of the defaults, later layers
    /// winning, then validates.
    pub fn from_layers(layers: &[Map<String, Value>]) -> Result<Self> {
        let mut merged = match serde_json::to_value(TrainConfig::default()) {
            Ok(Value::Object(m)) => m,
            _ => unreachable!("config is a struct"),
        };
        for layer in layers {
            for (k, v) in layer {
                if !merged.contains_key(k) {
                    return Err(Error::Config(format!("unknown key {k:?}")));
                }
                merged.insert(k.clone(), v.clone());
            }
        }
        let cfg: TrainConfig = serde_json::from_value(Value::Object(merged))
            .map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn field_names() -> Vec<String> {
        match serde_json::to_value(TrainConfig::default()) {
            Ok(Value::Object(m)) => m.keys().cloned().collect(),
            _ => unreachable!(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn defaults_are_valid() {
        TrainConfig::default().validate().unwrap();
        TrainConfig::toy().validate().unwrap();
        let d = TrainConfig::default();
        assert_eq!((d.graph_dim, d.embed_dim, d.disc_dim), (1024, 300, 512));
        assert_eq!((d.batch_size, d.beam, d.max_caption_len), (128, 5, 26));
        assert_eq!((d.lr_gen, d.lr_disc_start, d.lr_disc_end), (8e-4, 2e-4, 8e-4));
    }

    #[test]
    fn rejects_selected_above_total() {
        let cfg = TrainConfig {
            selected_words: Some(10),
            visual_words: 4,
            ..TrainConfig::toy()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rejects_descending_disc_schedule() {
        let cfg = TrainConfig {
            lr_disc_start: 1e-3,
            lr_disc_end: 1e-4,
            ..TrainConfig::toy()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn layers_apply_in_order() {
        let file = json!({"visual_words": 4, "selected_words": 2, "beta": 0.5});
        let flags = json!({"beta": 0.0});
        let cfg = TrainConfig::from_layers(&[
            file.as_object().unwrap().clone(),
            flags.as_object().unwrap().clone(),
        ])
        .unwrap();
        assert_eq!(cfg.visual_words, 4);
        assert_eq!(cfg.selected(), 2);
        assert_eq!(cfg.beta, 0.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let layer = json!({"vissual_words": 4});
        assert!(TrainConfig::from_layers(&[layer.as_object().unwrap().clone()]).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = TrainConfig::toy();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.visual_words = 5;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn k_warning_only() {
        let cfg = TrainConfig { visual_words: 16, ..TrainConfig::toy() };
        assert_eq!(cfg.selected(), 16);
        cfg.validate().unwrap();
        assert_eq!(cfg.warnings(8).len(), 1);
        assert!(TrainConfig::toy().warnings(26).is_empty());
    }
}
