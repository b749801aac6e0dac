//! Latent semantic graph video captioning with a discriminative language
//! validator trained as a WGAN-GP critic.

pub mod autograd;
pub mod config;
pub mod data;
pub mod decoder;
pub mod discriminator;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod train;

pub use autograd::{grad, no_grad, Var};
pub use config::TrainConfig;
pub use data::{Corpus, FeatureDims, VideoFeatures, Vocabulary};
pub use decoder::{DecoderParams, SoftCaption};
pub use discriminator::DiscParams;
pub use encoder::{FeatureBatch, LsgParams, VisualWords};
pub use error::{Error, Result};
pub use model::{Generator, Hypothesis};
pub use eval::MetricReport;
pub use metrics::EvalPair;
pub use train::{Checkpoint, Dataset, EpochLog, Trainer};
