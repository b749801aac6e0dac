//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` version, `u64` header length, a JSON header,
//! then every tensor as little-endian `f64` in header order.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::config::TrainConfig;
use crate::data::{FeatureDims, Vocabulary};
use crate::discriminator::DiscParams;
use crate::error::{Error, Result};
use crate::model::Generator;
use crate::nn::Parameters;
use crate::train::optim::Adam;

pub const MAGIC: &[u8; 8] = b"LSGCKPT\0";
pub const VERSION: u32 = 1;

/// Full training state: parameters, optimizer moments and counters.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub gen_steps: u64,
    pub disc_steps: u64,
    pub total_disc_steps: u64,
    pub vocab: Vocabulary,
    pub feature_dims: FeatureDims,
    pub generator: Generator,
    pub disc: DiscParams,
    pub gen_opt: Adam,
    pub disc_opt: Adam,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    config_hash: String,
    epoch: usize,
    gen_steps: u64,
    disc_steps: u64,
    total_disc_steps: u64,
    gen_adam_step: u64,
    disc_adam_step: u64,
    vocab: Vocabulary,
    feature_dims: FeatureDims,
    tensors: Vec<TensorEntry>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Calls a tensor visitor over one parameter set.
type Visit<'a> = dyn Fn(&mut dyn FnMut(&str, &Var)) + 'a;
type VisitMut<'a> = dyn FnMut(&mut dyn FnMut(&str, &mut Var)) + 'a;

impl Checkpoint {
    fn tensors(&self) -> Vec<(String, Array2<f64>)> {
        let mut out = Vec::new();
        let mut push_params = |prefix: &str, p: &Visit| {
            p(&mut |name, v| out.push((format!("{prefix}.{name}"), v.value().clone())));
        };
        push_params("generator", &|f| self.generator.visit("", f));
        push_params("disc", &|f| self.disc.visit("", f));
        for (tag, opt) in [("gen_opt", &self.gen_opt), ("disc_opt", &self.disc_opt)] {
            for (i, m) in opt.m.iter().enumerate() {
                out.push((format!("{tag}.m.{i}"), m.clone()));
            }
            for (i, v) in opt.v.iter().enumerate() {
                out.push((format!("{tag}.v.{i}"), v.clone()));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors = self.tensors();
        let header = Header {
            config: self.config.clone(),
            config_hash: self.config.hash(),
            epoch: self.epoch,
            gen_steps: self.gen_steps,
            disc_steps: self.disc_steps,
            total_disc_steps: self.total_disc_steps,
            gen_adam_step: self.gen_opt.step,
            disc_adam_step: self.disc_opt.step,
            vocab: self.vocab.clone(),
            feature_dims: self.feature_dims,
            tensors: tensors
                .iter()
                .map(|(name, a)| TensorEntry {
                    name: name.clone(),
                    rows: a.nrows(),
                    cols: a.ncols(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, a) in &tensors {
            for x in a.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(20..20usize.saturating_add(header_len))
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
        if header.config.hash() != header.config_hash {
            return Err(bad("config hash does not match the stored config"));
        }

        let mut data = &bytes[20 + header_len..];
        let mut arrays: HashMap<String, Array2<f64>> = HashMap::new();
        for t in &header.tensors {
            let n = t.rows * t.cols;
            if data.len() < n * 8 {
                return Err(bad(format!("truncated data for {}", t.name)));
            }
            let values: Vec<f64> = data[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            data = &data[n * 8..];
            let a = Array2::from_shape_vec((t.rows, t.cols), values).expect("sized");
            arrays.insert(t.name.clone(), a);
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }

        let cfg = header.config;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut generator = Generator::new(&mut rng, header.feature_dims, header.vocab.len(), &cfg);
        let mut disc = DiscParams::new(&mut rng, header.vocab.len(), cfg.disc_dim, cfg.graph_dim, cfg.mlb_dim);
        let mut take = |name: String, shape: (usize, usize)| -> Result<Array2<f64>> {
            let a = arrays.remove(&name).ok_or_else(|| bad(format!("missing tensor {name}")))?;
            if a.dim() != shape {
                return Err(bad(format!("tensor {name} has shape {:?}, expected {shape:?}", a.dim())));
            }
            Ok(a)
        };
        let mut err = None;
        let mut fill = |prefix: &str, p: &mut VisitMut| {
            p(&mut |name, v| {
                match take(format!("{prefix}.{name}"), v.shape()) {
                    Ok(a) => *v = Var::param(a),
                    Err(e) => {
                        err.get_or_insert(e);
                    }
                }
            })
        };
        fill("generator", &mut |f| generator.visit_mut("", f));
        fill("disc", &mut |f| disc.visit_mut("", f));
        if let Some(e) = err {
            return Err(e);
        }
        let mut load_opt = |tag: &str, params: &dyn Parameters, step: u64| -> Result<Adam> {
            let mut opt = Adam::new(params);
            opt.step = step;
            for i in 0..opt.m.len() {
                let shape = opt.m[i].dim();
                opt.m[i] = take(format!("{tag}.m.{i}"), shape)?;
                opt.v[i] = take(format!("{tag}.v.{i}"), shape)?;
            }
            Ok(opt)
        };
        let gen_opt = load_opt("gen_opt", &generator, header.gen_adam_step)?;
        let disc_opt = load_opt("disc_opt", &disc, header.disc_adam_step)?;
        if let Some(name) = arrays.keys().next() {
            return Err(bad(format!("unexpected tensor {name}")));
        }

        Ok(Checkpoint {
            config: cfg,
            epoch: header.epoch,
            gen_steps: header.gen_steps,
            disc_steps: header.disc_steps,
            total_disc_steps: header.total_disc_steps,
            vocab: header.vocab,
            feature_dims: header.feature_dims,
            generator,
            disc,
            gen_opt,
            disc_opt,
        })
    }

    /// Writes via a temporary file and rename.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
