//! Transformer encoder-decoder translation model and a decoder-only language
//! model that share the target embedding table and the pre-softmax projection.

mod checkpoint;
mod decode;
mod params;
mod transformer;

pub use checkpoint::{Checkpoint, CheckpointError, OptimizerState, CHECKPOINT_VERSION};
pub use decode::{beam_decode, greedy_decode, length_penalty, NmtScorer, StepScorer, DEFAULT_LENGTH_PENALTY};
pub use params::{Binder, ParamGroup, ParamId, ParamStore, Trainable};
pub use transformer::{cross_entropy, Forward, ProbRows};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tensor};
use crate::margin::MarginError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("token id {id} out of range for {side} vocabulary of size {size}")]
    TokenOutOfRange { side: &'static str, id: usize, size: usize },
    #[error("sequence length {len} exceeds max_len {max_len}")]
    TooLong { len: usize, max_len: usize },
    #[error("{0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Margin(#[from] MarginError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size_src: usize,
    pub vocab_size_tgt: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_lm_layers: usize,
    pub dropout_rate: f64,
    /// Longest sequence either stack accepts, including BOS/EOS.
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size_src: 32,
            vocab_size_tgt: 32,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            n_enc_layers: 2,
            n_dec_layers: 2,
            n_lm_layers: 2,
            dropout_rate: 0.1,
            max_len: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("vocab_size_src", self.vocab_size_src),
            ("vocab_size_tgt", self.vocab_size_tgt),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("n_lm_layers", self.n_lm_layers),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{} must be positive", name)));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::InvalidConfig(format!("dropout_rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderLayer {
    pub attn_norm: Norm,
    pub attn: Attention,
    pub ff_norm: Norm,
    pub ff: FeedForward,
}

/// Decoder block; the language model's blocks have no cross-attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderLayer {
    pub self_norm: Norm,
    pub self_attn: Attention,
    pub cross: Option<(Norm, Attention)>,
    pub ff_norm: Norm,
    pub ff: FeedForward,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NmtParams {
    pub src_embedding: ParamId,
    pub tgt_embedding: ParamId,
    pub output: Linear,
    pub encoder: Vec<EncoderLayer>,
    pub encoder_norm: Norm,
    pub decoder: Vec<DecoderLayer>,
    pub decoder_norm: Norm,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LmParams {
    pub tgt_embedding: ParamId,
    pub output: Linear,
    pub layers: Vec<DecoderLayer>,
    pub norm: Norm,
}

/// Both models plus the single store that backs all of their parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub nmt: NmtParams,
    pub lm: LmParams,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn xavier(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-a, a).expect("finite bounds");
        let data = (0..fan_in * fan_out).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::new(vec![fan_in, fan_out], data).expect("positive extents")
    }

    fn embedding(&mut self, rows: usize, d: usize) -> Tensor {
        let dist = Normal::new(0.0, (d as f64).powf(-0.5)).expect("positive std");
        let data = (0..rows * d).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::new(vec![rows, d], data).expect("positive extents")
    }
}

fn linear(store: &mut ParamStore, init: &mut Init, name: &str, fan_in: usize, fan_out: usize) -> Linear {
    let w = store.add(format!("{}.w", name), init.xavier(fan_in, fan_out));
    let b = store.add(format!("{}.b", name), Tensor::zeros(&[fan_out]));
    Linear { w, b }
}

fn norm(store: &mut ParamStore, name: &str, d: usize) -> Norm {
    let gain = store.add(format!("{}.gain", name), Tensor::filled(&[d], 1.0));
    let bias = store.add(format!("{}.bias", name), Tensor::zeros(&[d]));
    Norm { gain, bias }
}

fn attention(store: &mut ParamStore, init: &mut Init, name: &str, d: usize) -> Attention {
    Attention {
        q: linear(store, init, &format!("{}.q", name), d, d),
        k: linear(store, init, &format!("{}.k", name), d, d),
        v: linear(store, init, &format!("{}.v", name), d, d),
        o: linear(store, init, &format!("{}.o", name), d, d),
    }
}

fn feed_forward(store: &mut ParamStore, init: &mut Init, name: &str, d: usize, d_ff: usize) -> FeedForward {
    FeedForward {
        up: linear(store, init, &format!("{}.up", name), d, d_ff),
        down: linear(store, init, &format!("{}.down", name), d_ff, d),
    }
}

fn decoder_layer(store: &mut ParamStore, init: &mut Init, name: &str, cfg: &ModelConfig, cross: bool) -> DecoderLayer {
    let d = cfg.d_model;
    DecoderLayer {
        self_norm: norm(store, &format!("{}.self_norm", name), d),
        self_attn: attention(store, init, &format!("{}.self_attn", name), d),
        cross: cross.then(|| {
            (norm(store, &format!("{}.cross_norm", name), d), attention(store, init, &format!("{}.cross_attn", name), d))
        }),
        ff_norm: norm(store, &format!("{}.ff_norm", name), d),
        ff: feed_forward(store, init, &format!("{}.ff", name), d, cfg.d_ff),
    }
}

impl ModelBundle {
    /// Freshly initialised bundle; deterministic in `(config, seed)`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::default();
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed) };
        let d = config.d_model;

        let tgt_embedding = store.add("shared.tgt_embedding", init.embedding(config.vocab_size_tgt, d));
        let output = linear(&mut store, &mut init, "shared.output", d, config.vocab_size_tgt);

        let src_embedding = store.add("nmt.src_embedding", init.embedding(config.vocab_size_src, d));
        let encoder = (0..config.n_enc_layers)
            .map(|i| {
                let name = format!("nmt.encoder.{}", i);
                EncoderLayer {
                    attn_norm: norm(&mut store, &format!("{}.attn_norm", name), d),
                    attn: attention(&mut store, &mut init, &format!("{}.attn", name), d),
                    ff_norm: norm(&mut store, &format!("{}.ff_norm", name), d),
                    ff: feed_forward(&mut store, &mut init, &format!("{}.ff", name), d, config.d_ff),
                }
            })
            .collect();
        let encoder_norm = norm(&mut store, "nmt.encoder.norm", d);
        let decoder = (0..config.n_dec_layers)
            .map(|i| decoder_layer(&mut store, &mut init, &format!("nmt.decoder.{}", i), &config, true))
            .collect();
        let decoder_norm = norm(&mut store, "nmt.decoder.norm", d);

        let layers = (0..config.n_lm_layers)
            .map(|i| decoder_layer(&mut store, &mut init, &format!("lm.decoder.{}", i), &config, false))
            .collect();
        let lm_norm = norm(&mut store, "lm.decoder.norm", d);

        Ok(Self {
            nmt: NmtParams { src_embedding, tgt_embedding, output, encoder, encoder_norm, decoder, decoder_norm },
            lm: LmParams { tgt_embedding, output, layers, norm: lm_norm },
            config,
            store,
        })
    }

    /// Rebuilds a bundle from named parameter arrays, e.g. from a checkpoint.
    pub fn from_named(config: ModelConfig, named: &[(String, Tensor)]) -> Result<Self> {
        let mut bundle = Self::new(config, 0)?;
        if named.len() != bundle.store.len() {
            return Err(ModelError::InvalidArgument(format!(
                "expected {} parameters, got {}",
                bundle.store.len(),
                named.len()
            )));
        }
        for (name, value) in named {
            let id = bundle
                .store
                .id(name)
                .ok_or_else(|| ModelError::InvalidArgument(format!("unknown parameter {}", name)))?;
            if bundle.store.get(id).shape() != value.shape() {
                return Err(ModelError::InvalidArgument(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    name,
                    value.shape(),
                    bundle.store.get(id).shape()
                )));
            }
            *bundle.store.get_mut(id) = value.clone();
        }
        Ok(bundle)
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        self.store.iter().map(|(_, n, v)| (n.to_string(), v.clone())).collect()
    }

    /// Checksum of the parameters only the language model uses.
    pub fn lm_checksum(&self) -> String {
        self.store.checksum(|g| g == ParamGroup::Lm)
    }

    pub fn shared_checksum(&self) -> String {
        self.store.checksum(|g| g == ParamGroup::Shared)
    }

    /// Parameters reached only through the source side: the source embedding,
    /// the encoder stack and every cross-attention block.
    pub fn is_source_side(&self, id: ParamId) -> bool {
        let name = self.store.name(id);
        name.starts_with("nmt.src_embedding")
            || name.starts_with("nmt.encoder")
            || name.contains(".cross_attn.")
            || name.contains(".cross_norm.")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::default();
        assert!(c.validate().is_ok());
        c.n_heads = 3;
        assert!(c.validate().is_err());
        c = ModelConfig { d_ff: 0, ..ModelConfig::default() };
        assert!(c.validate().is_err());
        c = ModelConfig { dropout_rate: 1.0, ..ModelConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn shared_tables_are_single_slots() {
        let b = ModelBundle::new(ModelConfig::default(), 1).unwrap();
        assert_eq!(b.nmt.tgt_embedding, b.lm.tgt_embedding);
        assert_eq!(b.nmt.output, b.lm.output);
        assert_eq!(b.store.group(b.nmt.tgt_embedding), ParamGroup::Shared);
        assert!(b.lm.layers.iter().all(|l| l.cross.is_none()));
        assert!(b.nmt.decoder.iter().all(|l| l.cross.is_some()));
    }

    #[test]
    fn initialisation_is_seeded() {
        let a = ModelBundle::new(ModelConfig::default(), 5).unwrap();
        let b = ModelBundle::new(ModelConfig::default(), 5).unwrap();
        let c = ModelBundle::new(ModelConfig::default(), 6).unwrap();
        assert_eq!(a.store, b.store);
        assert_ne!(a.store, c.store);
    }

    #[test]
    fn output_bias_starts_at_zero() {
        let b = ModelBundle::new(ModelConfig::default(), 5).unwrap();
        assert!(b.store.get(b.nmt.output.b).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn named_round_trip() {
        let a = ModelBundle::new(ModelConfig::default(), 9).unwrap();
        let b = ModelBundle::from_named(a.config.clone(), &a.named_params()).unwrap();
        assert_eq!(a, b);
    }
}
