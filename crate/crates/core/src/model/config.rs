use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    /// Mean of token embeddings followed by one affine + tanh layer.
    MeanPoolMlp,
    /// Elman recurrence over embeddings; the last state is the encoding.
    Recurrent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderKind {
    /// One softmax over the vocabulary from an affine map of `z`.
    BagOfWords,
    /// Elman recurrence initialised from `z`, teacher-forced from BOS.
    Recurrent,
}

/// Lower/upper bound applied to every predicted log-variance.
pub const LOGVAR_BOUND: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Filled from the corpus vocabulary when left at zero.
    #[serde(default)]
    pub vocab_size: usize,
    #[serde(default = "default_embed")]
    pub embed_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    #[serde(default = "default_latent")]
    pub latent_dim: usize,
    #[serde(default = "default_margin")]
    pub margin: f64,
    #[serde(default = "default_encoder")]
    pub encoder: EncoderKind,
    #[serde(default = "default_decoder")]
    pub decoder: DecoderKind,
    /// Initial bias of the log-variance heads.
    #[serde(default = "default_init_logvar")]
    pub init_logvar: f64,
}

fn default_embed() -> usize {
    32
}
fn default_hidden() -> usize {
    64
}
fn default_latent() -> usize {
    16
}
fn default_margin() -> f64 {
    0.5
}
fn default_encoder() -> EncoderKind {
    EncoderKind::MeanPoolMlp
}
fn default_decoder() -> DecoderKind {
    DecoderKind::BagOfWords
}
fn default_init_logvar() -> f64 {
    0.0
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            embed_dim: default_embed(),
            hidden_dim: default_hidden(),
            latent_dim: default_latent(),
            margin: default_margin(),
            encoder: default_encoder(),
            decoder: default_decoder(),
            init_logvar: default_init_logvar(),
        }
    }
}

impl ModelConfig {
    /// Full-size encoder (300-d embeddings, hidden 64,
    /// latent 128).
    pub fn full_scale(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 300,
            hidden_dim: 64,
            latent_dim: 128,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("latent_dim", self.latent_dim),
        ] {
            if v == 0 {
                return Err(Error::config(format!("model.{name}"), "must be positive"));
            }
        }
        if !(self.margin > 0.0) {
            return Err(Error::config("model.margin", "must be positive"));
        }
        if !(self.init_logvar.abs() <= LOGVAR_BOUND) {
            return Err(Error::config("model.init_logvar", "must lie within the log-variance clamp"));
        }
        Ok(())
    }
}
