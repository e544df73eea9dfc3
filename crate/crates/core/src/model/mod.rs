//! The shared transformer used by both objectives.
//!
//! Every sublayer has the same shape: parameter-free norm, a linear gate,
//! either attention (odd 1-based index) or a linear projection (even index),
//! a GEGLU combine, a second parameter-free norm, an output projection and
//! the residual. Sublayer `i` reads a learned linear combination of the
//! outputs of all sublayers before it.

pub mod forward;
pub mod mask;
mod ops;
pub mod params;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use forward::{backward, forward, forward_with_cache, ForwardCache};
pub use mask::{build_attention_mask, AttentionKind, AttentionMaskSpec};
pub use ops::log_softmax_row;
pub use params::{ModelParameters, SublayerParams, TensorRole};

/// Floating-point element type of a model. Training runs in `f32`; the
/// gradient checks run the same code in `f64`.
pub trait Scalar:
    Float
    + LinalgScalar
    + ScalarOperand
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;
    const BYTES: usize;

    fn erf(self) -> Self;
    fn c(x: f64) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn erf(self) -> Self {
        libm::erff(self)
    }
    fn c(x: f64) -> Self {
        x as f32
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn erf(self) -> Self {
        libm::erf(self)
    }
    fn c(x: f64) -> Self {
        x
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

fn default_rope_base() -> f64 {
    10_000.0
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Attention + feed-forward pairs; the network has twice as many sublayers.
    pub n_layers: usize,
    pub hidden_size: usize,
    pub ff_intermediate_size: usize,
    pub n_heads: usize,
    /// Filled from the vocabulary when left at zero in a run config.
    #[serde(default)]
    pub vocab_size: usize,
    pub dropout_p: f64,
    pub attention_dropout_p: f64,
    pub max_seq_len: usize,
    #[serde(default = "default_true")]
    pub tie_embeddings: bool,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
}

impl ModelConfig {
    /// 12 layer pairs, hidden 384, FF 1280, 6 heads, vocabulary 8192.
    pub fn small() -> Self {
        ModelConfig {
            n_layers: 12,
            hidden_size: 384,
            ff_intermediate_size: 1280,
            n_heads: 6,
            vocab_size: 8192,
            dropout_p: 0.1,
            attention_dropout_p: 0.1,
            max_seq_len: 512,
            tie_embeddings: true,
            rope_base: default_rope_base(),
        }
    }

    /// 12 layer pairs, hidden 768, FF 2560, 12 heads, vocabulary 16384.
    pub fn base() -> Self {
        ModelConfig {
            hidden_size: 768,
            ff_intermediate_size: 2560,
            n_heads: 12,
            vocab_size: 16_384,
            ..Self::small()
        }
    }

    pub fn n_sublayers(&self) -> usize {
        2 * self.n_layers
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("n_layers", self.n_layers),
            ("hidden_size", self.hidden_size),
            ("ff_intermediate_size", self.ff_intermediate_size),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.hidden_size % self.n_heads != 0 {
            return Err(Error::config(format!(
                "hidden_size {} not divisible by n_heads {}",
                self.hidden_size, self.n_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::config(format!(
                "rotary encoding needs an even head dimension, got {}",
                self.head_dim()
            )));
        }
        for (name, p) in [
            ("dropout_p", self.dropout_p),
            ("attention_dropout_p", self.attention_dropout_p),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::config(format!("{name} {p} outside [0, 1)")));
            }
        }
        if !(self.rope_base > 0.0) {
            return Err(Error::config("rope_base must be positive"));
        }
        Ok(())
    }
}

/// Number of layer-combination scalars for `n` sublayers.
pub fn alpha_count(n_sublayers: usize) -> usize {
    n_sublayers * (n_sublayers + 1) / 2
}

/// Exact learnable-scalar count of a model with this configuration.
pub fn count_parameters(cfg: &ModelConfig) -> usize {
    let h = cfg.hidden_size;
    let f = cfg.ff_intermediate_size;
    let v = cfg.vocab_size;
    // q, k, v, gate, out: each h x h plus bias
    let attention = 5 * (h * h + h);
    // value and gate h -> f, out f -> h
    let feed_forward = 2 * (h * f + f) + (f * h + h);
    let head = if cfg.tie_embeddings { 0 } else { v * h };
    v * h + cfg.n_layers * (attention + feed_forward) + alpha_count(cfg.n_sublayers()) + head
}
