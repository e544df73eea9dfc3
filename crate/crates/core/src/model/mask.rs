use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Bidirectional,
    Causal,
    Prefix,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionMaskSpec {
    pub kind: AttentionKind,
    /// Only meaningful for [`AttentionKind::Prefix`].
    pub prefix_len: usize,
    pub seq_len: usize,
}

impl AttentionMaskSpec {
    pub fn new(kind: AttentionKind, seq_len: usize) -> Self {
        AttentionMaskSpec {
            kind,
            prefix_len: 0,
            seq_len,
        }
    }

    pub fn prefix(prefix_len: usize, seq_len: usize) -> Self {
        AttentionMaskSpec {
            kind: AttentionKind::Prefix,
            prefix_len,
            seq_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == AttentionKind::Prefix && !(1..=self.seq_len).contains(&self.prefix_len) {
            return Err(Error::input(format!(
                "prefix_len {} outside [1, {}]",
                self.prefix_len, self.seq_len
            )));
        }
        Ok(())
    }

    /// Whether query position `q` may attend to key position `k`, ignoring padding.
    #[inline]
    pub fn visible(&self, q: usize, k: usize) -> bool {
        match self.kind {
            AttentionKind::Bidirectional => true,
            AttentionKind::Causal => k <= q,
            AttentionKind::Prefix => {
                (q < self.prefix_len && k < self.prefix_len) || (q >= self.prefix_len && k <= q)
            }
        }
    }
}

/// `[seq_len x seq_len]` visibility matrix, `true` where the query row may
/// attend to the key column. Keys flagged in `pad_keys` are never visible.
pub fn build_attention_mask(
    spec: &AttentionMaskSpec,
    pad_keys: Option<&[bool]>,
) -> Result<Array2<bool>> {
    spec.validate()?;
    if let Some(p) = pad_keys {
        if p.len() != spec.seq_len {
            return Err(Error::input(format!(
                "padding flags cover {} positions, mask has {}",
                p.len(),
                spec.seq_len
            )));
        }
    }
    Ok(Array2::from_shape_fn(
        (spec.seq_len, spec.seq_len),
        |(q, k)| spec.visible(q, k) && !pad_keys.is_some_and(|p| p[k]),
    ))
}
