//! Self-supervised objectives that attach to the hidden sequence of any
//! encoder layer.
//!
//! Every loss reduces as a mean over valid anchors within a sequence, then a
//! mean over the batch, so cropping inputs changes variance but not scale.
//! Padded frames are never anchors, positives, or negatives.

mod apc;
mod contrastive;
mod head;

pub use apc::apc_loss;
pub use contrastive::{cpc_loss, mask_fill, sample_mask, sample_negatives, w2v2_loss};
pub use head::LossHead;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{NodeId, SeqLayout, Tape};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Apc,
    Cpc,
    W2v2,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Apc, LossKind::Cpc, LossKind::W2v2];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Apc => "apc",
            LossKind::Cpc => "cpc",
            LossKind::W2v2 => "w2v2",
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CpcConfig {
    pub future_horizon: usize,
    pub num_negatives: usize,
}

impl Default for CpcConfig {
    fn default() -> Self {
        Self { future_horizon: 12, num_negatives: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ApcConfig {
    pub shift: usize,
    pub tv_weight: f64,
}

impl Default for ApcConfig {
    fn default() -> Self {
        Self { shift: 3, tv_weight: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct W2v2Config {
    pub mask_prob: f64,
    pub mask_span: usize,
    pub num_negatives: usize,
}

impl Default for W2v2Config {
    fn default() -> Self {
        Self { mask_prob: 0.065, mask_span: 4, num_negatives: 8 }
    }
}

/// Loss choice plus the settings of all three objectives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub kind: LossKind,
    pub cpc: CpcConfig,
    pub apc: ApcConfig,
    pub w2v2: W2v2Config,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { kind: LossKind::Cpc, cpc: CpcConfig::default(), apc: ApcConfig::default(), w2v2: W2v2Config::default() }
    }
}

impl LossConfig {
    pub fn new(kind: LossKind) -> Self {
        Self { kind, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.cpc;
        if c.future_horizon == 0 || c.num_negatives == 0 {
            return Err(Error::Config("loss.cpc: future_horizon and num_negatives must be ≥ 1".into()));
        }
        if self.apc.shift == 0 || !(0.0..).contains(&self.apc.tv_weight) {
            return Err(Error::Config("loss.apc: shift must be ≥ 1 and tv_weight ≥ 0".into()));
        }
        let w = &self.w2v2;
        if !(w.mask_prob > 0.0 && w.mask_prob < 1.0) {
            return Err(Error::Config(format!("loss.w2v2.mask_prob = {} must lie in (0, 1)", w.mask_prob)));
        }
        if w.mask_span == 0 || w.num_negatives == 0 {
            return Err(Error::Config("loss.w2v2: mask_span and num_negatives must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Shortest sequence (in encoder frames) the selected loss accepts.
    pub fn min_len(&self) -> usize {
        match self.kind {
            LossKind::Cpc => self.cpc.future_horizon + self.cpc.num_negatives + 1,
            LossKind::Apc => self.apc.shift + 1,
            LossKind::W2v2 => self.w2v2.num_negatives + 1,
        }
    }

    /// Whether the encoder input is masked before the forward pass.
    pub fn masks_input(&self) -> bool {
        self.kind == LossKind::W2v2
    }
}

/// What a loss needs besides its head.
#[derive(Clone, Copy, Debug)]
pub struct LossInput<'a> {
    /// Hidden sequence `[batch·frames × d]`.
    pub hidden: NodeId,
    /// Unmasked input features `[batch·frames × d_t]`, a constant.
    pub targets: NodeId,
    pub layout: SeqLayout,
    pub lengths: &'a [usize],
    /// Rows zeroed in the encoder input; required by W2V2 only.
    pub mask: Option<&'a [bool]>,
}

/// Attaches the configured loss to `input.hidden`.
pub fn ssl_loss<T: Scalar>(
    tape: &mut Tape<T>,
    head: &LossHead<T>,
    input: &LossInput<'_>,
    cfg: &LossConfig,
    rng: &mut impl Rng,
) -> Result<NodeId> {
    match cfg.kind {
        LossKind::Cpc => cpc_loss(tape, head, input, &cfg.cpc, rng),
        LossKind::Apc => apc_loss(tape, head, input, &cfg.apc),
        LossKind::W2v2 => {
            let mask = input.mask.ok_or_else(|| Error::Invalid("w2v2 loss needs the input mask".into()))?;
            w2v2_loss(tape, head, input, mask, &cfg.w2v2, rng)
        }
    }
}

fn check_lengths(loss: &'static str, lengths: &[usize], layout: SeqLayout, required: usize) -> Result<()> {
    if lengths.len() != layout.batch || lengths.iter().any(|&l| l > layout.frames) {
        return Err(Error::Shape {
            op: loss,
            detail: format!("lengths {lengths:?} do not fit {} × {} frames", layout.batch, layout.frames),
        });
    }
    if let Some(&got) = lengths.iter().find(|&&l| l < required) {
        return Err(Error::SequenceTooShort { loss, required, got });
    }
    Ok(())
}
