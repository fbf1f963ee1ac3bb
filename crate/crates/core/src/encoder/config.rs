use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters of the streaming encoder.
///
/// The encoder consumes `feature_dim + domain_onehot_dim` values per frame
/// (frames already stacked and subsampled by the data pipeline).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub conv_kernel: usize,
    pub num_heads: usize,
    /// Frames of attention look-back. There is no right context.
    pub left_context: usize,
    pub feature_dim: usize,
    pub domain_onehot_dim: usize,
    pub subsample_factor: usize,
    pub ffn_mult: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl EncoderConfig {
    /// Minutes-scale CPU configuration.
    pub fn toy() -> Self {
        Self {
            num_layers: 6,
            model_dim: 32,
            conv_kernel: 5,
            num_heads: 2,
            left_context: 8,
            feature_dim: 32,
            domain_onehot_dim: 4,
            subsample_factor: 3,
            ffn_mult: 4,
        }
    }

    /// 17 layers of width 512, kernel 15, 8 heads with 65 frames of left
    /// context, over 4×128 stacked log-Mel features plus a 16-way domain id.
    /// Used by the memory planner; too large to train on a laptop.
    pub fn paper_scale() -> Self {
        Self {
            num_layers: 17,
            model_dim: 512,
            conv_kernel: 15,
            num_heads: 8,
            left_context: 65,
            feature_dim: 512,
            domain_onehot_dim: 16,
            subsample_factor: 3,
            ffn_mult: 4,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.feature_dim + self.domain_onehot_dim
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("model_dim", self.model_dim),
            ("conv_kernel", self.conv_kernel),
            ("num_heads", self.num_heads),
            ("feature_dim", self.feature_dim),
            ("subsample_factor", self.subsample_factor),
            ("ffn_mult", self.ffn_mult),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("encoder.{name} must be positive")));
            }
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "encoder.model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        Ok(())
    }

    /// Parameters of one encoder layer.
    pub fn layer_param_count(&self) -> usize {
        let d = self.model_dim;
        let f = self.ffn_mult * d;
        let norms = 4 * 2 * d;
        let attention = 4 * (d * d + d) + self.num_heads * (self.left_context + 1);
        let conv = self.conv_kernel * d + d + d * d + d;
        let ffn = d * f + f + f * d + d;
        norms + attention + conv + ffn
    }

    /// Parameters of the input projection, trained together with layer 1.
    pub fn stem_param_count(&self) -> usize {
        self.input_dim() * self.model_dim + self.model_dim
    }

    pub fn param_count(&self) -> usize {
        self.stem_param_count() + self.num_layers * self.layer_param_count()
    }

    /// Frames of input history a single layer can see: attention window
    /// followed by the causal convolution.
    pub fn layer_receptive_field(&self) -> usize {
        self.left_context + self.conv_kernel - 1
    }
}
