use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// 0 in a config file means "take it from the corpus feature dimension".
    #[serde(default)]
    pub input_dim: usize,
    #[serde(default = "default_filter")]
    pub conv_filter_len: usize,
    #[serde(default = "default_stride")]
    pub conv_stride: usize,
    #[serde(default = "default_layers")]
    pub n_layers: usize,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_d_ff")]
    pub d_ff: usize,
    #[serde(default = "default_clip")]
    pub relpos_clip: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

fn default_filter() -> usize {
    7
}
fn default_stride() -> usize {
    3
}
fn default_layers() -> usize {
    2
}
fn default_heads() -> usize {
    2
}
fn default_d_model() -> usize {
    64
}
fn default_d_ff() -> usize {
    128
}
fn default_clip() -> usize {
    16
}
fn default_dropout() -> f64 {
    0.1
}

impl EncoderConfig {
    pub fn new(input_dim: usize) -> Self {
        EncoderConfig {
            input_dim,
            conv_filter_len: default_filter(),
            conv_stride: default_stride(),
            n_layers: default_layers(),
            n_heads: default_heads(),
            d_model: default_d_model(),
            d_ff: default_d_ff(),
            relpos_clip: default_clip(),
            dropout: default_dropout(),
        }
    }

    /// The "large" variant: self-attention and feed-forward widths doubled.
    pub fn large(&self) -> Self {
        EncoderConfig {
            d_model: self.d_model * 2,
            d_ff: self.d_ff * 2,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.input_dim,
            self.conv_filter_len,
            self.conv_stride,
            self.n_heads,
            self.d_model,
            self.d_ff,
        ];
        if dims.contains(&0) {
            return Err(Error::invalid("encoder dimensions must all be >= 1"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn pad(&self) -> usize {
        self.conv_filter_len / 2
    }

    /// Frames after the strided convolution: `⌊(T + 2·pad − filter)/stride⌋ + 1`.
    pub fn output_len(&self, frames: usize) -> usize {
        let padded = frames + 2 * self.pad();
        if padded < self.conv_filter_len {
            return 0;
        }
        (padded - self.conv_filter_len) / self.conv_stride + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointLossConfig {
    pub gamma: f64,
}

impl Default for JointLossConfig {
    fn default() -> Self {
        JointLossConfig { gamma: 1.0 }
    }
}
