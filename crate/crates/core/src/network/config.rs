use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of branches in the multi-kernel convolution; also the shuffle group count.
pub const CSCONV_BRANCHES: usize = 4;

/// How the four multi-kernel convolutions are wired.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CsConvLayout {
    /// Each convolution consumes the previous one's output; all four outputs
    /// are tapped and concatenated.
    #[default]
    Cascade,
    /// Each convolution reads the block input directly.
    Parallel,
}

/// Initial weights of the learnable split/merge convolutions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitInit {
    /// Uniform fan-in initialization like every other convolution.
    #[default]
    Uniform,
    /// Start from the even/odd polyphase split (and its exact inverse merge).
    Polyphase,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Input/output length in samples.
    pub length: usize,
    /// Number of analysis/synthesis scales.
    pub scales: usize,
    /// Feature channels.
    pub channels: usize,
    pub csconv_kernels: Vec<usize>,
    pub csconv_layout: CsConvLayout,
    pub projection_kernel: usize,
    /// Kernel of the learnable split (strided conv) and merge (strided deconv).
    pub split_kernel: usize,
    pub heads: usize,
    /// Channel-attention bottleneck divisor.
    pub reduction: usize,
    pub layer_norm_eps: f64,
    pub share_analysis_params: bool,
    pub share_synthesis_params: bool,
    pub learnable_split: bool,
    pub learnable_merge: bool,
    pub split_init: SplitInit,
    pub use_csconv: bool,
    pub use_self_attention: bool,
    pub use_channel_attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            length: 1024,
            scales: 4,
            channels: 32,
            csconv_kernels: vec![31, 33, 35, 37],
            csconv_layout: CsConvLayout::Cascade,
            projection_kernel: 31,
            split_kernel: 31,
            heads: 4,
            reduction: 4,
            layer_norm_eps: 1e-5,
            share_analysis_params: false,
            share_synthesis_params: false,
            learnable_split: true,
            learnable_merge: true,
            split_init: SplitInit::Uniform,
            use_csconv: true,
            use_self_attention: true,
            use_channel_attention: true,
        }
    }
}

impl ModelConfig {
    /// Full-size configuration (32 channels).
    pub fn paper() -> Self {
        Self::default()
    }

    /// Reduced width for laptop-scale runs.
    pub fn desk() -> Self {
        ModelConfig {
            channels: 8,
            ..Self::default()
        }
    }

    /// Filters per multi-kernel branch, so the concatenation has `channels`.
    pub fn csconv_filters(&self) -> usize {
        self.channels / CSCONV_BRANCHES
    }

    /// Everything off: predict/update blocks are identities and the split
    /// and merge are the fixed polyphase pair.
    pub fn without_blocks(mut self) -> Self {
        self.learnable_split = false;
        self.learnable_merge = false;
        self.use_csconv = false;
        self.use_self_attention = false;
        self.use_channel_attention = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let err = |f: &str, r: String| Err(Error::config(f, r));
        if self.scales == 0 {
            return err("scales", "must be >= 1".into());
        }
        if self.channels == 0 {
            return err("channels", "must be >= 1".into());
        }
        if self.length == 0 || !self.length.is_multiple_of(1 << self.scales) {
            return err(
                "length",
                format!("{} not divisible by 2^{}", self.length, self.scales),
            );
        }
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return err(
                "heads",
                format!("{} channels not divisible by {} heads", self.channels, self.heads),
            );
        }
        if self.reduction == 0 || !self.channels.is_multiple_of(self.reduction) {
            return err(
                "reduction",
                format!("{} channels not divisible by {}", self.channels, self.reduction),
            );
        }
        if self.csconv_kernels.len() != CSCONV_BRANCHES {
            return err(
                "csconv_kernels",
                format!("expected {} kernel sizes", CSCONV_BRANCHES),
            );
        }
        if !self.channels.is_multiple_of(CSCONV_BRANCHES) {
            return err(
                "channels",
                format!("{} not divisible by {} convolution branches", self.channels, CSCONV_BRANCHES),
            );
        }
        for &k in self.csconv_kernels.iter().chain([&self.projection_kernel]) {
            if k % 2 == 0 {
                return err("kernel", format!("{k} must be odd"));
            }
        }
        if self.split_kernel < 3 || self.split_kernel.is_multiple_of(2) {
            return err("split_kernel", format!("{} must be odd and >= 3", self.split_kernel));
        }
        if !(self.layer_norm_eps > 0.0) {
            return err("layer_norm_eps", "must be > 0".into());
        }
        Ok(())
    }
}
