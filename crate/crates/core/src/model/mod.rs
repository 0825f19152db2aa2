//! BertsWin encoder-decoder and the sparse ViT-MAE baseline.
//!
//! Both variants share the transposed-convolution reconstruction head. The
//! BertsWin path embeds visible patches with a strided-conv stem, scatters
//! them into the full token grid next to learnable mask tokens, and runs
//! single-scale shifted-window blocks over every position. The baseline
//! embeds visible patches with one linear layer and runs global attention
//! over visible tokens only.

mod archive;
mod net;
mod params;
mod patch;
mod posemb;
mod window;

pub use archive::TensorArchive;
pub use net::{
    attention_block, decode, encode, encoder_blocks, forward, pooled_features, stem_embed, vit_sparse_encode,
    ForwardOut,
};
pub use params::{init_params, Bound, ParamStore};
pub use patch::{gather_visible_patches, patchify, sample_mask, sample_mask_with, unpatchify, MaskPlan};
pub use posemb::sincos_3d;
pub use window::{window_inverse, window_layout, window_partition, WindowLayout};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Bertswin,
    VitSparse,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Bertswin => "bertswin",
            Variant::VitSparse => "vit_sparse",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
/// Missing fields take the desk defaults.
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub volume_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// Window side in tokens.
    pub window: usize,
    pub mlp_ratio: f64,
    pub mask_ratio: f64,
    pub variant: Variant,
    /// Channels of the first stem stage; doubled per stage.
    pub stem_channels: usize,
}

impl Default for ModelConfig {
    /// Desk reference configuration.
    fn default() -> Self {
        ModelConfig {
            volume_size: 32,
            patch_size: 8,
            embed_dim: 32,
            depth: 2,
            heads: 4,
            window: 2,
            mlp_ratio: 4.0,
            mask_ratio: 0.75,
            variant: Variant::Bertswin,
            stem_channels: 8,
        }
    }
}

impl ModelConfig {
    /// Full-scale configuration: 224^3 volume, 16^3 patches, 14^3 grid.
    pub fn canonical() -> Self {
        ModelConfig {
            volume_size: 224,
            patch_size: 16,
            embed_dim: 768,
            depth: 12,
            heads: 12,
            window: 7,
            mlp_ratio: 4.0,
            mask_ratio: 0.75,
            variant: Variant::Bertswin,
            stem_channels: 48,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size < 4 || !self.patch_size.is_power_of_two() {
            return bad(format!("patch size {} must be a power of two >= 4", self.patch_size));
        }
        if self.volume_size == 0 || !self.volume_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "volume size {} is not divisible by patch size {}",
                self.volume_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.window == 0 || !self.grid_side().is_multiple_of(self.window) {
            return bad(format!(
                "grid side {} is not divisible by window {}",
                self.grid_side(),
                self.window
            ));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad(format!("mask ratio {} must lie in (0, 1)", self.mask_ratio));
        }
        if !(self.mlp_ratio > 0.0) || self.hidden_dim() == 0 {
            return bad(format!("mlp ratio {} gives an empty hidden layer", self.mlp_ratio));
        }
        if self.stem_channels == 0 {
            return bad("stem_channels must be >= 1".into());
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.volume_size / self.patch_size
    }

    pub fn n_tokens(&self) -> usize {
        self.grid_side().pow(3)
    }

    pub fn n_visible(&self) -> usize {
        visible_count(self.n_tokens(), self.mask_ratio)
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn stem_stages(&self) -> usize {
        self.patch_size.trailing_zeros() as usize
    }

    /// Cyclic shift used by block `layer`: half a window on odd blocks,
    /// none when a single window already covers the grid.
    pub fn shift_for(&self, layer: usize) -> usize {
        if layer % 2 == 1 && self.window < self.grid_side() {
            self.window / 2
        } else {
            0
        }
    }

    /// Channel widths through the stem, input channel first.
    pub fn stem_widths(&self) -> Vec<usize> {
        let mut w = vec![1];
        w.extend((0..self.stem_stages()).map(|s| self.stem_channels << s));
        w
    }

    pub fn decoder_strides(&self) -> [usize; 3] {
        decoder_strides(self.patch_size)
    }

    /// Channel widths through the decoder, embedding first, output last.
    pub fn decoder_widths(&self) -> [usize; 4] {
        let c = self.embed_dim;
        [c, (c / 2).max(1), (c / 4).max(1), 1]
    }
}

/// `round((1 - ratio) * n)`, at least one token.
pub fn visible_count(n: usize, ratio: f64) -> usize {
    (((1.0 - ratio) * n as f64).round() as usize).clamp(1, n)
}

/// Splits `log2(patch)` into three stride exponents as evenly as possible,
/// larger strides first: 8 -> (2,2,2), 16 -> (4,2,2), 32 -> (4,4,2).
pub fn decoder_strides(patch: usize) -> [usize; 3] {
    let e = patch.trailing_zeros() as usize;
    let mut out = [e / 3; 3];
    for s in out.iter_mut().take(e % 3) {
        *s += 1;
    }
    out.map(|x| 1 << x)
}
