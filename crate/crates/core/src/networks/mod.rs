//! The learned blocks: encoders, mask scorers, de-masking attention,
//! decoders and discriminators.

pub mod blocks;
mod discriminator;
mod generator;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use discriminator::Discriminator;
pub use generator::{
    Adm, Decoder, Encoder, ImageGenerator, MaskedLatent, SemanticGenerator, VqParams,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskModule {
    /// Scorer conditioned on the segmentation map through SPADE.
    Samm,
    /// Unconditioned scorer.
    Amm,
}

/// Sizes of every network block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Latent channels `C`.
    pub latent_channels: usize,
    /// Codewords per codebook `J`.
    pub codebook_size: usize,
    /// Encoder stage widths, mirrored by the decoders.
    pub widths: [usize; 4],
    pub res_blocks: usize,
    /// Width of the SemPE and InputNet outputs.
    pub embed_channels: usize,
    pub heads: usize,
    pub adm_layers: usize,
    pub spade_hidden: usize,
    pub scorer_hidden: usize,
    pub disc_width: usize,
    pub max_groups: usize,
    pub mask_module: MaskModule,
}

impl ModelConfig {
    /// Full-size model for 256x512 inputs.
    pub fn paper() -> Self {
        Self {
            height: 256,
            width: 512,
            num_classes: 19,
            latent_channels: 256,
            codebook_size: 1024,
            widths: [64, 128, 256, 256],
            res_blocks: 2,
            embed_channels: 128,
            heads: 1,
            adm_layers: 2,
            spade_hidden: 64,
            scorer_hidden: 64,
            disc_width: 64,
            max_groups: 32,
            mask_module: MaskModule::Samm,
        }
    }

    /// Narrow model that trains in minutes on one CPU core.
    pub fn tiny(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            latent_channels: 32,
            widths: [8, 16, 32, 32],
            res_blocks: 1,
            embed_channels: 8,
            spade_hidden: 8,
            scorer_hidden: 16,
            disc_width: 8,
            max_groups: 8,
            ..Self::paper()
        }
    }

    pub fn latent_dims(&self) -> (usize, usize) {
        (self.height / 16, self.width / 16)
    }

    /// Latent positions `K`.
    pub fn positions(&self) -> usize {
        let (h, w) = self.latent_dims();
        h * w
    }

    pub fn validate(&self) -> Result<()> {
        crate::semantic_map::check_codec_dims(self.height, self.width)?;
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 || self.num_classes > 256 {
            return bad(format!("num_classes {} not in 1..=256", self.num_classes));
        }
        if self.codebook_size < 2 || !self.codebook_size.is_power_of_two() || self.codebook_size > 1 << 16 {
            return bad(format!(
                "codebook_size {} must be a power of two in 2..=65536",
                self.codebook_size
            ));
        }
        if self.latent_channels < 2 || self.latent_channels % 2 != 0 {
            return bad(format!("latent_channels {} must be even", self.latent_channels));
        }
        if self.heads == 0 || self.latent_channels % self.heads != 0 {
            return bad(format!(
                "{} heads do not divide {} latent channels",
                self.heads, self.latent_channels
            ));
        }
        let sizes = [
            self.res_blocks,
            self.embed_channels,
            self.spade_hidden,
            self.scorer_hidden,
            self.disc_width,
            self.max_groups,
        ];
        if self.widths.contains(&0) || sizes.contains(&0) {
            return bad("layer sizes must be positive".into());
        }
        Ok(())
    }

    pub fn log2_codebook(&self) -> u8 {
        self.codebook_size.trailing_zeros() as u8
    }
}
