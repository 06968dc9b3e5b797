use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::patchgrid::PatchSpec;

/// Which tokens the reconstruction loss averages over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossScope {
    /// Masked tokens only.
    #[default]
    Masked,
    /// Every token (plain autoencoding, for ablation).
    All,
}

/// How multi-sequence input is modelled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMode {
    /// One network; every token carries all sequences.
    #[default]
    Joint,
    /// One independent single-channel network per sequence.
    Separate,
}

/// Architecture and masking hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaeConfig {
    pub spec: PatchSpec,
    pub encoder_depth: usize,
    pub encoder_dim: usize,
    pub encoder_heads: usize,
    pub decoder_depth: usize,
    pub decoder_dim: usize,
    pub decoder_heads: usize,
    pub mlp_ratio: usize,
    pub mask_ratio: f64,
    #[serde(default)]
    pub loss_scope: LossScope,
    #[serde(default)]
    pub channel_mode: ChannelMode,
    /// Std of the truncated-normal weight init (clipped at ±2 std).
    pub init_std: f64,
    pub norm_eps: f64,
}

impl MaeConfig {
    /// Full-scale architecture: 12 blocks × 768 encoder, 4 blocks × 384
    /// decoder, 240×168×8 MRI-patches, 8×8×2 ViT-patches, ρ = 0.9.
    pub fn paper() -> Self {
        Self {
            spec: PatchSpec::paper(),
            encoder_depth: 12,
            encoder_dim: 768,
            encoder_heads: 12,
            decoder_depth: 4,
            decoder_dim: 384,
            decoder_heads: 12,
            mlp_ratio: 4,
            mask_ratio: 0.9,
            loss_scope: LossScope::Masked,
            channel_mode: ChannelMode::Joint,
            init_std: 0.02,
            norm_eps: 1e-6,
        }
    }

    /// CPU-sized architecture: 2 × 24 encoder, 1 × 12 decoder on 48×42×8
    /// MRI-patches with 6×6×2 ViT-patches.
    pub fn desk() -> Self {
        Self {
            spec: PatchSpec::desk(),
            encoder_depth: 2,
            encoder_dim: 24,
            encoder_heads: 4,
            decoder_depth: 1,
            decoder_dim: 12,
            decoder_heads: 2,
            mlp_ratio: 4,
            mask_ratio: 0.9,
            loss_scope: LossScope::Masked,
            channel_mode: ChannelMode::Joint,
            init_std: 0.02,
            norm_eps: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        for (name, dim, heads) in [
            ("encoder", self.encoder_dim, self.encoder_heads),
            ("decoder", self.decoder_dim, self.decoder_heads),
        ] {
            if dim == 0 || dim % 6 != 0 {
                bail!(Config, "{name} width {dim} must be a positive multiple of 6");
            }
            if heads == 0 || dim % heads != 0 {
                bail!(Config, "{name} width {dim} is not divisible by {heads} heads");
            }
        }
        if self.encoder_depth == 0 {
            bail!(Config, "encoder needs at least one block");
        }
        if self.mlp_ratio == 0 {
            bail!(Config, "mlp_ratio must be positive");
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            bail!(Config, "mask ratio {} outside [0, 1)", self.mask_ratio);
        }
        if !(self.init_std > 0.0) || !(self.norm_eps > 0.0) {
            bail!(Config, "init_std and norm_eps must be positive");
        }
        Ok(())
    }

    /// Patch spec seen by each sub-network.
    pub(crate) fn net_spec(&self) -> PatchSpec {
        match self.channel_mode {
            ChannelMode::Joint => self.spec,
            ChannelMode::Separate => self.spec.with_channels(1),
        }
    }

    pub(crate) fn net_count(&self) -> usize {
        match self.channel_mode {
            ChannelMode::Joint => 1,
            ChannelMode::Separate => self.spec.channels,
        }
    }
}

/// Optimisation and augmentation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub seed: u64,
    pub flip_coronal_prob: f64,
    pub flip_sagittal_prob: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    /// Batch 6, lr 1e-3, 1000 epochs with 7 warmup epochs, AdamW
    /// (0.9, 0.95, wd 0.05), flips with probability ½ per plane.
    fn default() -> Self {
        Self {
            batch_size: 6,
            base_lr: 1e-3,
            epochs: 1000,
            warmup_epochs: 7,
            seed: 0,
            flip_coronal_prob: 0.5,
            flip_sagittal_prob: 0.5,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.05,
        }
    }
}

impl TrainConfig {
    /// Epoch budget and step size for the desk architecture.
    pub fn desk() -> Self {
        Self {
            base_lr: 5e-3,
            epochs: 600,
            warmup_epochs: 60,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            bail!(Config, "batch size must be at least 1");
        }
        if self.warmup_epochs >= self.epochs {
            bail!(
                Config,
                "warmup epochs ({}) must be fewer than epochs ({})",
                self.warmup_epochs,
                self.epochs
            );
        }
        for p in [self.flip_coronal_prob, self.flip_sagittal_prob] {
            if !(0.0..=1.0).contains(&p) {
                bail!(Config, "flip probability {p} outside [0, 1]");
            }
        }
        if !(self.base_lr >= 0.0) {
            bail!(Config, "learning rate must be non-negative");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        MaeConfig::paper().validate().unwrap();
        MaeConfig::desk().validate().unwrap();
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_bad_widths() {
        let mut c = MaeConfig::desk();
        c.encoder_dim = 16;
        assert!(c.validate().is_err());
        let mut c = MaeConfig::desk();
        c.decoder_heads = 5;
        assert!(c.validate().is_err());
        let t = TrainConfig {
            warmup_epochs: 10,
            epochs: 10,
            ..TrainConfig::default()
        };
        assert!(t.validate().is_err());
    }

    #[test]
    fn json_round_trip() {
        let c = MaeConfig::desk();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<MaeConfig>(&s).unwrap(), c);
    }
}
