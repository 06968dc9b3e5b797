//! MRI-patch geometry, ViT-patch tokenisation, 3D positional embeddings,
//! random masking and training-time augmentation.

mod augment;
mod mask;
mod posembed;

pub use augment::{flip_augment, random_crop};
pub use mask::{kept_count, sample_mask, MaskPlan};
pub use posembed::sincos_pos_embed_3d;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::volio::Volume;

/// Geometry of one model pass: the MRI-patch cut from a volume and the
/// ViT-patch that becomes one token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub mri_patch: [usize; 3],
    pub vit_patch: [usize; 3],
    pub channels: usize,
}

impl PatchSpec {
    /// 240×168×8 MRI-patches of two sequences, 8×8×2 ViT-patches.
    pub fn paper() -> Self {
        Self {
            mri_patch: [240, 168, 8],
            vit_patch: [8, 8, 2],
            channels: 2,
        }
    }

    /// 48×42×8 MRI-patches, 6×6×2 ViT-patches.
    pub fn desk() -> Self {
        Self {
            mri_patch: [48, 42, 8],
            vit_patch: [6, 6, 2],
            channels: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            bail!(Config, "patch spec needs at least one channel");
        }
        for a in 0..3 {
            if self.vit_patch[a] == 0 || self.mri_patch[a] == 0 {
                bail!(Config, "zero extent in patch spec {:?}", self);
            }
            if self.mri_patch[a] % self.vit_patch[a] != 0 {
                bail!(
                    Config,
                    "MRI-patch {:?} is not divisible by ViT-patch {:?}",
                    self.mri_patch,
                    self.vit_patch
                );
            }
        }
        Ok(())
    }

    /// Tokens per axis.
    pub fn grid_shape(&self) -> [usize; 3] {
        [
            self.mri_patch[0] / self.vit_patch[0],
            self.mri_patch[1] / self.vit_patch[1],
            self.mri_patch[2] / self.vit_patch[2],
        ]
    }

    pub fn token_count(&self) -> usize {
        self.grid_shape().iter().product()
    }

    /// Values per token: `C·px·py·pz`.
    pub fn token_dim(&self) -> usize {
        self.channels * self.vit_patch.iter().product::<usize>()
    }

    /// Token index covering voxel `(x, y, z)` of the MRI-patch.
    pub fn token_of_voxel(&self, x: usize, y: usize, z: usize) -> usize {
        let g = self.grid_shape();
        ((z / self.vit_patch[2]) * g[1] + y / self.vit_patch[1]) * g[0] + x / self.vit_patch[0]
    }

    /// Same spec with a different channel count.
    pub fn with_channels(mut self, channels: usize) -> Self {
        self.channels = channels;
        self
    }
}

/// An MRI-patch decomposed into tokens, `token_count × token_dim`, raster
/// order with the x grid index fastest. Within a token values run
/// `(c, z, y, x)` with x fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub tokens: Vec<f64>,
    pub grid_shape: [usize; 3],
    pub token_dim: usize,
}

impl TokenGrid {
    pub fn token_count(&self) -> usize {
        self.grid_shape.iter().product()
    }

    pub fn token(&self, i: usize) -> &[f64] {
        &self.tokens[i * self.token_dim..(i + 1) * self.token_dim]
    }

    /// Fixed sin-cos positional embedding for this grid at width `d`.
    pub fn pos_embed(&self, d: usize) -> Result<Vec<f64>> {
        sincos_pos_embed_3d(self.grid_shape, d)
    }
}

/// Split an MRI-patch into ViT-patch tokens.
pub fn tokenize(patch: &Volume, spec: &PatchSpec) -> Result<TokenGrid> {
    spec.validate()?;
    if patch.dims() != spec.mri_patch || patch.channels() != spec.channels {
        bail!(
            Dimension,
            "patch of {} channels × {:?} does not match spec {} × {:?}",
            patch.channels(),
            patch.dims(),
            spec.channels,
            spec.mri_patch
        );
    }
    let g = spec.grid_shape();
    let [px, py, pz] = spec.vit_patch;
    let td = spec.token_dim();
    let mut tokens = Vec::with_capacity(spec.token_count() * td);
    let data = patch.data();
    for gz in 0..g[2] {
        for gy in 0..g[1] {
            for gx in 0..g[0] {
                for c in 0..spec.channels {
                    for dz in 0..pz {
                        for dy in 0..py {
                            let start = patch.index(c, gx * px, gy * py + dy, gz * pz + dz);
                            tokens.extend_from_slice(&data[start..start + px]);
                        }
                    }
                }
            }
        }
    }
    Ok(TokenGrid {
        tokens,
        grid_shape: g,
        token_dim: td,
    })
}

/// Reassemble tokens (`token_count × token_dim`) into an MRI-patch.
pub fn detokenize(tokens: &[f64], spec: &PatchSpec, spacing: [f64; 3]) -> Result<Volume> {
    spec.validate()?;
    let td = spec.token_dim();
    if tokens.len() != spec.token_count() * td {
        bail!(
            Dimension,
            "{} token values for {} tokens of {}",
            tokens.len(),
            spec.token_count(),
            td
        );
    }
    let g = spec.grid_shape();
    let [px, py, pz] = spec.vit_patch;
    let mut out = Volume::zeros(spec.channels, spec.mri_patch, spacing)?;
    let mut t = 0;
    for gz in 0..g[2] {
        for gy in 0..g[1] {
            for gx in 0..g[0] {
                let tok = &tokens[t * td..(t + 1) * td];
                let mut o = 0;
                for c in 0..spec.channels {
                    for dz in 0..pz {
                        for dy in 0..py {
                            let start = out.index(c, gx * px, gy * py + dy, gz * pz + dz);
                            out.data_mut()[start..start + px].copy_from_slice(&tok[o..o + px]);
                            o += px;
                        }
                    }
                }
                t += 1;
            }
        }
    }
    Ok(out)
}
