//! Sliding-window inference: per-sequence reconstruction-error maps, their
//! per-voxel aggregation and the fused anomaly map.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::mae3d::Reconstructor;
use crate::par;
use crate::patchgrid::{detokenize, sample_mask, tokenize, MaskPlan, PatchSpec, TokenGrid};
use crate::rng::{self, tag};
use crate::volio::{min_filter, Volume, MIN_KERNEL};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub stride: [usize; 3],
    pub repetitions: usize,
    pub mask_ratio: f64,
    pub seed: u64,
    /// Also count reconstruction error at visible voxels.
    #[serde(default)]
    pub error_on_visible: bool,
}

impl InferenceConfig {
    /// Stride 64×42×2, 6 repetitions, ρ = 0.9.
    pub fn paper() -> Self {
        Self {
            stride: [64, 42, 2],
            repetitions: 6,
            mask_ratio: 0.9,
            seed: 0,
            error_on_visible: false,
        }
    }

    /// Half-patch in-plane stride for the desk geometry.
    pub fn desk() -> Self {
        Self {
            stride: [24, 21, 2],
            ..Self::paper()
        }
    }

    pub fn validate(&self, spec: &PatchSpec) -> Result<()> {
        if self.repetitions == 0 {
            bail!(Config, "at least one repetition is required");
        }
        if (0..3).any(|a| self.stride[a] == 0 || self.stride[a] > spec.mri_patch[a]) {
            bail!(
                Config,
                "stride {:?} must be positive and at most the MRI-patch {:?}",
                self.stride,
                spec.mri_patch
            );
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            bail!(Config, "masking ratio {} outside [0, 1)", self.mask_ratio);
        }
        Ok(())
    }
}

/// Reconstructs every token as its input. With it every error is zero.
#[derive(Clone, Debug)]
pub struct IdentityStub {
    pub spec: PatchSpec,
}

impl Reconstructor for IdentityStub {
    fn spec(&self) -> &PatchSpec {
        &self.spec
    }

    fn reconstruct(&self, grid: &TokenGrid, _plan: &MaskPlan) -> Result<Vec<f64>> {
        Ok(grid.tokens.clone())
    }
}

/// Patch origins along one axis: stride steps, last one clamped to the border.
pub fn axis_origins(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut o = 0;
    loop {
        out.push(o);
        if o + patch >= dim {
            break;
        }
        o = (o + stride).min(dim - patch);
    }
    out
}

/// All patch origins, x fastest.
pub fn grid_origins(dims: [usize; 3], patch: [usize; 3], stride: [usize; 3]) -> Vec<[usize; 3]> {
    let ax: Vec<Vec<usize>> = (0..3).map(|a| axis_origins(dims[a], patch[a], stride[a])).collect();
    let mut out = Vec::with_capacity(ax.iter().map(Vec::len).product());
    for &z in &ax[2] {
        for &y in &ax[1] {
            for &x in &ax[0] {
                out.push([x, y, z]);
            }
        }
    }
    out
}

/// One repetition at one patch position.
#[derive(Clone, Debug)]
pub struct RepetitionError {
    pub plan: MaskPlan,
    /// `(I − R)²` per sequence, min-filtered.
    pub error: Volume,
    /// Per patch voxel, `true` where its token was masked.
    pub footprint: Vec<bool>,
}

/// Error patches for `cfg.repetitions` fresh masks of one MRI-patch.
/// `position` selects the seed stream, so each grid position draws its own
/// masks.
pub fn patch_error_maps(
    model: &dyn Reconstructor,
    patch: &Volume,
    cfg: &InferenceConfig,
    position: usize,
) -> Result<Vec<RepetitionError>> {
    let spec = model.spec();
    let grid = tokenize(patch, spec)?;
    let [nx, ny, nz] = spec.mri_patch;
    (0..cfg.repetitions)
        .map(|rep| {
            let seed = rng::derive_seed(cfg.seed, &[tag::INFER, position as u64, rep as u64]);
            let plan = sample_mask(spec.token_count(), cfg.mask_ratio, seed)?;
            let recon = model.reconstruct(&grid, &plan)?;
            let recon = detokenize(&recon, spec, patch.spacing())?;
            let mut err = patch.clone();
            for (e, r) in err.data_mut().iter_mut().zip(recon.data()) {
                let d = *e - r;
                *e = d * d;
            }
            let error = min_filter(&err, MIN_KERNEL)?;
            let flags = plan.masked_flags();
            let mut footprint = Vec::with_capacity(nx * ny * nz);
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        footprint.push(flags[spec.token_of_voxel(x, y, z)]);
                    }
                }
            }
            Ok(RepetitionError { plan, error, footprint })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct AnomalyResult {
    /// Mean error per sequence (one channel each), 0 where uncovered.
    pub per_sequence: Volume,
    /// Number of contributing predictions per voxel.
    pub coverage: Vec<u32>,
    /// Fused, min-filtered map.
    pub fused: Volume,
    pub uncovered: usize,
    /// Model reconstructions performed.
    pub forwards: usize,
}

/// Error sum and count of one patch position, in patch coordinates.
struct Partial {
    sum: Vec<f64>,
    count: Vec<u32>,
}

fn position_partial(
    model: &dyn Reconstructor,
    volume: &Volume,
    cfg: &InferenceConfig,
    origin: [usize; 3],
    position: usize,
) -> Result<Partial> {
    let spec = model.spec();
    let patch = volume.crop(origin, spec.mri_patch)?;
    let n = patch.voxels();
    let c = patch.channels();
    let mut sum = vec![0.0; c * n];
    let mut count = vec![0u32; n];
    for rep in patch_error_maps(model, &patch, cfg, position)? {
        for v in 0..n {
            if rep.footprint[v] || cfg.error_on_visible {
                count[v] += 1;
                for ch in 0..c {
                    sum[ch * n + v] += rep.error.data()[ch * n + v];
                }
            }
        }
    }
    Ok(Partial { sum, count })
}

/// Full-volume inference visiting grid positions in canonical order.
pub fn sliding_window_infer(model: &dyn Reconstructor, volume: &Volume, cfg: &InferenceConfig) -> Result<AnomalyResult> {
    let spec = model.spec();
    let n = grid_origins_checked(volume, spec, cfg)?.len();
    sliding_window_infer_in_order(model, volume, cfg, &(0..n).collect::<Vec<_>>())
}

fn grid_origins_checked(volume: &Volume, spec: &PatchSpec, cfg: &InferenceConfig) -> Result<Vec<[usize; 3]>> {
    cfg.validate(spec)?;
    let dims = volume.dims();
    if (0..3).any(|a| dims[a] < spec.mri_patch[a]) {
        bail!(
            Dimension,
            "volume {:?} is smaller than the MRI-patch {:?}",
            dims,
            spec.mri_patch
        );
    }
    if volume.channels() != spec.channels {
        bail!(
            Dimension,
            "volume has {} sequences, model expects {}",
            volume.channels(),
            spec.channels
        );
    }
    Ok(grid_origins(dims, spec.mri_patch, cfg.stride))
}

/// As [`sliding_window_infer`], but accumulating positions in the given
/// order (a permutation of the grid position indices).
pub fn sliding_window_infer_in_order(
    model: &dyn Reconstructor,
    volume: &Volume,
    cfg: &InferenceConfig,
    order: &[usize],
) -> Result<AnomalyResult> {
    let spec = model.spec();
    let origins = grid_origins_checked(volume, spec, cfg)?;
    let mut seen = vec![false; origins.len()];
    for &p in order {
        if p >= origins.len() || std::mem::replace(&mut seen[p], true) {
            bail!(Contract, "order is not a permutation of {} positions", origins.len());
        }
    }
    if order.len() != origins.len() {
        bail!(Contract, "order is not a permutation of {} positions", origins.len());
    }
    let dims = volume.dims();
    let c = volume.channels();
    let nv = volume.voxels();
    let mut sum = vec![0.0; c * nv];
    let mut coverage = vec![0u32; nv];
    let [px, py, pz] = spec.mri_patch;
    let pn = px * py * pz;
    // Bounded batches keep memory flat; each batch is merged in `order`.
    let batch = (2 * par::current_threads()).max(1);
    for chunk in order.chunks(batch) {
        let parts = par::map_slice(chunk, |&p| position_partial(model, volume, cfg, origins[p], p));
        for (&p, part) in chunk.iter().zip(parts) {
            let part = part?;
            let o = origins[p];
            for z in 0..pz {
                for y in 0..py {
                    for x in 0..px {
                        let lv = (z * py + y) * px + x;
                        let gv = ((o[2] + z) * dims[1] + o[1] + y) * dims[0] + o[0] + x;
                        coverage[gv] += part.count[lv];
                        for ch in 0..c {
                            sum[ch * nv + gv] += part.sum[ch * pn + lv];
                        }
                    }
                }
            }
        }
    }
    let mut uncovered = 0;
    for v in 0..nv {
        if coverage[v] == 0 {
            uncovered += 1;
            for ch in 0..c {
                sum[ch * nv + v] = 0.0;
            }
        } else {
            let k = coverage[v] as f64;
            for ch in 0..c {
                sum[ch * nv + v] /= k;
            }
        }
    }
    let per_sequence = Volume::new(c, dims, volume.spacing(), sum)?;
    let fused = fuse_channels(&per_sequence)?;
    Ok(AnomalyResult {
        per_sequence,
        coverage,
        fused,
        uncovered,
        forwards: origins.len() * cfg.repetitions,
    })
}

/// Voxelwise mean over all channels, then the 3×3×2 min filter.
pub fn fuse_channels(maps: &Volume) -> Result<Volume> {
    let n = maps.voxels();
    let c = maps.channels();
    let mut mean = vec![0.0; n];
    for ch in 0..c {
        for (m, v) in mean.iter_mut().zip(maps.channel(ch)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= c as f64;
    }
    min_filter(&Volume::new(1, maps.dims(), maps.spacing(), mean)?, MIN_KERNEL)
}

/// `min_filter(½(E_nfs + E_fs))` for two single-channel maps.
pub fn fuse_maps(e_nfs: &Volume, e_fs: &Volume) -> Result<Volume> {
    if e_nfs.dims() != e_fs.dims() || e_nfs.channels() != 1 || e_fs.channels() != 1 {
        bail!(
            Dimension,
            "fusing {}×{:?} with {}×{:?}; need two single-channel maps of equal dims",
            e_nfs.channels(),
            e_nfs.dims(),
            e_fs.channels(),
            e_fs.dims()
        );
    }
    fuse_channels(&Volume::stack(&[e_nfs.clone(), e_fs.clone()])?)
}

/// Voxelwise product with a binary mask (broadcast over channels).
pub fn apply_tissue_mask(map: &Volume, mask: &Volume) -> Result<Volume> {
    if map.dims() != mask.dims() || mask.channels() != 1 {
        bail!(
            Dimension,
            "map {:?} and mask {}×{:?} differ",
            map.dims(),
            mask.channels(),
            mask.dims()
        );
    }
    if let Some(v) = mask.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        bail!(Validation, "tissue mask is not binary (found {v})");
    }
    let mut out = map.clone();
    for ch in 0..map.channels() {
        for (o, m) in out.channel_mut(ch).iter_mut().zip(mask.data()) {
            *o *= m;
        }
    }
    Ok(out)
}
