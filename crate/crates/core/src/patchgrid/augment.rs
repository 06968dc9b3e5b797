use rand::Rng as _;

use super::PatchSpec;
use crate::error::{bail, Result};
use crate::rng::{self, tag};
use crate::volio::Volume;

/// Crop an MRI-patch at a uniformly random valid origin.
pub fn random_crop(volume: &Volume, spec: &PatchSpec, seed: u64) -> Result<(Volume, [usize; 3])> {
    let dims = volume.dims();
    if (0..3).any(|a| dims[a] < spec.mri_patch[a]) {
        bail!(
            Dimension,
            "volume {:?} is smaller than the MRI-patch {:?}",
            dims,
            spec.mri_patch
        );
    }
    let mut r = rng::stream(seed, &[tag::CROP]);
    let mut origin = [0; 3];
    for a in 0..3 {
        origin[a] = r.random_range(0..=dims[a] - spec.mri_patch[a]);
    }
    Ok((volume.crop(origin, spec.mri_patch)?, origin))
}

/// Reverse the y axis (coronal flip) and/or the x axis (sagittal flip) of
/// every channel.
pub fn flip_augment(patch: &Volume, flip_coronal: bool, flip_sagittal: bool) -> Volume {
    if !flip_coronal && !flip_sagittal {
        return patch.clone();
    }
    let [nx, ny, nz] = patch.dims();
    let mut out = patch.clone();
    for c in 0..patch.channels() {
        for z in 0..nz {
            for y in 0..ny {
                let sy = if flip_coronal { ny - 1 - y } else { y };
                for x in 0..nx {
                    let sx = if flip_sagittal { nx - 1 - x } else { x };
                    out.set(c, x, y, z, patch.get(c, sx, sy, z));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn marker(dims: [usize; 3], at: [usize; 3]) -> Volume {
        let mut v = Volume::zeros(2, dims, [1.0; 3]).unwrap();
        v.set(1, at[0], at[1], at[2], 1.0);
        v
    }

    #[test]
    fn flips() {
        let v = marker([5, 4, 3], [1, 2, 2]);
        assert_eq!(flip_augment(&v, false, false), v);
        let s = flip_augment(&v, false, true);
        assert_eq!(s.get(1, 3, 2, 2), 1.0);
        let c = flip_augment(&v, true, false);
        assert_eq!(c.get(1, 1, 1, 2), 1.0);
        assert_eq!(flip_augment(&flip_augment(&v, true, true), true, true), v);
    }

    #[test]
    fn crop_forced_origin() {
        let spec = PatchSpec {
            mri_patch: [4, 4, 2],
            vit_patch: [2, 2, 2],
            channels: 2,
        };
        let v = marker([4, 4, 2], [0, 0, 0]);
        let (p, o) = random_crop(&v, &spec, 5).unwrap();
        assert_eq!(o, [0, 0, 0]);
        assert_eq!(p, v);
    }

    #[test]
    fn crop_too_small() {
        let spec = PatchSpec::desk();
        let v = Volume::zeros(2, [40, 42, 8], [1.0; 3]).unwrap();
        assert!(random_crop(&v, &spec, 0).is_err());
    }
}
