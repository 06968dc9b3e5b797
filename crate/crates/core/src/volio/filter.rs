//! Sliding-window minimum (grey-scale erosion with a box structuring
//! element).
//!
//! Window placement along an axis of extent `k` covers offsets
//! `-(k-1)/2 ..= k/2`: centred for odd `k`, forward-aligned for even `k`
//! (`k = 2` covers `{i, i+1}`). Borders replicate the edge voxel, so output
//! dims equal input dims. A box minimum is separable, so the filter runs as
//! three 1D passes and is exactly equal to the direct window minimum.

use super::volume::Volume;
use crate::error::{bail, Result};
use crate::par;

/// Kernel used throughout the anomaly and subtraction pipelines.
pub const MIN_KERNEL: [usize; 3] = [3, 3, 2];

/// Offsets `(lo, hi)` covered by a window of extent `k`.
pub fn window_offsets(k: usize) -> (isize, isize) {
    let lo = -(((k as isize) - 1) / 2);
    let hi = (k / 2) as isize;
    (lo, hi)
}

fn min_pass(src: &[f64], dst: &mut [f64], dims: [usize; 3], axis: usize, k: usize) {
    if k == 1 {
        dst.copy_from_slice(src);
        return;
    }
    let (lo, hi) = window_offsets(k);
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let len = dims[axis] as isize;
    let plane = dims[0] * dims[1];
    let slab = plane * dims[2];
    // Parallel over z-slices of each channel; every output voxel is written
    // by exactly one task and min is exact, so scheduling cannot change it.
    par::for_each_chunk_mut(dst, plane, |chunk_idx, out| {
        let base = chunk_idx * plane;
        let c_off = (base / slab) * slab;
        let z = (base % slab) / plane;
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let pos = [x, y, z][axis] as isize;
                let line_start = c_off + z * plane + y * dims[0] + x - (pos as usize) * stride;
                let mut m = f64::INFINITY;
                for o in lo..=hi {
                    let p = (pos + o).clamp(0, len - 1) as usize;
                    let v = src[line_start + p * stride];
                    if v < m {
                        m = v;
                    }
                }
                out[y * dims[0] + x] = m;
            }
        }
    });
}

/// Per-channel sliding-window minimum with the given `[kx, ky, kz]` extents.
pub fn min_filter(v: &Volume, kernel: [usize; 3]) -> Result<Volume> {
    let dims = v.dims();
    for a in 0..3 {
        if kernel[a] == 0 || kernel[a] > dims[a] {
            bail!(
                Dimension,
                "min-filter kernel {:?} does not fit volume {:?}",
                kernel,
                dims
            );
        }
    }
    let mut a = v.data().to_vec();
    let mut b = vec![0.0; a.len()];
    for axis in 0..3 {
        min_pass(&a, &mut b, dims, axis, kernel[axis]);
        std::mem::swap(&mut a, &mut b);
    }
    Volume::new(v.channels(), dims, v.spacing(), a)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn offsets() {
        assert_eq!(window_offsets(1), (0, 0));
        assert_eq!(window_offsets(2), (0, 1));
        assert_eq!(window_offsets(3), (-1, 1));
        assert_eq!(window_offsets(4), (-1, 2));
    }

    #[test]
    fn constant_volume_unchanged() {
        let v = Volume::new(1, [4, 4, 3], [1.0; 3], vec![2.5; 48]).unwrap();
        assert_eq!(min_filter(&v, MIN_KERNEL).unwrap(), v);
    }

    #[test]
    fn interior_spike_erased() {
        let mut v = Volume::zeros(1, [5, 5, 4], [1.0; 3]).unwrap();
        v.set(0, 2, 2, 1, 9.0);
        let f = min_filter(&v, MIN_KERNEL).unwrap();
        assert!(f.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn even_axis_is_forward_aligned() {
        // z-line [5, 1, 7] with kz = 2 → [min(5,1), min(1,7), min(7,7)]
        let v = Volume::new(1, [1, 1, 3], [1.0; 3], vec![5.0, 1.0, 7.0]).unwrap();
        let f = min_filter(&v, [1, 1, 2]).unwrap();
        assert_eq!(f.data(), &[1.0, 1.0, 7.0]);
    }

    #[test]
    fn kernel_too_large() {
        let v = Volume::zeros(1, [2, 4, 4], [1.0; 3]).unwrap();
        assert!(matches!(
            min_filter(&v, MIN_KERNEL),
            Err(crate::Error::Dimension(_))
        ));
    }
}
