use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// Multi-channel 3D scalar field.
///
/// Axes follow LPS order: `x` lateral, `y` posterior, `z` superior. Data is
/// stored `(c, z, y, x)` with `x` fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    channels: usize,
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f64>,
}

impl Volume {
    pub fn new(channels: usize, dims: [usize; 3], spacing: [f64; 3], data: Vec<f64>) -> Result<Self> {
        if spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            bail!(Validation, "voxel spacing must be positive, got {:?}", spacing);
        }
        let n = channels
            .checked_mul(dims[0])
            .and_then(|v| v.checked_mul(dims[1]))
            .and_then(|v| v.checked_mul(dims[2]));
        match n {
            Some(n) if n == data.len() => {}
            _ => bail!(
                Dimension,
                "{} channels of {:?} voxels do not match {} values",
                channels,
                dims,
                data.len()
            ),
        }
        Ok(Self {
            channels,
            dims,
            spacing,
            data,
        })
    }

    pub fn zeros(channels: usize, dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let n = channels * dims.iter().product::<usize>();
        Self::new(channels, dims, spacing, vec![0.0; n])
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    /// Voxels per channel.
    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, x: usize, y: usize, z: usize) -> usize {
        ((c * self.dims[2] + z) * self.dims[1] + y) * self.dims[0] + x
    }

    pub fn get(&self, c: usize, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(c, x, y, z)]
    }

    pub fn set(&mut self, c: usize, x: usize, y: usize, z: usize, v: f64) {
        let i = self.index(c, x, y, z);
        self.data[i] = v;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Copy one channel out as a single-channel volume.
    pub fn extract_channel(&self, c: usize) -> Result<Volume> {
        if c >= self.channels {
            bail!(Dimension, "channel {c} of a {}-channel volume", self.channels);
        }
        Volume::new(1, self.dims, self.spacing, self.channel(c).to_vec())
    }

    /// Stack single- or multi-channel volumes of equal geometry.
    pub fn stack(parts: &[Volume]) -> Result<Volume> {
        let Some(first) = parts.first() else {
            bail!(Dimension, "cannot stack zero volumes");
        };
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            if p.dims != first.dims {
                bail!(Dimension, "stacking {:?} with {:?}", p.dims, first.dims);
            }
            channels += p.channels;
            data.extend_from_slice(&p.data);
        }
        Volume::new(channels, first.dims, first.spacing, data)
    }

    pub fn same_geometry(&self, other: &Volume) -> bool {
        self.dims == other.dims && self.channels == other.channels
    }

    /// Copy out the box `origin .. origin + size` (all channels).
    pub fn crop(&self, origin: [usize; 3], size: [usize; 3]) -> Result<Volume> {
        for a in 0..3 {
            if size[a] == 0 || origin[a] + size[a] > self.dims[a] {
                bail!(
                    Dimension,
                    "crop origin {:?} size {:?} exceeds volume {:?}",
                    origin,
                    size,
                    self.dims
                );
            }
        }
        let mut data = Vec::with_capacity(self.channels * size.iter().product::<usize>());
        for c in 0..self.channels {
            for z in origin[2]..origin[2] + size[2] {
                for y in origin[1]..origin[1] + size[1] {
                    let start = self.index(c, origin[0], y, z);
                    data.extend_from_slice(&self.data[start..start + size[0]]);
                }
            }
        }
        Volume::new(self.channels, size, self.spacing, data)
    }

    /// Per-channel mean and population standard deviation.
    pub fn channel_stats(&self, c: usize) -> (f64, f64) {
        let ch = self.channel(c);
        let n = ch.len() as f64;
        let mean = ch.iter().sum::<f64>() / n;
        let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    }
}

/// Intensity statistics every image is brought to before training.
pub const TARGET_MEAN: f64 = 0.5;
pub const TARGET_STD: f64 = 0.25;

/// Rescale every channel independently to the target mean and standard
/// deviation (population statistics over the whole channel).
pub fn normalize(v: &Volume, target_mean: f64, target_std: f64) -> Result<Volume> {
    let mut out = v.clone();
    for c in 0..v.channels() {
        let (mean, std) = v.channel_stats(c);
        if !(std > 1e-12 * mean.abs().max(1.0)) {
            bail!(
                DegenerateInput,
                "channel {c} is constant (std {std}); cannot normalise"
            );
        }
        let gain = target_std / std;
        for x in out.channel_mut(c) {
            *x = (*x - mean) * gain + target_mean;
        }
    }
    Ok(out)
}

/// Axis-aligned box with inclusive voxel corners.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min: [usize; 3],
    pub max: [usize; 3],
    #[serde(default)]
    pub label: String,
}

impl BoundingBox {
    pub fn new(min: [usize; 3], max: [usize; 3], label: impl Into<String>) -> Result<Self> {
        if (0..3).any(|a| min[a] > max[a]) {
            bail!(Validation, "box min {:?} exceeds max {:?}", min, max);
        }
        Ok(Self {
            min,
            max,
            label: label.into(),
        })
    }

    pub fn validate(&self, dims: [usize; 3]) -> Result<()> {
        if (0..3).any(|a| self.min[a] > self.max[a] || self.max[a] >= dims[a]) {
            bail!(
                Validation,
                "box {:?}..={:?} does not fit volume {:?}",
                self.min,
                self.max,
                dims
            );
        }
        Ok(())
    }

    pub fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        let p = [x, y, z];
        (0..3).all(|a| self.min[a] <= p[a] && p[a] <= self.max[a])
    }

    pub fn voxel_count(&self) -> usize {
        (0..3).map(|a| self.max[a] - self.min[a] + 1).product()
    }
}

/// Binary single-channel volume, 1 inside the box (inclusive), 0 elsewhere.
pub fn box_to_mask(b: &BoundingBox, dims: [usize; 3], spacing: [f64; 3]) -> Result<Volume> {
    boxes_to_mask(std::slice::from_ref(b), dims, spacing)
}

/// Union of several boxes as a binary mask.
pub fn boxes_to_mask(boxes: &[BoundingBox], dims: [usize; 3], spacing: [f64; 3]) -> Result<Volume> {
    let mut out = Volume::zeros(1, dims, spacing)?;
    for b in boxes {
        b.validate(dims)?;
        for z in b.min[2]..=b.max[2] {
            for y in b.min[1]..=b.max[1] {
                for x in b.min[0]..=b.max[0] {
                    out.set(0, x, y, z, 1.0);
                }
            }
        }
    }
    Ok(out)
}
