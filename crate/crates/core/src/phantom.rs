//! Seeded synthetic two-sequence volumes with inserted lesions.
//!
//! Each case is a smooth band-limited random field (one component shared by
//! both sequences, one per sequence) inside an elliptic-cylinder tissue
//! region with a soft, low-contrast edge. Lesions are rounded boxes
//! (superellipsoids) spanning the full slice range, bright in the
//! fat-saturated channel and dark in the non-fat-saturated one, with their
//! own fine texture. A DCE series adds lesion enhancement, mild diffuse
//! parenchymal enhancement and noise to the fat-saturated image.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dcebaseline::DceSeries;
use crate::error::{bail, Error, Result};
use crate::par;
use crate::rng::{self, tag};
use crate::volio::{
    normalize, role, write_mvol, write_sidecar, BoundingBox, Sidecar, Volume, TARGET_MEAN, TARGET_STD,
};

pub const SEQUENCES: [&str; 2] = ["nfs", "fs"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Gaussian smoothing of the background field, voxels per axis.
    pub texture_sigma: [f64; 3],
    /// Background field std inside tissue, per sequence.
    pub texture_amplitude: [f64; 2],
    /// Correlation between the two sequences' fields.
    pub texture_shared: f64,
    /// Level and field amplitude outside the tissue region.
    pub outside_level: f64,
    pub outside_amplitude: f64,
    /// Tissue semi-axes as fractions of the in-plane dims.
    pub tissue_semi_axes: [f64; 2],
    /// Tissue edge width in voxels.
    pub tissue_edge: f64,
    /// Random shift of the tissue centre, voxels.
    pub tissue_jitter: f64,
    pub lesion_count: usize,
    /// Lesion offset in units of the background amplitude.
    pub lesion_intensity: f64,
    /// Std of the lesion's own fine texture, relative to its offset.
    pub lesion_texture: f64,
    /// Superellipsoid exponent (2 is an ellipsoid, large is a box).
    pub lesion_exponent: f64,
    /// Max in-plane aspect ratio of a lesion box.
    pub lesion_aspect: f64,
    pub enhancement: f64,
    pub kinetics: Vec<f64>,
    pub parenchymal_enhancement: f64,
    pub dce_noise: f64,
    pub acquisition_noise: f64,
    /// Box voxels over tissue-mask voxels.
    pub prevalence: f64,
    /// Fraction of test cases generated without lesions.
    pub test_healthy_fraction: f64,
    pub max_retries: usize,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: [144, 126, 8],
            spacing: [0.75, 0.75, 1.0],
            texture_sigma: [20.0, 20.0, 4.0],
            texture_amplitude: [1.0, 1.0],
            texture_shared: 0.5,
            outside_level: -0.5,
            outside_amplitude: 0.5,
            tissue_semi_axes: [0.47, 0.47],
            tissue_edge: 1.5,
            tissue_jitter: 1.5,
            lesion_count: 1,
            lesion_intensity: 2.0,
            lesion_texture: 0.0,
            lesion_exponent: 12.0,
            lesion_aspect: 1.25,
            enhancement: 2.0,
            kinetics: vec![0.6, 1.0, 0.9],
            parenchymal_enhancement: 0.2,
            dce_noise: 0.1,
            acquisition_noise: 0.05,
            prevalence: 0.046,
            test_healthy_fraction: 0.0,
            max_retries: 200,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            bail!(Config, "phantom dims {:?} must be positive", self.dims);
        }
        if self.spacing.iter().any(|s| !(*s > 0.0)) {
            bail!(Config, "phantom spacing {:?} must be positive", self.spacing);
        }
        if !(0.001..=0.5).contains(&self.prevalence) {
            bail!(Config, "prevalence {} outside [0.001, 0.5]", self.prevalence);
        }
        if self.tissue_semi_axes.iter().any(|a| !(*a > 0.0 && *a <= 0.5)) {
            bail!(Config, "tissue semi-axes {:?} must lie in (0, 0.5]", self.tissue_semi_axes);
        }
        if !(-1.0..=1.0).contains(&self.texture_shared) {
            bail!(Config, "shared texture fraction {} outside [-1, 1]", self.texture_shared);
        }
        if self.kinetics.is_empty() {
            bail!(Config, "at least one post-contrast time point is required");
        }
        if self.lesion_count == 0 {
            bail!(Config, "lesion count must be at least 1");
        }
        if !(self.lesion_exponent >= 1.0) || !(self.lesion_aspect >= 1.0) {
            bail!(Config, "lesion exponent and aspect must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.test_healthy_fraction) {
            bail!(Config, "healthy fraction {} outside [0, 1]", self.test_healthy_fraction);
        }
        for s in &self.texture_sigma {
            if !(*s >= 0.0) {
                bail!(Config, "texture sigma must be non-negative");
            }
        }
        Ok(())
    }
}

/// One generated case.
#[derive(Clone, Debug)]
pub struct PhantomCase {
    /// Channel 0 non-fat-saturated, channel 1 fat-saturated; normalised.
    pub image: Volume,
    pub tissue_mask: Volume,
    /// Voxels belonging to a lesion.
    pub lesion_mask: Volume,
    pub boxes: Vec<BoundingBox>,
    /// Pre-contrast is the fat-saturated channel.
    pub dce: DceSeries,
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as isize;
    let w: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with replicated borders.
fn blur(data: &[f64], dims: [usize; 3], sigma: [f64; 3]) -> Vec<f64> {
    let mut a = data.to_vec();
    let mut b = vec![0.0; a.len()];
    let strides = [1, dims[0], dims[0] * dims[1]];
    for axis in 0..3 {
        let k = gaussian_kernel(sigma[axis]);
        let r = (k.len() / 2) as isize;
        let len = dims[axis] as isize;
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    let p = [x, y, z];
                    let i = x + y * strides[1] + z * strides[2];
                    let base = i - p[axis] * strides[axis];
                    let mut acc = 0.0;
                    for (j, w) in k.iter().enumerate() {
                        let q = (p[axis] as isize + j as isize - r).clamp(0, len - 1) as usize;
                        acc += w * a[base + q * strides[axis]];
                    }
                    b[i] = acc;
                }
            }
        }
        std::mem::swap(&mut a, &mut b);
    }
    a
}

fn gauss(r: &mut rng::Rng) -> f64 {
    StandardNormal.sample(r)
}

/// Smooth zero-mean unit-std random field.
fn smooth_field(r: &mut rng::Rng, dims: [usize; 3], sigma: [f64; 3]) -> Vec<f64> {
    let n = dims.iter().product::<usize>();
    let noise: Vec<f64> = (0..n).map(|_| gauss(r)).collect();
    let mut f = blur(&noise, dims, sigma);
    let mean = f.iter().sum::<f64>() / n as f64;
    let std = (f.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64).sqrt();
    f.iter_mut().for_each(|v| *v = (*v - mean) / std.max(1e-12));
    f
}

struct Tissue {
    centre: [f64; 2],
    semi: [f64; 2],
}

impl Tissue {
    /// Normalised radius: below 1 inside.
    fn radius(&self, x: f64, y: f64) -> f64 {
        let dx = (x - self.centre[0]) / self.semi[0];
        let dy = (y - self.centre[1]) / self.semi[1];
        (dx * dx + dy * dy).sqrt()
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        self.radius(x, y) < 1.0
    }
}

/// Box sizes `(sx, sy)` for an in-plane lesion area, aspect drawn in
/// `[1/aspect, aspect]`.
fn box_sides(r: &mut rng::Rng, area: f64, aspect: f64) -> (usize, usize) {
    let a = aspect.powf(r.random_range(-1.0..=1.0));
    let sx = (area * a).sqrt().round().max(1.0);
    let sy = (area / sx).round().max(1.0);
    (sx as usize, sy as usize)
}

fn place_lesions(r: &mut rng::Rng, cfg: &PhantomConfig, tissue: &Tissue, tissue_voxels: usize) -> Result<Vec<BoundingBox>> {
    let [nx, ny, nz] = cfg.dims;
    let area = cfg.prevalence * tissue_voxels as f64 / nz as f64 / cfg.lesion_count as f64;
    let mut boxes: Vec<BoundingBox> = Vec::new();
    for l in 0..cfg.lesion_count {
        let mut placed = None;
        for _ in 0..cfg.max_retries {
            let (sx, sy) = box_sides(r, area, cfg.lesion_aspect);
            if sx > nx || sy > ny {
                continue;
            }
            let x0 = r.random_range(0..=nx - sx);
            let y0 = r.random_range(0..=ny - sy);
            let b = BoundingBox::new([x0, y0, 0], [x0 + sx - 1, y0 + sy - 1, nz - 1], format!("lesion{l}"))?;
            let corners_inside = [(b.min[0], b.min[1]), (b.max[0], b.min[1]), (b.min[0], b.max[1]), (b.max[0], b.max[1])]
                .iter()
                .all(|&(x, y)| tissue.contains(x as f64 + 0.5, y as f64 + 0.5));
            let overlaps = boxes
                .iter()
                .any(|o| (0..2).all(|a| b.min[a] <= o.max[a] + 1 && o.min[a] <= b.max[a] + 1));
            if corners_inside && !overlaps {
                placed = Some(b);
                break;
            }
        }
        match placed {
            Some(b) => boxes.push(b),
            None => bail!(
                Generation,
                "could not place lesion {l} inside the tissue after {} attempts",
                cfg.max_retries
            ),
        }
    }
    Ok(boxes)
}

/// Lesion membership of voxel `(x, y, z)` for box `b`.
fn in_lesion(b: &BoundingBox, p: f64, x: usize, y: usize, z: usize) -> bool {
    let mut s = 0.0;
    for (a, v) in [x, y, z].into_iter().enumerate() {
        let half = (b.max[a] - b.min[a] + 1) as f64 / 2.0;
        let c = b.min[a] as f64 + half;
        s += ((v as f64 + 0.5 - c) / half).abs().powf(p);
    }
    s <= 1.0
}

/// Generate one case from `cfg.seed`.
pub fn generate_case(cfg: &PhantomConfig, healthy: bool) -> Result<PhantomCase> {
    cfg.validate()?;
    let dims = cfg.dims;
    let [nx, ny, nz] = dims;
    let n = nx * ny * nz;
    let mut r = rng::stream(cfg.seed, &[tag::PHANTOM]);
    let mut jitter = || r.random_range(-1.0..=1.0) * cfg.tissue_jitter;
    let tissue = Tissue {
        centre: [nx as f64 / 2.0 + jitter(), ny as f64 / 2.0 + jitter()],
        semi: [cfg.tissue_semi_axes[0] * nx as f64, cfg.tissue_semi_axes[1] * ny as f64],
    };
    let shared = smooth_field(&mut r, dims, cfg.texture_sigma);
    let own = [
        smooth_field(&mut r, dims, cfg.texture_sigma),
        smooth_field(&mut r, dims, cfg.texture_sigma),
    ];
    let fine = smooth_field(&mut r, dims, [1.0, 1.0, 0.5]);
    let bpe = smooth_field(&mut r, dims, cfg.texture_sigma);

    let mut mask = Volume::zeros(1, dims, cfg.spacing)?;
    let mut weight = vec![0.0; n];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                let rad = tissue.radius(fx, fy);
                let i = mask.index(0, x, y, z);
                // Signed distance to the edge, roughly in voxels.
                let d = (1.0 - rad) * tissue.semi[0].min(tissue.semi[1]);
                weight[i] = 1.0 / (1.0 + (-d / (0.5 * cfg.tissue_edge.max(1e-6))).exp());
                if rad < 1.0 {
                    mask.data_mut()[i] = 1.0;
                }
            }
        }
    }
    let tissue_voxels = mask.data().iter().filter(|&&v| v == 1.0).count();
    let boxes = if healthy {
        Vec::new()
    } else {
        place_lesions(&mut r, cfg, &tissue, tissue_voxels)?
    };
    let mut lesion = Volume::zeros(1, dims, cfg.spacing)?;
    for b in &boxes {
        for z in b.min[2]..=b.max[2] {
            for y in b.min[1]..=b.max[1] {
                for x in b.min[0]..=b.max[0] {
                    if in_lesion(b, cfg.lesion_exponent, x, y, z) {
                        lesion.set(0, x, y, z, 1.0);
                    }
                }
            }
        }
    }

    let rho = cfg.texture_shared;
    let own_w = (1.0 - rho * rho).sqrt();
    let mut raw = Vec::with_capacity(2 * n);
    for c in 0..2 {
        // Bright in FS, dark in NFS.
        let sign = if c == 1 { 1.0 } else { -1.0 };
        let amp = cfg.texture_amplitude[c];
        for i in 0..n {
            let t = rho * shared[i] + own_w * own[c][i];
            let w = weight[i];
            let mut v = w * amp * t + (1.0 - w) * (cfg.outside_level + cfg.outside_amplitude * amp * t);
            if lesion.data()[i] == 1.0 {
                v += sign * cfg.lesion_intensity * amp * (1.0 + cfg.lesion_texture * fine[i]);
            }
            v += cfg.acquisition_noise * gauss(&mut r);
            raw.push(v);
        }
    }
    let image = normalize(&Volume::new(2, dims, cfg.spacing, raw)?, TARGET_MEAN, TARGET_STD)?;

    let pre = image.extract_channel(1)?;
    let mut post = Vec::with_capacity(cfg.kinetics.len());
    for &k in &cfg.kinetics {
        let mut p = pre.clone();
        for (i, v) in p.data_mut().iter_mut().enumerate() {
            let enh = cfg.enhancement * lesion.data()[i] + cfg.parenchymal_enhancement * weight[i] * bpe[i];
            // Enhancement and noise are in units of the normalised std.
            *v += TARGET_STD * (k * enh + cfg.dce_noise * gauss(&mut r));
        }
        post.push(p);
    }
    Ok(PhantomCase {
        image,
        tissue_mask: mask,
        lesion_mask: lesion,
        boxes,
        dce: DceSeries::new(pre, post)?,
    })
}

/// Entry of the test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestEntry {
    pub image: String,
    pub mask: String,
    /// Sidecar of `image`, which carries the ground-truth boxes.
    pub boxes_in_sidecar: String,
    pub dce: String,
}

/// Dataset index. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<TestEntry>,
    pub config: PhantomConfig,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Requested split sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Per-case config: the root seed is split by `(split, index)` so no two
/// cases share a stream.
pub fn case_config(cfg: &PhantomConfig, split: u64, index: usize) -> PhantomConfig {
    PhantomConfig {
        seed: rng::derive_seed(cfg.seed, &[tag::PHANTOM, split, index as u64]),
        ..cfg.clone()
    }
}

/// Whether test case `index` of `n` is generated healthy.
pub fn test_case_healthy(cfg: &PhantomConfig, index: usize, n: usize) -> bool {
    let healthy = (n as f64 * cfg.test_healthy_fraction).round() as usize;
    index >= n - healthy.min(n)
}

fn save(v: &Volume, path: &Path, sc: &Sidecar) -> Result<()> {
    write_mvol(v, path)?;
    write_sidecar(path, sc)
}

fn write_case(case: &PhantomCase, dir: &Path, stem: &str, with_labels: bool) -> Result<()> {
    let mut sc = Sidecar::new(role::IMAGE, &SEQUENCES);
    sc.boxes = case.boxes.clone();
    save(&case.image, &dir.join(format!("{stem}.mvol")), &sc)?;
    if with_labels {
        save(
            &case.tissue_mask,
            &dir.join(format!("{stem}_mask.mvol")),
            &Sidecar::new(role::MASK, &["tissue"]),
        )?;
        let names: Vec<String> = std::iter::once("pre".to_string())
            .chain((1..=case.dce.post().len()).map(|k| format!("post{k}")))
            .collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        save(
            &case.dce.to_stacked()?,
            &dir.join(format!("{stem}_dce.mvol")),
            &Sidecar::new(role::DCE, &names),
        )?;
    }
    Ok(())
}

/// Generate train (healthy), val (healthy) and test (lesioned, optionally
/// mixed) splits under `out_dir` and write the manifest.
pub fn generate_dataset(cfg: &PhantomConfig, sizes: SplitSizes, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let mut manifest = Manifest {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        config: cfg.clone(),
    };
    for (split, name, count) in [(0u64, "train", sizes.train), (1, "val", sizes.val), (2, "test", sizes.test)] {
        let dir = out_dir.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let cases = par::map_range(count, |i| {
            let healthy = split < 2 || test_case_healthy(cfg, i, count);
            generate_case(&case_config(cfg, split, i), healthy)
        });
        for (i, case) in cases.into_iter().enumerate() {
            let case = case?;
            let stem = format!("case_{i:03}");
            write_case(&case, &dir, &stem, split == 2)?;
            let rel = |suffix: &str| format!("{name}/{stem}{suffix}");
            match split {
                0 => manifest.train.push(rel(".mvol")),
                1 => manifest.val.push(rel(".mvol")),
                _ => manifest.test.push(TestEntry {
                    image: rel(".mvol"),
                    mask: rel("_mask.mvol"),
                    boxes_in_sidecar: rel(".json"),
                    dce: rel("_dce.mvol"),
                }),
            }
        }
    }
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Resolve a manifest-relative path.
pub fn resolve(manifest_path: &Path, rel: &str) -> PathBuf {
    manifest_path.parent().unwrap_or(Path::new(".")).join(rel)
}
