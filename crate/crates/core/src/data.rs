//! Synthetic data, patch sampling, elastic augmentation and manifests.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Shape4, Tensor4};
use crate::volume::Volume;

/// Floor applied to the patch standard deviation during normalisation.
pub const NORM_SIGMA_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Volume,
    pub labels: Volume,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub extent: [usize; 3],
    pub class_count: usize,
    /// Accepted range for the fraction of foreground voxels.
    pub fg_fraction: (f64, f64),
    pub noise_sigma: f64,
    pub spacing: [f64; 3],
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            extent: [48, 48, 48],
            class_count: 2,
            fg_fraction: (0.05, 0.5),
            noise_sigma: 0.3,
            spacing: [1.0; 3],
        }
    }
}

const MAX_SHAPE_ATTEMPTS: usize = 200;

/// Each foreground class is painted as one or two random ellipsoids or
/// boxes; the image is `gain * class + offset + noise`. Volume `i` draws
/// from stream `i` of `seed`, so volumes are independent of each other and
/// of the requested count.
pub fn gen_synthetic(seed: u64, n_volumes: usize, spec: &SyntheticSpec) -> Result<Vec<Sample>> {
    (0..n_volumes).map(|i| gen_one(&mut Rng::stream(seed, i as u64), spec)).collect()
}

fn gen_one(rng: &mut Rng, spec: &SyntheticSpec) -> Result<Sample> {
    if spec.class_count < 2 || spec.class_count > 256 {
        return Err(Error::Config(format!("class_count must be in 2..=256, got {}", spec.class_count)));
    }
    let shape = Shape4::new(spec.extent[0], spec.extent[1], spec.extent[2], 1)?;
    let ext = spec.extent.map(|e| e as f64);
    let (lo, hi) = spec.fg_fraction;
    for _ in 0..MAX_SHAPE_ATTEMPTS {
        let mut labels = Tensor4::zeros(shape)?;
        for class in 1..spec.class_count {
            let n_shapes = 1 + rng.below(2);
            for _ in 0..n_shapes {
                let radius = ext.map(|e| rng.uniform(0.12 * e, 0.3 * e).max(1.0));
                let center: Vec<f64> = (0..3).map(|a| rng.uniform(radius[a].min(ext[a] / 2.0), (ext[a] - radius[a]).max(ext[a] / 2.0))).collect();
                let is_box = rng.below(2) == 1;
                for z in 0..shape.z {
                    for y in 0..shape.y {
                        for x in 0..shape.x {
                            let d = [x as f64 - center[0], y as f64 - center[1], z as f64 - center[2]];
                            let inside = if is_box {
                                (0..3).all(|a| d[a].abs() <= radius[a])
                            } else {
                                (0..3).map(|a| (d[a] / radius[a]).powi(2)).sum::<f64>() <= 1.0
                            };
                            if inside {
                                labels.set(x, y, z, 0, class as f64);
                            }
                        }
                    }
                }
            }
        }
        let fg = labels.data().iter().filter(|&&v| v > 0.0).count() as f64 / shape.len() as f64;
        if fg < lo || fg > hi {
            continue;
        }
        let gain = rng.uniform(0.8, 1.2);
        let offset = rng.uniform(-0.2, 0.2);
        let image = labels.map(|v| gain * v + offset);
        let noise = Tensor4::gaussian(shape, 0.0, spec.noise_sigma, rng)?;
        let image = image.add(&noise)?;
        return Ok(Sample {
            image: Volume::image(image, spec.spacing),
            labels: Volume::labels(labels, spec.spacing, spec.class_count as u32)?,
        });
    }
    Err(Error::Data(format!(
        "could not place shapes with foreground fraction in [{lo}, {hi}] after {MAX_SHAPE_ATTEMPTS} attempts"
    )))
}

/// Zero mean, unit variance; the standard deviation is floored at
/// [`NORM_SIGMA_FLOOR`], so a constant patch maps to all zeros.
pub fn normalize(t: &Tensor4) -> Tensor4 {
    let m = t.mean();
    let sd = t.variance().sqrt().max(NORM_SIGMA_FLOOR);
    t.map(|v| (v - m) / sd)
}

/// Integer-coded `(X, Y, Z, 1)` labels to one-hot `(X, Y, Z, K)`.
pub fn one_hot(labels: &Tensor4, classes: usize) -> Result<Tensor4> {
    let s = labels.shape();
    if s.c != 1 {
        return Err(Error::InvalidShape(format!("label map must have one channel, got {}", s.c)));
    }
    let mut out = Tensor4::zeros(s.with_channels(classes))?;
    for (i, &v) in labels.data().iter().enumerate() {
        let k = v as usize;
        if v < 0.0 || v.fract() != 0.0 || k >= classes {
            return Err(Error::Data(format!("label {v} outside 0..{classes}")));
        }
        out.data_mut()[i * classes + k] = 1.0;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSpec {
    pub extent: [usize; 3],
    pub normalize: bool,
}

/// A randomly placed aligned crop of image and labels.
pub fn sample_patch(sample: &Sample, spec: &PatchSpec, rng: &mut Rng) -> Result<(Tensor4, Tensor4)> {
    let s = sample.image.shape();
    if !s.same_spatial(&sample.labels.shape()) {
        return Err(Error::Data(format!(
            "image {} and labels {} differ in extent",
            s,
            sample.labels.shape()
        )));
    }
    let ext = s.spatial();
    if (0..3).any(|a| spec.extent[a] > ext[a]) {
        return Err(Error::InvalidArgument(format!(
            "patch {:?} does not fit volume {:?}",
            spec.extent, ext
        )));
    }
    let origin = [0, 1, 2].map(|a| rng.below(ext[a] - spec.extent[a] + 1));
    let [px, py, pz] = spec.extent;
    let img = sample.image.tensor.crop(origin, Shape4::new(px, py, pz, s.c)?)?;
    let lab = sample.labels.tensor.crop(origin, Shape4::new(px, py, pz, 1)?)?;
    let img = if spec.normalize { normalize(&img) } else { img };
    Ok((img, lab))
}

/// Control-point grid and displacement scale for elastic augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElasticSpec {
    pub grid: [usize; 3],
    /// Standard deviation of control-point displacements, in voxels.
    pub sigma: f64,
}

impl Default for ElasticSpec {
    fn default() -> Self {
        ElasticSpec { grid: [2, 2, 2], sigma: 15.0 }
    }
}

/// Control-point displacements (in voxels) spread uniformly over the
/// volume, with corner points on the volume corners. Densified by degree-1
/// B-spline (trilinear) interpolation.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    pub grid: [usize; 3],
    /// One `[dx, dy, dz]` per control point, x fastest.
    pub displacements: Vec<[f64; 3]>,
    pub degree: u32,
}

impl DeformationField {
    pub fn zero(grid: [usize; 3]) -> Result<Self> {
        Self::uniform(grid, [0.0; 3])
    }

    pub fn uniform(grid: [usize; 3], d: [f64; 3]) -> Result<Self> {
        if grid.iter().any(|&g| g < 2) {
            return Err(Error::InvalidArgument(format!("control grid needs at least 2 points per axis, got {grid:?}")));
        }
        Ok(DeformationField { grid, displacements: vec![d; grid.iter().product()], degree: 1 })
    }

    pub fn random(spec: &ElasticSpec, rng: &mut Rng) -> Result<Self> {
        let mut f = Self::zero(spec.grid)?;
        for d in &mut f.displacements {
            *d = [0; 3].map(|_| spec.sigma * rng.standard_normal());
        }
        Ok(f)
    }

    fn control(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        self.displacements[i + self.grid[0] * (j + self.grid[1] * k)]
    }

    /// Displacement at voxel `p` of a volume with extents `ext`.
    pub fn displacement(&self, p: [usize; 3], ext: [usize; 3]) -> [f64; 3] {
        let mut cell = [0usize; 3];
        let mut t = [0.0; 3];
        for a in 0..3 {
            let u = if ext[a] > 1 {
                p[a] as f64 * (self.grid[a] - 1) as f64 / (ext[a] - 1) as f64
            } else {
                0.0
            };
            cell[a] = (u.floor() as usize).min(self.grid[a] - 2);
            t[a] = u - cell[a] as f64;
        }
        let lerp = |a: f64, b: f64, w: f64| a + w * (b - a);
        let [i, j, k] = cell;
        let mut out = [0.0; 3];
        for (comp, o) in out.iter_mut().enumerate() {
            let c = |di, dj, dk| self.control(i + di, j + dj, k + dk)[comp];
            let x00 = lerp(c(0, 0, 0), c(1, 0, 0), t[0]);
            let x10 = lerp(c(0, 1, 0), c(1, 1, 0), t[0]);
            let x01 = lerp(c(0, 0, 1), c(1, 0, 1), t[0]);
            let x11 = lerp(c(0, 1, 1), c(1, 1, 1), t[0]);
            let y0 = lerp(x00, x10, t[1]);
            let y1 = lerp(x01, x11, t[1]);
            *o = lerp(y0, y1, t[2]);
        }
        out
    }
}

fn clamp_coord(v: f64, extent: usize) -> f64 {
    v.clamp(0.0, (extent - 1) as f64)
}

/// Backward warp: `out(p) = in(p + u(p))`. Images are sampled trilinearly,
/// labels by nearest neighbour; reads outside the volume clamp to the edge.
pub fn warp(t: &Tensor4, field: &DeformationField, nearest: bool) -> Result<Tensor4> {
    let s = t.shape();
    let ext = s.spatial();
    let mut out = Tensor4::zeros(s)?;
    let lerp = |a: f64, b: f64, w: f64| a + w * (b - a);
    for z in 0..s.z {
        for y in 0..s.y {
            for x in 0..s.x {
                let d = field.displacement([x, y, z], ext);
                let src = [x as f64 + d[0], y as f64 + d[1], z as f64 + d[2]];
                let src = [0, 1, 2].map(|a| clamp_coord(src[a], ext[a]));
                if nearest {
                    let n = [0, 1, 2].map(|a| ((src[a] + 0.5).floor() as usize).min(ext[a] - 1));
                    for c in 0..s.c {
                        out.set(x, y, z, c, t.get(n[0], n[1], n[2], c));
                    }
                    continue;
                }
                let i0 = [0, 1, 2].map(|a| src[a].floor() as usize);
                let i1 = [0, 1, 2].map(|a| (i0[a] + 1).min(ext[a] - 1));
                let w = [0, 1, 2].map(|a| src[a] - i0[a] as f64);
                for c in 0..s.c {
                    let v = |xs: usize, ys: usize, zs: usize| t.get(xs, ys, zs, c);
                    let x00 = lerp(v(i0[0], i0[1], i0[2]), v(i1[0], i0[1], i0[2]), w[0]);
                    let x10 = lerp(v(i0[0], i1[1], i0[2]), v(i1[0], i1[1], i0[2]), w[0]);
                    let x01 = lerp(v(i0[0], i0[1], i1[2]), v(i1[0], i0[1], i1[2]), w[0]);
                    let x11 = lerp(v(i0[0], i1[1], i1[2]), v(i1[0], i1[1], i1[2]), w[0]);
                    out.set(x, y, z, c, lerp(lerp(x00, x10, w[1]), lerp(x01, x11, w[1]), w[2]));
                }
            }
        }
    }
    Ok(out)
}

pub fn warp_sample(sample: &Sample, field: &DeformationField) -> Result<Sample> {
    let image = warp(&sample.image.tensor, field, false)?;
    let labels = warp(&sample.labels.tensor, field, true)?;
    Ok(Sample {
        image: Volume { tensor: image, ..sample.image.clone() },
        labels: Volume { tensor: labels, ..sample.labels.clone() },
    })
}

/// Samples a random field and applies it to both image and labels.
pub fn elastic_augment(sample: &Sample, spec: &ElasticSpec, rng: &mut Rng) -> Result<Sample> {
    let field = DeformationField::random(spec, rng)?;
    warp_sample(sample, &field)
}

/// Each sample followed by `per_sample` deformed copies. Copy `j` of sample
/// `i` uses stream `i * per_sample + j` of `seed`.
pub fn augment_dataset(data: &[Sample], per_sample: usize, spec: &ElasticSpec, seed: u64) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(data.len() * (per_sample + 1));
    for (i, s) in data.iter().enumerate() {
        out.push(s.clone());
        for j in 0..per_sample {
            let mut rng = Rng::stream(seed, (i * per_sample + j) as u64);
            out.push(elastic_augment(s, spec, &mut rng)?);
        }
    }
    Ok(out)
}

/// Reads `image<TAB>labels` lines; relative paths resolve against the
/// manifest's directory.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<(PathBuf, PathBuf)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(img), Some(lab), None) => out.push((base.join(img), base.join(lab))),
            _ => {
                return Err(Error::Format {
                    what: "manifest",
                    reason: format!("line {} must hold two tab-separated paths", n + 1),
                })
            }
        }
    }
    Ok(out)
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[(String, String)]) -> Result<()> {
    let path = path.as_ref();
    let text: String = entries.iter().map(|(i, l)| format!("{i}\t{l}\n")).collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    read_manifest(path)?
        .into_iter()
        .map(|(i, l)| {
            let image = crate::volume::read_vvol(&i)?.expect_image()?;
            let labels = crate::volume::read_vvol(&l)?.expect_labels()?;
            if !image.shape().same_spatial(&labels.shape()) {
                return Err(Error::Data(format!("{} and {} differ in extent", i.display(), l.display())));
            }
            Ok(Sample { image, labels })
        })
        .collect()
}
