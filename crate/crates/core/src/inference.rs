//! Whole-volume prediction from overlapping patches.

use crate::data::normalize;
use crate::error::{Error, Result};
use crate::nn::PatchPredictor;
use crate::tensor::{Shape4, Tensor4};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TilingPlan {
    pub volume: [usize; 3],
    pub patch: [usize; 3],
    pub stride: [usize; 3],
    pub origins: Vec<[usize; 3]>,
}

/// Origins along one axis: multiples of `stride`, plus a final origin
/// clamped to `extent - patch` if the multiples leave voxels uncovered.
pub fn axis_origins(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = extent - patch;
    let mut out: Vec<usize> = (0..=last).step_by(stride).collect();
    if out.last() != Some(&last) {
        out.push(last);
    }
    out
}

pub fn plan_tiling(volume: [usize; 3], patch: [usize; 3], stride: [usize; 3]) -> Result<TilingPlan> {
    for a in 0..3 {
        if patch[a] == 0 || stride[a] == 0 {
            return Err(Error::InvalidArgument(format!("patch {patch:?} and stride {stride:?} must be positive")));
        }
        if patch[a] > volume[a] {
            return Err(Error::InvalidArgument(format!("patch {patch:?} larger than volume {volume:?}")));
        }
        if stride[a] > patch[a] {
            return Err(Error::InvalidArgument(format!("stride {stride:?} exceeds patch {patch:?} and would leave gaps")));
        }
    }
    let [ox, oy, oz] = [0, 1, 2].map(|a| axis_origins(volume[a], patch[a], stride[a]));
    let mut origins = Vec::with_capacity(ox.len() * oy.len() * oz.len());
    for &z in &oz {
        for &y in &oy {
            for &x in &ox {
                origins.push([x, y, z]);
            }
        }
    }
    Ok(TilingPlan { volume, patch, stride, origins })
}

/// Half the patch extent, at least one voxel.
pub fn default_stride(patch: [usize; 3]) -> [usize; 3] {
    patch.map(|p| (p / 2).max(1))
}

/// Runs `predictor` on every planned patch (each normalised on its own) and
/// averages the class probabilities of overlapping patches uniformly.
pub fn predict_tiles(predictor: &dyn PatchPredictor, image: &Tensor4, plan: &TilingPlan) -> Result<Tensor4> {
    let s = image.shape();
    if s.spatial() != plan.volume {
        return Err(Error::InvalidArgument(format!("plan is for {:?}, image is {}", plan.volume, s)));
    }
    if predictor.patch_extent() != plan.patch {
        return Err(Error::InvalidArgument(format!(
            "network patch {:?} differs from plan patch {:?}",
            predictor.patch_extent(),
            plan.patch
        )));
    }
    let k = predictor.classes();
    let [px, py, pz] = plan.patch;
    let window = Shape4::new(px, py, pz, s.c)?;
    let mut sum = Tensor4::zeros(s.with_channels(k))?;
    let mut count = vec![0u32; s.voxels()];
    for &origin in &plan.origins {
        let patch = normalize(&image.crop(origin, window)?);
        let probs = predictor.predict(&patch)?;
        let expected = Shape4::new(px, py, pz, k)?;
        if probs.shape() != expected {
            return Err(Error::ShapeMismatch { expected, actual: probs.shape() });
        }
        for z in 0..pz {
            for y in 0..py {
                for x in 0..px {
                    let (gx, gy, gz) = (origin[0] + x, origin[1] + y, origin[2] + z);
                    let v = s.voxel_index(gx, gy, gz);
                    count[v] += 1;
                    let dst = &mut sum.data_mut()[v * k..(v + 1) * k];
                    for (d, p) in dst.iter_mut().zip(probs.fiber(x, y, z)) {
                        *d += p;
                    }
                }
            }
        }
    }
    if let Some(v) = count.iter().position(|&n| n == 0) {
        return Err(Error::InvalidArgument(format!("plan leaves voxel {v} uncovered")));
    }
    for (v, &n) in count.iter().enumerate() {
        let inv = n as f64;
        for p in &mut sum.data_mut()[v * k..(v + 1) * k] {
            *p /= inv;
        }
    }
    Ok(sum)
}

/// Tiles the whole image with the predictor's patch size. Axes shorter than
/// the patch are zero-padded and the padding is cropped from the result.
pub fn predict_volume(predictor: &dyn PatchPredictor, image: &Tensor4, stride: [usize; 3]) -> Result<Tensor4> {
    let s = image.shape();
    let patch = predictor.patch_extent();
    let padded_ext = [0, 1, 2].map(|a| s.spatial()[a].max(patch[a]));
    let plan = plan_tiling(padded_ext, patch, stride)?;
    if padded_ext == s.spatial() {
        return predict_tiles(predictor, image, &plan);
    }
    let probs = predict_tiles(predictor, &image.pad_to(padded_ext)?, &plan)?;
    probs.crop([0; 3], s.with_channels(predictor.classes()))
}

/// Per-voxel argmax; ties go to the lowest class index.
pub fn decode_labels(probs: &Tensor4) -> Result<Tensor4> {
    let s = probs.shape();
    let data = probs
        .data()
        .chunks_exact(s.c)
        .map(|fiber| {
            let mut best = 0;
            for (c, &p) in fiber.iter().enumerate() {
                if p > fiber[best] {
                    best = c;
                }
            }
            best as f64
        })
        .collect();
    Tensor4::from_vec(s.with_channels(1), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Fills every output voxel with a fixed distribution.
    struct Constant {
        patch: [usize; 3],
        probs: Vec<f64>,
    }

    impl PatchPredictor for Constant {
        fn patch_extent(&self) -> [usize; 3] {
            self.patch
        }
        fn classes(&self) -> usize {
            self.probs.len()
        }
        fn predict(&self, _: &Tensor4) -> Result<Tensor4> {
            let [x, y, z] = self.patch;
            let mut t = Tensor4::zeros(Shape4::new(x, y, z, self.probs.len())?)?;
            for f in t.data_mut().chunks_exact_mut(self.probs.len()) {
                f.copy_from_slice(&self.probs);
            }
            Ok(t)
        }
    }

    #[test]
    fn axis_origin_cases() {
        assert_eq!(axis_origins(10, 4, 4), vec![0, 4, 6]);
        assert_eq!(axis_origins(32, 32, 16), vec![0]);
        assert_eq!(axis_origins(7, 3, 1), (0..=4).collect::<Vec<_>>());
        assert_eq!(axis_origins(8, 4, 2), vec![0, 2, 4]);
    }

    #[test]
    fn plan_covers_and_rejects_oversized() {
        let plan = plan_tiling([10, 7, 5], [4, 3, 5], [3, 2, 2]).unwrap();
        let mut hit = vec![false; 10 * 7 * 5];
        for o in &plan.origins {
            assert!((0..3).all(|a| o[a] + plan.patch[a] <= plan.volume[a]));
            for z in 0..5 {
                for y in 0..3 {
                    for x in 0..4 {
                        hit[(o[0] + x) + 10 * ((o[1] + y) + 7 * (o[2] + z))] = true;
                    }
                }
            }
        }
        assert!(hit.iter().all(|&h| h));
        assert!(plan_tiling([4, 4, 4], [5, 4, 4], [1, 1, 1]).is_err());
        assert!(plan_tiling([8, 8, 8], [4, 4, 4], [5, 4, 4]).is_err());
        assert_eq!(plan_tiling([32; 3], [32; 3], [16; 3]).unwrap().origins, vec![[0, 0, 0]]);
    }

    #[test]
    fn constant_network_gives_constant_volume() {
        let net = Constant { patch: [4, 4, 2], probs: vec![0.2, 0.3, 0.5] };
        let img = Tensor4::uniform(Shape4::new(9, 6, 5, 1).unwrap(), 0.0, 1.0, &mut Rng::seeded(1)).unwrap();
        let out = predict_volume(&net, &img, [1, 3, 1]).unwrap();
        assert_eq!(out.shape(), Shape4::new(9, 6, 5, 3).unwrap());
        for f in out.data().chunks_exact(3) {
            for (a, b) in f.iter().zip(&net.probs) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn small_volume_is_padded() {
        let net = Constant { patch: [8, 8, 8], probs: vec![0.9, 0.1] };
        let img = Tensor4::zeros(Shape4::new(5, 8, 3, 1).unwrap()).unwrap();
        let out = predict_volume(&net, &img, [4, 4, 4]).unwrap();
        assert_eq!(out.shape(), Shape4::new(5, 8, 3, 2).unwrap());
    }

    #[test]
    fn decode_ties_and_argmax() {
        let p = Tensor4::from_vec(Shape4::new(3, 1, 1, 2).unwrap(), vec![0.5, 0.5, 0.0, 1.0, 0.7, 0.3]).unwrap();
        assert_eq!(decode_labels(&p).unwrap().data(), &[0.0, 1.0, 0.0]);
        let mut rng = Rng::seeded(3);
        let p = Tensor4::uniform(Shape4::new(4, 4, 4, 4).unwrap(), 0.0, 1.0, &mut rng).unwrap();
        let d = decode_labels(&p).unwrap();
        for (v, f) in p.data().chunks_exact(4).enumerate() {
            let m = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let brute = f.iter().position(|&x| x == m).unwrap();
            assert_eq!(d.data()[v], brute as f64);
        }
    }
}
