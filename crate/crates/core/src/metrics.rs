//! Dice overlap, average surface distance and Hausdorff distance.
//!
//! Surfaces are foreground voxels with at least one background 6-neighbour,
//! where anything outside the volume counts as background. Distances are
//! Euclidean in millimetres between voxel centres, surface to surface.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor4;
use crate::volume::Volume;

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub extent: [usize; 3],
    pub spacing: [f64; 3],
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(extent: [usize; 3], spacing: [f64; 3], data: Vec<bool>) -> Result<Self> {
        if data.len() != extent.iter().product::<usize>() {
            return Err(Error::InvalidShape(format!("{} mask values for extent {extent:?}", data.len())));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidArgument(format!("invalid spacing {spacing:?}")));
        }
        Ok(BinaryMask { extent, spacing, data })
    }

    pub fn from_points(extent: [usize; 3], spacing: [f64; 3], points: &[[usize; 3]]) -> Result<Self> {
        let mut m = Self::new(extent, spacing, vec![false; extent.iter().product()])?;
        for p in points {
            if (0..3).any(|a| p[a] >= extent[a]) {
                return Err(Error::InvalidArgument(format!("point {p:?} outside {extent:?}")));
            }
            let i = m.index(*p);
            m.data[i] = true;
        }
        Ok(m)
    }

    /// One-vs-rest binarisation of an integer label map.
    pub fn from_labels(labels: &Tensor4, spacing: [f64; 3], class: usize) -> Result<Self> {
        let s = labels.shape();
        if s.c != 1 {
            return Err(Error::InvalidShape(format!("label map must have one channel, got {}", s.c)));
        }
        Self::new(s.spatial(), spacing, labels.data().iter().map(|&v| v == class as f64).collect())
    }

    fn index(&self, p: [usize; 3]) -> usize {
        p[0] + self.extent[0] * (p[1] + self.extent[1] * p[2])
    }

    pub fn get(&self, p: [usize; 3]) -> bool {
        self.data[self.index(p)]
    }

    /// Voxel flags, x fastest.
    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    fn check_pair(&self, other: &BinaryMask) -> Result<()> {
        if self.extent != other.extent || self.spacing != other.spacing {
            return Err(Error::Data(format!(
                "mask geometry differs: {:?} @ {:?} mm vs {:?} @ {:?} mm",
                self.extent, self.spacing, other.extent, other.spacing
            )));
        }
        Ok(())
    }
}

/// `2|A∩B| / (|A|+|B|)`, and 1.0 when both masks are empty.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.check_pair(b)?;
    let inter = a.data.iter().zip(&b.data).filter(|(x, y)| **x && **y).count();
    let total = a.count() + b.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Surface voxel coordinates in layout order.
pub fn extract_surface(mask: &BinaryMask) -> Vec<[usize; 3]> {
    let [ex, ey, ez] = mask.extent;
    let (sy, sz) = (ex, ex * ey);
    let d = &mask.data;
    let mut out = Vec::new();
    for z in 0..ez {
        for y in 0..ey {
            let row = y * sy + z * sz;
            for x in 0..ex {
                let i = row + x;
                if !d[i] {
                    continue;
                }
                let edge = x == 0 || y == 0 || z == 0 || x + 1 == ex || y + 1 == ey || z + 1 == ez;
                if edge || !d[i - 1] || !d[i + 1] || !d[i - sy] || !d[i + sy] || !d[i - sz] || !d[i + sz] {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

pub fn point_distance(p: [usize; 3], q: [usize; 3], spacing: [f64; 3]) -> f64 {
    let d = |a: usize| (p[a] as f64 - q[a] as f64) * spacing[a];
    (d(0) * d(0) + d(1) * d(1) + d(2) * d(2)).sqrt()
}

const BUCKET: usize = 2;

/// Exact nearest-neighbour queries against a fixed point set, using a
/// uniform bucket grid searched in rings of increasing Chebyshev radius.
/// Buckets are stored compressed: points of bucket `b` are
/// `order[start[b]..start[b + 1]]`.
struct SurfaceIndex<'a> {
    points: &'a [[usize; 3]],
    spacing: [f64; 3],
    dims: [usize; 3],
    start: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> SurfaceIndex<'a> {
    fn new(points: &'a [[usize; 3]], extent: [usize; 3], spacing: [f64; 3]) -> Self {
        let dims = extent.map(|e| e.div_ceil(BUCKET).max(1));
        let bucket_of = |p: &[usize; 3]| {
            let b = p.map(|v| v / BUCKET);
            b[0] + dims[0] * (b[1] + dims[1] * b[2])
        };
        let mut start = vec![0usize; dims.iter().product::<usize>() + 1];
        for p in points {
            start[bucket_of(p) + 1] += 1;
        }
        for i in 1..start.len() {
            start[i] += start[i - 1];
        }
        // Filling from the back moves start[b + 1] down to bucket b's first
        // slot; shifting by one then gives the usual offsets.
        let mut order = vec![0; points.len()];
        for (i, p) in points.iter().enumerate().rev() {
            let b = bucket_of(p) + 1;
            start[b] -= 1;
            order[start[b]] = i;
        }
        start.rotate_left(1);
        start[dims.iter().product::<usize>()] = points.len();
        SurfaceIndex { points, spacing, dims, start, order }
    }

    fn scan(&self, q: [usize; 3], b: [usize; 3], best: &mut f64) {
        let idx = b[0] + self.dims[0] * (b[1] + self.dims[1] * b[2]);
        for &i in &self.order[self.start[idx]..self.start[idx + 1]] {
            *best = best.min(point_distance(q, self.points[i], self.spacing));
        }
    }

    fn nearest(&self, q: [usize; 3]) -> f64 {
        let qb = q.map(|v| v / BUCKET);
        let reach = (0..3).map(|a| qb[a].max(self.dims[a] - 1 - qb[a])).max().expect("three axes");
        let min_sp = self.spacing.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut best = f64::INFINITY;
        for r in 0..=reach {
            let lo = qb.map(|v| v.saturating_sub(r));
            let hi = [0, 1, 2].map(|a| (qb[a] + r).min(self.dims[a] - 1));
            for bz in lo[2]..=hi[2] {
                for by in lo[1]..=hi[1] {
                    let on_shell = bz.abs_diff(qb[2]) == r || by.abs_diff(qb[1]) == r;
                    if on_shell {
                        for bx in lo[0]..=hi[0] {
                            self.scan(q, [bx, by, bz], &mut best);
                        }
                    } else {
                        // Only the two x faces of the shell remain.
                        if r > 0 && qb[0] >= r {
                            self.scan(q, [qb[0] - r, by, bz], &mut best);
                        }
                        if qb[0] + r < self.dims[0] {
                            self.scan(q, [qb[0] + r, by, bz], &mut best);
                        }
                    }
                }
            }
            // Any point in ring r + 1 differs by at least r * BUCKET + 1
            // voxels along some axis.
            if best <= (r as f64 * BUCKET as f64 + 1.0) * min_sp {
                break;
            }
        }
        best
    }
}

/// Nearest-surface distance from every point of `from` to the set `to`,
/// in the order of `from`.
pub fn directed_distances(from: &[[usize; 3]], to: &[[usize; 3]], extent: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let index = SurfaceIndex::new(to, extent, spacing);
    from.iter().map(|&p| index.nearest(p)).collect()
}

fn surfaces(a: &BinaryMask, b: &BinaryMask) -> Result<(Vec<[usize; 3]>, Vec<[usize; 3]>)> {
    a.check_pair(b)?;
    if a.is_empty() || b.is_empty() {
        return Err(Error::UndefinedMetric("surface distance of an empty mask".into()));
    }
    Ok((extract_surface(a), extract_surface(b)))
}

/// Sum and maximum of the directed distances, summed in the order of `from`.
fn directed_sum_max(from: &[[usize; 3]], to: &[[usize; 3]], extent: [usize; 3], spacing: [f64; 3]) -> (f64, f64) {
    let index = SurfaceIndex::new(to, extent, spacing);
    from.iter().map(|&p| index.nearest(p)).fold((0.0, 0.0), |(s, m), d| (s + d, f64::max(m, d)))
}

/// Symmetric mean of nearest-surface distances, in mm.
pub fn asd(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    surface_distances(a, b).map(|r| r.0)
}

/// Maximum nearest-surface distance over both directions, in mm.
pub fn hausdorff(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    surface_distances(a, b).map(|r| r.1)
}

/// `(asd, hausdorff)` from a single surface extraction.
pub fn surface_distances(a: &BinaryMask, b: &BinaryMask) -> Result<(f64, f64)> {
    let (sa, sb) = surfaces(a, b)?;
    let (sum_ab, max_ab) = directed_sum_max(&sa, &sb, a.extent, a.spacing);
    let (sum_ba, max_ba) = directed_sum_max(&sb, &sa, a.extent, a.spacing);
    Ok(((sum_ab + sum_ba) / (sa.len() + sb.len()) as f64, max_ab.max(max_ba)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Dice,
    Asd,
    Hausdorff,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Dice => "dice",
            Metric::Asd => "asd_mm",
            Metric::Hausdorff => "hd_mm",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub volume: String,
    pub class: usize,
    pub metric: Metric,
    /// `None` when the metric is undefined (a surface distance with an
    /// empty mask).
    pub value: Option<f64>,
}

/// Dice, ASD and HD for every foreground class of two label volumes.
pub fn evaluate(volume: &str, pred: &Volume, reference: &Volume) -> Result<Vec<MetricRow>> {
    if pred.shape() != reference.shape() || pred.spacing != reference.spacing {
        return Err(Error::Data(format!(
            "prediction {} @ {:?} mm and reference {} @ {:?} mm differ",
            pred.shape(),
            pred.spacing,
            reference.shape(),
            reference.spacing
        )));
    }
    let classes = pred.class_count().max(reference.class_count()) as usize;
    let mut rows = Vec::new();
    for class in 1..classes {
        let a = BinaryMask::from_labels(&pred.tensor, pred.spacing, class)?;
        let b = BinaryMask::from_labels(&reference.tensor, reference.spacing, class)?;
        let row = |metric, value| MetricRow { volume: volume.to_string(), class, metric, value };
        rows.push(row(Metric::Dice, Some(dice(&a, &b)?)));
        let (asd_v, hd_v) = match surface_distances(&a, &b) {
            Ok((x, h)) => (Some(x), Some(h)),
            Err(Error::UndefinedMetric(_)) => (None, None),
            Err(e) => return Err(e),
        };
        rows.push(row(Metric::Asd, asd_v));
        rows.push(row(Metric::Hausdorff, hd_v));
    }
    Ok(rows)
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("volume,class,metric,value\n");
    for r in rows {
        let v = r.value.map_or_else(|| "undefined".to_string(), |v| format!("{v}"));
        let _ = writeln!(out, "{},{},{},{}", r.volume, r.class, r.metric.name(), v);
    }
    out
}
