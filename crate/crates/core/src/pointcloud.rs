//! Point clouds, voxelization, farthest point sampling and set distances.

use std::collections::BTreeMap;

use crate::geometry::Box3D;
use crate::scalar::Real;

#[derive(Debug, thiserror::Error)]
pub enum PointCloudError {
    #[error("feature rows ({features}) do not match point rows ({points})")]
    RowMismatch { points: usize, features: usize },
    #[error("non-finite coordinate at point {0}")]
    NonFinite(usize),
    #[error("invalid voxel size {0:?}")]
    VoxelSize([f64; 3]),
    #[error("cannot sample {k} of {n} points")]
    SampleCount { k: usize, n: usize },
    #[error("empty point set")]
    Empty,
}

/// LiDAR points with `feature_width` channels per point (channel 0 is intensity).
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud<T> {
    pub coords: Vec<[T; 3]>,
    pub features: Vec<T>,
    pub feature_width: usize,
}

impl<T: Real> PointCloud<T> {
    pub fn new(coords: Vec<[T; 3]>, features: Vec<T>, feature_width: usize) -> Result<Self, PointCloudError> {
        if feature_width == 0 || features.len() != coords.len() * feature_width {
            return Err(PointCloudError::RowMismatch {
                points: coords.len(),
                features: features.len() / feature_width.max(1),
            });
        }
        if let Some(i) = coords.iter().position(|c| c.iter().any(|v| !v.is_finite())) {
            return Err(PointCloudError::NonFinite(i));
        }
        Ok(Self {
            coords,
            features,
            feature_width,
        })
    }

    pub fn empty(feature_width: usize) -> Self {
        Self {
            coords: Vec::new(),
            features: Vec::new(),
            feature_width,
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn feature_row(&self, i: usize) -> &[T] {
        &self.features[i * self.feature_width..(i + 1) * self.feature_width]
    }

    pub fn push(&mut self, p: [T; 3], feats: &[T]) {
        debug_assert_eq!(feats.len(), self.feature_width);
        self.coords.push(p);
        self.features.extend_from_slice(feats);
    }

    /// Keeps the points where `keep` is true.
    pub fn retain_mask(&mut self, keep: &[bool]) {
        let fw = self.feature_width;
        let mut coords = Vec::with_capacity(self.coords.len());
        let mut feats = Vec::with_capacity(self.features.len());
        for (i, &k) in keep.iter().enumerate() {
            if k {
                coords.push(self.coords[i]);
                feats.extend_from_slice(&self.features[i * fw..(i + 1) * fw]);
            }
        }
        self.coords = coords;
        self.features = feats;
    }
}

/// Axis-aligned detection range in meters, `[min, max)` per axis.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RangeSpec<T> {
    pub min: [T; 3],
    pub max: [T; 3],
}

impl<T: Real> RangeSpec<T> {
    pub fn contains(&self, p: [T; 3]) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] < self.max[k])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Voxel<T> {
    pub index: [usize; 3],
    pub mean_coord: [T; 3],
    pub mean_feature: Vec<T>,
    pub count: usize,
    /// Rows of the source cloud that fell into this voxel.
    pub members: Vec<usize>,
}

/// Occupied voxels sorted by linear index `(ix * ny + iy) * nz + iz`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid<T> {
    pub origin: [T; 3],
    pub voxel_size: [T; 3],
    pub extents: [usize; 3],
    pub voxels: Vec<Voxel<T>>,
    pub feature_width: usize,
}

impl<T: Real> VoxelGrid<T> {
    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn linear_index(&self, idx: [usize; 3]) -> usize {
        (idx[0] * self.extents[1] + idx[1]) * self.extents[2] + idx[2]
    }
}

pub fn voxelize<T: Real>(
    pc: &PointCloud<T>,
    range: &RangeSpec<T>,
    voxel_size: [T; 3],
) -> Result<VoxelGrid<T>, PointCloudError> {
    if voxel_size.iter().any(|&s| !(s > T::zero())) {
        return Err(PointCloudError::VoxelSize(voxel_size.map(|s| s.as_f64())));
    }
    let extents = [0, 1, 2].map(|k| {
        ((range.max[k] - range.min[k]) / voxel_size[k])
            .round()
            .to_usize()
            .unwrap_or(0)
            .max(1)
    });
    let mut cells: BTreeMap<usize, ([usize; 3], Vec<usize>)> = BTreeMap::new();
    for (i, &p) in pc.coords.iter().enumerate() {
        if !range.contains(p) {
            continue;
        }
        let idx = [0, 1, 2].map(|k| {
            ((p[k] - range.min[k]) / voxel_size[k])
                .floor()
                .to_usize()
                .unwrap_or(0)
                .min(extents[k] - 1)
        });
        let lin = (idx[0] * extents[1] + idx[1]) * extents[2] + idx[2];
        cells.entry(lin).or_insert_with(|| (idx, Vec::new())).1.push(i);
    }
    let fw = pc.feature_width;
    let voxels = cells
        .into_values()
        .map(|(index, members)| {
            let n = T::lit(members.len() as f64);
            let mut mc = [T::zero(); 3];
            let mut mf = vec![T::zero(); fw];
            for &m in &members {
                for k in 0..3 {
                    mc[k] += pc.coords[m][k];
                }
                for (a, &b) in mf.iter_mut().zip(pc.feature_row(m)) {
                    *a += b;
                }
            }
            Voxel {
                index,
                mean_coord: mc.map(|v| v / n),
                mean_feature: mf.into_iter().map(|v| v / n).collect(),
                count: members.len(),
                members,
            }
        })
        .collect();
    Ok(VoxelGrid {
        origin: range.min,
        voxel_size,
        extents,
        voxels,
        feature_width: fw,
    })
}

#[inline]
fn dist2<T: Real>(a: &[T; 3], b: &[T; 3]) -> T {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Greedy max-min subset starting at `start`; ties go to the lowest index.
pub fn farthest_point_sample<T: Real>(coords: &[[T; 3]], k: usize, start: usize) -> Result<Vec<usize>, PointCloudError> {
    let n = coords.len();
    if k == 0 || k > n || start >= n {
        return Err(PointCloudError::SampleCount { k, n });
    }
    let mut selected = Vec::with_capacity(k);
    let mut min_d = vec![T::infinity(); n];
    let mut cur = start;
    selected.push(cur);
    while selected.len() < k {
        let mut best = 0;
        let mut best_d = T::neg_infinity();
        for i in 0..n {
            let d = dist2(&coords[i], &coords[cur]);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        cur = best;
        selected.push(cur);
    }
    Ok(selected)
}

/// `mean_x min_y |x - y|^2 + mean_y min_x |y - x|^2`.
pub fn chamfer_distance<T: Real>(a: &[[T; 3]], b: &[[T; 3]]) -> Result<T, PointCloudError> {
    Ok(directed_chamfer(a, b)? + directed_chamfer(b, a)?)
}

/// `mean_x min_y |x - y|^2` over `x` in `from`.
pub fn directed_chamfer<T: Real>(from: &[[T; 3]], to: &[[T; 3]]) -> Result<T, PointCloudError> {
    if from.is_empty() || to.is_empty() {
        return Err(PointCloudError::Empty);
    }
    let s: T = from
        .iter()
        .map(|x| to.iter().map(|y| dist2(x, y)).fold(T::infinity(), T::min))
        .sum();
    Ok(s / T::lit(from.len() as f64))
}

pub fn points_in_box<T: Real>(b: &Box3D<T>, coords: &[[T; 3]]) -> Vec<bool> {
    coords.iter().map(|&p| b.contains(p)).collect()
}

/// Euclidean range of each point from the sensor origin.
pub fn depth_feature<T: Real>(coords: &[[T; 3]]) -> Vec<T> {
    coords.iter().map(|p| dist2(p, &[T::zero(); 3]).sqrt()).collect()
}
