//! RoI grid construction and cross-modal feature fusion: voxel neighborhoods,
//! per-grid image samples and an RoI-level image descriptor.

use crate::autodiff::{Mlp, ParamStore, Tape, Tensor, Var};
use crate::error::Result;
use crate::geometry::{corners_to_box2d, enlarge_box2d, inverse_canonical_transform, roi_align_weights, Box3D, CameraCalibration};
use crate::pointcloud::VoxelGrid;
use crate::spe::{sample_image, ImageInput};

/// Centers of the `G^3` equal sub-boxes, `x` index slowest, in the LiDAR frame.
pub fn make_grid_points(b: &Box3D<f64>, g: usize) -> Vec<[f64; 3]> {
    let gf = g as f64;
    let mut canon = Vec::with_capacity(g * g * g);
    for i in 0..g {
        for j in 0..g {
            for k in 0..g {
                canon.push([
                    ((i as f64 + 0.5) / gf - 0.5) * b.size[0],
                    ((j as f64 + 0.5) / gf - 0.5) * b.size[1],
                    ((k as f64 + 0.5) / gf - 0.5) * b.size[2],
                ]);
            }
        }
    }
    inverse_canonical_transform(b, &canon)
}

/// Half the diagonal of one sub-box.
pub fn subvoxel_radius(b: &Box3D<f64>, g: usize) -> f64 {
    let gf = g as f64;
    0.5 * ((b.size[0] / gf).powi(2) + (b.size[1] / gf).powi(2) + (b.size[2] / gf).powi(2)).sqrt()
}

/// Up to `k` voxels within `radius` of each grid point, nearest first
/// (ties by storage order). CSR `(offsets, voxel ids)`.
pub fn voxel_neighborhoods(grid: &VoxelGrid<f64>, points: &[[f64; 3]], radius: f64, k: usize) -> (Vec<usize>, Vec<usize>) {
    let mut offsets = Vec::with_capacity(points.len() + 1);
    let mut ids = Vec::new();
    offsets.push(0);
    if points.is_empty() || grid.is_empty() {
        offsets.resize(points.len() + 1, 0);
        return (offsets, ids);
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a] - radius);
            hi[a] = hi[a].max(p[a] + radius);
        }
    }
    let cands: Vec<usize> = grid
        .voxels
        .iter()
        .enumerate()
        .filter(|(_, v)| (0..3).all(|a| v.mean_coord[a] >= lo[a] && v.mean_coord[a] <= hi[a]))
        .map(|(i, _)| i)
        .collect();
    let r2 = radius * radius;
    let mut near: Vec<(f64, usize)> = Vec::new();
    for p in points {
        near.clear();
        for &i in &cands {
            let m = grid.voxels[i].mean_coord;
            let d2 = (m[0] - p[0]).powi(2) + (m[1] - p[1]).powi(2) + (m[2] - p[2]).powi(2);
            if d2 <= r2 {
                near.push((d2, i));
            }
        }
        near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        ids.extend(near.iter().take(k).map(|&(_, i)| i));
        offsets.push(ids.len());
    }
    (offsets, ids)
}

/// `f^V`: channel max of `mlp([v - g; f_v])` over each grid point's neighborhood;
/// zero rows where the neighborhood is empty. `voxel_features` is `V x F`.
#[allow(clippy::too_many_arguments)]
pub fn pool_voxel_features(
    tape: &mut Tape<f64>,
    store: &ParamStore<f64>,
    grid: &VoxelGrid<f64>,
    voxel_features: Var,
    points: &[[f64; 3]],
    radius: f64,
    k: usize,
    mlp: &Mlp,
) -> Result<Var> {
    let (offsets, ids) = voxel_neighborhoods(grid, points, radius, k);
    if ids.is_empty() {
        return Ok(tape.constant(Tensor::zeros(&[points.len(), mlp.output_width()])));
    }
    let mut rel = Vec::with_capacity(ids.len() * 3);
    for (gi, p) in points.iter().enumerate() {
        for &v in &ids[offsets[gi]..offsets[gi + 1]] {
            let m = grid.voxels[v].mean_coord;
            rel.extend_from_slice(&[m[0] - p[0], m[1] - p[1], m[2] - p[2]]);
        }
    }
    let rel = tape.constant(Tensor::matrix(ids.len(), 3, rel)?);
    let feats = tape.gather_rows(voxel_features, &ids)?;
    let x = tape.concat_cols(&[rel, feats])?;
    let h = mlp.forward(tape, store, x)?;
    Ok(tape.segment_max(h, &offsets)?)
}

/// `f^I` per grid point.
pub fn grid_image_features(
    tape: &mut Tape<f64>,
    points: &[[f64; 3]],
    img: ImageInput<'_>,
    calib: &CameraCalibration<f64>,
) -> Result<Var> {
    Ok(sample_image(tape, img, calib, points)?.0)
}

/// `f^B` (`1 x C_b`): RoI Align over the enlarged projected box, flattened, then `mlp`.
/// Boxes that do not reach the image yield zeros.
#[allow(clippy::too_many_arguments)]
pub fn roi_image_feature(
    tape: &mut Tape<f64>,
    store: &ParamStore<f64>,
    b: &Box3D<f64>,
    img: ImageInput<'_>,
    calib: &CameraCalibration<f64>,
    factor: f64,
    bins: usize,
    samples_per_bin: usize,
    mlp: &Mlp,
) -> Result<Var> {
    calib.validate()?;
    let zeros = |tape: &mut Tape<f64>| tape.constant(Tensor::zeros(&[1, mlp.output_width()]));
    let (b2, visible) = corners_to_box2d(calib, b);
    if !visible {
        return Ok(zeros(tape));
    }
    let (w, h) = img.map.image_size();
    let e = enlarge_box2d(&b2, factor, w, h);
    if !(e.area() > 0.0) {
        return Ok(zeros(tape));
    }
    let (offsets, idx, wts) = roi_align_weights(img.map, &e, bins, samples_per_bin);
    let pooled = tape.weighted_gather(img.var, offsets, idx, wts)?;
    let flat = tape.reshape(pooled, &[1, bins * bins * img.map.channels])?;
    Ok(mlp.forward(tape, store, flat)?)
}

/// `f^Fus = mlp([f^V; f^I; f^B])` with the RoI row `f^B` repeated per grid point.
pub fn fuse(tape: &mut Tape<f64>, store: &ParamStore<f64>, fv: Var, fi: Var, fb: Var, mlp: &Mlp) -> Result<Var> {
    let n = tape.shape(fv)[0];
    let fb = tape.gather_rows(fb, &vec![0; n])?;
    let x = tape.concat_cols(&[fv, fi, fb])?;
    Ok(mlp.forward(tape, store, x)?)
}
