//! Region proposals: pillar-MLP BEV encoding, per-cell anchor heads,
//! target assignment, residual coding and BEV non-maximum suppression.

use rayon::prelude::*;

use crate::autodiff::{Mlp, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{iou_bev, Box3D};
use crate::pointcloud::{RangeSpec, VoxelGrid};
use crate::scalar::normalize_angle;

/// Per-class anchor template.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AnchorSpec {
    pub class: usize,
    /// `(l, w, h)` in meters.
    pub size: [f64; 3],
    pub z_center: f64,
    /// `(positive, negative)` BEV IoU thresholds overriding the global pair.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matching: Option<[f64; 2]>,
}

/// Bird's-eye cell lattice over the detection range. Cell `ix * ny + iy`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BevLayout {
    pub origin: [f64; 2],
    pub cell: f64,
    pub nx: usize,
    pub ny: usize,
    pub z_center: f64,
}

impl BevLayout {
    pub fn new(range: &RangeSpec<f64>, cell: f64) -> Result<Self> {
        if !(cell > 0.0) {
            return Err(Error::Config(format!("BEV cell size must be positive, got {cell}")));
        }
        let nx = ((range.max[0] - range.min[0]) / cell).round() as usize;
        let ny = ((range.max[1] - range.min[1]) / cell).round() as usize;
        if nx == 0 || ny == 0 {
            return Err(Error::Config("degenerate BEV range".into()));
        }
        Ok(Self {
            origin: [range.min[0], range.min[1]],
            cell,
            nx,
            ny,
            z_center: 0.5 * (range.min[2] + range.max[2]),
        })
    }

    pub fn num_cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn cell_of(&self, x: f64, y: f64) -> Option<usize> {
        let fx = ((x - self.origin[0]) / self.cell).floor();
        let fy = ((y - self.origin[1]) / self.cell).floor();
        if fx < 0.0 || fy < 0.0 || fx >= self.nx as f64 || fy >= self.ny as f64 {
            return None;
        }
        Some(fx as usize * self.ny + fy as usize)
    }

    pub fn cell_xy(&self, c: usize) -> (usize, usize) {
        (c / self.ny, c % self.ny)
    }

    pub fn cell_center(&self, c: usize) -> [f64; 2] {
        let (ix, iy) = self.cell_xy(c);
        [
            self.origin[0] + (ix as f64 + 0.5) * self.cell,
            self.origin[1] + (iy as f64 + 0.5) * self.cell,
        ]
    }
}

/// Sparse BEV map: only occupied cells carry a feature row.
#[derive(Debug, Clone)]
pub struct BevGrid {
    pub layout: BevLayout,
    /// Occupied cell ids, ascending.
    pub occupied: Vec<usize>,
    /// `occupied.len() x C_b`.
    pub features: Var,
    pub channels: usize,
}

impl BevGrid {
    /// Materializes the dense `nx x ny x C_b` tensor.
    pub fn dense(&self, tape: &Tape<f64>) -> Vec<f64> {
        let c = self.channels;
        let mut out = vec![0.0; self.layout.num_cells() * c];
        let f = tape.value(self.features);
        for (r, &cell) in self.occupied.iter().enumerate() {
            out[cell * c..(cell + 1) * c].copy_from_slice(f.row(r));
        }
        out
    }
}

/// Max-pools `mlp([v - cell center; f_v])` over the voxels of each BEV column.
pub fn encode_bev(
    tape: &mut Tape<f64>,
    store: &ParamStore<f64>,
    grid: &VoxelGrid<f64>,
    voxel_features: Var,
    layout: BevLayout,
    mlp: &Mlp,
) -> Result<BevGrid> {
    let channels = mlp.output_width();
    let mut keyed: Vec<(usize, usize)> = grid
        .voxels
        .iter()
        .enumerate()
        .filter_map(|(i, v)| layout.cell_of(v.mean_coord[0], v.mean_coord[1]).map(|c| (c, i)))
        .collect();
    keyed.sort_unstable();
    if keyed.is_empty() {
        let features = tape.constant(Tensor::zeros(&[0, channels]));
        return Ok(BevGrid {
            layout,
            occupied: Vec::new(),
            features,
            channels,
        });
    }
    let order: Vec<usize> = keyed.iter().map(|&(_, i)| i).collect();
    let mut rel = Vec::with_capacity(order.len() * 3);
    let mut occupied = Vec::new();
    let mut offsets = vec![0];
    for (k, &(c, i)) in keyed.iter().enumerate() {
        if occupied.last() != Some(&c) {
            if k > 0 {
                offsets.push(k);
            }
            occupied.push(c);
        }
        let cc = layout.cell_center(c);
        let m = grid.voxels[i].mean_coord;
        rel.extend_from_slice(&[m[0] - cc[0], m[1] - cc[1], m[2] - layout.z_center]);
    }
    offsets.push(keyed.len());
    let rel = tape.constant(Tensor::matrix(order.len(), 3, rel)?);
    let feats = tape.gather_rows(voxel_features, &order)?;
    let x = tape.concat_cols(&[rel, feats])?;
    let h = mlp.forward(tape, store, x)?;
    let features = tape.segment_max(h, &offsets)?;
    Ok(BevGrid {
        layout,
        occupied,
        features,
        channels,
    })
}

/// Anchor boxes in cell-major order; within a cell, per spec, yaws `{0, pi/2}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Anchor {
    pub boxed: Box3D<f64>,
    pub class: usize,
    pub cell: usize,
    pub matching: Option<[f64; 2]>,
}

pub const ANCHOR_YAWS: [f64; 2] = [0.0, std::f64::consts::FRAC_PI_2];

pub fn anchors_per_cell(specs: &[AnchorSpec]) -> usize {
    specs.len() * ANCHOR_YAWS.len()
}

pub fn generate_anchors(layout: &BevLayout, specs: &[AnchorSpec]) -> Result<Vec<Anchor>> {
    let mut out = Vec::with_capacity(layout.num_cells() * anchors_per_cell(specs));
    for cell in 0..layout.num_cells() {
        let [x, y] = layout.cell_center(cell);
        for s in specs {
            for &yaw in &ANCHOR_YAWS {
                out.push(Anchor {
                    boxed: Box3D::new([x, y, s.z_center], s.size, yaw)?,
                    class: s.class,
                    cell,
                    matching: s.matching,
                });
            }
        }
    }
    Ok(out)
}

/// `(dx/d_a, dy/d_a, dz/h_a, ln l/l_a, ln w/w_a, ln h/h_a, dtheta)` with `d_a` the anchor's BEV diagonal.
pub fn encode_residual(gt: &Box3D<f64>, anchor: &Box3D<f64>) -> [f64; 7] {
    let da = anchor.size[0].hypot(anchor.size[1]);
    [
        (gt.center[0] - anchor.center[0]) / da,
        (gt.center[1] - anchor.center[1]) / da,
        (gt.center[2] - anchor.center[2]) / anchor.size[2],
        (gt.size[0] / anchor.size[0]).ln(),
        (gt.size[1] / anchor.size[1]).ln(),
        (gt.size[2] / anchor.size[2]).ln(),
        normalize_angle(gt.yaw - anchor.yaw),
    ]
}

/// Training target: like [`encode_residual`] with the angle folded into `[-pi/2, pi/2)`,
/// since a box turned by pi covers the same volume.
pub fn encode_target(gt: &Box3D<f64>, anchor: &Box3D<f64>) -> [f64; 7] {
    let mut r = encode_residual(gt, anchor);
    r[6] = fold_half_turn(r[6]);
    r
}

pub fn fold_half_turn(a: f64) -> f64 {
    let pi = std::f64::consts::PI;
    (a + 0.5 * pi).rem_euclid(pi) - 0.5 * pi
}

/// Log-size residuals are clamped to `[-4, 4]` so that untrained heads stay finite.
pub fn decode_residual(anchor: &Box3D<f64>, r: &[f64]) -> Result<Box3D<f64>> {
    if r.len() != 7 {
        return Err(Error::Format(format!("residual has {} components, expected 7", r.len())));
    }
    let da = anchor.size[0].hypot(anchor.size[1]);
    let s = |v: f64| v.clamp(-4.0, 4.0).exp();
    Ok(Box3D::new(
        [
            anchor.center[0] + r[0] * da,
            anchor.center[1] + r[1] * da,
            anchor.center[2] + r[2] * anchor.size[2],
        ],
        [anchor.size[0] * s(r[3]), anchor.size[1] * s(r[4]), anchor.size[2] * s(r[5])],
        anchor.yaw + r[6],
    )?)
}

pub fn decode_boxes(anchors: &[Anchor], residuals: &Tensor<f64>) -> Result<Vec<Box3D<f64>>> {
    if residuals.rows() != anchors.len() || residuals.cols() != 7 {
        return Err(Error::Format(format!(
            "{} anchors vs residuals {:?}",
            anchors.len(),
            residuals.shape()
        )));
    }
    anchors
        .iter()
        .enumerate()
        .map(|(i, a)| decode_residual(&a.boxed, residuals.row(i)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `1` positive, `0` negative, `-1` ignored.
    pub labels: Vec<i8>,
    pub matched: Vec<Option<usize>>,
    pub best_iou: Vec<f64>,
}

impl Assignment {
    pub fn num_positive(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }
}

/// Class-aware BEV IoU matching of anchors to ground truth.
pub fn assign_targets(anchors: &[Anchor], gts: &[(Box3D<f64>, usize)], pos_iou: f64, neg_iou: f64) -> Result<Assignment> {
    if anchors.is_empty() {
        return Err(Error::Format("no anchors to assign".into()));
    }
    if !(pos_iou > neg_iou) {
        return Err(Error::Config(format!("pos_iou {pos_iou} must exceed neg_iou {neg_iou}")));
    }
    let per_anchor: Vec<(f64, Option<usize>, Vec<f64>)> = anchors
        .par_iter()
        .map(|a| {
            let ious: Vec<f64> = gts
                .iter()
                .map(|(g, c)| {
                    let reach = 0.5 * (a.boxed.size[0].hypot(a.boxed.size[1]) + g.size[0].hypot(g.size[1]));
                    let gap = (a.boxed.center[0] - g.center[0]).hypot(a.boxed.center[1] - g.center[1]);
                    if *c == a.class && gap < reach {
                        iou_bev(&a.boxed, g)
                    } else {
                        0.0
                    }
                })
                .collect();
            let mut best = 0.0;
            let mut arg = None;
            for (j, &v) in ious.iter().enumerate() {
                if v > best {
                    best = v;
                    arg = Some(j);
                }
            }
            (best, arg, ious)
        })
        .collect();
    let mut labels = Vec::with_capacity(anchors.len());
    let mut matched = Vec::with_capacity(anchors.len());
    let mut best_iou = Vec::with_capacity(anchors.len());
    for ((best, arg, _), a) in per_anchor.iter().zip(anchors) {
        let [pos, neg] = a.matching.unwrap_or([pos_iou, neg_iou]);
        let l = if *best >= pos {
            1
        } else if *best < neg {
            0
        } else {
            -1
        };
        labels.push(l);
        matched.push(if l == 1 { *arg } else { None });
        best_iou.push(*best);
    }
    for j in 0..gts.len() {
        let top = per_anchor.iter().map(|p| p.2[j]).fold(0.0, f64::max);
        if top <= 0.0 {
            continue;
        }
        for (i, p) in per_anchor.iter().enumerate() {
            if p.2[j] == top && labels[i] != 1 {
                labels[i] = 1;
                matched[i] = Some(j);
            }
        }
    }
    Ok(Assignment {
        labels,
        matched,
        best_iou,
    })
}

/// Shared trunk over a `(2r+1)^2` cell neighborhood followed by the score and residual heads.
#[derive(Debug, Clone)]
pub struct RpnHeads {
    pub trunk: Mlp,
    pub cls: Mlp,
    pub reg: Mlp,
    pub context: usize,
    pub per_cell: usize,
}

impl RpnHeads {
    pub fn neighborhood(&self) -> usize {
        (2 * self.context + 1).pow(2)
    }
}

#[derive(Debug, Clone)]
pub struct RpnOutput {
    /// `(active cells + 1) x per_cell` sigmoid scores; the last row serves every inactive cell.
    pub scores: Var,
    /// `(active cells + 1) x 7 per_cell`.
    pub residuals: Var,
    /// Head row for every BEV cell.
    pub cell_row: Vec<usize>,
    pub per_cell: usize,
}

impl RpnOutput {
    /// Flat index of an anchor's score in the row-major score block.
    pub fn score_index(&self, anchor: usize) -> usize {
        self.cell_row[anchor / self.per_cell] * self.per_cell + anchor % self.per_cell
    }

    /// Per-anchor `N x 1` scores and `N x 7` residuals for the given anchor ids.
    pub fn gather(&self, tape: &mut Tape<f64>, anchors: &[usize]) -> Result<(Var, Var)> {
        let idx: Vec<usize> = anchors.iter().map(|&a| self.score_index(a)).collect();
        let rows = tape.shape(self.scores)[0];
        let s = tape.reshape(self.scores, &[rows * self.per_cell, 1])?;
        let r = tape.reshape(self.residuals, &[rows * self.per_cell, 7])?;
        Ok((tape.gather_rows(s, &idx)?, tape.gather_rows(r, &idx)?))
    }

    pub fn score_values(&self, tape: &Tape<f64>, num_anchors: usize) -> Vec<f64> {
        let s = tape.value(self.scores).data();
        (0..num_anchors).map(|a| s[self.score_index(a)]).collect()
    }

    pub fn residual_values(&self, tape: &Tape<f64>, anchor: usize) -> [f64; 7] {
        let r = tape.value(self.residuals).data();
        let k = self.score_index(anchor) * 7;
        let mut out = [0.0; 7];
        out.copy_from_slice(&r[k..k + 7]);
        out
    }
}

pub fn rpn_forward(tape: &mut Tape<f64>, store: &ParamStore<f64>, bev: &BevGrid, heads: &RpnHeads) -> Result<RpnOutput> {
    let layout = bev.layout;
    let c = bev.channels;
    let r = heads.context as isize;
    let n_occ = bev.occupied.len();
    let mut occ_row = vec![usize::MAX; layout.num_cells()];
    for (i, &cell) in bev.occupied.iter().enumerate() {
        occ_row[cell] = i;
    }
    let neighbor = |cell: usize, dx: isize, dy: isize| -> Option<usize> {
        let (ix, iy) = layout.cell_xy(cell);
        let (x, y) = (ix as isize + dx, iy as isize + dy);
        if x < 0 || y < 0 || x >= layout.nx as isize || y >= layout.ny as isize {
            return None;
        }
        Some(x as usize * layout.ny + y as usize)
    };
    let mut active: Vec<usize> = Vec::new();
    for &cell in &bev.occupied {
        for dx in -r..=r {
            for dy in -r..=r {
                if let Some(n) = neighbor(cell, dx, dy) {
                    active.push(n);
                }
            }
        }
    }
    active.sort_unstable();
    active.dedup();
    let zero_row = n_occ;
    let mut idx = Vec::with_capacity((active.len() + 1) * heads.neighborhood());
    for &cell in &active {
        for dx in -r..=r {
            for dy in -r..=r {
                let src = neighbor(cell, dx, dy).map(|n| occ_row[n]).unwrap_or(usize::MAX);
                idx.push(if src == usize::MAX { zero_row } else { src });
            }
        }
    }
    idx.extend(std::iter::repeat(zero_row).take(heads.neighborhood()));
    let pad = tape.constant(Tensor::zeros(&[1, c]));
    let padded = tape.concat_rows(&[bev.features, pad])?;
    let gathered = tape.gather_rows(padded, &idx)?;
    let x = tape.reshape(gathered, &[active.len() + 1, heads.neighborhood() * c])?;
    let h = heads.trunk.forward(tape, store, x)?;
    let logits = heads.cls.forward(tape, store, h)?;
    let scores = tape.sigmoid(logits);
    let residuals = heads.reg.forward(tape, store, h)?;
    let mut cell_row = vec![active.len(); layout.num_cells()];
    for (i, &cell) in active.iter().enumerate() {
        cell_row[cell] = i;
    }
    Ok(RpnOutput {
        scores,
        residuals,
        cell_row,
        per_cell: heads.per_cell,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct RpnLoss {
    pub total: Var,
    pub cls: Var,
    pub reg: Var,
}

/// Focal loss over non-ignored anchors normalized by `max(1, positives)`, plus
/// smooth-L1 over positive residuals (summed over the 7 codes, averaged over positives).
/// `scores` is `N x 1` and `residuals` is `N x 7`, both aligned with `labels`.
pub fn rpn_loss(
    tape: &mut Tape<f64>,
    scores: Var,
    residuals: Var,
    labels: &[i8],
    targets: &[[f64; 7]],
    gamma: f64,
    beta: f64,
) -> Result<RpnLoss> {
    if tape.shape(scores)[0] != labels.len() || tape.shape(residuals)[0] != labels.len() || targets.len() != labels.len() {
        return Err(Error::Format("rpn_loss: scores, residuals, labels and targets must align".into()));
    }
    let cared: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] >= 0).collect();
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let norm = pos.len().max(1) as f64;
    let cls = if cared.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let s = tape.gather_rows(scores, &cared)?;
        let y: Vec<f64> = cared.iter().map(|&i| labels[i] as f64).collect();
        let per = tape.focal(s, &y, gamma)?;
        let sum = tape.sum(per);
        tape.scale(sum, 1.0 / norm)
    };
    let reg = if pos.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let p = tape.gather_rows(residuals, &pos)?;
        let t: Vec<f64> = pos.iter().flat_map(|&i| targets[i]).collect();
        let t = tape.constant(Tensor::matrix(pos.len(), 7, t)?);
        let m = tape.smooth_l1(p, t, beta)?;
        tape.scale(m, 7.0)
    };
    let total = tape.add(cls, reg)?;
    Ok(RpnLoss { total, cls, reg })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub boxed: Box3D<f64>,
    pub class: usize,
    pub score: f64,
}

/// Greedy suppression by BEV IoU; order is descending score, then ascending index.
pub fn nms_indices(proposals: &[Proposal], iou_thresh: f64, max_keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    order.sort_by(|&a, &b| proposals[b].score.total_cmp(&proposals[a].score).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.len() >= max_keep {
            break;
        }
        if keep
            .iter()
            .all(|&k| iou_bev(&proposals[k].boxed, &proposals[i].boxed) <= iou_thresh)
        {
            keep.push(i);
        }
    }
    keep
}

pub fn nms_bev(proposals: &[Proposal], iou_thresh: f64, max_keep: usize) -> Vec<Proposal> {
    nms_indices(proposals, iou_thresh, max_keep)
        .into_iter()
        .map(|i| proposals[i].clone())
        .collect()
}

/// Decodes the `pre_nms` best-scoring anchors and suppresses duplicates.
pub fn generate_proposals(
    tape: &Tape<f64>,
    out: &RpnOutput,
    anchors: &[Anchor],
    pre_nms: usize,
    iou_thresh: f64,
    max_keep: usize,
) -> Result<Vec<Proposal>> {
    let scores = out.score_values(tape, anchors.len());
    let mut order: Vec<usize> = (0..anchors.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(pre_nms);
    let cands = order
        .into_iter()
        .map(|a| {
            Ok(Proposal {
                boxed: decode_residual(&anchors[a].boxed, &out.residual_values(tape, a))?,
                class: anchors[a].class,
                score: scores[a],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(nms_bev(&cands, iou_thresh, max_keep))
}
