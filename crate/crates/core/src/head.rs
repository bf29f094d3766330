//! Second stage: canonical point features, RoI set encoding, box refinement,
//! confidence, the refinement loss and the detections text format.

use std::io::{BufRead, Write};

use crate::autodiff::{Mlp, ParamStore, Tape, Tensor, Var};
use crate::class::{class_id, class_name};
use crate::error::{Error, Result};
use crate::geometry::Box3D;
use crate::rpn::{decode_residual, encode_target};

/// `f^C = mlp([R(-yaw)(p - c); |p|; s])`, the norm taken in the sensor frame.
pub fn canonical_features(
    tape: &mut Tape<f64>,
    store: &ParamStore<f64>,
    b: &Box3D<f64>,
    coords: Var,
    scores: Var,
    mlp: &Mlp,
) -> Result<Var> {
    let neg_c = tape.constant(Tensor::new(vec![3], b.center.map(|v| -v).to_vec())?);
    let shifted = tape.add_row(coords, neg_c)?;
    let (s, c) = b.yaw.sin_cos();
    // Row vectors: canon = d * R(-yaw)^T.
    let rt = tape.constant(Tensor::matrix(3, 3, vec![c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0])?);
    let canon = tape.matmul(shifted, rt)?;
    let depth = tape.row_norm(coords)?;
    let x = tape.concat_cols(&[canon, depth, scores])?;
    Ok(mlp.forward(tape, store, x)?)
}

#[derive(Debug, Clone)]
pub struct RcnnHeads {
    /// Per-point encoder over `[p; f^C; f^S; f^I]`.
    pub point: Mlp,
    /// Applied after the channel max.
    pub outer: Mlp,
    pub reg: Mlp,
    pub cls: Mlp,
}

/// Order-invariant RoI vector `1 x W`.
#[allow(clippy::too_many_arguments)]
pub fn encode_roi(
    tape: &mut Tape<f64>,
    store: &ParamStore<f64>,
    coords: Var,
    canonical: Var,
    semantic: Var,
    image: Var,
    point: &Mlp,
    outer: &Mlp,
) -> Result<Var> {
    let n = tape.shape(coords)[0];
    let x = tape.concat_cols(&[coords, canonical, semantic, image])?;
    let h = point.forward(tape, store, x)?;
    let pooled = tape.segment_max(h, &[0, n])?;
    Ok(outer.forward(tape, store, pooled)?)
}

/// Residual `1 x 7` and sigmoid confidence `1 x 1` for each RoI vector row.
pub fn refine_and_score(tape: &mut Tape<f64>, store: &ParamStore<f64>, roi: Var, heads: &RcnnHeads) -> Result<(Var, Var)> {
    let r = heads.reg.forward(tape, store, roi)?;
    let logit = heads.cls.forward(tape, store, roi)?;
    Ok((r, tape.sigmoid(logit)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub boxed: Box3D<f64>,
    pub class: usize,
    pub confidence: f64,
}

pub fn detection_from(proposal: &Box3D<f64>, class: usize, residual: &[f64], confidence: f64) -> Result<Detection> {
    Ok(Detection {
        boxed: decode_residual(proposal, residual)?,
        class,
        confidence: confidence.clamp(0.0, 1.0),
    })
}

/// IoU-quality confidence target `clip(2 (iou - 0.25), 0, 1)`.
pub fn quality_target(iou3d: f64) -> f64 {
    (2.0 * (iou3d - 0.25)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiTarget {
    pub gt: Option<Box3D<f64>>,
    pub iou3d: f64,
    /// Receives a regression target.
    pub positive: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct RcnnLoss {
    pub total: Var,
    pub cls: Var,
    pub reg: Var,
}

/// Mean binary cross-entropy of `conf` (`R x 1`) against quality targets plus
/// smooth-L1 of positive residuals (`R x 7`), summed over codes and averaged over positives.
pub fn rcnn_loss(
    tape: &mut Tape<f64>,
    conf: Var,
    residuals: Var,
    proposals: &[Box3D<f64>],
    targets: &[RoiTarget],
    beta: f64,
) -> Result<RcnnLoss> {
    let r = proposals.len();
    if targets.len() != r || tape.shape(conf)[0] != r || tape.shape(residuals)[0] != r {
        return Err(Error::Format("rcnn_loss: proposals, targets and predictions must align".into()));
    }
    let cls = if r == 0 {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let q: Vec<f64> = targets.iter().map(|t| quality_target(t.iou3d)).collect();
        let per = tape.focal(conf, &q, 0.0)?;
        tape.mean(per)?
    };
    let pos: Vec<usize> = (0..r).filter(|&i| targets[i].positive && targets[i].gt.is_some()).collect();
    let reg = if pos.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let p = tape.gather_rows(residuals, &pos)?;
        let t: Vec<f64> = pos
            .iter()
            .flat_map(|&i| encode_target(targets[i].gt.as_ref().unwrap(), &proposals[i]))
            .collect();
        let t = tape.constant(Tensor::matrix(pos.len(), 7, t)?);
        let m = tape.smooth_l1(p, t, beta)?;
        tape.scale(m, 7.0)
    };
    let total = tape.add(cls, reg)?;
    Ok(RcnnLoss { total, cls, reg })
}

/// Weighted sum of the stage losses.
pub fn total_loss(tape: &mut Tape<f64>, parts: &[(Var, f64)]) -> Result<Var> {
    let mut acc = tape.constant(Tensor::scalar(0.0));
    for &(v, w) in parts {
        let s = tape.scale(v, w);
        acc = tape.add(acc, s)?;
    }
    Ok(acc)
}

pub const DETECTIONS_HEADER: &str = "# frame class x y z l w h yaw confidence";

/// One line per detection; box values in shortest round-trip form, confidence with 6 decimals.
pub fn write_detections<W: Write>(dets: &[(String, Detection)], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{DETECTIONS_HEADER}")?;
    for (frame, d) in dets {
        let b = &d.boxed;
        writeln!(
            w,
            "{frame} {} {:?} {:?} {:?} {:?} {:?} {:?} {:?} {:.6}",
            class_name(d.class),
            b.center[0],
            b.center[1],
            b.center[2],
            b.size[0],
            b.size[1],
            b.size[2],
            b.yaw,
            d.confidence
        )?;
    }
    Ok(())
}

/// Parses whitespace-separated numeric fields, reporting the line number on failure.
pub(crate) fn parse_fields(fields: &[&str], line: usize) -> Result<Vec<f64>> {
    fields
        .iter()
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| Error::Format(format!("line {line}: bad number {s:?}")))
        })
        .collect()
}

pub(crate) fn parse_box(v: &[f64], line: usize) -> Result<Box3D<f64>> {
    Box3D::new([v[0], v[1], v[2]], [v[3], v[4], v[5]], v[6])
        .map_err(|e| Error::Format(format!("line {line}: {e}")))
}

pub fn read_detections<R: BufRead>(r: R) -> Result<Vec<(String, Detection)>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = t.split_whitespace().collect();
        if f.len() != 10 {
            return Err(Error::Format(format!("line {}: expected 10 fields, got {}", i + 1, f.len())));
        }
        let class = class_id(f[1]).ok_or_else(|| Error::Format(format!("line {}: unknown class {}", i + 1, f[1])))?;
        let v = parse_fields(&f[2..], i + 1)?;
        out.push((
            f[0].to_string(),
            Detection {
                boxed: parse_box(&v, i + 1)?,
                class,
                confidence: v[7],
            },
        ));
    }
    Ok(out)
}
