//! RoI point generation: box-relative positional codes, transformer refinement
//! of fused grid features, one generated point per grid cell, and the
//! offset (Chamfer) and score (focal) losses.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Mlp, ParamStore, Tape, Tensor, TransformerLayer, Var};
use crate::error::{Error, Result};
use crate::geometry::{box3d_corners, Box3D};
use crate::pointcloud::{farthest_point_sample, points_in_box};

pub const SCORE_CLAMP: f64 = 1e-7;

/// Rows `[g - center; g - corner_1; ...; g - corner_8]`, width 27.
pub fn positional_inputs(b: &Box3D<f64>, grid: &[[f64; 3]]) -> Vec<f64> {
    let corners = box3d_corners(b);
    let mut refs = vec![b.center];
    refs.extend_from_slice(&corners);
    let mut out = Vec::with_capacity(grid.len() * 27);
    for g in grid {
        for r in &refs {
            out.extend_from_slice(&[g[0] - r[0], g[1] - r[1], g[2] - r[2]]);
        }
    }
    out
}

/// `delta = ffn(positional_inputs)`.
pub fn positional_encoding(
    tape: &mut Tape<f64>,
    store: &ParamStore<f64>,
    b: &Box3D<f64>,
    grid: &[[f64; 3]],
    ffn: &Mlp,
) -> Result<Var> {
    let x = tape.constant(Tensor::matrix(grid.len(), 27, positional_inputs(b, grid))?);
    Ok(ffn.forward(tape, store, x)?)
}

/// Transformer stack with `delta` added to the input of every layer.
pub fn refine(
    tape: &mut Tape<f64>,
    store: &ParamStore<f64>,
    fused: Var,
    delta: Var,
    layers: &[TransformerLayer],
) -> Result<Var> {
    let mut x = fused;
    for l in layers {
        let xin = tape.add(x, delta)?;
        x = l.forward(tape, store, xin)?;
    }
    Ok(x)
}

#[derive(Debug, Clone)]
pub struct RpgHeads {
    /// `C_f -> 3 + C_s`: offsets then semantic features.
    pub offset: Mlp,
    /// `C_s -> 1` logits.
    pub score: Mlp,
}

#[derive(Debug, Clone)]
pub struct GeneratedPoints {
    pub grid: Vec<[f64; 3]>,
    pub offsets: Var,
    /// `grid + offsets`, `n x 3`.
    pub coords: Var,
    pub semantic: Var,
    /// Clamped sigmoid scores, `n x 1`.
    pub scores: Var,
}

impl GeneratedPoints {
    pub fn coord_values(&self, tape: &Tape<f64>) -> Vec<[f64; 3]> {
        tape.value(self.coords).data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
    }

    pub fn score_values(&self, tape: &Tape<f64>) -> Vec<f64> {
        tape.value(self.scores).data().to_vec()
    }
}

pub fn generate(
    tape: &mut Tape<f64>,
    store: &ParamStore<f64>,
    refined: Var,
    grid: &[[f64; 3]],
    heads: &RpgHeads,
) -> Result<GeneratedPoints> {
    let out = heads.offset.forward(tape, store, refined)?;
    let width = heads.offset.output_width();
    if width < 4 {
        return Err(Error::Config(format!("offset head width {width} leaves no semantic channels")));
    }
    let offsets = tape.slice_cols(out, 0, 3)?;
    let semantic = tape.slice_cols(out, 3, width - 3)?;
    let g = tape.constant(Tensor::matrix(grid.len(), 3, grid.iter().flatten().copied().collect())?);
    let coords = tape.add(g, offsets)?;
    let logits = heads.score.forward(tape, store, semantic)?;
    let s = tape.sigmoid(logits);
    let scores = tape.clamp(s, SCORE_CLAMP, 1.0 - SCORE_CLAMP);
    Ok(GeneratedPoints {
        grid: grid.to_vec(),
        offsets,
        coords,
        semantic,
        scores,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct OffsetLoss {
    pub value: Var,
    pub positives: usize,
    /// Positive RoIs dropped because their template was empty.
    pub skipped: usize,
}

/// Mean Chamfer distance between generated coordinates and the dense templates
/// (already placed in the LiDAR frame). No usable positives gives a constant 0.
pub fn loss_offset(tape: &mut Tape<f64>, items: &[(Var, &[[f64; 3]])]) -> Result<OffsetLoss> {
    let mut terms = Vec::new();
    let mut skipped = 0;
    for &(coords, template) in items {
        if template.is_empty() {
            skipped += 1;
            continue;
        }
        let t = tape.constant(Tensor::matrix(template.len(), 3, template.iter().flatten().copied().collect())?);
        terms.push(tape.chamfer(coords, t)?);
    }
    let value = if terms.is_empty() {
        tape.constant(Tensor::scalar(0.0))
    } else {
        let n = terms.len();
        let rows = terms
            .iter()
            .map(|&v| tape.reshape(v, &[1, 1]))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let stacked = tape.concat_rows(&rows)?;
        let s = tape.sum(stacked);
        tape.scale(s, 1.0 / n as f64)
    };
    Ok(OffsetLoss {
        value,
        positives: terms.len(),
        skipped,
    })
}

/// One RoI's contribution to the score loss.
#[derive(Debug, Clone)]
pub struct ScoreItem<'a> {
    pub scores: Var,
    pub coords: &'a [[f64; 3]],
    /// Matched ground truth; `None` labels every point negative.
    pub gt: Option<Box3D<f64>>,
}

/// Focal loss on farthest-point-sampled generated points against inside-GT labels,
/// averaged over every sampled point. `seed = None` starts sampling at index 0.
pub fn loss_score(tape: &mut Tape<f64>, items: &[ScoreItem<'_>], gamma: f64, n_s: usize, seed: Option<u64>) -> Result<Var> {
    if n_s == 0 {
        return Err(Error::Config("score sample count must be at least 1".into()));
    }
    let mut rng = seed.map(ChaCha8Rng::seed_from_u64);
    let mut picked = Vec::new();
    let mut labels = Vec::new();
    for it in items {
        let n = it.coords.len();
        if n == 0 {
            continue;
        }
        let start = rng.as_mut().map_or(0, |r| r.gen_range(0..n));
        let idx = farthest_point_sample(it.coords, n_s.min(n), start)?;
        let pts: Vec<[f64; 3]> = idx.iter().map(|&i| it.coords[i]).collect();
        let inside = match &it.gt {
            Some(b) => points_in_box(b, &pts),
            None => vec![false; pts.len()],
        };
        labels.extend(inside.iter().map(|&b| if b { 1.0 } else { 0.0 }));
        picked.push(tape.gather_rows(it.scores, &idx)?);
    }
    if picked.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let all = tape.concat_rows(&picked)?;
    let per = tape.focal(all, &labels, gamma)?;
    Ok(tape.mean(per)?)
}

/// Generated points of one RoI as written to `.gpts`.
#[derive(Debug, Clone, PartialEq)]
pub struct GptsRecord {
    /// `x, y, z, l, w, h, yaw`.
    pub boxed: [f32; 7],
    /// `x, y, z, score`.
    pub points: Vec<[f32; 4]>,
}

impl GptsRecord {
    pub fn new(b: &Box3D<f64>, coords: &[[f64; 3]], scores: &[f64]) -> Self {
        Self {
            boxed: box_to_f32(b),
            points: coords
                .iter()
                .zip(scores)
                .map(|(c, &s)| [c[0] as f32, c[1] as f32, c[2] as f32, s as f32])
                .collect(),
        }
    }
}

pub fn box_to_f32(b: &Box3D<f64>) -> [f32; 7] {
    [
        b.center[0] as f32,
        b.center[1] as f32,
        b.center[2] as f32,
        b.size[0] as f32,
        b.size[1] as f32,
        b.size[2] as f32,
        b.yaw as f32,
    ]
}

pub fn write_gpts<W: Write>(records: &[GptsRecord], mut w: W) -> std::io::Result<()> {
    for r in records {
        for v in r.boxed {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(r.points.len() as u32).to_le_bytes())?;
        for p in &r.points {
            for v in p {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn read_f32s<R: Read, const N: usize>(r: &mut R) -> std::io::Result<[f32; N]> {
    let mut out = [0f32; N];
    let mut b = [0u8; 4];
    for o in &mut out {
        r.read_exact(&mut b)?;
        *o = f32::from_le_bytes(b);
    }
    Ok(out)
}

pub fn read_gpts<R: Read>(mut r: R) -> Result<Vec<GptsRecord>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = bytes.as_slice();
    let mut out = Vec::new();
    while !cur.is_empty() {
        let at = bytes.len() - cur.len();
        let truncated = |_| Error::Format(format!("truncated .gpts record at byte {at}"));
        let boxed = read_f32s::<_, 7>(&mut cur).map_err(truncated)?;
        let mut nb = [0u8; 4];
        cur.read_exact(&mut nb).map_err(truncated)?;
        let n = u32::from_le_bytes(nb) as usize;
        if cur.len() < n * 16 {
            return Err(Error::Format(format!("truncated .gpts record at byte {at}")));
        }
        let mut points = Vec::with_capacity(n);
        for _ in 0..n {
            points.push(read_f32s::<_, 4>(&mut cur).map_err(truncated)?);
        }
        out.push(GptsRecord { boxed, points });
    }
    Ok(out)
}
