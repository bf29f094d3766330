//! Independent re-implementations compared against the library, and pinned hand values.

use pointforge::autodiff::{focal_value, Tape, Tensor};
use pointforge::cmff::make_grid_points;
use pointforge::eval::{ap_r40, difficulty_split, wod_difficulty, DifficultyMode, GtRecord, Scored};
use pointforge::geometry::{iou_bev, roi_align, Box2D, Box3D, FeatureMap};
use pointforge::pointcloud::{chamfer_distance, farthest_point_sample, voxelize, PointCloud, RangeSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CHAMFER_TOL: f64 = 1e-12;
pub const IOU_RASTER_TOL: f64 = 2e-2;
pub const IOU_PAIRS: usize = 500;
pub const AP_TOL: f64 = 1e-9;
pub const AP_SETS: usize = 200;
pub const ROI_ALIGN_TOL: f64 = 1e-12;

fn cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    (0..n).map(|_| [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-1.0..1.0)]).collect()
}

fn d2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Outer loop over `b`, updating both nearest-neighbor tables at once.
fn chamfer_swapped(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    let mut best_a = vec![f64::INFINITY; a.len()];
    let mut best_b = vec![f64::INFINITY; b.len()];
    for (j, q) in b.iter().enumerate() {
        for (i, p) in a.iter().enumerate() {
            let d = d2(p, q);
            best_a[i] = best_a[i].min(d);
            best_b[j] = best_b[j].min(d);
        }
    }
    best_a.iter().sum::<f64>() / a.len() as f64 + best_b.iter().sum::<f64>() / b.len() as f64
}

/// Recomputes every candidate's distance to the whole selected set at each step.
fn fps_naive(pts: &[[f64; 3]], k: usize, start: usize) -> Vec<usize> {
    let mut sel = vec![start];
    while sel.len() < k {
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, p) in pts.iter().enumerate() {
            let m = sel.iter().map(|&s| d2(p, &pts[s])).fold(f64::INFINITY, f64::min);
            if m > best.0 {
                best = (m, i);
            }
        }
        sel.push(best.1);
    }
    sel
}

fn inside_bev(b: &Box3D<f64>, x: f64, y: f64) -> bool {
    let (s, c) = b.yaw.sin_cos();
    let (dx, dy) = (x - b.center[0], y - b.center[1]);
    let lx = c * dx + s * dy;
    let ly = -s * dx + c * dy;
    lx.abs() <= 0.5 * b.size[0] && ly.abs() <= 0.5 * b.size[1]
}

/// Midpoint sampling on an `n x n` lattice over the pair's bounding square.
fn iou_raster(a: &Box3D<f64>, b: &Box3D<f64>, n: usize) -> f64 {
    let r = |x: &Box3D<f64>| 0.5 * x.size[0].hypot(x.size[1]);
    let lo_x = (a.center[0] - r(a)).min(b.center[0] - r(b));
    let hi_x = (a.center[0] + r(a)).max(b.center[0] + r(b));
    let lo_y = (a.center[1] - r(a)).min(b.center[1] - r(b));
    let hi_y = (a.center[1] + r(a)).max(b.center[1] + r(b));
    let (sx, sy) = ((hi_x - lo_x) / n as f64, (hi_y - lo_y) / n as f64);
    let (mut ia, mut ib, mut both) = (0usize, 0usize, 0usize);
    for i in 0..n {
        let x = lo_x + (i as f64 + 0.5) * sx;
        for j in 0..n {
            let y = lo_y + (j as f64 + 0.5) * sy;
            let (pa, pb) = (inside_bev(a, x, y), inside_bev(b, x, y));
            ia += pa as usize;
            ib += pb as usize;
            both += (pa && pb) as usize;
        }
    }
    both as f64 / (ia + ib - both) as f64
}

/// Max precision over every cutoff whose recall reaches each grid point,
/// compared in integers (`tp * 40 >= k * G`) to avoid rounding at the grid.
fn ap_brute(conf: &[f64], tp: &[bool], gt: usize) -> f64 {
    let mut order: Vec<usize> = (0..conf.len()).collect();
    order.sort_by(|&i, &j| conf[j].partial_cmp(&conf[i]).unwrap());
    let mut sum = 0.0;
    for k in 1..=40usize {
        let mut best = 0.0f64;
        let mut hits = 0usize;
        for (rank, &i) in order.iter().enumerate() {
            hits += tp[i] as usize;
            if hits * 40 >= k * gt {
                best = best.max(hits as f64 / (rank + 1) as f64);
            }
        }
        sum += best;
    }
    sum / 40.0
}

fn sample_naive(fm: &FeatureMap<f64>, u: f64, v: f64, c: usize) -> f64 {
    let fx = u / fm.stride;
    let fy = v / fm.stride;
    let (w, h) = (fm.width as f64, fm.height as f64);
    if fx < 0.0 || fy < 0.0 || fx > w - 1.0 || fy > h - 1.0 {
        return 0.0;
    }
    let x0 = (fx.floor() as usize).min(fm.width - 2);
    let y0 = (fy.floor() as usize).min(fm.height - 2);
    let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
    fm.at(c, y0, x0) * (1.0 - ax) * (1.0 - ay)
        + fm.at(c, y0, x0 + 1) * ax * (1.0 - ay)
        + fm.at(c, y0 + 1, x0) * (1.0 - ax) * ay
        + fm.at(c, y0 + 1, x0 + 1) * ax * ay
}

fn roi_align_naive(fm: &FeatureMap<f64>, b: &Box2D<f64>, bins: usize, n: usize) -> Vec<f64> {
    let bw = (b.u_max - b.u_min) / bins as f64;
    let bh = (b.v_max - b.v_min) / bins as f64;
    let mut out = Vec::new();
    for by in 0..bins {
        for bx in 0..bins {
            for c in 0..fm.channels {
                let mut acc = 0.0;
                for sy in 0..n {
                    for sx in 0..n {
                        let u = b.u_min + (bx as f64 + (sx as f64 + 0.5) / n as f64) * bw;
                        let v = b.v_min + (by as f64 + (sy as f64 + 0.5) / n as f64) * bh;
                        acc += sample_naive(fm, u, v, c);
                    }
                }
                out.push(acc / (n * n) as f64);
            }
        }
    }
    out
}

pub fn run() -> Vec<(String, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checks = Vec::new();

    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (na, nb) = (rng.gen_range(1..40), rng.gen_range(1..40));
        let a = cloud(&mut rng, na);
        let b = cloud(&mut rng, nb);
        let lib = chamfer_distance(&a, &b).unwrap();
        let mut tape = Tape::new();
        let va = tape.constant(Tensor::matrix(a.len(), 3, a.iter().flatten().copied().collect()).unwrap());
        let vb = tape.constant(Tensor::matrix(b.len(), 3, b.iter().flatten().copied().collect()).unwrap());
        let c = tape.chamfer(va, vb).unwrap();
        let oracle = chamfer_swapped(&a, &b);
        worst = worst.max((lib - oracle).abs()).max((tape.value(c).item() - oracle).abs());
    }
    checks.push((format!("chamfer vs swapped loops max diff {worst:.1e} <= {CHAMFER_TOL:.0e}"), worst <= CHAMFER_TOL));

    let mut fps_ok = true;
    for _ in 0..200 {
        let n = rng.gen_range(1..60);
        let pts = cloud(&mut rng, n);
        let k = rng.gen_range(1..=pts.len());
        let start = rng.gen_range(0..pts.len());
        fps_ok &= farthest_point_sample(&pts, k, start).unwrap() == fps_naive(&pts, k, start);
    }
    checks.push(("FPS equals naive greedy on 200 sets".into(), fps_ok));

    let mut worst = 0.0f64;
    for _ in 0..IOU_PAIRS {
        let mk = |rng: &mut ChaCha8Rng, c: [f64; 2]| {
            Box3D::new(
                [c[0], c[1], 0.0],
                [rng.gen_range(0.5..5.0), rng.gen_range(0.5..3.0), 1.5],
                rng.gen_range(-3.2..3.2),
            )
            .unwrap()
        };
        let a = mk(&mut rng, [0.0, 0.0]);
        let offset = [rng.gen_range(-2.5..2.5), rng.gen_range(-2.0..2.0)];
        let b = mk(&mut rng, offset);
        worst = worst.max((iou_bev(&a, &b) - iou_raster(&a, &b, 500)).abs());
    }
    checks.push((
        format!("rotated BEV IoU vs raster on {IOU_PAIRS} pairs max diff {worst:.2e} <= {IOU_RASTER_TOL:.0e}"),
        worst <= IOU_RASTER_TOL,
    ));

    let mut worst = 0.0f64;
    for _ in 0..AP_SETS {
        let n = rng.gen_range(0..60);
        let conf: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let tp: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.6)).collect();
        let gt = tp.iter().filter(|&&t| t).count() + rng.gen_range(0..10);
        if gt == 0 {
            continue;
        }
        let scored: Vec<Scored> = conf
            .iter()
            .zip(&tp)
            .map(|(&c, &t)| Scored {
                confidence: c,
                tp_weight: t.then_some(1.0),
            })
            .collect();
        worst = worst.max((ap_r40(&scored, gt).unwrap() - ap_brute(&conf, &tp, gt)).abs());
    }
    checks.push((
        format!("AP-R40 vs brute-force PR integration on {AP_SETS} sets max diff {worst:.1e} <= {AP_TOL:.0e}"),
        worst <= AP_TOL,
    ));

    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (c, h, w) = (rng.gen_range(1..4), rng.gen_range(2..9), rng.gen_range(2..9));
        let stride = [1.0, 2.0, 4.0][rng.gen_range(0..3)];
        let data = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fm = FeatureMap::new(c, h, w, stride, data).unwrap();
        let (iw, ih) = (w as f64 * stride, h as f64 * stride);
        let u0 = rng.gen_range(-0.2 * iw..iw);
        let v0 = rng.gen_range(-0.2 * ih..ih);
        let b = Box2D {
            u_min: u0,
            v_min: v0,
            u_max: u0 + rng.gen_range(0.0..0.8 * iw),
            v_max: v0 + rng.gen_range(0.0..0.8 * ih),
        };
        let bins = rng.gen_range(1..5);
        let spb = rng.gen_range(1..4);
        let lib = roi_align(&fm, &b, bins, spb);
        let naive = roi_align_naive(&fm, &b, bins, spb);
        worst = lib.iter().zip(&naive).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    checks.push((
        format!("RoI Align vs naive loop max diff {worst:.1e} <= {ROI_ALIGN_TOL:.0e}"),
        worst <= ROI_ALIGN_TOL,
    ));
    checks
}

pub fn hand_values() -> Vec<(String, bool)> {
    let mut checks = Vec::new();
    let c = chamfer_distance(&[[0.0; 3]], &[[1.0, 0.0, 0.0]]).unwrap();
    checks.push((format!("chamfer single pair {c} == 2.0"), c == 2.0));

    let f = focal_value(0.5f64, 1.0, 2.0);
    checks.push((format!("focal(s=0.5, gamma=2) {f:.6} == 0.173287"), (f - 0.173287).abs() < 5e-7));

    let pc = PointCloud::new(vec![[0.12, -0.02, 0.35]], vec![0.0], 1).unwrap();
    let range = RangeSpec {
        min: [0.0, -40.0, -3.0],
        max: [70.4, 40.0, 1.0],
    };
    let grid = voxelize(&pc, &range, [0.05, 0.05, 0.1]).unwrap();
    let idx = grid.voxels[0].index;
    checks.push((format!("voxel index {idx:?} == [2, 799, 33]"), idx == [2, 799, 33]));

    let unit = Box3D::new([0.0; 3], [1.0; 3], 0.0).unwrap();
    let g = make_grid_points(&unit, 6);
    let first = g[0];
    let e = -5.0 / 12.0;
    let first_ok = first.iter().all(|&v| (v - e).abs() < 1e-15);
    checks.push((format!("G=6 grid count {} == 216", g.len()), g.len() == 216));
    checks.push((format!("first grid center {first:?} == (-5/12, -5/12, -5/12)"), first_ok));

    let (l5, l6) = (wod_difficulty(5), wod_difficulty(6));
    let gts: Vec<GtRecord> = [5usize, 6]
        .iter()
        .map(|&n| GtRecord {
            frame: "0".into(),
            class: 0,
            boxed: unit,
            num_points: n,
            difficulty: 0,
        })
        .collect();
    let split = difficulty_split(&gts, DifficultyMode::Wod);
    checks.push((
        format!("5 points -> L2 ({l5}), 6 points -> L1 ({l6}), split {split:?}"),
        l5 == 1 && l6 == 0 && split == vec![1, 0],
    ));
    checks
}
