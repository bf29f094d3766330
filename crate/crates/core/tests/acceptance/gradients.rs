//! Central-difference gradient checks over seeded random configurations.

use pointforge::autodiff::{Mlp, MlpSpec, ParamId, ParamStore, Tape, Tensor, TransformerLayer, TransformerLayerSpec, Var};
use pointforge::cmff::{fuse, make_grid_points, pool_voxel_features, roi_image_feature, subvoxel_radius};
use pointforge::geometry::{Box3D, CameraCalibration, FeatureMap};
use pointforge::head::{canonical_features, encode_roi, rcnn_loss, refine_and_score, total_loss, RcnnHeads, RoiTarget};
use pointforge::pointcloud::{voxelize, PointCloud, RangeSpec};
use pointforge::rpg::{generate, loss_offset, loss_score, positional_encoding, refine, RpgHeads, ScoreItem};
use pointforge::rpn::{encode_bev, rpn_forward, rpn_loss, BevLayout, RpnHeads};
use pointforge::spe::{decorate, decorate_generated, ImageInput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CONFIGS: u64 = 100;
pub const TOL: f64 = 1e-4;
pub const TRANSFORMER_TOL: f64 = 1e-3;
const H: f64 = 1e-6;

type Build<'a> = dyn Fn(&mut Tape<f64>, &ParamStore<f64>) -> pointforge::Result<Var> + 'a;

/// Max over all parameter scalars of `|analytic - fd| / max(1, |analytic|)`.
pub fn check(store: &mut ParamStore<f64>, f: &Build<'_>) -> f64 {
    store.zero_grads();
    let mut tape = Tape::new();
    let y = f(&mut tape, store).expect("forward");
    assert_eq!(tape.value(y).numel(), 1, "checked function must be scalar");
    tape.backward(y, store).expect("backward");
    let analytic: Vec<Tensor<f64>> = store.iter().map(|p| p.grad.clone().expect("grad")).collect();
    let ids: Vec<ParamId> = store.ids().collect();
    let eval = |s: &ParamStore<f64>| {
        let mut t = Tape::new();
        let v = f(&mut t, s).expect("forward");
        t.value(v).item()
    };
    let mut worst = 0.0f64;
    for (k, id) in ids.into_iter().enumerate() {
        for i in 0..store.value(id).numel() {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + H;
            let fp = eval(store);
            store.value_mut(id).data_mut()[i] = orig - H;
            let fm = eval(store);
            store.value_mut(id).data_mut()[i] = orig;
            let fd = (fp - fm) / (2.0 * H);
            let a = analytic[k].data()[i];
            worst = worst.max((a - fd).abs() / a.abs().max(1.0));
        }
    }
    worst
}

/// Scalar probe `sum(y * R)` with `R` drawn from `seed`, so every output entry is exercised.
pub fn weigh(tape: &mut Tape<f64>, y: Var, seed: u64) -> pointforge::Result<Var> {
    let shape = tape.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
    let r: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let r = tape.constant(Tensor::new(shape, r)?);
    let m = tape.mul(y, r)?;
    Ok(tape.sum(m))
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn mat(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::matrix(r, c, uniform(rng, r * c, lo, hi)).unwrap()
}

/// Values with `margin <= |v| <= 1`, away from kinks at zero.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize, margin: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.gen_range(margin..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

pub struct OpResult {
    pub name: &'static str,
    pub worst: f64,
    pub tol: f64,
}

fn run(name: &'static str, tol: f64, case: impl Fn(u64) -> f64) -> OpResult {
    let worst = (0..CONFIGS).map(&case).fold(0.0, f64::max);
    OpResult { name, worst, tol }
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(1..5), rng.gen_range(1..5))
}

fn calib() -> CameraCalibration<f64> {
    CameraCalibration::pinhole(8.0, 8.0, 8.0, 4.0, [0.0, 0.0, 0.0])
}

fn feature_map(rng: &mut ChaCha8Rng, channels: usize) -> FeatureMap<f64> {
    let (h, w) = (4, 8);
    FeatureMap::new(channels, h, w, 2.0, uniform(rng, channels * h * w, -1.0, 1.0)).unwrap()
}

fn image_param(store: &mut ParamStore<f64>, fm: &FeatureMap<f64>) -> ParamId {
    store.add("image", Tensor::matrix(fm.height * fm.width, fm.channels, fm.to_pixel_major()).unwrap())
}

fn in_view_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    (0..n)
        .map(|_| [rng.gen_range(4.0..8.0), rng.gen_range(-1.5..1.5), rng.gen_range(-0.8..0.8)])
        .collect()
}

fn random_box(rng: &mut ChaCha8Rng) -> Box3D<f64> {
    Box3D::new(
        [rng.gen_range(5.0..7.0), rng.gen_range(-0.5..0.5), rng.gen_range(-0.3..0.3)],
        [rng.gen_range(1.5..3.0), rng.gen_range(0.8..1.6), rng.gen_range(0.8..1.6)],
        rng.gen_range(-3.0..3.0),
    )
    .unwrap()
}

fn primitive_ops() -> Vec<OpResult> {
    let mut out = Vec::new();
    out.push(run("matmul", TOL, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, k) = dims(&mut rng);
        let m = rng.gen_range(1..5);
        let mut s = ParamStore::new();
        let a = s.add("a", mat(&mut rng, n, k, -1.0, 1.0));
        let b = s.add("b", mat(&mut rng, k, m, -1.0, 1.0));
        check(&mut s, &|t, s| {
            let (a, b) = (t.param(s, a), t.param(s, b));
            let y = t.matmul(a, b)?;
            weigh(t, y, seed)
        })
    }));
    out.push(run("transpose", TOL, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, c) = dims(&mut rng);
        let mut s = ParamStore::new();
        let a = s.add("a", mat(&mut rng, n, c, -1.0, 1.0));
        check(&mut s, &|t, s| {
            let a = t.param(s, a);
            let y = t.transpose(a)?;
            weigh(t, y, seed)
        })
    }));
    out.push(run("add_sub_mul", TOL, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, c) = dims(&mut rng);
        let mut s = ParamStore::new();
        let a = s.add("a", mat(&mut rng, n, c, -1.0, 1.0));
        let b = s.add("b", mat(&mut rng, n, c, -1.0, 1.0));
        check(&mut s, &|t, s| {
            let (a, b) = (t.param(s, a), t.param(s, b));
            let p = t.add(a, b)?;
            let q = t.sub(a, b)?;
            let y = t.mul(p, q)?;
            weigh(t, y, seed)
        })
    }));
    out.push(run("row_broadcast", TOL, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, c) = dims(&mut rng);
        let mut s = ParamStore::new();
        let x = s.add("x", mat(&mut rng, n, c, -1.0, 1.0));
        let b = s.add("b", Tensor::new(vec![c], uniform(&mut rng, c, -1.0, 1.0)).unwrap());
        let g = s.add("g", Tensor::new(vec![c], uniform(&mut rng, c, -1.0, 1.0)).unwrap());
        check(&mut s, &|t, s| {
            let (x, b, g) = (t.param(s, x), t.param(s, b), t.param(s, g));
            let y = t.add_row(x, b)?;
            let y = t.mul_row(y, g)?;
            let y = t.scale(y, 1.7);
            let y = t.add_scalar(y, -0.3);
            weigh(t, y, seed)
        })
    }));
    out.push(run("relu", TOL, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, c) = dims(&mut rng);
        let mut s = ParamStore::new();
        let x = s.add("x", Tensor::matrix(n, c, away_from_zero(&mut rng, n * c, 0.05)).unwrap());
        check(&mut s, &|t, s| {
            let x = t.param(s, x);
            let y = t.relu(x);
            weigh(t, y, seed)
        })
    }));
    out.push(run("sigmoid", TOL, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, c) = dims(&mut rng);
        let mut s = ParamStore::new();
        let x = s.add("x", mat(&mut rng, n, c, -4.0, 4.0));
        check(&mut s, &|t, s| {
            let x = t.param(s, x);
            let y = t.sigmoid(x);
            weigh(t, y, seed)
        })
    }));
    out.push(run("clamp", TOL, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, c) = dims(&mut rng);
        let mut s = ParamStore::new();
        let v: Vec<f64> = (0..n * c)
            .map(|_| {
                let m = if rng.gen_bool(0.5) { rng.gen_range(0.0..0.45) } else { rng.gen_range(0.55..1.5) };
                if rng.gen_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect();
        let x = s.add("x", Tensor::matrix(n, c, v).unwrap());
        check(&mut s, &|t, s| {
            let x = t.param(s, x);
            let y = t.clamp(x, -0.5, 0.5);
            weigh(t, y, seed)
        })
    }));
    out.push(run("log_sqrt", TOL, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, c) = dims(&mut rng);
        let mut s = ParamStore::new();
        let x = s.add("x", mat(&mut rng, n, c, 0.5, 3.0));
        check(&mut s, &|t, s| {
            let x = t.param(s, x);
            let l = t.log(x)?;
            let r = t.sqrt(x)?;
            let y = t.add(l, r)?;
            weigh(t, y, seed)
        })
    }));
    out.push(run("sum_mean_reshape", TOL, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, c) = dims(&mut rng);
        let mut s = ParamStore::new();
        let x = s.add("x", mat(&mut rng, n, c, -1.0, 1.0));
        check(&mut s, &|t, s| {
            let x = t.param(s, x);
            let r = t.reshape(x, &[c, n])?;
            let w = weigh(t, r, seed)?;
            let m = t.mean(x)?;
            let q = t.mul(m, m)?;
            let sum = t.sum(x);
            let y = t.add(w, q)?;
            let y = t.add(y, sum)?;
            Ok(y)
        })
    }));
    out.push(run("concat_slice_gather", TOL, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, c) = dims(&mut rng);
        let mut s = ParamStore::new();
        let a = s.add("a", mat(&mut rng, n, c, -1.0, 1.0));
        let b = s.add("b", mat(&mut rng, n, 2, -1.0, 1.0));
        let idx: Vec<usize> = (0..rng.gen_range(1..7)).map(|_| rng.gen_range(0..n)).collect();
        check(&mut s, &|t, s| {
            let (a, b) = (t.param(s, a), t.param(s, b));
            let cols = t.concat_cols(&[a, b])?;
            let rows = t.concat_rows(&[cols, cols])?;
            let sc = t.slice_cols(rows, 1, c + 1)?;
            let sr = t.slice_rows(sc, n / 2, n)?;
            let g = t.gather_rows(sr, &idx)?;
            weigh(t, g, seed)
        })
    }));
    out.push(run("weighted_gather", TOL, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, c) = dims(&mut rng);
        let mut s = ParamStore::new();
        let x = s.add("x", mat(&mut rng, n, c, -1.0, 1.0));
        let mut offsets = vec![0];
        let mut idx = Vec::new();
        let mut w = Vec::new();
        for _ in 0..rng.gen_range(1..5) {
            for _ in 0..rng.gen_range(0..4) {
                idx.push(rng.gen_range(0..n));
                w.push(rng.gen_range(-1.0..1.0));
            }
            offsets.push(idx.len());
        }
        check(&mut s, &|t, s| {
            let x = t.param(s, x);
            let y = t.weighted_gather(x, offsets.clone(), idx.clone(), w.clone())?;
            weigh(t, y, seed)
        })
    }));
    out.push(run("segment_max", TOL, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = rng.gen_range(1..4);
        let mut offsets = vec![0];
        for _ in 0..rng.gen_range(1..4) {
            let next = offsets.last().unwrap() + rng.gen_range(0..4);
            offsets.push(next);
        }
        let n = *offsets.last().unwrap();
        if n == 0 {
            return 0.0;
        }
        // Distinct values on a 0.1 lattice plus small noise keep the argmax stable.
        let mut levels: Vec<f64> = (0..n * c).map(|k| 0.1 * k as f64).collect();
        for i in (1..levels.len()).rev() {
            levels.swap(i, rng.gen_range(0..=i));
        }
        let v: Vec<f64> = levels.iter().map(|l| l + rng.gen_range(-0.01..0.01)).collect();
        let mut s = ParamStore::new();
        let x = s.add("x", Tensor::matrix(n, c, v).unwrap());
        check(&mut s, &|t, s| {
            let x = t.param(s, x);
            let y = t.segment_max(x, &offsets)?;
            weigh(t, y, seed)
        })
    }));
    out.push(run("softmax_rows", TOL, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, c) = dims(&mut rng);
        let mut s = ParamStore::new();
        let x = s.add("x", mat(&mut rng, n, c, -3.0, 3.0));
        check(&mut s, &|t, s| {
            let x = t.param(s, x);
            let y = t.softmax_rows(x)?;
            weigh(t, y, seed)
        })
    }));
    out.push(run("layer_norm", TOL, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..5);
        let c = rng.gen_range(2..6);
        let mut s = ParamStore::new();
        let x = s.add("x", mat(&mut rng, n, c, -2.0, 2.0));
        check(&mut s, &|t, s| {
            let x = t.param(s, x);
            let y = t.layer_norm(x, 1e-5)?;
            weigh(t, y, seed)
        })
    }));
    out.push(run("row_norm", TOL, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, c) = dims(&mut rng);
        let mut s = ParamStore::new();
        let x = s.add("x", Tensor::matrix(n, c, away_from_zero(&mut rng, n * c, 0.2)).unwrap());
        check(&mut s, &|t, s| {
            let x = t.param(s, x);
            let y = t.row_norm(x)?;
            weigh(t, y, seed)
        })
    }));
    out.push(run("smooth_l1", TOL, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, c) = dims(&mut rng);
        let beta = rng.gen_range(0.1..1.0);
        let target = uniform(&mut rng, n * c, -1.0, 1.0);
        // Residuals either well inside or well outside the quadratic zone.
        let pred: Vec<f64> = target
            .iter()
            .map(|&y| {
                let m = if rng.gen_bool(0.5) { rng.gen_range(0.05..0.9) * beta } else { beta * rng.gen_range(1.1..3.0) };
                if rng.gen_bool(0.5) {
                    y + m
                } else {
                    y - m
                }
            })
            .collect();
        let mut s = ParamStore::new();
        let p = s.add("p", Tensor::matrix(n, c, pred).unwrap());
        let y = s.add("y", Tensor::matrix(n, c, target).unwrap());
        check(&mut s, &|t, s| {
            let (p, y) = (t.param(s, p), t.param(s, y));
            Ok(t.smooth_l1(p, y, beta)?)
        })
    }));
    out.push(run("focal", TOL, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, c) = dims(&mut rng);
        let gamma = [0.0, 1.0, 2.0][rng.gen_range(0..3)];
        let y: Vec<f64> = (0..n * c).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let mut s = ParamStore::new();
        let p = s.add("p", mat(&mut rng, n, c, 0.05, 0.95));
        check(&mut s, &|t, s| {
            let p = t.param(s, p);
            let l = t.focal(p, &y, gamma)?;
            Ok(t.sum(l))
        })
    }));
    out.push(run("chamfer", TOL, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = rng.gen_range(1..7);
        let k = rng.gen_range(1..7);
        let mut s = ParamStore::new();
        let a = s.add("a", mat(&mut rng, m, 3, -1.0, 1.0));
        let b = s.add("b", mat(&mut rng, k, 3, -1.0, 1.0));
        check(&mut s, &|t, s| {
            let (a, b) = (t.param(s, a), t.param(s, b));
            Ok(t.chamfer(a, b)?)
        })
    }));
    out
}

fn small_mlp(s: &mut ParamStore<f64>, name: &str, widths: Vec<usize>, seed: u64) -> Mlp {
    Mlp::new(s, name, MlpSpec::relu_hidden(widths, seed).unwrap())
}

fn module_ops() -> Vec<OpResult> {
    let mut out = Vec::new();
    out.push(run("mlp", TOL, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, c) = dims(&mut rng);
        let mut s = ParamStore::new();
        let x = s.add("x", mat(&mut rng, n, c, -1.0, 1.0));
        let mlp = small_mlp(&mut s, "mlp", vec![c, 5, 3], seed);
        check(&mut s, &|t, s| {
            let x = t.param(s, x);
            let y = mlp.forward(t, s, x)?;
            weigh(t, y, seed)
        })
    }));
    out.push(run("transformer_layer", TRANSFORMER_TOL, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..5);
        let mut s = ParamStore::new();
        let x = s.add("x", mat(&mut rng, n, 4, -1.0, 1.0));
        let layer = TransformerLayer::new(&mut s, "tf", TransformerLayerSpec::new(4, 2, 6, seed).unwrap());
        check(&mut s, &|t, s| {
            let x = t.param(s, x);
            let y = layer.forward(t, s, x)?;
            weigh(t, y, seed)
        })
    }));
    out.push(run("semantic_point_encoding", TOL, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..6);
        let ch = rng.gen_range(1..3);
        let fm = feature_map(&mut rng, ch);
        let cal = calib();
        let mut coords = in_view_points(&mut rng, n);
        coords.push([-3.0, 0.0, 0.0]);
        let feats = uniform(&mut rng, coords.len(), 0.0, 1.0);
        let pc = PointCloud::new(coords, feats, 1).unwrap();
        let mut s = ParamStore::new();
        let img = image_param(&mut s, &fm);
        let mlp = small_mlp(&mut s, "spe", vec![1 + ch, 4], seed);
        check(&mut s, &|t, s| {
            let var = t.param(s, img);
            let d = decorate(t, s, &pc, ImageInput { map: &fm, var }, &cal, &mlp)?;
            weigh(t, d.features, seed)
        })
    }));
    out.push(run("semantic_point_encoding_generated", TOL, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..6);
        let fm = feature_map(&mut rng, 2);
        let cal = calib();
        let coords = in_view_points(&mut rng, n);
        let mut s = ParamStore::new();
        let img = image_param(&mut s, &fm);
        let sem = s.add("sem", mat(&mut rng, n, 3, -1.0, 1.0));
        let mlp = small_mlp(&mut s, "spe", vec![5, 4], seed);
        check(&mut s, &|t, s| {
            let var = t.param(s, img);
            let sem = t.param(s, sem);
            let (f, _) = decorate_generated(t, s, &coords, sem, ImageInput { map: &fm, var }, &cal, &mlp)?;
            weigh(t, f, seed)
        })
    }));
    out.push(run("voxel_grid_pooling", TOL, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = random_box(&mut rng);
        let pts: Vec<[f64; 3]> = (0..rng.gen_range(5..20))
            .map(|_| {
                [
                    b.center[0] + rng.gen_range(-1.5..1.5),
                    b.center[1] + rng.gen_range(-1.0..1.0),
                    b.center[2] + rng.gen_range(-0.8..0.8),
                ]
            })
            .collect();
        let pc = PointCloud::new(pts.clone(), vec![0.0; pts.len()], 1).unwrap();
        let range = RangeSpec {
            min: [0.0, -4.0, -2.0],
            max: [10.0, 4.0, 2.0],
        };
        let grid = voxelize(&pc, &range, [0.5, 0.5, 0.5]).unwrap();
        let g = make_grid_points(&b, 2);
        let radius = subvoxel_radius(&b, 2) * 1.5;
        let mut s = ParamStore::new();
        let vf = s.add("vf", mat(&mut rng, grid.len(), 3, -1.0, 1.0));
        let mlp = small_mlp(&mut s, "pool", vec![6, 4], seed);
        check(&mut s, &|t, s| {
            let vf = t.param(s, vf);
            let y = pool_voxel_features(t, s, &grid, vf, &g, radius, 4, &mlp)?;
            weigh(t, y, seed)
        })
    }));
    out.push(run("roi_image_feature", TOL, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fm = feature_map(&mut rng, 2);
        let cal = calib();
        let b = random_box(&mut rng);
        let mut s = ParamStore::new();
        let img = image_param(&mut s, &fm);
        let mlp = small_mlp(&mut s, "roi", vec![2 * 2 * 2, 3], seed);
        check(&mut s, &|t, s| {
            let var = t.param(s, img);
            let y = roi_image_feature(t, s, &b, ImageInput { map: &fm, var }, &cal, 1.2, 2, 2, &mlp)?;
            weigh(t, y, seed)
        })
    }));
    out.push(run("cross_modal_fusion", TOL, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..6);
        let mut s = ParamStore::new();
        let fv = s.add("fv", mat(&mut rng, n, 3, -1.0, 1.0));
        let fi = s.add("fi", mat(&mut rng, n, 2, -1.0, 1.0));
        let fb = s.add("fb", mat(&mut rng, 1, 2, -1.0, 1.0));
        let mlp = small_mlp(&mut s, "fuse", vec![7, 4], seed);
        check(&mut s, &|t, s| {
            let (fv, fi, fb) = (t.param(s, fv), t.param(s, fi), t.param(s, fb));
            let y = fuse(t, s, fv, fi, fb, &mlp)?;
            weigh(t, y, seed)
        })
    }));
    out.push(run("positional_encoding", TOL, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = random_box(&mut rng);
        let g = make_grid_points(&b, 2);
        let mut s = ParamStore::new();
        let ffn = small_mlp(&mut s, "pos", vec![27, 5, 4], seed);
        check(&mut s, &|t, s| {
            let y = positional_encoding(t, s, &b, &g, &ffn)?;
            weigh(t, y, seed)
        })
    }));
    out.push(run("point_refinement", TRANSFORMER_TOL, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..6);
        let mut s = ParamStore::new();
        let fused = s.add("fused", mat(&mut rng, n, 4, -1.0, 1.0));
        let delta = s.add("delta", mat(&mut rng, n, 4, -1.0, 1.0));
        let layers = vec![TransformerLayer::new(&mut s, "tf", TransformerLayerSpec::new(4, 2, 6, seed).unwrap())];
        check(&mut s, &|t, s| {
            let (f, d) = (t.param(s, fused), t.param(s, delta));
            let y = refine(t, s, f, d, &layers)?;
            weigh(t, y, seed)
        })
    }));
    out.push(run("point_generation", TOL, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = random_box(&mut rng);
        let g = make_grid_points(&b, 2);
        let mut s = ParamStore::new();
        let refined = s.add("refined", mat(&mut rng, g.len(), 4, -1.0, 1.0));
        let heads = RpgHeads {
            offset: small_mlp(&mut s, "off", vec![4, 5, 3 + 2], seed),
            score: small_mlp(&mut s, "score", vec![2, 1], seed + 1),
        };
        check(&mut s, &|t, s| {
            let r = t.param(s, refined);
            let p = generate(t, s, r, &g, &heads)?;
            let a = weigh(t, p.coords, seed)?;
            let b = weigh(t, p.semantic, seed + 1)?;
            let c = weigh(t, p.scores, seed + 2)?;
            let y = t.add(a, b)?;
            Ok(t.add(y, c)?)
        })
    }));
    out.push(run("offset_loss", TOL, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let rois = rng.gen_range(1..4);
        let mut ids = Vec::new();
        let mut dense = Vec::new();
        for r in 0..rois {
            let n = rng.gen_range(1..6);
            ids.push(s.add(format!("c{r}"), mat(&mut rng, n, 3, -1.0, 1.0)));
            dense.push(
                (0..rng.gen_range(1..6))
                    .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
                    .collect::<Vec<_>>(),
            );
        }
        check(&mut s, &|t, s| {
            let vars: Vec<Var> = ids.iter().map(|&i| t.param(s, i)).collect();
            let items: Vec<(Var, &[[f64; 3]])> = vars.iter().zip(&dense).map(|(&v, d)| (v, d.as_slice())).collect();
            Ok(loss_offset(t, &items)?.value)
        })
    }));
    out.push(run("score_loss", TOL, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = random_box(&mut rng);
        let g = make_grid_points(&b, 2);
        let coords: Vec<[f64; 3]> = g.iter().map(|p| [p[0] + rng.gen_range(-0.5..0.5), p[1], p[2]]).collect();
        let mut s = ParamStore::new();
        let sc = s.add("scores", mat(&mut rng, g.len(), 1, 0.05, 0.95));
        let gt = if rng.gen_bool(0.8) { Some(b) } else { None };
        let n_s = rng.gen_range(1..10);
        check(&mut s, &|t, s| {
            let scores = t.param(s, sc);
            let items = [ScoreItem { scores, coords: &coords, gt }];
            loss_score(t, &items, 2.0, n_s, Some(seed))
        })
    }));
    out.push(run("canonical_features", TOL, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = random_box(&mut rng);
        let n = rng.gen_range(1..6);
        let pts: Vec<f64> = (0..n)
            .flat_map(|_| {
                [
                    b.center[0] + rng.gen_range(-1.0..1.0),
                    b.center[1] + rng.gen_range(-1.0..1.0),
                    b.center[2] + rng.gen_range(-1.0..1.0),
                ]
            })
            .collect();
        let mut s = ParamStore::new();
        let c = s.add("coords", Tensor::matrix(n, 3, pts).unwrap());
        let sc = s.add("scores", mat(&mut rng, n, 1, 0.05, 0.95));
        let mlp = small_mlp(&mut s, "canon", vec![5, 4], seed);
        check(&mut s, &|t, s| {
            let (c, sc) = (t.param(s, c), t.param(s, sc));
            let y = canonical_features(t, s, &b, c, sc, &mlp)?;
            weigh(t, y, seed)
        })
    }));
    out.push(run("roi_encoder_and_head", TOL, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..6);
        let mut s = ParamStore::new();
        let c = s.add("coords", mat(&mut rng, n, 3, -1.0, 1.0));
        let can = s.add("canonical", mat(&mut rng, n, 2, -1.0, 1.0));
        let sem = s.add("semantic", mat(&mut rng, n, 2, -1.0, 1.0));
        let im = s.add("image", mat(&mut rng, n, 2, -1.0, 1.0));
        let heads = RcnnHeads {
            point: Mlp::new(&mut s, "point", MlpSpec::relu_all(vec![9, 5], seed).unwrap()),
            outer: Mlp::new(&mut s, "outer", MlpSpec::relu_all(vec![5, 5], seed + 1).unwrap()),
            reg: small_mlp(&mut s, "reg", vec![5, 4, 7], seed + 2),
            cls: small_mlp(&mut s, "cls", vec![5, 4, 1], seed + 3),
        };
        check(&mut s, &|t, s| {
            let (c, can, sem, im) = (t.param(s, c), t.param(s, can), t.param(s, sem), t.param(s, im));
            let roi = encode_roi(t, s, c, can, sem, im, &heads.point, &heads.outer)?;
            let (res, conf) = refine_and_score(t, s, roi, &heads)?;
            let a = weigh(t, res, seed)?;
            let b = weigh(t, conf, seed + 1)?;
            Ok(t.add(a, b)?)
        })
    }));
    out.push(run("refinement_loss", TOL, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = rng.gen_range(1..5);
        let boxes: Vec<Box3D<f64>> = (0..r).map(|_| random_box(&mut rng)).collect();
        let targets: Vec<RoiTarget> = boxes
            .iter()
            .map(|_| {
                let positive = rng.gen_bool(0.6);
                RoiTarget {
                    gt: positive.then(|| random_box(&mut rng)),
                    iou3d: rng.gen_range(0.0..1.0),
                    positive,
                }
            })
            .collect();
        let beta = 1.0 / 9.0;
        let mut s = ParamStore::new();
        let conf = s.add("conf", mat(&mut rng, r, 1, 0.05, 0.95));
        let res = s.add("res", mat(&mut rng, r, 7, -1.0, 1.0));
        check(&mut s, &|t, s| {
            let (c, r) = (t.param(s, conf), t.param(s, res));
            let l = rcnn_loss(t, c, r, &boxes, &targets, beta)?;
            let rpn_like = t.scale(l.reg, 0.5);
            total_loss(t, &[(l.total, 1.0), (rpn_like, 0.3)])
        })
    }));
    out.push(run("bev_and_proposal_loss", TOL, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let range = RangeSpec {
            min: [0.0, -2.0, -2.0],
            max: [4.0, 2.0, 2.0],
        };
        let pts: Vec<[f64; 3]> = (0..rng.gen_range(3..15))
            .map(|_| [rng.gen_range(0.0..4.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)])
            .collect();
        let pc = PointCloud::new(pts.clone(), vec![0.0; pts.len()], 1).unwrap();
        let grid = voxelize(&pc, &range, [0.5, 0.5, 1.0]).unwrap();
        let layout = BevLayout::new(&range, 1.0).unwrap();
        let mut s = ParamStore::new();
        let vf = s.add("vf", mat(&mut rng, grid.len(), 2, -1.0, 1.0));
        let bev_mlp = small_mlp(&mut s, "bev", vec![5, 3], seed);
        let heads = RpnHeads {
            trunk: small_mlp(&mut s, "trunk", vec![9 * 3, 4], seed + 1),
            cls: small_mlp(&mut s, "cls", vec![4, 2], seed + 2),
            reg: small_mlp(&mut s, "reg", vec![4, 14], seed + 3),
            context: 1,
            per_cell: 2,
        };
        let anchors: Vec<usize> = (0..layout.num_cells() * 2).filter(|_| rng.gen_bool(0.5)).collect();
        let labels: Vec<i8> = anchors.iter().map(|_| [-1, 0, 1][rng.gen_range(0..3)]).collect();
        let targets: Vec<[f64; 7]> = anchors.iter().map(|_| std::array::from_fn(|_| rng.gen_range(-3.0..3.0))).collect();
        check(&mut s, &|t, s| {
            let v = t.param(s, vf);
            let bev = encode_bev(t, s, &grid, v, layout, &bev_mlp)?;
            let out = rpn_forward(t, s, &bev, &heads)?;
            let w = weigh(t, out.scores, seed)?;
            let (sc, res) = out.gather(t, &anchors)?;
            if anchors.is_empty() {
                return Ok(w);
            }
            let l = rpn_loss(t, sc, res, &labels, &targets, 2.0, 1.0 / 9.0)?;
            Ok(t.add(w, l.total)?)
        })
    }));
    out
}

pub fn all() -> Vec<OpResult> {
    let mut v = primitive_ops();
    v.extend(module_ops());
    v
}
