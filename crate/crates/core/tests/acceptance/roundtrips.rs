//! Geometric inverses and byte-exact file round trips.

use pointforge::autodiff::{read_checkpoint, write_checkpoint, ParamStore, Tensor};
use pointforge::data::kitti::{read_label_rows, write_label_rows};
use pointforge::data::{read_calib, read_velodyne, write_calib, write_velodyne, KittiLabel};
use pointforge::densify::{read_dgtb, write_dgtb, DenseObjectTemplate, Provenance};
use pointforge::geometry::{canonical_transform, inverse_canonical_transform, read_fmap, write_fmap, Box3D, CameraCalibration, FeatureMap};
use pointforge::pointcloud::PointCloud;
use pointforge::rpg::{read_gpts, write_gpts, GptsRecord};
use pointforge::rpn::{decode_residual, encode_residual};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const PROJECTION_TOL: f64 = 1e-9;
pub const CANONICAL_TOL: f64 = 1e-12;
pub const RESIDUAL_TOL: f64 = 1e-9;

fn rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let axis: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.1..1.0)];
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let [x, y, z] = axis.map(|a| a / n);
    let (s, c) = rng.gen_range(-0.3f64..0.3).sin_cos();
    let t = 1.0 - c;
    [
        [c + x * x * t, x * y * t - z * s, x * z * t + y * s],
        [y * x * t + z * s, c + y * y * t, y * z * t - x * s],
        [z * x * t - y * s, z * y * t + x * s, c + z * z * t],
    ]
}

fn random_calib(rng: &mut ChaCha8Rng) -> CameraCalibration<f64> {
    let base = CameraCalibration::pinhole(
        rng.gen_range(300.0..900.0),
        rng.gen_range(300.0..900.0),
        rng.gen_range(200.0..700.0),
        rng.gen_range(100.0..300.0),
        [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)],
    );
    let wobble = rotation(rng);
    let mut tr = base.tr;
    for i in 0..3 {
        for j in 0..4 {
            tr[i][j] = (0..3).map(|k| wobble[i][k] * base.tr[k][j]).sum();
        }
    }
    let mut p = base.p;
    p[0][3] = rng.gen_range(-50.0..50.0);
    p[1][3] = rng.gen_range(-1.0..1.0);
    p[2][3] = rng.gen_range(-0.01..0.01);
    CameraCalibration { p, r0: rotation(rng), tr }
}

fn mat4(top: [[f64; 4]; 3]) -> [[f64; 4]; 4] {
    [top[0], top[1], top[2], [0.0, 0.0, 0.0, 1.0]]
}

fn mul4(a: &[[f64; 4]; 4], b: &[[f64; 4]; 4]) -> [[f64; 4]; 4] {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..4).map(|k| a[i][k] * b[k][j]).sum()))
}

/// `P * R0 * Tr` as one homogeneous product.
fn project_homogeneous(c: &CameraCalibration<f64>, p: [f64; 3]) -> [f64; 3] {
    let r0 = [
        [c.r0[0][0], c.r0[0][1], c.r0[0][2], 0.0],
        [c.r0[1][0], c.r0[1][1], c.r0[1][2], 0.0],
        [c.r0[2][0], c.r0[2][1], c.r0[2][2], 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ];
    let m = mul4(&mul4(&mat4(c.p), &r0), &mat4(c.tr));
    let h: [f64; 4] = std::array::from_fn(|i| m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2] + m[i][3]);
    [h[0] / h[2], h[1] / h[2], h[2]]
}

fn random_box(rng: &mut ChaCha8Rng) -> Box3D<f64> {
    Box3D::new(
        [rng.gen_range(-40.0..40.0), rng.gen_range(-40.0..40.0), rng.gen_range(-3.0..1.0)],
        [rng.gen_range(0.3..6.0), rng.gen_range(0.3..3.0), rng.gen_range(0.5..3.0)],
        rng.gen_range(-3.14..3.14),
    )
    .unwrap()
}

fn f32_exact(rng: &mut ChaCha8Rng, scale: f32) -> f64 {
    (rng.gen_range(-1.0f32..1.0) * scale) as f64
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

/// Writes, reads back, writes again; both the bytes and the decoded values must match.
fn byte_exact<T, W, R>(value: &T, write: W, read: R, same: impl Fn(&T, &T) -> bool) -> bool
where
    W: Fn(&T, &mut Vec<u8>),
    R: Fn(&[u8]) -> T,
{
    let mut first = Vec::new();
    write(value, &mut first);
    let back = read(&first);
    let mut second = Vec::new();
    write(&back, &mut second);
    first == second && same(value, &back)
}

pub fn run() -> Vec<(String, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut checks = Vec::new();

    let (mut proj, mut rect) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let calib = random_calib(&mut rng);
        calib.validate().unwrap();
        for _ in 0..40 {
            let p = [rng.gen_range(5.0..70.0), rng.gen_range(-20.0..20.0), rng.gen_range(-3.0..2.0)];
            let lib = calib.project(p);
            let oracle = project_homogeneous(&calib, p);
            proj = proj
                .max((lib.u - oracle[0]).abs() / oracle[0].abs().max(1.0))
                .max((lib.v - oracle[1]).abs() / oracle[1].abs().max(1.0));
            let back = calib.rect_to_lidar(calib.lidar_to_rect(p));
            rect = (0..3).map(|k| (back[k] - p[k]).abs()).fold(rect, f64::max);
        }
    }
    checks.push((
        format!("projection vs homogeneous product rel err {proj:.1e} <= {PROJECTION_TOL:.0e}"),
        proj <= PROJECTION_TOL,
    ));
    checks.push((
        format!("rect -> lidar inverse err {rect:.1e} <= {PROJECTION_TOL:.0e}"),
        rect <= PROJECTION_TOL,
    ));

    let (mut canon, mut resid) = (0.0f64, 0.0f64);
    for _ in 0..500 {
        let b = random_box(&mut rng);
        let pts: Vec<[f64; 3]> = (0..20)
            .map(|_| [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-2.0..2.0)])
            .collect();
        let back = inverse_canonical_transform(&b, &canonical_transform(&b, &pts));
        for (p, q) in pts.iter().zip(&back) {
            canon = (0..3).map(|k| (p[k] - q[k]).abs()).fold(canon, f64::max);
        }
        let anchor = random_box(&mut rng);
        let mut gt = random_box(&mut rng);
        gt.center = [
            anchor.center[0] + rng.gen_range(-3.0..3.0),
            anchor.center[1] + rng.gen_range(-3.0..3.0),
            anchor.center[2] + rng.gen_range(-1.0..1.0),
        ];
        let dec = decode_residual(&anchor, &encode_residual(&gt, &anchor)).unwrap();
        let yaw = (dec.yaw - gt.yaw).sin().abs();
        resid = (0..3)
            .map(|k| (dec.center[k] - gt.center[k]).abs().max((dec.size[k] - gt.size[k]).abs()))
            .fold(resid.max(yaw), f64::max);
    }
    checks.push((
        format!("canonical transform inverse err {canon:.1e} <= {CANONICAL_TOL:.0e}"),
        canon <= CANONICAL_TOL,
    ));
    checks.push((
        format!("residual encode/decode err {resid:.1e} <= {RESIDUAL_TOL:.0e}"),
        resid <= RESIDUAL_TOL,
    ));

    let n = 300;
    let cloud = PointCloud::new(
        (0..n).map(|_| [rng.gen::<f32>() * 70.0, rng.gen::<f32>() * 80.0 - 40.0, rng.gen::<f32>() * 4.0 - 3.0]).collect(),
        (0..n).map(|_| rng.gen::<f32>()).collect(),
        1,
    )
    .unwrap();
    let ok = byte_exact(
        &cloud,
        |c, w| write_velodyne(c, w).unwrap(),
        |b| read_velodyne(b).unwrap(),
        |a, b| {
            a.coords.iter().flatten().map(|v| v.to_bits()).eq(b.coords.iter().flatten().map(|v| v.to_bits()))
                && a.features.iter().map(|v| v.to_bits()).eq(b.features.iter().map(|v| v.to_bits()))
        },
    );
    checks.push(("velodyne .bin bit-exact".into(), ok));

    let calib = random_calib(&mut rng);
    let ok = byte_exact(
        &calib,
        |c, w| write_calib(c, w).unwrap(),
        |b| read_calib(b).unwrap(),
        |a, b| {
            bits(&a.p.concat()) == bits(&b.p.concat())
                && bits(&a.r0.concat()) == bits(&b.r0.concat())
                && bits(&a.tr.concat()) == bits(&b.tr.concat())
        },
    );
    checks.push(("calibration text bit-exact".into(), ok));

    let labels: Vec<KittiLabel> = (0..12)
        .map(|i| KittiLabel {
            kind: ["Car", "Pedestrian", "Cyclist", "DontCare"][i % 4].into(),
            truncated: rng.gen_range(0.0..1.0),
            occluded: rng.gen_range(0..4),
            alpha: rng.gen_range(-3.14..3.14),
            bbox: std::array::from_fn(|_| rng.gen_range(0.0..1200.0)),
            dims: std::array::from_fn(|_| rng.gen_range(0.5..5.0)),
            location: std::array::from_fn(|_| rng.gen_range(-20.0..60.0)),
            rotation_y: rng.gen_range(-3.14..3.14),
        })
        .collect();
    let ok = byte_exact(
        &labels,
        |l, w| write_label_rows(l, w).unwrap(),
        |b| read_label_rows(b).unwrap(),
        |a, b| {
            a.len() == b.len()
                && a.iter().zip(b).all(|(x, y)| {
                    x.kind == y.kind
                        && x.occluded == y.occluded
                        && bits(&[x.truncated, x.alpha, x.rotation_y]) == bits(&[y.truncated, y.alpha, y.rotation_y])
                        && bits(&x.bbox) == bits(&y.bbox)
                        && bits(&x.dims) == bits(&y.dims)
                        && bits(&x.location) == bits(&y.location)
                })
        },
    );
    checks.push(("label rows bit-exact".into(), ok));

    let (c, h, w) = (4, 6, 9);
    // Both binary formats store f32, so the in-memory values start out f32-exact.
    let fm = FeatureMap::new(c, h, w, 4.0, (0..c * h * w).map(|_| f32_exact(&mut rng, 2.0)).collect()).unwrap();
    let ok = byte_exact(
        &fm,
        |f, out| write_fmap(f, out).unwrap(),
        |b| read_fmap::<f64, _>(b).unwrap(),
        |a, b| {
            (a.channels, a.height, a.width) == (b.channels, b.height, b.width)
                && a.stride.to_bits() == b.stride.to_bits()
                && bits(&a.data) == bits(&b.data)
        },
    );
    checks.push(("feature map bit-exact".into(), ok));

    let records: Vec<GptsRecord> = (0..5)
        .map(|_| GptsRecord {
            boxed: std::array::from_fn(|_| rng.gen::<f32>() * 10.0),
            points: (0..rng.gen_range(0..50)).map(|_| std::array::from_fn(|_| rng.gen::<f32>())).collect(),
        })
        .collect();
    let ok = byte_exact(
        &records,
        |r, w| write_gpts(r, w).unwrap(),
        |b| read_gpts(b).unwrap(),
        |a, b| {
            let flat = |r: &[GptsRecord]| -> Vec<u32> {
                r.iter()
                    .flat_map(|x| x.boxed.iter().chain(x.points.iter().flatten()).map(|v| v.to_bits()).collect::<Vec<_>>())
                    .collect()
            };
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.points.len() == y.points.len()) && flat(a) == flat(b)
        },
    );
    checks.push(("generated points bit-exact".into(), ok));

    let templates: Vec<DenseObjectTemplate> = (0..6)
        .map(|i| DenseObjectTemplate {
            id: rng.gen(),
            class: i % 3,
            dims: std::array::from_fn(|_| 0.5 + f32_exact(&mut rng, 2.0).abs()),
            points: (0..rng.gen_range(1..80)).map(|_| std::array::from_fn(|_| f32_exact(&mut rng, 2.0))).collect(),
            source_frames: rng.gen_range(1..9),
            provenance: Provenance::default(),
        })
        .collect();
    let ok = byte_exact(
        &templates,
        |t, w| write_dgtb(t, w).unwrap(),
        |b| read_dgtb(b).unwrap(),
        |a, b| {
            a.len() == b.len()
                && a.iter().zip(b).all(|(x, y)| {
                    (x.id, x.class) == (y.id, y.class)
                        && bits(&x.dims) == bits(&y.dims)
                        && bits(&x.points.concat()) == bits(&y.points.concat())
                })
        },
    );
    checks.push(("template store bit-exact".into(), ok));

    let mut store = ParamStore::<f64>::new();
    for k in 0..4 {
        let (r, c) = (rng.gen_range(1..7), rng.gen_range(1..7));
        store.add(format!("layer{k}.w"), Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap());
    }
    let ok = byte_exact(
        &store,
        |s, w| write_checkpoint(s, w).unwrap(),
        |b| read_checkpoint::<f64, _>(b).unwrap(),
        |a, b| {
            a.len() == b.len()
                && a.iter().zip(b.iter()).all(|(x, y)| {
                    x.name == y.name && x.value.shape() == y.value.shape() && bits(x.value.data()) == bits(y.value.data())
                })
        },
    );
    checks.push(("checkpoint bit-exact".into(), ok));
    checks
}
