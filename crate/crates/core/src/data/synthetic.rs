//! Deterministic synthetic scenes: cuboid objects with surface points thinned
//! by distance, a pinhole camera, and silhouette feature maps.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::class::CLASS_NAMES;
use crate::error::{Error, Result};
use crate::geometry::{corners_to_box2d, inverse_canonical_transform, Box3D, CameraCalibration, FeatureMap};
use crate::pointcloud::{PointCloud, RangeSpec};

use super::{count_in_box, projected_height, SceneObject, SceneSample};

/// Point dropout probability, linear between `start` and `end` meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DropoutCurve {
    pub near: f64,
    pub far: f64,
    pub start: f64,
    pub end: f64,
}

impl Default for DropoutCurve {
    fn default() -> Self {
        Self {
            near: 0.0,
            far: 0.9,
            start: 10.0,
            end: 60.0,
        }
    }
}

impl DropoutCurve {
    pub fn at(&self, d: f64) -> f64 {
        let t = ((d - self.start) / (self.end - self.start)).clamp(0.0, 1.0);
        self.near + t * (self.far - self.near)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.near)
            && (0.0..=1.0).contains(&self.far)
            && self.near <= self.far
            && self.start < self.end;
        if !ok {
            return Err(Error::Config(format!("dropout curve must be non-decreasing within [0, 1]: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraSpec {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Image size in pixels.
    pub width: usize,
    pub height: usize,
    /// Feature map stride in pixels.
    pub stride: usize,
    /// Camera position in the LiDAR frame.
    pub offset: [f64; 3],
}

impl Default for CameraSpec {
    fn default() -> Self {
        Self {
            fx: 160.0,
            fy: 160.0,
            cx: 160.0,
            cy: 48.0,
            width: 320,
            height: 96,
            stride: 4,
            offset: [0.0, 0.0, 0.0],
        }
    }
}

impl CameraSpec {
    pub fn calibration(&self) -> CameraCalibration<f64> {
        CameraCalibration::pinhole(self.fx, self.fy, self.cx, self.cy, self.offset)
    }

    pub fn map_size(&self) -> (usize, usize) {
        (self.height / self.stride, self.width / self.stride)
    }
}

/// Silhouette channels: one per class, then one for distractors.
pub const SILHOUETTE_CHANNELS: usize = CLASS_NAMES.len() + 1;
pub const DISTRACTOR_CHANNEL: usize = CLASS_NAMES.len();

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSceneSpec {
    /// Inclusive object count range per sequence.
    pub objects: [usize; 2],
    /// Relative class frequencies.
    pub class_mix: [f64; 3],
    /// Mean `(l, w, h)` per class.
    pub class_dims: [[f64; 3]; 3],
    /// Relative size jitter (uniform, symmetric).
    pub size_jitter: f64,
    /// Planar distance range of object centers.
    pub distance: [f64; 2],
    /// Half-angle of the azimuth sector objects are placed in, radians.
    pub max_azimuth: f64,
    pub dropout: DropoutCurve,
    /// Surface points per square meter before dropout.
    pub surface_density: f64,
    /// Gaussian jitter of surface points, meters.
    pub point_noise: f64,
    /// Inclusive range of unlabeled cuboids per sequence.
    pub distractors: [usize; 2],
    pub ground_points: usize,
    pub ground_z: f64,
    pub frames_per_sequence: usize,
    /// Forward motion per frame along the heading, meters.
    pub motion: f64,
    pub camera: CameraSpec,
    /// Render silhouettes into the feature map; otherwise it stays zero.
    pub render: bool,
    pub range: RangeSpec<f64>,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            objects: [2, 5],
            class_mix: [0.6, 0.2, 0.2],
            class_dims: [[3.9, 1.6, 1.56], [0.8, 0.6, 1.73], [1.76, 0.6, 1.73]],
            size_jitter: 0.1,
            distance: [6.0, 60.0],
            max_azimuth: 0.6,
            dropout: DropoutCurve::default(),
            surface_density: 12.0,
            point_noise: 0.0,
            distractors: [0, 2],
            ground_points: 300,
            ground_z: -1.6,
            frames_per_sequence: 3,
            motion: 0.5,
            camera: CameraSpec::default(),
            render: true,
            range: RangeSpec {
                min: [0.0, -40.0, -3.0],
                max: [70.4, 40.0, 1.0],
            },
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        self.dropout.validate()?;
        let bad = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.objects[0] > self.objects[1] || self.distractors[0] > self.distractors[1] {
            return bad("count ranges must satisfy min <= max");
        }
        if !(self.distance[0] > 0.0 && self.distance[0] < self.distance[1]) {
            return bad("distance range must be positive and increasing");
        }
        if self.class_mix.iter().any(|&w| w < 0.0) || self.class_mix.iter().sum::<f64>() <= 0.0 {
            return bad("class mix needs non-negative weights with a positive sum");
        }
        if self.frames_per_sequence == 0 || self.camera.stride == 0 {
            return bad("frames per sequence and camera stride must be positive");
        }
        if !(0.0..1.0).contains(&self.size_jitter) || self.point_noise < 0.0 || self.surface_density < 0.0 {
            return bad("size jitter, noise and density out of range");
        }
        Ok(())
    }
}

/// Rounds through `f32` so in-memory clouds match what the velodyne format stores.
fn f32_exact(v: f64) -> f64 {
    v as f32 as f64
}

fn surface_area(d: [f64; 3]) -> f64 {
    2.0 * (d[0] * d[1] + d[0] * d[2] + d[1] * d[2])
}

/// Uniform points on the faces of a centered `dims` cuboid, pulled in by a hair
/// so they test strictly inside the box.
pub fn sample_surface(rng: &mut impl Rng, dims: [f64; 3], n: usize) -> Vec<[f64; 3]> {
    let half = dims.map(|d| 0.5 * d * (1.0 - 1e-4));
    let areas = [dims[1] * dims[2], dims[0] * dims[2], dims[0] * dims[1]];
    let total: f64 = areas.iter().sum();
    (0..n)
        .map(|_| {
            let mut pick = rng.gen::<f64>() * total;
            let mut axis = 2;
            for (k, a) in areas.iter().enumerate() {
                if pick < *a {
                    axis = k;
                    break;
                }
                pick -= a;
            }
            let mut p = [0.0; 3];
            for k in 0..3 {
                p[k] = if k == axis {
                    if rng.gen::<bool>() {
                        half[k]
                    } else {
                        -half[k]
                    }
                } else {
                    rng.gen_range(-half[k]..=half[k])
                };
            }
            p
        })
        .collect()
}

/// Paints `channel` over the feature cells whose centers fall in the box's
/// projected extent. Returns false when the box is not in front of the camera.
pub fn paint_silhouette(fm: &mut FeatureMap<f64>, calib: &CameraCalibration<f64>, b: &Box3D<f64>, channel: usize) -> bool {
    let (b2, visible) = corners_to_box2d(calib, b);
    if !visible {
        return false;
    }
    let s = fm.stride;
    for y in 0..fm.height {
        let v = (y as f64 + 0.5) * s;
        if v < b2.v_min || v > b2.v_max {
            continue;
        }
        for x in 0..fm.width {
            let u = (x as f64 + 0.5) * s;
            if u < b2.u_min || u > b2.u_max {
                continue;
            }
            for c in 0..fm.channels {
                fm.set(c, y, x, if c == channel { 1.0 } else { 0.0 });
            }
        }
    }
    true
}

struct Track {
    id: u64,
    class: Option<usize>,
    dims: [f64; 3],
    start: [f64; 2],
    yaw: f64,
}

fn pick_class(rng: &mut impl Rng, mix: &[f64; 3]) -> usize {
    let total: f64 = mix.iter().sum();
    let mut r = rng.gen::<f64>() * total;
    for (c, w) in mix.iter().enumerate() {
        if r < *w {
            return c;
        }
        r -= w;
    }
    mix.len() - 1
}

fn place_tracks(spec: &SyntheticSceneSpec, rng: &mut impl Rng, seq: usize) -> Vec<Track> {
    let n_obj = rng.gen_range(spec.objects[0]..=spec.objects[1]);
    let n_dis = rng.gen_range(spec.distractors[0]..=spec.distractors[1]);
    let travel = spec.motion * spec.frames_per_sequence.saturating_sub(1) as f64;
    let mut tracks: Vec<Track> = Vec::new();
    for k in 0..n_obj + n_dis {
        let class = (k < n_obj).then(|| pick_class(rng, &spec.class_mix));
        let dims = match class {
            Some(c) => spec.class_dims[c].map(|d| d * (1.0 + rng.gen_range(-spec.size_jitter..=spec.size_jitter))),
            None => [rng.gen_range(1.0..4.5), rng.gen_range(0.8..2.5), rng.gen_range(0.8..2.0)],
        };
        // Rejection sampling against the swept footprint of earlier tracks.
        for _ in 0..50 {
            let d = rng.gen_range(spec.distance[0]..spec.distance[1]);
            let az = rng.gen_range(-spec.max_azimuth..=spec.max_azimuth);
            let start = [d * az.cos(), d * az.sin()];
            let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let radius = 0.5 * dims[0].hypot(dims[1]) + travel;
            let clear = tracks.iter().all(|t| {
                let r = 0.5 * t.dims[0].hypot(t.dims[1]) + travel;
                (t.start[0] - start[0]).hypot(t.start[1] - start[1]) > radius + r + 0.3
            });
            if clear {
                tracks.push(Track {
                    id: (seq as u64) * 1000 + k as u64,
                    class,
                    dims,
                    start,
                    yaw,
                });
                break;
            }
        }
    }
    tracks
}

fn render_frame(
    spec: &SyntheticSceneSpec,
    rng: &mut impl Rng,
    tracks: &[Track],
    frame: String,
    step: usize,
) -> Result<SceneSample> {
    let calib = spec.camera.calibration();
    let (mh, mw) = spec.camera.map_size();
    let mut image = FeatureMap::zeros(SILHOUETTE_CHANNELS, mh, mw, spec.camera.stride as f64);
    let noise = Normal::new(0.0, spec.point_noise.max(1e-300)).map_err(|e| Error::Config(e.to_string()))?;
    let mut coords = Vec::new();
    let mut feats = Vec::new();
    let mut objects = Vec::new();
    let mut placed: Vec<(Box3D<f64>, usize)> = Vec::new();
    for t in tracks {
        let shift = spec.motion * step as f64;
        let center = [
            t.start[0] + shift * t.yaw.cos(),
            t.start[1] + shift * t.yaw.sin(),
            spec.ground_z + 0.5 * t.dims[2],
        ];
        let b = Box3D::new(center, t.dims, t.yaw)?;
        let n = (surface_area(t.dims) * spec.surface_density).round() as usize;
        let keep = 1.0 - spec.dropout.at(b.planar_range());
        let local = sample_surface(rng, t.dims, n);
        let world = inverse_canonical_transform(&b, &local);
        for p in world {
            if rng.gen::<f64>() >= keep {
                continue;
            }
            let mut p = p;
            if spec.point_noise > 0.0 {
                for v in &mut p {
                    *v += noise.sample(rng);
                }
            }
            let p = p.map(f32_exact);
            if !spec.range.contains(p) {
                continue;
            }
            coords.push(p);
            feats.push(f32_exact(rng.gen::<f64>()));
        }
        let channel = t.class.unwrap_or(DISTRACTOR_CHANNEL);
        placed.push((b, channel));
        if let Some(class) = t.class {
            objects.push(SceneObject {
                class,
                boxed: b,
                track_id: t.id,
                num_points: 0,
                truncated: 0.0,
                occluded: 0,
                bbox_height: projected_height(&calib, &b, spec.camera.height as f64),
            });
        }
    }
    for _ in 0..spec.ground_points {
        let p = [
            rng.gen_range(spec.range.min[0]..spec.range.max[0]),
            rng.gen_range(spec.range.min[1]..spec.range.max[1]),
            spec.ground_z,
        ]
        .map(f32_exact);
        if placed.iter().any(|(b, _)| b.contains(p)) {
            continue;
        }
        coords.push(p);
        feats.push(f32_exact(rng.gen::<f64>()));
    }
    if spec.render {
        // Painter's order: far objects first so near ones occlude them.
        placed.sort_by(|a, b| b.0.planar_range().total_cmp(&a.0.planar_range()));
        for (b, ch) in &placed {
            paint_silhouette(&mut image, &calib, b, *ch);
        }
    }
    let cloud = PointCloud::new(coords, feats, 1)?;
    for o in &mut objects {
        o.num_points = count_in_box(&o.boxed, &cloud.coords);
    }
    Ok(SceneSample {
        frame,
        cloud,
        calib,
        image,
        objects,
        image_size: (spec.camera.width, spec.camera.height),
    })
}

/// `scenes` frames grouped into sequences of `frames_per_sequence` sharing track
/// ids. Sequence `s` draws from its own ChaCha stream, so output is independent
/// of thread count.
pub fn gen_synthetic(spec: &SyntheticSceneSpec, seed: u64, scenes: usize) -> Result<Vec<SceneSample>> {
    spec.validate()?;
    let fps = spec.frames_per_sequence;
    let seqs = scenes.div_ceil(fps);
    let per_seq: Vec<Result<Vec<SceneSample>>> = (0..seqs)
        .into_par_iter()
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(s as u64);
            let tracks = place_tracks(spec, &mut rng, s);
            let frames = fps.min(scenes - s * fps);
            (0..frames)
                .map(|f| render_frame(spec, &mut rng, &tracks, format!("{s:04}{f:02}"), f))
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(scenes);
    for r in per_seq {
        out.extend(r?);
    }
    Ok(out)
}

/// A shuffled copy of `0..n` under `seed`.
pub fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    v
}
