//! Training augmentation: GT sampling, flip across the x axis, global scaling and
//! rotation about z. The feature map is only touched by GT sampling; geometric
//! transforms leave it as is and the out-of-view mask absorbs the mismatch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::densify::DenseObjectTemplate;
use crate::error::Result;
use crate::geometry::{iou_bev, Box3D};
use crate::pointcloud::points_in_box;

use super::synthetic::paint_silhouette;
use super::{count_in_box, projected_height, SceneObject, SceneSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub flip: bool,
    pub scale: [f64; 2],
    /// Radians.
    pub rotation: [f64; 2],
    /// Templates pasted per scene.
    pub gt_samples: usize,
    pub gt_distance: [f64; 2],
    pub gt_max_azimuth: f64,
    pub ground_z: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            flip: true,
            scale: [0.95, 1.05],
            rotation: [-std::f64::consts::FRAC_PI_4, std::f64::consts::FRAC_PI_4],
            gt_samples: 2,
            gt_distance: [6.0, 60.0],
            gt_max_azimuth: 0.6,
            ground_z: -1.6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub scale: f64,
    pub rotation: f64,
}

impl AugmentParams {
    pub const IDENTITY: Self = Self {
        flip: false,
        scale: 1.0,
        rotation: 0.0,
    };
}

fn transform(p: [f64; 3], a: &AugmentParams, cs: (f64, f64)) -> [f64; 3] {
    let y = if a.flip { -p[1] } else { p[1] };
    let (x, y, z) = (p[0] * a.scale, y * a.scale, p[2] * a.scale);
    let (c, s) = cs;
    [c * x - s * y, s * x + c * y, z]
}

/// Flip, then scale, then rotate, applied to points and boxes.
pub fn apply_params(sample: &SceneSample, a: &AugmentParams) -> Result<SceneSample> {
    let mut out = sample.clone();
    let cs = (a.rotation.cos(), a.rotation.sin());
    for p in &mut out.cloud.coords {
        *p = transform(*p, a, cs);
    }
    for o in &mut out.objects {
        let b = &o.boxed;
        let yaw = if a.flip { -b.yaw } else { b.yaw };
        o.boxed = Box3D::new(transform(b.center, a, cs), b.size.map(|v| v * a.scale), yaw + a.rotation)?;
    }
    Ok(out)
}

/// Pastes up to `count` templates into collision-free boxes, clearing scene points
/// inside each new box and painting its silhouette into the feature map.
/// Returns how many were placed.
pub fn gt_sample(
    sample: &mut SceneSample,
    templates: &[DenseObjectTemplate],
    count: usize,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<usize> {
    if templates.is_empty() {
        return Ok(0);
    }
    let mut placed = 0;
    for k in 0..count {
        let t = &templates[rng.gen_range(0..templates.len())];
        let mut target = None;
        for _ in 0..20 {
            let d = rng.gen_range(cfg.gt_distance[0]..cfg.gt_distance[1]);
            let az = rng.gen_range(-cfg.gt_max_azimuth..=cfg.gt_max_azimuth);
            let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let b = Box3D::new([d * az.cos(), d * az.sin(), cfg.ground_z + 0.5 * t.dims[2]], t.dims, yaw)?;
            let r = 0.5 * b.size[0].hypot(b.size[1]);
            let clear = sample.objects.iter().all(|o| {
                let ro = 0.5 * o.boxed.size[0].hypot(o.boxed.size[1]);
                let gap = (o.boxed.center[0] - b.center[0]).hypot(o.boxed.center[1] - b.center[1]);
                gap > r + ro && iou_bev(&o.boxed, &b) == 0.0
            });
            if clear {
                target = Some(b);
                break;
            }
        }
        let Some(b) = target else {
            continue;
        };
        let inside = points_in_box(&b, &sample.cloud.coords);
        let keep: Vec<bool> = inside.iter().map(|&i| !i).collect();
        sample.cloud.retain_mask(&keep);
        for p in t.place_in(&b) {
            sample.cloud.push(p, &[0.5]);
        }
        paint_silhouette(&mut sample.image, &sample.calib, &b, t.class);
        sample.objects.push(SceneObject {
            class: t.class,
            boxed: b,
            track_id: u64::MAX - k as u64,
            num_points: count_in_box(&b, &sample.cloud.coords),
            truncated: 0.0,
            occluded: 0,
            bbox_height: projected_height(&sample.calib, &b, sample.image_size.1 as f64),
        });
        placed += 1;
    }
    Ok(placed)
}

/// Seeded full augmentation; returns the sample and the geometric parameters drawn.
pub fn augment(
    sample: &SceneSample,
    cfg: &AugmentConfig,
    templates: &[DenseObjectTemplate],
    seed: u64,
) -> Result<(SceneSample, AugmentParams)> {
    if !cfg.enabled {
        return Ok((sample.clone(), AugmentParams::IDENTITY));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = sample.clone();
    gt_sample(&mut s, templates, cfg.gt_samples, cfg, &mut rng)?;
    let uniform = |rng: &mut ChaCha8Rng, r: [f64; 2]| if r[0] < r[1] { rng.gen_range(r[0]..=r[1]) } else { r[0] };
    let params = AugmentParams {
        flip: cfg.flip && rng.gen_bool(0.5),
        scale: uniform(&mut rng, cfg.scale),
        rotation: uniform(&mut rng, cfg.rotation),
    };
    Ok((apply_params(&s, &params)?, params))
}
