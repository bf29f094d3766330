//! Semantic point decoration: project points into the camera, bilinearly
//! sample the image feature map and reduce `[point; image]` channels.

use crate::autodiff::{Mlp, ParamStore, Tape, Tensor, Var};
use crate::error::Result;
use crate::geometry::{bilinear_weights, CameraCalibration, FeatureMap};
use crate::pointcloud::PointCloud;

/// Feature map placed on a tape as a pixel-major `(H*W) x C` matrix.
#[derive(Debug, Clone, Copy)]
pub struct ImageInput<'a> {
    pub map: &'a FeatureMap<f64>,
    pub var: Var,
}

impl<'a> ImageInput<'a> {
    pub fn new(tape: &mut Tape<f64>, map: &'a FeatureMap<f64>, requires_grad: bool) -> Result<Self> {
        let t = Tensor::matrix(map.height * map.width, map.channels, map.to_pixel_major())?;
        Ok(Self {
            map,
            var: tape.leaf(t, requires_grad),
        })
    }
}

/// Bilinear sampling weights of a point set, one CSR row per point.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSampling {
    pub offsets: Vec<usize>,
    pub pixels: Vec<usize>,
    pub weights: Vec<f64>,
    pub in_view: Vec<bool>,
}

pub fn image_sampling(fm: &FeatureMap<f64>, calib: &CameraCalibration<f64>, coords: &[[f64; 3]]) -> ImageSampling {
    let mut s = ImageSampling {
        offsets: Vec::with_capacity(coords.len() + 1),
        pixels: Vec::with_capacity(coords.len() * 4),
        weights: Vec::with_capacity(coords.len() * 4),
        in_view: Vec::with_capacity(coords.len()),
    };
    s.offsets.push(0);
    for &p in coords {
        let proj = calib.project(p);
        let ws = if proj.in_view { bilinear_weights(fm, proj.u, proj.v) } else { None };
        match ws {
            Some(ws) => {
                for (px, w) in ws {
                    s.pixels.push(px);
                    s.weights.push(w);
                }
                s.in_view.push(true);
            }
            None => s.in_view.push(false),
        }
        s.offsets.push(s.pixels.len());
    }
    s
}

/// Per-point image features `N x C` (zero rows out of view).
pub fn sample_image(
    tape: &mut Tape<f64>,
    img: ImageInput<'_>,
    calib: &CameraCalibration<f64>,
    coords: &[[f64; 3]],
) -> Result<(Var, Vec<bool>)> {
    calib.validate()?;
    let s = image_sampling(img.map, calib, coords);
    let v = tape.weighted_gather(img.var, s.offsets, s.pixels, s.weights)?;
    Ok((v, s.in_view))
}

#[derive(Debug, Clone)]
pub struct DecoratedPoints {
    pub coords: Vec<[f64; 3]>,
    /// `N x Fd`.
    pub features: Var,
    pub in_view: Vec<bool>,
}

/// Decorates raw LiDAR points (the pre-backbone encoder).
pub fn decorate(
    tape: &mut Tape<f64>,
    store: &ParamStore<f64>,
    pc: &PointCloud<f64>,
    img: ImageInput<'_>,
    calib: &CameraCalibration<f64>,
    reducer: &Mlp,
) -> Result<DecoratedPoints> {
    let (image, in_view) = sample_image(tape, img, calib, &pc.coords)?;
    let point = tape.constant(Tensor::matrix(pc.len(), pc.feature_width, pc.features.clone())?);
    let cat = tape.concat_cols(&[point, image])?;
    let features = reducer.forward(tape, store, cat)?;
    Ok(DecoratedPoints {
        coords: pc.coords.clone(),
        features,
        in_view,
    })
}

/// Image features `f^I` of generated points: `reducer([f^S; sample])`.
/// Sampling positions are taken as constants.
pub fn decorate_generated(
    tape: &mut Tape<f64>,
    store: &ParamStore<f64>,
    coords: &[[f64; 3]],
    semantic: Var,
    img: ImageInput<'_>,
    calib: &CameraCalibration<f64>,
    reducer: &Mlp,
) -> Result<(Var, Vec<bool>)> {
    let (image, in_view) = sample_image(tape, img, calib, coords)?;
    let cat = tape.concat_cols(&[semantic, image])?;
    Ok((reducer.forward(tape, store, cat)?, in_view))
}
