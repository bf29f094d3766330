use std::io::{Read, Write};

use crate::scalar::Real;

use super::{Box2D, GeometryError};

/// Image feature map, channel-major `C x H x W`. A cell at feature coordinates
/// `(x, y)` corresponds to pixel `(x * stride, y * stride)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub stride: T,
    pub data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(channels: usize, height: usize, width: usize, stride: T, data: Vec<T>) -> Result<Self, GeometryError> {
        if !(stride > T::zero()) {
            return Err(GeometryError::FeatureMap("stride must be positive".into()));
        }
        if data.len() != channels * height * width {
            return Err(GeometryError::FeatureMap(format!(
                "{}x{}x{} map needs {} values, got {}",
                channels,
                height,
                width,
                channels * height * width,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::FeatureMap("non-finite feature value".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            stride,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize, stride: T) -> Self {
        Self {
            channels,
            height,
            width,
            stride,
            data: vec![T::zero(); channels * height * width],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Pixel-major copy, `(H * W) x C`, the layout used for row gathers.
    pub fn to_pixel_major(&self) -> Vec<T> {
        let hw = self.height * self.width;
        let mut out = vec![T::zero(); hw * self.channels];
        for c in 0..self.channels {
            for p in 0..hw {
                out[p * self.channels + c] = self.data[c * hw + p];
            }
        }
        out
    }

    pub fn scaled(&self, alpha: T) -> Self {
        let mut f = self.clone();
        f.data.iter_mut().for_each(|v| *v *= alpha);
        f
    }

    /// Image extent in pixels covered by the map.
    pub fn image_size(&self) -> (T, T) {
        (
            T::lit(self.width as f64) * self.stride,
            T::lit(self.height as f64) * self.stride,
        )
    }
}

/// Four-neighbor weights `(pixel index y * W + x, weight)` for a pixel position,
/// or `None` outside the sampled lattice.
pub fn bilinear_weights<T: Real>(fm: &FeatureMap<T>, u: T, v: T) -> Option<[(usize, T); 4]> {
    if fm.width == 0 || fm.height == 0 {
        return None;
    }
    let fx = u / fm.stride;
    let fy = v / fm.stride;
    let max_x = T::lit((fm.width - 1) as f64);
    let max_y = T::lit((fm.height - 1) as f64);
    if !(fx >= T::zero() && fy >= T::zero() && fx <= max_x && fy <= max_y) {
        return None;
    }
    let x0 = fx.floor().to_usize().unwrap_or(0).min(fm.width.saturating_sub(2));
    let y0 = fy.floor().to_usize().unwrap_or(0).min(fm.height.saturating_sub(2));
    let x1 = (x0 + 1).min(fm.width - 1);
    let y1 = (y0 + 1).min(fm.height - 1);
    let ax = fx - T::lit(x0 as f64);
    let ay = fy - T::lit(y0 as f64);
    let one = T::one();
    let w = fm.width;
    Some([
        (y0 * w + x0, (one - ax) * (one - ay)),
        (y0 * w + x1, ax * (one - ay)),
        (y1 * w + x0, (one - ax) * ay),
        (y1 * w + x1, ax * ay),
    ])
}

/// Samples all channels at pixel `(u, v)`; zeros and `false` out of bounds.
pub fn bilinear_sample<T: Real>(fm: &FeatureMap<T>, u: T, v: T) -> (Vec<T>, bool) {
    let mut out = vec![T::zero(); fm.channels];
    let Some(ws) = bilinear_weights(fm, u, v) else {
        return (out, false);
    };
    let hw = fm.height * fm.width;
    for (c, o) in out.iter_mut().enumerate() {
        *o = ws.iter().map(|&(p, wt)| wt * fm.data[c * hw + p]).sum();
    }
    (out, true)
}

/// Scales about the center by `factor`, then clamps to `[0, W] x [0, H]`.
pub fn enlarge_box2d<T: Real>(b: &Box2D<T>, factor: T, image_w: T, image_h: T) -> Box2D<T> {
    let (cu, cv) = b.center();
    let half = T::lit(0.5) * factor;
    let hw = b.width() * half;
    let hh = b.height() * half;
    let clamp = |x: T, hi: T| x.max(T::zero()).min(hi);
    Box2D {
        u_min: clamp(cu - hw, image_w),
        v_min: clamp(cv - hh, image_h),
        u_max: clamp(cu + hw, image_w),
        v_max: clamp(cv + hh, image_h),
    }
}

/// Sparse averaging weights for every RoI-Align bin, bins row-major over `S x S`.
/// Returns `(offsets, pixel indices, weights)` in CSR form, one row per bin.
pub fn roi_align_weights<T: Real>(
    fm: &FeatureMap<T>,
    b: &Box2D<T>,
    bins: usize,
    samples_per_bin: usize,
) -> (Vec<usize>, Vec<usize>, Vec<T>) {
    let n = samples_per_bin.max(1);
    let count = T::lit((n * n) as f64);
    let bw = b.width() / T::lit(bins as f64);
    let bh = b.height() / T::lit(bins as f64);
    let mut offsets = Vec::with_capacity(bins * bins + 1);
    let mut idx = Vec::new();
    let mut w = Vec::new();
    offsets.push(0);
    for by in 0..bins {
        for bx in 0..bins {
            for sy in 0..n {
                for sx in 0..n {
                    let (u, v) = sample_position(b, bw, bh, bx, by, sx, sy, n);
                    if let Some(ws) = bilinear_weights(fm, u, v) {
                        for (p, wt) in ws {
                            idx.push(p);
                            w.push(wt / count);
                        }
                    }
                }
            }
            offsets.push(idx.len());
        }
    }
    (offsets, idx, w)
}

#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn sample_position<T: Real>(
    b: &Box2D<T>,
    bw: T,
    bh: T,
    bx: usize,
    by: usize,
    sx: usize,
    sy: usize,
    n: usize,
) -> (T, T) {
    let half = T::lit(0.5);
    let nf = T::lit(n as f64);
    let u = b.u_min + (T::lit(bx as f64) + (T::lit(sx as f64) + half) / nf) * bw;
    let v = b.v_min + (T::lit(by as f64) + (T::lit(sy as f64) + half) / nf) * bh;
    (u, v)
}

/// Average of bilinear samples on a regular sub-grid of each bin; output `S x S x C`.
pub fn roi_align<T: Real>(fm: &FeatureMap<T>, b: &Box2D<T>, bins: usize, samples_per_bin: usize) -> Vec<T> {
    let (offsets, idx, w) = roi_align_weights(fm, b, bins, samples_per_bin);
    let hw = fm.height * fm.width;
    let c = fm.channels;
    let mut out = vec![T::zero(); bins * bins * c];
    for r in 0..bins * bins {
        for j in offsets[r]..offsets[r + 1] {
            for ch in 0..c {
                out[r * c + ch] += w[j] * fm.data[ch * hw + idx[j]];
            }
        }
    }
    out
}

const FMAP_MAGIC: &[u8; 4] = b"FMAP";
const FMAP_VERSION: u32 = 1;

pub fn write_fmap<T: Real, W: Write>(fm: &FeatureMap<T>, mut w: W) -> std::io::Result<()> {
    w.write_all(FMAP_MAGIC)?;
    w.write_all(&FMAP_VERSION.to_le_bytes())?;
    for d in [fm.channels, fm.height, fm.width] {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    w.write_all(&(fm.stride.as_f64() as f32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(fm.data.len() * 4);
    for &v in &fm.data {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn read_fmap<T: Real, R: Read>(mut r: R) -> Result<FeatureMap<T>, GeometryError> {
    let mut head = [0u8; 24];
    r.read_exact(&mut head)?;
    if &head[..4] != FMAP_MAGIC {
        return Err(GeometryError::FeatureMap("bad .fmap magic".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(head[o..o + 4].try_into().unwrap());
    if u32_at(4) != FMAP_VERSION {
        return Err(GeometryError::FeatureMap(format!("unsupported .fmap version {}", u32_at(4))));
    }
    let (c, h, w) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize);
    let stride = f32::from_le_bytes(head[20..24].try_into().unwrap());
    let mut payload = vec![0u8; c * h * w * 4];
    r.read_exact(&mut payload)?;
    let data = payload
        .chunks_exact(4)
        .map(|b| T::lit(f32::from_le_bytes(b.try_into().unwrap()) as f64))
        .collect();
    FeatureMap::new(c, h, w, T::lit(stride as f64), data)
}
