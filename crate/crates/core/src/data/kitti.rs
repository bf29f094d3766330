//! KITTI on-disk formats: velodyne `.bin`, calibration text, and label rows.

use std::io::{BufRead, Read, Write};

use crate::class::class_id;
use crate::error::{Error, Result};
use crate::geometry::{Box3D, CameraCalibration};
use crate::pointcloud::PointCloud;

/// Little-endian `(x, y, z, intensity)` f32 quadruples.
pub fn read_velodyne<R: Read>(mut r: R) -> Result<PointCloud<f32>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() % 16 != 0 {
        let offset = bytes.len() - bytes.len() % 16;
        return Err(Error::Format(format!(
            "velodyne data is {} bytes, not a multiple of 16; trailing record starts at byte offset {offset}",
            bytes.len()
        )));
    }
    let n = bytes.len() / 16;
    let mut coords = Vec::with_capacity(n);
    let mut feats = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(16) {
        let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap());
        coords.push([f(0), f(1), f(2)]);
        feats.push(f(3));
    }
    Ok(PointCloud::new(coords, feats, 1)?)
}

pub fn write_velodyne<W: Write>(pc: &PointCloud<f32>, mut w: W) -> Result<()> {
    if pc.feature_width != 1 {
        return Err(Error::Format(format!(
            "velodyne clouds carry one intensity channel, got {}",
            pc.feature_width
        )));
    }
    for (p, i) in pc.coords.iter().zip(&pc.features) {
        for v in [p[0], p[1], p[2], *i] {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn parse_floats(s: &str, n: usize, key: &str, line: usize) -> Result<Vec<f64>> {
    let v: Vec<f64> = s
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Format(format!("line {line}: {key}: {e}")))?;
    if v.len() != n {
        return Err(Error::Format(format!("line {line}: {key} needs {n} values, got {}", v.len())));
    }
    Ok(v)
}

/// Reads `P2`, `R0_rect` and `Tr_velo_to_cam`; other keys are ignored.
pub fn read_calib<R: BufRead>(r: R) -> Result<CameraCalibration<f64>> {
    let mut p = None;
    let mut r0 = None;
    let mut tr = None;
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let Some((key, rest)) = line.split_once(':') else {
            if line.trim().is_empty() {
                continue;
            }
            return Err(Error::Format(format!("line {}: expected `key: values`", i + 1)));
        };
        match key.trim() {
            "P2" => p = Some(parse_floats(rest, 12, "P2", i + 1)?),
            "R0_rect" => r0 = Some(parse_floats(rest, 9, "R0_rect", i + 1)?),
            "Tr_velo_to_cam" => tr = Some(parse_floats(rest, 12, "Tr_velo_to_cam", i + 1)?),
            _ => {}
        }
    }
    let missing = |k: &str| Error::Format(format!("calibration is missing {k}"));
    let p = p.ok_or_else(|| missing("P2"))?;
    let r0 = r0.ok_or_else(|| missing("R0_rect"))?;
    let tr = tr.ok_or_else(|| missing("Tr_velo_to_cam"))?;
    let m34 = |v: &[f64]| std::array::from_fn(|i| std::array::from_fn(|j| v[4 * i + j]));
    let calib = CameraCalibration {
        p: m34(&p),
        r0: std::array::from_fn(|i| std::array::from_fn(|j| r0[3 * i + j])),
        tr: m34(&tr),
    };
    calib.validate()?;
    Ok(calib)
}

pub fn write_calib<W: Write>(c: &CameraCalibration<f64>, mut w: W) -> Result<()> {
    let join = |v: Vec<f64>| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
    writeln!(w, "P2: {}", join(c.p.iter().flatten().copied().collect()))?;
    writeln!(w, "R0_rect: {}", join(c.r0.iter().flatten().copied().collect()))?;
    writeln!(w, "Tr_velo_to_cam: {}", join(c.tr.iter().flatten().copied().collect()))?;
    Ok(())
}

/// One raw 15-field label row, camera frame.
#[derive(Debug, Clone, PartialEq)]
pub struct KittiLabel {
    pub kind: String,
    pub truncated: f64,
    pub occluded: i32,
    pub alpha: f64,
    /// `left, top, right, bottom` pixels.
    pub bbox: [f64; 4],
    /// `h, w, l`.
    pub dims: [f64; 3],
    /// Bottom-center in the rectified camera frame.
    pub location: [f64; 3],
    pub rotation_y: f64,
}

/// A label converted to the LiDAR frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledObject {
    pub class: usize,
    pub boxed: Box3D<f64>,
    pub truncated: f64,
    pub occluded: i32,
    pub bbox_height: f64,
}

pub fn read_label_rows<R: BufRead>(r: R) -> Result<Vec<KittiLabel>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        if f.len() != 15 {
            return Err(Error::Format(format!("line {}: expected 15 label fields, got {}", i + 1, f.len())));
        }
        let num = |k: usize| {
            f[k].parse::<f64>()
                .map_err(|e| Error::Format(format!("line {}: field {}: {e}", i + 1, k + 1)))
        };
        let occluded = f[2]
            .parse::<i32>()
            .map_err(|e| Error::Format(format!("line {}: field 3: {e}", i + 1)))?;
        out.push(KittiLabel {
            kind: f[0].to_string(),
            truncated: num(1)?,
            occluded,
            alpha: num(3)?,
            bbox: [num(4)?, num(5)?, num(6)?, num(7)?],
            dims: [num(8)?, num(9)?, num(10)?],
            location: [num(11)?, num(12)?, num(13)?],
            rotation_y: num(14)?,
        });
    }
    Ok(out)
}

pub fn write_label_rows<W: Write>(labels: &[KittiLabel], mut w: W) -> Result<()> {
    for l in labels {
        writeln!(
            w,
            "{} {:?} {} {:?} {:?} {:?} {:?} {:?} {:?} {:?} {:?} {:?} {:?} {:?} {:?}",
            l.kind,
            l.truncated,
            l.occluded,
            l.alpha,
            l.bbox[0],
            l.bbox[1],
            l.bbox[2],
            l.bbox[3],
            l.dims[0],
            l.dims[1],
            l.dims[2],
            l.location[0],
            l.location[1],
            l.location[2],
            l.rotation_y
        )?;
    }
    Ok(())
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Camera-frame label to a LiDAR-frame box. The geometric center sits `h/2`
/// above the labeled bottom center (camera `y` points down).
pub fn label_to_box(l: &KittiLabel, calib: &CameraCalibration<f64>) -> Result<Box3D<f64>> {
    let [h, w, len] = l.dims;
    let c_rect = [l.location[0], l.location[1] - 0.5 * h, l.location[2]];
    let c = calib.rect_to_lidar(c_rect);
    let ahead = [
        c_rect[0] + l.rotation_y.cos(),
        c_rect[1],
        c_rect[2] - l.rotation_y.sin(),
    ];
    let d = sub(calib.rect_to_lidar(ahead), c);
    Ok(Box3D::new(c, [len, w, h], d[1].atan2(d[0]))?)
}

/// Inverse of [`label_to_box`] for the geometric fields.
pub fn box_to_label(b: &Box3D<f64>, calib: &CameraCalibration<f64>, kind: &str) -> KittiLabel {
    let c_rect = calib.lidar_to_rect(b.center);
    let ahead = [
        b.center[0] + b.yaw.cos(),
        b.center[1] + b.yaw.sin(),
        b.center[2],
    ];
    let d = sub(calib.lidar_to_rect(ahead), c_rect);
    KittiLabel {
        kind: kind.to_string(),
        truncated: 0.0,
        occluded: 0,
        alpha: 0.0,
        bbox: [0.0; 4],
        dims: [b.size[2], b.size[1], b.size[0]],
        location: [c_rect[0], c_rect[1] + 0.5 * b.size[2], c_rect[2]],
        rotation_y: (-d[2]).atan2(d[0]),
    }
}

/// Labels in the LiDAR frame; `DontCare` and unknown classes are skipped.
pub fn read_labels<R: BufRead>(r: R, calib: &CameraCalibration<f64>) -> Result<Vec<LabeledObject>> {
    let mut out = Vec::new();
    for l in read_label_rows(r)? {
        if l.kind == "DontCare" {
            continue;
        }
        let Some(class) = class_id(&l.kind) else {
            continue;
        };
        out.push(LabeledObject {
            class,
            boxed: label_to_box(&l, calib)?,
            truncated: l.truncated,
            occluded: l.occluded,
            bbox_height: l.bbox[3] - l.bbox[1],
        });
    }
    Ok(out)
}
