use crate::scalar::Real;

use super::GeometryError;

/// KITTI-style camera model: LiDAR -> camera (`tr`), rectification (`r0`),
/// rectified camera -> pixels (`p`).
#[derive(Debug, Clone, PartialEq)]
pub struct CameraCalibration<T> {
    pub p: [[T; 4]; 3],
    pub r0: [[T; 3]; 3],
    pub tr: [[T; 4]; 3],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection<T> {
    pub u: T,
    pub v: T,
    pub depth: T,
    /// False when the point lies on or behind the image plane.
    pub in_view: bool,
}

fn orthonormal_error<T: Real>(m: &[[T; 3]; 3]) -> T {
    let mut worst = T::zero();
    for i in 0..3 {
        for j in 0..3 {
            let dot: T = (0..3).map(|k| m[k][i] * m[k][j]).sum();
            let expect = if i == j { T::one() } else { T::zero() };
            worst = worst.max((dot - expect).abs());
        }
    }
    worst
}

impl<T: Real> CameraCalibration<T> {
    pub fn identity() -> Self {
        let z = T::zero();
        let o = T::one();
        Self {
            p: [[o, z, z, z], [z, o, z, z], [z, z, o, z]],
            r0: [[o, z, z], [z, o, z], [z, z, o]],
            tr: [[o, z, z, z], [z, o, z, z], [z, z, o, z]],
        }
    }

    /// Pinhole camera looking along LiDAR +x with camera axes (right, down, forward)
    /// = (-y, -z, x), mounted `height` meters above the LiDAR origin offset.
    pub fn pinhole(fx: T, fy: T, cx: T, cy: T, cam_offset: [T; 3]) -> Self {
        let z = T::zero();
        let o = T::one();
        // p_cam = R * (p - offset)
        let rot = [[z, -o, z], [z, z, -o], [o, z, z]];
        let mut tr = [[z; 4]; 3];
        for i in 0..3 {
            let mut t = T::zero();
            for j in 0..3 {
                tr[i][j] = rot[i][j];
                t -= rot[i][j] * cam_offset[j];
            }
            tr[i][3] = t;
        }
        Self {
            p: [[fx, z, cx, z], [z, fy, cy, z], [z, z, o, z]],
            r0: [[o, z, z], [z, o, z], [z, z, o]],
            tr,
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let tol = T::lit(1e-6);
        if orthonormal_error(&self.r0) > tol {
            return Err(GeometryError::Calibration("R0 is not orthonormal".into()));
        }
        let rot = self.tr_rotation();
        if orthonormal_error(&rot) > tol {
            return Err(GeometryError::Calibration("Tr rotation block is not orthonormal".into()));
        }
        let all = self
            .p
            .iter()
            .flatten()
            .chain(self.r0.iter().flatten())
            .chain(self.tr.iter().flatten());
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::Calibration("non-finite entry".into()));
        }
        Ok(())
    }

    fn tr_rotation(&self) -> [[T; 3]; 3] {
        let mut r = [[T::zero(); 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = self.tr[i][j];
            }
        }
        r
    }

    /// LiDAR point into the rectified camera frame: `R0 * Tr * [p; 1]`.
    pub fn lidar_to_rect(&self, p: [T; 3]) -> [T; 3] {
        let mut cam = [T::zero(); 3];
        for (i, c) in cam.iter_mut().enumerate() {
            *c = self.tr[i][0] * p[0] + self.tr[i][1] * p[1] + self.tr[i][2] * p[2] + self.tr[i][3];
        }
        let mut rect = [T::zero(); 3];
        for (i, r) in rect.iter_mut().enumerate() {
            *r = (0..3).map(|j| self.r0[i][j] * cam[j]).sum();
        }
        rect
    }

    /// Inverse of [`lidar_to_rect`](Self::lidar_to_rect).
    pub fn rect_to_lidar(&self, rect: [T; 3]) -> [T; 3] {
        let mut cam = [T::zero(); 3];
        for (j, c) in cam.iter_mut().enumerate() {
            *c = (0..3).map(|i| self.r0[i][j] * rect[i]).sum();
        }
        let mut out = [T::zero(); 3];
        for (j, o) in out.iter_mut().enumerate() {
            *o = (0..3).map(|i| self.tr[i][j] * (cam[i] - self.tr[i][3])).sum();
        }
        out
    }

    pub fn project_rect(&self, rect: [T; 3]) -> Projection<T> {
        let mut h = [T::zero(); 3];
        for (i, hv) in h.iter_mut().enumerate() {
            *hv = self.p[i][0] * rect[0] + self.p[i][1] * rect[1] + self.p[i][2] * rect[2] + self.p[i][3];
        }
        let depth = rect[2];
        let in_view = depth > T::zero() && h[2] > T::zero();
        let (u, v) = if h[2] != T::zero() {
            (h[0] / h[2], h[1] / h[2])
        } else {
            (T::zero(), T::zero())
        };
        Projection { u, v, depth, in_view }
    }

    pub fn project(&self, p: [T; 3]) -> Projection<T> {
        self.project_rect(self.lidar_to_rect(p))
    }

    pub fn cast<U: Real>(&self) -> CameraCalibration<U> {
        let c = |v: T| U::lit(v.as_f64());
        CameraCalibration {
            p: self.p.map(|r| r.map(c)),
            r0: self.r0.map(|r| r.map(c)),
            tr: self.tr.map(|r| r.map(c)),
        }
    }
}

pub fn project_points<T: Real>(calib: &CameraCalibration<T>, points: &[[T; 3]]) -> Vec<Projection<T>> {
    points.iter().map(|&p| calib.project(p)).collect()
}
