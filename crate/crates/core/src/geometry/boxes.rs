use crate::scalar::{normalize_angle, Real};

use super::{rotate_z, CameraCalibration, GeometryError};

/// Oriented 3D box in the LiDAR frame. `size` is (length, width, height),
/// `center` is the geometric center, `yaw` rotates about +z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D<T> {
    pub center: [T; 3],
    pub size: [T; 3],
    pub yaw: T,
}

impl<T: Real> Box3D<T> {
    pub fn new(center: [T; 3], size: [T; 3], yaw: T) -> Result<Self, GeometryError> {
        if size.iter().any(|&s| !(s > T::zero()) || !s.is_finite()) {
            return Err(GeometryError::Box(format!("box dimensions must be positive, got {size:?}")));
        }
        if center.iter().any(|c| !c.is_finite()) || !yaw.is_finite() {
            return Err(GeometryError::Box("non-finite box parameters".into()));
        }
        Ok(Self {
            center,
            size,
            yaw: normalize_angle(yaw),
        })
    }

    pub fn length(&self) -> T {
        self.size[0]
    }

    pub fn width(&self) -> T {
        self.size[1]
    }

    pub fn height(&self) -> T {
        self.size[2]
    }

    pub fn volume(&self) -> T {
        self.size[0] * self.size[1] * self.size[2]
    }

    pub fn bottom(&self) -> T {
        self.center[2] - self.size[2] / T::lit(2.0)
    }

    pub fn top(&self) -> T {
        self.center[2] + self.size[2] / T::lit(2.0)
    }

    /// Distance of the center from the sensor in the ground plane.
    pub fn planar_range(&self) -> T {
        (self.center[0] * self.center[0] + self.center[1] * self.center[1]).sqrt()
    }

    /// True if `p` lies in the box, faces inclusive.
    pub fn contains(&self, p: [T; 3]) -> bool {
        let c = to_canonical(self, p);
        let half = T::lit(0.5);
        (0..3).all(|k| c[k].abs() <= self.size[k] * half)
    }

    pub fn cast<U: Real>(&self) -> Box3D<U> {
        let c = |v: T| U::lit(v.as_f64());
        Box3D {
            center: self.center.map(c),
            size: self.size.map(c),
            yaw: c(self.yaw),
        }
    }
}

/// Corner signs along (length, width, height). Bottom face first, counter-clockwise
/// seen from above starting at (+l, -w), then the top face in the same order.
pub const CORNER_SIGNS: [[i8; 3]; 8] = [
    [1, -1, -1],
    [1, 1, -1],
    [-1, 1, -1],
    [-1, -1, -1],
    [1, -1, 1],
    [1, 1, 1],
    [-1, 1, 1],
    [-1, -1, 1],
];

pub fn box3d_corners<T: Real>(b: &Box3D<T>) -> [[T; 3]; 8] {
    let half = T::lit(0.5);
    CORNER_SIGNS.map(|s| {
        let local = [
            T::lit(s[0] as f64) * b.size[0] * half,
            T::lit(s[1] as f64) * b.size[1] * half,
            T::lit(s[2] as f64) * b.size[2] * half,
        ];
        let r = rotate_z(local, b.yaw);
        [r[0] + b.center[0], r[1] + b.center[1], r[2] + b.center[2]]
    })
}

#[inline]
pub(crate) fn to_canonical<T: Real>(b: &Box3D<T>, p: [T; 3]) -> [T; 3] {
    rotate_z(
        [p[0] - b.center[0], p[1] - b.center[1], p[2] - b.center[2]],
        -b.yaw,
    )
}

#[inline]
pub(crate) fn from_canonical<T: Real>(b: &Box3D<T>, c: [T; 3]) -> [T; 3] {
    let r = rotate_z(c, b.yaw);
    [r[0] + b.center[0], r[1] + b.center[1], r[2] + b.center[2]]
}

/// Expresses points in the box frame: `R_z(-yaw) (p - center)`.
pub fn canonical_transform<T: Real>(b: &Box3D<T>, points: &[[T; 3]]) -> Vec<[T; 3]> {
    points.iter().map(|&p| to_canonical(b, p)).collect()
}

pub fn inverse_canonical_transform<T: Real>(b: &Box3D<T>, points: &[[T; 3]]) -> Vec<[T; 3]> {
    points.iter().map(|&p| from_canonical(b, p)).collect()
}

/// Axis-aligned pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box2D<T> {
    pub u_min: T,
    pub v_min: T,
    pub u_max: T,
    pub v_max: T,
}

impl<T: Real> Box2D<T> {
    pub fn new(u_min: T, v_min: T, u_max: T, v_max: T) -> Result<Self, GeometryError> {
        if !(u_min <= u_max && v_min <= v_max) {
            return Err(GeometryError::Box(format!(
                "2D box min exceeds max: ({u_min}, {v_min}, {u_max}, {v_max})"
            )));
        }
        Ok(Self {
            u_min,
            v_min,
            u_max,
            v_max,
        })
    }

    pub fn width(&self) -> T {
        self.u_max - self.u_min
    }

    pub fn height(&self) -> T {
        self.v_max - self.v_min
    }

    pub fn area(&self) -> T {
        self.width() * self.height()
    }

    pub fn center(&self) -> (T, T) {
        let h = T::lit(0.5);
        ((self.u_min + self.u_max) * h, (self.v_min + self.v_max) * h)
    }
}

/// Projects the eight corners and spans the in-view ones. The flag is false
/// when no corner is in front of the camera.
pub fn corners_to_box2d<T: Real>(calib: &CameraCalibration<T>, b: &Box3D<T>) -> (Box2D<T>, bool) {
    let mut lo = [T::infinity(); 2];
    let mut hi = [T::neg_infinity(); 2];
    let mut any = false;
    for c in box3d_corners(b) {
        let pr = calib.project(c);
        if !pr.in_view {
            continue;
        }
        any = true;
        lo[0] = lo[0].min(pr.u);
        lo[1] = lo[1].min(pr.v);
        hi[0] = hi[0].max(pr.u);
        hi[1] = hi[1].max(pr.v);
    }
    if !any {
        let z = T::zero();
        return (Box2D { u_min: z, v_min: z, u_max: z, v_max: z }, false);
    }
    (
        Box2D {
            u_min: lo[0],
            v_min: lo[1],
            u_max: hi[0],
            v_max: hi[1],
        },
        true,
    )
}
