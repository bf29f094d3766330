//! Calibration, projection, oriented boxes, rotated IoU and image-feature sampling.

mod boxes;
mod calib;
mod feature_map;
mod iou;

pub use boxes::{box3d_corners, canonical_transform, inverse_canonical_transform, Box2D, Box3D};
pub use calib::{project_points, CameraCalibration, Projection};
pub use feature_map::{
    bilinear_sample, bilinear_weights, enlarge_box2d, read_fmap, roi_align, roi_align_weights, write_fmap,
    FeatureMap,
};
pub use iou::{bev_polygon, clip_convex, iou_3d, iou_bev, polygon_area, vertical_overlap};

pub use boxes::corners_to_box2d;

#[derive(Debug, thiserror::Error)]
pub enum GeometryError {
    #[error("invalid calibration: {0}")]
    Calibration(String),
    #[error("invalid box: {0}")]
    Box(String),
    #[error("invalid feature map: {0}")]
    FeatureMap(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Point3<T> = [T; 3];

#[inline]
pub(crate) fn rotate_z<T: crate::scalar::Real>(p: [T; 3], yaw: T) -> [T; 3] {
    let (s, c) = yaw.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]]
}
