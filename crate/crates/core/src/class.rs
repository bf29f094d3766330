//! Object class ids shared by labels, anchors, templates and metrics.

pub const CAR: usize = 0;
pub const PEDESTRIAN: usize = 1;
pub const CYCLIST: usize = 2;

pub const CLASS_NAMES: [&str; 3] = ["Car", "Pedestrian", "Cyclist"];

pub fn class_name(id: usize) -> &'static str {
    CLASS_NAMES.get(id).copied().unwrap_or("Unknown")
}

/// KITTI label type to class id; `Van` counts as a car, unknown types are `None`.
pub fn class_id(name: &str) -> Option<usize> {
    match name {
        "Car" | "Van" | "Vehicle" => Some(CAR),
        "Pedestrian" | "Person_sitting" => Some(PEDESTRIAN),
        "Cyclist" => Some(CYCLIST),
        _ => None,
    }
}

/// Classes whose shapes are mirrored across the lateral plane when densifying.
pub fn is_laterally_symmetric(id: usize) -> bool {
    id == CAR || id == CYCLIST
}
