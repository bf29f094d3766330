use crate::scalar::Real;

use super::{box3d_corners, Box3D};

/// Ground-plane footprint, counter-clockwise.
pub fn bev_polygon<T: Real>(b: &Box3D<T>) -> [[T; 2]; 4] {
    let c = box3d_corners(b);
    [
        [c[0][0], c[0][1]],
        [c[1][0], c[1][1]],
        [c[2][0], c[2][1]],
        [c[3][0], c[3][1]],
    ]
}

/// Shoelace area; positive for counter-clockwise input.
pub fn polygon_area<T: Real>(poly: &[[T; 2]]) -> T {
    let n = poly.len();
    if n < 3 {
        return T::zero();
    }
    let mut s = T::zero();
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        s += a[0] * b[1] - a[1] * b[0];
    }
    s / T::lit(2.0)
}

fn cross<T: Real>(o: [T; 2], a: [T; 2], b: [T; 2]) -> T {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Sutherland-Hodgman clipping of `subject` by the counter-clockwise convex `clip`.
pub fn clip_convex<T: Real>(subject: &[[T; 2]], clip: &[[T; 2]]) -> Vec<[T; 2]> {
    let mut output: Vec<[T; 2]> = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % n]);
        let input = std::mem::take(&mut output);
        let m = input.len();
        for j in 0..m {
            let cur = input[j];
            let prev = input[(j + m - 1) % m];
            let cur_in = cross(a, b, cur) >= T::zero();
            let prev_in = cross(a, b, prev) >= T::zero();
            if cur_in {
                if !prev_in {
                    output.push(intersect(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(intersect(prev, cur, a, b));
            }
        }
    }
    output
}

fn intersect<T: Real>(p: [T; 2], q: [T; 2], a: [T; 2], b: [T; 2]) -> [T; 2] {
    let dp = cross(a, b, p);
    let dq = cross(a, b, q);
    let denom = dp - dq;
    if denom == T::zero() {
        return q;
    }
    let t = dp / denom;
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

pub fn bev_intersection_area<T: Real>(a: &Box3D<T>, b: &Box3D<T>) -> T {
    let pa = bev_polygon(a);
    let pb = bev_polygon(b);
    // quick reject on circumscribed circles
    let ra = (a.size[0] * a.size[0] + a.size[1] * a.size[1]).sqrt() / T::lit(2.0);
    let rb = (b.size[0] * b.size[0] + b.size[1] * b.size[1]).sqrt() / T::lit(2.0);
    let dx = a.center[0] - b.center[0];
    let dy = a.center[1] - b.center[1];
    if (dx * dx + dy * dy).sqrt() > ra + rb {
        return T::zero();
    }
    polygon_area(&clip_convex(&pa, &pb)).max(T::zero())
}

pub fn iou_bev<T: Real>(a: &Box3D<T>, b: &Box3D<T>) -> T {
    let inter = bev_intersection_area(a, b);
    let union = a.size[0] * a.size[1] + b.size[0] * b.size[1] - inter;
    if union <= T::zero() {
        return T::zero();
    }
    (inter / union).max(T::zero()).min(T::one())
}

/// Length of the shared z-interval.
pub fn vertical_overlap<T: Real>(a: &Box3D<T>, b: &Box3D<T>) -> T {
    (a.top().min(b.top()) - a.bottom().max(b.bottom())).max(T::zero())
}

pub fn iou_3d<T: Real>(a: &Box3D<T>, b: &Box3D<T>) -> T {
    let h = vertical_overlap(a, b);
    if h <= T::zero() {
        return T::zero();
    }
    let inter = bev_intersection_area(a, b) * h;
    let union = a.volume() + b.volume() - inter;
    if union <= T::zero() {
        return T::zero();
    }
    (inter / union).max(T::zero()).min(T::one())
}
