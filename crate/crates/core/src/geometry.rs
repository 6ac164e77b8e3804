//! Camera projection, the doubled-angle orientation encoding, box overlaps
//! (image plane, bird's-eye view, 3D) and greedy non-maximum suppression.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kitti::{CalibrationPair, Detection3D};

/// Wrap an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// Axis-aligned image-plane box in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2d {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Box2d {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn intersection(&self, other: &Box2d) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= self.x1 && u <= self.x2 && v >= self.y1 && v <= self.y2
    }
}

/// `(sin 2a, cos 2a)` plus a flag resolving the pi ambiguity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientationEncoding {
    pub sin2a: f64,
    pub cos2a: f64,
    /// `|alpha| > pi/2`
    pub facing: bool,
}

pub fn encode_orientation(alpha: f64) -> OrientationEncoding {
    OrientationEncoding {
        sin2a: (2.0 * alpha).sin(),
        cos2a: (2.0 * alpha).cos(),
        facing: alpha.abs() > FRAC_PI_2,
    }
}

pub fn decode_orientation(enc: &OrientationEncoding) -> Result<f64> {
    if enc.sin2a == 0.0 && enc.cos2a == 0.0 {
        return Err(Error::invalid("cannot decode a zero orientation vector"));
    }
    if !enc.sin2a.is_finite() || !enc.cos2a.is_finite() {
        return Err(Error::NonFinite("orientation encoding".into()));
    }
    // atan2 is in (-pi, pi], so the half angle is in (-pi/2, pi/2].
    let half = enc.sin2a.atan2(enc.cos2a) / 2.0;
    if !enc.facing {
        Ok(half)
    } else if half <= 0.0 {
        Ok(half + PI)
    } else {
        Ok(half - PI)
    }
}

/// Global yaw from the observation angle: `ry = alpha + atan2(x, z)`.
pub fn alpha_to_ry(alpha: f64, x: f64, z: f64) -> Result<f64> {
    if z <= 0.0 {
        return Err(Error::invalid(format!("depth must be positive, got {z}")));
    }
    Ok(wrap_angle(alpha + x.atan2(z)))
}

pub fn ry_to_alpha(ry: f64, x: f64, z: f64) -> Result<f64> {
    if z <= 0.0 {
        return Err(Error::invalid(format!("depth must be positive, got {z}")));
    }
    Ok(wrap_angle(ry - x.atan2(z)))
}

/// Project a camera-frame point through the left projection matrix.
pub fn project_to_image(point: [f64; 3], calib: &CalibrationPair) -> Result<(f64, f64)> {
    if point[2] <= 0.0 {
        return Err(Error::invalid(format!("cannot project point with z = {}", point[2])));
    }
    Ok(calib.project_left(point))
}

pub fn iou_2d(a: &Box2d, b: &Box2d) -> f64 {
    let inter = a.intersection(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Rotated rectangle on the ground plane (camera x/z axes).
///
/// `l` runs along the heading, `w` across it; `yaw` follows the KITTI
/// `rotation_y` convention (about +y, zero along +x).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BevBox {
    pub cx: f64,
    pub cz: f64,
    pub w: f64,
    pub l: f64,
    pub yaw: f64,
}

impl BevBox {
    /// Corners in counter-clockwise order in the (x, z) plane.
    pub fn corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.yaw.sin_cos();
        let local = [
            (0.5 * self.l, 0.5 * self.w),
            (-0.5 * self.l, 0.5 * self.w),
            (-0.5 * self.l, -0.5 * self.w),
            (0.5 * self.l, -0.5 * self.w),
        ];
        let mut out = [(0.0, 0.0); 4];
        for (o, &(dx, dz)) in out.iter_mut().zip(&local) {
            *o = (self.cx + dx * c + dz * s, self.cz - dx * s + dz * c);
        }
        if signed_area(&out) < 0.0 {
            out.reverse();
        }
        out
    }

    pub fn area(&self) -> f64 {
        self.w * self.l
    }
}

fn signed_area(poly: &[(f64, f64)]) -> f64 {
    let n = poly.len();
    let mut s = 0.0;
    for i in 0..n {
        let (x0, y0) = poly[i];
        let (x1, y1) = poly[(i + 1) % n];
        s += x0 * y1 - x1 * y0;
    }
    0.5 * s
}

/// Sutherland-Hodgman clipping of `subject` by the convex CCW polygon `clip`.
fn clip_polygon(subject: &[(f64, f64)], clip: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut output = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % n];
        let side = |p: (f64, f64)| (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
        let input = std::mem::take(&mut output);
        let m = input.len();
        for j in 0..m {
            let cur = input[j];
            let prev = input[(j + m - 1) % m];
            let (sc, sp) = (side(cur), side(prev));
            if sc >= 0.0 {
                if sp < 0.0 {
                    output.push(intersect(prev, cur, sp, sc));
                }
                output.push(cur);
            } else if sp >= 0.0 {
                output.push(intersect(prev, cur, sp, sc));
            }
        }
    }
    output
}

fn intersect(p: (f64, f64), q: (f64, f64), sp: f64, sq: f64) -> (f64, f64) {
    let t = sp / (sp - sq);
    (p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1))
}

pub fn bev_intersection(a: &BevBox, b: &BevBox) -> f64 {
    let poly = clip_polygon(&a.corners(), &b.corners());
    if poly.len() < 3 {
        0.0
    } else {
        signed_area(&poly).abs()
    }
}

pub fn iou_bev(a: &BevBox, b: &BevBox) -> f64 {
    let inter = bev_intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Upright 3D box: `location` is the bottom-face center (KITTI convention,
/// y pointing down), so the box spans `[y - h, y]` vertically.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3d {
    pub location: [f64; 3],
    pub h: f64,
    pub w: f64,
    pub l: f64,
    pub ry: f64,
}

impl Box3d {
    pub fn bev(&self) -> BevBox {
        BevBox {
            cx: self.location[0],
            cz: self.location[2],
            w: self.w,
            l: self.l,
            yaw: self.ry,
        }
    }

    pub fn volume(&self) -> f64 {
        self.h * self.w * self.l
    }
}

pub fn iou_3d(a: &Box3d, b: &Box3d) -> f64 {
    let top = (a.location[1] - a.h).max(b.location[1] - b.h);
    let bottom = a.location[1].min(b.location[1]);
    let overlap_h = bottom - top;
    if overlap_h <= 0.0 {
        return 0.0;
    }
    let inter = bev_intersection(&a.bev(), &b.bev()) * overlap_h;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Indices kept by greedy NMS, in descending score order (ties by index).
pub fn nms_indices(boxes: &[Box2d], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep
            .iter()
            .all(|&k| iou_2d(&boxes[k], &boxes[i]) <= iou_threshold)
        {
            keep.push(i);
        }
    }
    keep
}

pub fn nms(dets: &[Detection3D], iou_threshold: f64) -> Vec<Detection3D> {
    let boxes: Vec<Box2d> = dets.iter().map(|d| d.box2d).collect();
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    nms_indices(&boxes, &scores, iou_threshold)
        .into_iter()
        .map(|i| dets[i].clone())
        .collect()
}

/// NMS run independently per class; output sorted by descending score.
pub fn nms_per_class(dets: &[Detection3D], iou_threshold: f64) -> Vec<Detection3D> {
    let mut classes: Vec<&str> = dets.iter().map(|d| d.class_name.as_str()).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut out = Vec::new();
    for class in classes {
        let subset: Vec<Detection3D> = dets
            .iter()
            .filter(|d| d.class_name == class)
            .cloned()
            .collect();
        out.extend(nms(&subset, iou_threshold));
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out
}
