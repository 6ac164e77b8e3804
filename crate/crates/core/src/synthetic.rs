//! Procedural stereo scenes with exact geometry, used by the self-test, the
//! test suites and the `init-data` helper of the command-line tool.
//!
//! Scenes are fronto-parallel layers: a textured background at a fixed
//! disparity and one layer per object covering its 2D box at the
//! disparity of its 3D center.

use std::f64::consts::PI;
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augment::StereoSample;
use crate::error::Result;
use crate::geometry::{ry_to_alpha, Box2d};
use crate::kitti::{write_calibration, write_labels, CalibrationPair, ObjectAnnotation};

pub const KITTI_WIDTH: u32 = 1242;
pub const KITTI_HEIGHT: u32 = 375;
pub const BACKGROUND_DISPARITY: i64 = 6;

/// Intrinsics and baseline of a typical KITTI left/right color pair.
pub fn kitti_like_calibration() -> CalibrationPair {
    CalibrationPair::from_intrinsics(721.5377, 721.5377, 609.5593, 172.854, 0.5327)
        .expect("constants are valid")
}

/// 2D box of the projected 3D box corners, if every corner is in front of
/// the camera.
pub fn project_box(obj: &ObjectAnnotation, calib: &CalibrationPair) -> Option<Box2d> {
    let bev = obj.box3d().bev();
    let (mut x1, mut y1, mut x2, mut y2) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (x, z) in bev.corners() {
        if z <= 0.1 {
            return None;
        }
        for y in [obj.location[1], obj.location[1] - obj.h3d] {
            let (u, v) = calib.project_left([x, y, z]);
            x1 = x1.min(u);
            x2 = x2.max(u);
            y1 = y1.min(v);
            y2 = y2.max(v);
        }
    }
    Some(Box2d::new(x1, y1, x2, y2))
}

/// A fully visible car on the road plane, or `None` if the sampled pose
/// leaves the image.
pub fn random_car(rng: &mut impl Rng, calib: &CalibrationPair, width: u32, height: u32) -> Option<ObjectAnnotation> {
    let z: f64 = rng.gen_range(8.0..45.0);
    let x = rng.gen_range(-0.4 * z..0.4 * z);
    let ry = rng.gen_range(-PI..PI);
    let mut obj = ObjectAnnotation {
        class_name: "Car".into(),
        truncation: 0.0,
        occlusion: 0,
        alpha: ry_to_alpha(ry, x, z).ok()?,
        box2d: Box2d::new(0.0, 0.0, 0.0, 0.0),
        h3d: rng.gen_range(1.4..1.7),
        w3d: rng.gen_range(1.5..1.8),
        l3d: rng.gen_range(3.5..4.5),
        location: [x, 1.65, z],
        rotation_y: ry,
    };
    let b = project_box(&obj, calib)?;
    let inside = b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= (width - 1) as f64 && b.y2 <= (height - 1) as f64;
    if !inside || b.height() < 25.0 {
        return None;
    }
    obj.box2d = b;
    Some(obj)
}

fn texture(layer: u64, x: i64, y: i64) -> [u8; 3] {
    // splitmix64 finalizer over the packed coordinates
    let mut h = layer.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ ((x as u64) << 32) ^ (y as u64 & 0xffff_ffff);
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^= h >> 31;
    [h as u8, (h >> 8) as u8, (h >> 16) as u8]
}

struct Layer {
    id: u64,
    disparity: i64,
    /// columns/rows covered in the left image, inclusive-exclusive
    x0: i64,
    x1: i64,
    y0: i64,
    y1: i64,
}

/// Render a stereo pair with `objects`; also returns the integer left
/// disparity map used for rendering.
pub fn render_pair(
    objects: &[ObjectAnnotation],
    calib: &CalibrationPair,
    width: u32,
    height: u32,
    seed: u64,
) -> (RgbImage, RgbImage, Vec<f32>) {
    let (w, h) = (width as i64, height as i64);
    let mut layers = vec![Layer {
        id: seed.wrapping_mul(31),
        disparity: BACKGROUND_DISPARITY,
        x0: i64::MIN / 4,
        x1: i64::MAX / 4,
        y0: 0,
        y1: h,
    }];
    for (i, o) in objects.iter().enumerate() {
        let z = o.center3d()[2];
        if z <= 0.0 {
            continue;
        }
        layers.push(Layer {
            id: seed.wrapping_mul(31) + i as u64 + 1,
            disparity: (calib.fx * calib.baseline / z).round() as i64,
            x0: o.box2d.x1.round() as i64,
            x1: o.box2d.x2.round() as i64,
            y0: o.box2d.y1.round() as i64,
            y1: o.box2d.y2.round() as i64,
        });
    }
    // nearest first
    layers.sort_by_key(|l| std::cmp::Reverse(l.disparity));
    let mut disp = vec![0.0f32; (w * h) as usize];
    let pick = |x: i64, y: i64, right: bool| -> ([u8; 3], i64) {
        for l in &layers {
            let lx = if right { x + l.disparity } else { x };
            if lx >= l.x0 && lx < l.x1 && y >= l.y0 && y < l.y1 {
                return (texture(l.id, lx, y), l.disparity);
            }
        }
        unreachable!("background covers the image")
    };
    let mut left = RgbImage::new(width, height);
    let mut right = RgbImage::new(width, height);
    for y in 0..h {
        for x in 0..w {
            let (c, d) = pick(x, y, false);
            left.put_pixel(x as u32, y as u32, Rgb(c));
            disp[(y * w + x) as usize] = d as f32;
            right.put_pixel(x as u32, y as u32, Rgb(pick(x, y, true).0));
        }
    }
    (left, right, disp)
}

/// KITTI-sized scene with up to `max_objects` cars.
pub fn synthetic_scene(seed: u64, max_objects: usize) -> StereoSample {
    synthetic_scene_sized(seed, max_objects, KITTI_WIDTH, KITTI_HEIGHT)
}

pub fn synthetic_scene_sized(seed: u64, max_objects: usize, width: u32, height: u32) -> StereoSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let calib = kitti_like_calibration();
    let mut objects = Vec::new();
    let mut attempts = 0;
    while objects.len() < max_objects && attempts < 200 * max_objects.max(1) {
        attempts += 1;
        if let Some(o) = random_car(&mut rng, &calib, width, height) {
            objects.push(o);
        }
    }
    let (left, right, _) = render_pair(&objects, &calib, width, height, seed);
    StereoSample {
        left,
        right,
        objects,
        calib,
    }
}

/// Write `frames` scenes in the KITTI object layout under `root` plus a
/// `split.txt` listing their ids. Returns the ids.
pub fn write_dataset(root: &Path, frames: usize, seed: u64, width: u32, height: u32) -> Result<Vec<String>> {
    for dir in ["image_2", "image_3", "label_2", "calib"] {
        std::fs::create_dir_all(root.join(dir))?;
    }
    let mut ids = Vec::with_capacity(frames);
    for i in 0..frames {
        let id = format!("{i:06}");
        let s = synthetic_scene_sized(seed.wrapping_add(i as u64), 4, width, height);
        s.left.save(root.join("image_2").join(format!("{id}.png")))?;
        s.right.save(root.join("image_3").join(format!("{id}.png")))?;
        std::fs::write(root.join("label_2").join(format!("{id}.txt")), write_labels(&s.objects))?;
        std::fs::write(root.join("calib").join(format!("{id}.txt")), write_calibration(&s.calib))?;
        ids.push(id);
    }
    std::fs::write(root.join("split.txt"), ids.join("\n") + "\n")?;
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cars_are_inside_and_consistent() {
        let calib = kitti_like_calibration();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut n = 0;
        for _ in 0..500 {
            if let Some(o) = random_car(&mut rng, &calib, KITTI_WIDTH, KITTI_HEIGHT) {
                n += 1;
                let (u, v) = calib.project_left(o.center3d());
                assert!(o.box2d.contains(u, v));
                assert!(o.box2d.height() >= 25.0);
            }
        }
        assert!(n > 50);
    }

    #[test]
    fn rendering_respects_disparity() {
        let s = synthetic_scene_sized(3, 3, 320, 120);
        let (l, r, d) = render_pair(&s.objects, &s.calib, 320, 120, 3);
        assert_eq!((l.clone(), r.clone()), (s.left.clone(), s.right.clone()));
        // right(x - d) == left(x) wherever the same layer is visible in both
        let mut agree = 0;
        let mut total = 0;
        for y in 0..120u32 {
            for x in 0..320u32 {
                let dx = d[(y * 320 + x) as usize] as i64;
                let xr = x as i64 - dx;
                if xr < 0 {
                    continue;
                }
                total += 1;
                if l.get_pixel(x, y) == r.get_pixel(xr as u32, y) {
                    agree += 1;
                }
            }
        }
        assert!(agree as f64 > 0.9 * total as f64);
        assert_eq!(synthetic_scene_sized(3, 3, 320, 120), s);
    }
}
