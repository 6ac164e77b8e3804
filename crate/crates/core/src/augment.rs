//! Stereo-consistent augmentation: photometric distortion shared by both
//! views and horizontal flip with left/right swap.

use std::f64::consts::PI;

use image::{imageops, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Box2d};
use crate::kitti::{CalibrationPair, ObjectAnnotation, Projection};

/// Sampling ranges for [`PhotometricParams::sample`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhotometricRanges {
    /// additive, in 8-bit units
    pub brightness: f32,
    pub contrast: (f32, f32),
    pub saturation: (f32, f32),
    /// degrees
    pub hue: f32,
}

impl Default for PhotometricRanges {
    fn default() -> Self {
        Self {
            brightness: 32.0,
            contrast: (0.5, 1.5),
            saturation: (0.5, 1.5),
            hue: 18.0,
        }
    }
}

/// One concrete distortion, applied identically to both views.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhotometricParams {
    pub brightness_delta: f32,
    pub contrast_gain: f32,
    pub saturation_gain: f32,
    pub hue_delta: f32,
}

impl Default for PhotometricParams {
    fn default() -> Self {
        Self {
            brightness_delta: 0.0,
            contrast_gain: 1.0,
            saturation_gain: 1.0,
            hue_delta: 0.0,
        }
    }
}

impl PhotometricParams {
    pub fn sample(ranges: &PhotometricRanges, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sym = |r: f32| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 };
        let brightness_delta = sym(ranges.brightness);
        let hue_delta = sym(ranges.hue);
        let mut span = |(lo, hi): (f32, f32)| if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let contrast_gain = span(ranges.contrast);
        let saturation_gain = span(ranges.saturation);
        Self {
            brightness_delta,
            contrast_gain,
            saturation_gain,
            hue_delta,
        }
    }
}

fn rgb_to_hsv([r, g, b]: [f32; 3]) -> [f32; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let c = max - min;
    let h = if c == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / c).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / c + 2.0)
    } else {
        60.0 * ((r - g) / c + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { c / max };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f32; 3]) -> [f32; 3] {
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn distort_pixel(px: [u8; 3], p: &PhotometricParams) -> [u8; 3] {
    let mut v = px.map(|c| c as f32);
    if p.brightness_delta != 0.0 {
        v = v.map(|c| c + p.brightness_delta);
    }
    if p.contrast_gain != 1.0 {
        v = v.map(|c| c * p.contrast_gain);
    }
    if p.saturation_gain != 1.0 || p.hue_delta != 0.0 {
        let [h, s, val] = rgb_to_hsv(v.map(|c| c.clamp(0.0, 255.0)));
        v = hsv_to_rgb([h + p.hue_delta, (s * p.saturation_gain).clamp(0.0, 1.0), val]);
    }
    v.map(|c| c.round().clamp(0.0, 255.0) as u8)
}

fn distort(img: &RgbImage, p: &PhotometricParams) -> RgbImage {
    let mut out = img.clone();
    for px in out.pixels_mut() {
        px.0 = distort_pixel(px.0, p);
    }
    out
}

/// Apply the same distortion to both images.
pub fn photometric_distort(left: &RgbImage, right: &RgbImage, params: &PhotometricParams) -> (RgbImage, RgbImage) {
    (distort(left, params), distort(right, params))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StereoSample {
    pub left: RgbImage,
    pub right: RgbImage,
    pub objects: Vec<ObjectAnnotation>,
    pub calib: CalibrationPair,
}

/// Projection of the mirrored scene (x -> -x) seen in the mirrored image
/// (u -> W-1-u): `row0' = ((W-1) row2 - row0) S`, `S = diag(-1, 1, 1, 1)`.
fn mirror_projection(p: &Projection, width: f64) -> Projection {
    let mut out = *p;
    for j in 0..4 {
        out[0][j] = (width - 1.0) * p[2][j] - p[0][j];
    }
    for row in out.iter_mut() {
        row[0] = -row[0];
    }
    out
}

fn mirror_box(b: &Box2d, width: f64, shift: f64) -> Box2d {
    Box2d::new(width - 1.0 - (b.x2 - shift), b.y1, width - 1.0 - (b.x1 - shift), b.y2)
}

/// Mirror both images, swap them and mirror the scene. The mirrored right
/// view becomes the new left view, so 2D boxes move by the object's
/// disparity before mirroring. Applying it twice restores the sample.
pub fn stereo_flip(sample: &StereoSample) -> Result<StereoSample> {
    if sample.left.dimensions() != sample.right.dimensions() {
        return Err(Error::shape(format!(
            "stereo pair sizes differ: {:?} vs {:?}",
            sample.left.dimensions(),
            sample.right.dimensions()
        )));
    }
    let width = sample.left.width() as f64;
    let calib = &sample.calib;
    let new_calib = CalibrationPair::from_matrices(
        mirror_projection(&calib.p3, width),
        mirror_projection(&calib.p2, width),
    )?;
    let objects = sample
        .objects
        .iter()
        .map(|o| {
            let z = o.location[2];
            let disparity = if z > 0.0 { calib.fx * calib.baseline / z } else { 0.0 };
            let mut f = o.clone();
            f.box2d = mirror_box(&o.box2d, width, disparity);
            f.location[0] = -o.location[0];
            f.alpha = wrap_angle(PI - o.alpha);
            f.rotation_y = wrap_angle(PI - o.rotation_y);
            f
        })
        .collect();
    Ok(StereoSample {
        left: imageops::flip_horizontal(&sample.right),
        right: imageops::flip_horizontal(&sample.left),
        objects,
        calib: new_calib,
    })
}
