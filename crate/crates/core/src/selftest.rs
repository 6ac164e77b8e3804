//! Quick oracle and invariant checks on synthetic data, run by the
//! `selftest` command.

use std::f64::consts::PI;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::anchors::{compute_priors, decode_anchor, encode_targets, generate_grid, AnchorShape, BoxCodec};
use crate::augment::stereo_flip;
use crate::disparity::{block_match, luminance, BlockMatchParams};
use crate::error::Result;
use crate::evaluation::{average_precision, Difficulty, IouKind};
use crate::geometry::{decode_orientation, encode_orientation, wrap_angle};
use crate::kitti::Detection3D;
use crate::losses::{disparity_target, stereo_focal_loss, FocusSign};
use crate::nn::ForwardTrace;
use crate::stereo::{concatenation_volume, correlation_volume, ghost_dense_forward, GhostParams};
use crate::nn::ConvBn;
use crate::synthetic::{synthetic_scene, synthetic_scene_sized};
use crate::tensor::Tensor;
use crate::weights::WeightArchive;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {:<22} {}", self.name, self.detail)
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn cost_volumes() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut concat_exact = true;
    for _ in 0..20 {
        let (c, h, w) = (rng.gen_range(1..9), rng.gen_range(1..9), rng.gen_range(2..12));
        let d = rng.gen_range(1..=w);
        let l = random(&[1, c, h, w], &mut rng);
        let r = random(&[1, c, h, w], &mut rng);
        let corr = correlation_volume(&l, &r, d)?.data;
        let cat = concatenation_volume(&l, &r, d)?.data;
        for k in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let (mut dot, mut nl, mut nr) = (0.0f64, 0.0f64, 0.0f64);
                    for ch in 0..c {
                        let a = l.at4(0, ch, y, x) as f64;
                        let b = if x >= k { r.at4(0, ch, y, x - k) as f64 } else { 0.0 };
                        dot += a * b;
                        nl += a * a;
                        nr += b * b;
                        let ci = ((c + ch) * d + k) * h * w + y * w + x;
                        concat_exact &= cat.data()[ci] == b as f32;
                    }
                    let want = if x >= k && nl > 0.0 && nr > 0.0 { dot / (nl * nr).sqrt() } else { 0.0 };
                    let got = corr.data()[(k * h + y) * w + x] as f64;
                    worst = worst.max((got - want).abs());
                }
            }
        }
    }
    Ok((worst < 1e-5 && concat_exact, format!("max |corr - oracle| = {worst:.2e}, concat exact = {concat_exact}")))
}

fn ghost() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let c = 6;
    let ts: Vec<Tensor> = [vec![c, c, 1, 1], vec![c], vec![c, 1, 3, 3], vec![c]]
        .iter()
        .map(|s| random(s, &mut rng))
        .collect();
    let params = GhostParams {
        primary: ConvBn { weight: &ts[0], bias: ts[1].data(), affine: None, stride: 1, padding: 0, groups: 1, relu: true },
        cheap: ConvBn { weight: &ts[2], bias: ts[3].data(), affine: None, stride: 1, padding: 1, groups: c, relu: true },
    };
    let x = random(&[1, c, 5, 7], &mut rng);
    let y = ghost_dense_forward(&x, &params, &mut ForwardTrace::default(), "ghost")?;
    let ok = y.shape()[1] == 3 * c && y.slice_channels(0, c)? == x;
    Ok((ok, format!("{c} -> {} channels", y.shape()[1])))
}

fn focal_gradient() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let gt: Vec<f32> = (0..4).map(|_| rng.gen_range(0.0..7.0)).collect();
    let t = disparity_target(&gt, 2, 2, 8, 0.5)?;
    let z: Vec<f64> = (0..32).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let g = stereo_focal_loss(&z, &t, 0.0, FocusSign::Negative)?.grad;
    let mut worst = 0.0f64;
    let h = 1e-3;
    for i in 0..z.len() {
        let mut zp = z.clone();
        zp[i] += h;
        let mut zm = z.clone();
        zm[i] -= h;
        let fd = (stereo_focal_loss(&zp, &t, 0.0, FocusSign::Negative)?.loss
            - stereo_focal_loss(&zm, &t, 0.0, FocusSign::Negative)?.loss)
            / (2.0 * h);
        worst = worst.max((fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6));
    }
    let sums = (0..4).all(|p| (t.probs[p * 8..(p + 1) * 8].iter().sum::<f64>() - 1.0).abs() < 1e-6);
    Ok((worst < 1e-4 && sums, format!("max rel. gradient error {worst:.2e}")))
}

fn anchor_roundtrip() -> Result<(bool, String)> {
    let scene = synthetic_scene(4, 4);
    let shapes: Vec<AnchorShape> = [32.0, 64.0, 128.0]
        .iter()
        .map(|&h| AnchorShape { w2d: h * 1.5, h2d: h, scale_level: 16 })
        .collect();
    let anchors = generate_grid(1248, 384, &shapes)?;
    let classes = vec!["Car".to_string()];
    let frames: Vec<_> = (0..20).map(|s| synthetic_scene(40 + s, 4).objects).collect();
    let priors = compute_priors(frames.iter().map(Vec::as_slice), &anchors, &classes, 0.5, 0.4)?;
    let codec = BoxCodec::default();
    let mut worst = 0.0f64;
    let mut n = 0;
    for obj in &scene.objects {
        for a in anchors.anchors.iter().step_by(97) {
            if priors.stats(0, a.shape_index).is_none() {
                continue;
            }
            let t = encode_targets(obj, 0, a, &priors, &scene.calib, &codec)?;
            let d = decode_anchor(&t, a, &priors, "Car", &scene.calib, &codec, 1.0)?;
            n += 1;
            for i in 0..3 {
                worst = worst.max((d.location[i] - obj.location[i]).abs());
            }
            worst = worst.max(wrap_angle(d.alpha - obj.alpha).abs());
        }
    }
    Ok((n > 0 && worst < 1e-5, format!("{n} pairs, max error {worst:.2e}")))
}

fn orientation() -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    for i in 0..2000 {
        let a = -PI + 2.0 * PI * (i as f64 + 0.5) / 2000.0;
        if (a.abs() - PI / 2.0).abs() < 1e-3 {
            continue;
        }
        let e = encode_orientation(a);
        let f = encode_orientation(wrap_angle(a + PI));
        worst = worst.max((e.sin2a - f.sin2a).abs()).max((e.cos2a - f.cos2a).abs());
        worst = worst.max(wrap_angle(decode_orientation(&e)? - a).abs());
    }
    Ok((worst < 1e-6, format!("max error {worst:.2e}")))
}

fn block_matching() -> Result<(bool, String)> {
    let (w, h) = (160usize, 40usize);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let left: Vec<u8> = (0..w * h).map(|_| rng.gen()).collect();
    let k = 7;
    let right: Vec<u8> = (0..w * h)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            if x + k < w {
                left[y * w + x + k]
            } else {
                0
            }
        })
        .collect();
    let params = BlockMatchParams { search_range: 24, ..BlockMatchParams::default() };
    let m = block_match(&left, &right, w, h, &params)?;
    let valid: Vec<f32> = m.values.iter().copied().filter(|&v| v >= 0.0).collect();
    let hits = valid.iter().filter(|&&v| v == k as f32).count();
    let flat = vec![90u8; w * h];
    let none = block_match(&flat, &flat, w, h, &params)?.valid_count() == 0;
    let frac = hits as f64 / valid.len().max(1) as f64;
    // luminance of the synthetic renderer output stays in range
    let scene = synthetic_scene_sized(6, 1, 64, 32);
    let lum_ok = luminance(&scene.left).len() == 64 * 32;
    Ok((frac >= 0.95 && none && lum_ok, format!("shift {k}: {:.1}% exact, textureless invalid = {none}", 100.0 * frac)))
}

fn flip() -> Result<(bool, String)> {
    let mut ok = true;
    for seed in 0..5 {
        let s = synthetic_scene_sized(70 + seed, 3, 400, 200);
        let back = stereo_flip(&stereo_flip(&s)?)?;
        ok &= back.left == s.left && back.right == s.right;
        for (a, b) in back.objects.iter().zip(&s.objects) {
            ok &= (a.location[0] - b.location[0]).abs() < 1e-9 && wrap_angle(a.alpha - b.alpha).abs() < 1e-9;
        }
    }
    Ok((ok, "flip twice restores 5 samples".into()))
}

fn evaluation() -> Result<(bool, String)> {
    let frames: Vec<_> = (0..8).map(|s| synthetic_scene(90 + s, 4).objects).collect();
    let dets: Vec<Vec<Detection3D>> = frames.iter().map(|f| f.iter().map(Detection3D::from).collect()).collect();
    let mut ok = true;
    for kind in [IouKind::TwoD, IouKind::Bev, IouKind::ThreeD] {
        for diff in Difficulty::ALL {
            let ap = average_precision(&frames, &dets, "Car", kind, 0.7, &diff.bucket(), 40)?;
            ok &= (ap - 1.0).abs() < 1e-12;
        }
    }
    Ok((ok, "ground truth as detections gives AP 1".into()))
}

fn weights() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut a = WeightArchive::new();
    a.insert("w", random(&[3, 2, 3, 3], &mut rng));
    let bytes = a.to_bytes()?;
    let same = WeightArchive::from_bytes(&bytes)? == a;
    let mut bad = bytes.clone();
    let mid = bad.len() / 2;
    bad[mid] ^= 1;
    let caught = WeightArchive::from_bytes(&bad).is_err();
    Ok((same && caught, "roundtrip bit-exact, corruption detected".into()))
}

/// Run every check; failures are reported, not returned as errors.
pub fn run() -> Vec<Check> {
    let checks: [(&'static str, fn() -> Result<(bool, String)>); 9] = [
        ("cost_volumes", cost_volumes),
        ("ghost_module", ghost),
        ("stereo_focal_loss", focal_gradient),
        ("anchor_roundtrip", anchor_roundtrip),
        ("orientation", orientation),
        ("block_matching", block_matching),
        ("stereo_flip", flip),
        ("evaluation", evaluation),
        ("weight_archive", weights),
    ];
    checks
        .into_iter()
        .map(|(name, f)| match f() {
            Ok((passed, detail)) => Check { name, passed, detail },
            Err(e) => Check {
                name,
                passed: false,
                detail: format!("error: {e}"),
            },
        })
        .collect()
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_checks_pass() {
        for c in super::run() {
            assert!(c.passed, "{c}");
        }
    }
}
