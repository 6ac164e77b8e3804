//! Dense anchors with per-shape 3D statistical priors.
//!
//! Every anchor regresses twelve values: the 2D box deltas, the projected 3D
//! center on the left image, the prior-normalized depth, log-ratio
//! dimensions and the prior-normalized doubled-angle orientation. A separate
//! logit resolves the orientation ambiguity (see
//! [`crate::geometry::OrientationEncoding`]).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{alpha_to_ry, decode_orientation, encode_orientation, iou_2d, Box2d, OrientationEncoding};
use crate::kitti::{CalibrationPair, Detection3D, ObjectAnnotation};
use crate::tensor::Tensor;

pub const PRIORS_SCHEMA_VERSION: u32 = 1;
/// Number of regressed parameters per anchor.
pub const NUM_REGRESSION: usize = 12;
/// Regression channels per anchor in the head output: 12 values + facing logit.
pub const REG_CHANNELS: usize = NUM_REGRESSION + 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorShape {
    pub w2d: f64,
    pub h2d: f64,
    /// Output stride of the feature map this shape tiles (4, 8 or 16).
    pub scale_level: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub shape_index: usize,
}

impl Anchor {
    pub fn box2d(&self) -> Box2d {
        Box2d::from_center(self.cx, self.cy, self.w, self.h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelGrid {
    pub stride: usize,
    pub rows: usize,
    pub cols: usize,
    /// index of the first anchor of this level
    pub offset: usize,
    /// shapes tiled at this level, in configuration order
    pub shapes_per_cell: usize,
}

#[derive(Debug, Clone)]
pub struct AnchorSet {
    pub shapes: Vec<AnchorShape>,
    pub levels: Vec<LevelGrid>,
    pub anchors: Vec<Anchor>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Tile every shape over its level's grid; anchors are ordered by
/// `(level, row, col, shape)` with levels in ascending stride.
pub fn generate_grid(image_w: usize, image_h: usize, shapes: &[AnchorShape]) -> Result<AnchorSet> {
    let mut strides: Vec<usize> = shapes.iter().map(|s| s.scale_level).collect();
    strides.sort_unstable();
    strides.dedup();
    let mut levels = Vec::new();
    let mut anchors = Vec::new();
    for stride in strides {
        if stride == 0 || !image_w.is_multiple_of(stride) || !image_h.is_multiple_of(stride) {
            return Err(Error::invalid(format!(
                "stride {stride} does not divide image size {image_w}x{image_h}"
            )));
        }
        let level_shapes: Vec<(usize, &AnchorShape)> = shapes
            .iter()
            .enumerate()
            .filter(|(_, s)| s.scale_level == stride)
            .collect();
        if let Some((i, s)) = level_shapes.iter().find(|(_, s)| !(s.w2d > 0.0 && s.h2d > 0.0)) {
            return Err(Error::invalid(format!("anchor shape {i} has non-positive size {s:?}")));
        }
        let (rows, cols) = (image_h / stride, image_w / stride);
        levels.push(LevelGrid {
            stride,
            rows,
            cols,
            offset: anchors.len(),
            shapes_per_cell: level_shapes.len(),
        });
        for r in 0..rows {
            for c in 0..cols {
                for &(idx, s) in &level_shapes {
                    anchors.push(Anchor {
                        cx: (c as f64 + 0.5) * stride as f64,
                        cy: (r as f64 + 0.5) * stride as f64,
                        w: s.w2d,
                        h: s.h2d,
                        shape_index: idx,
                    });
                }
            }
        }
    }
    Ok(AnchorSet {
        shapes: shapes.to_vec(),
        levels,
        anchors,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Assignment {
    Positive(usize),
    Negative,
    Ignored,
}

/// Match anchors to ground truth by 2D IoU.
///
/// DontCare rows never become targets; anchors overlapping them that would
/// otherwise be negative are ignored. After thresholding, each real object
/// is additionally given its single best anchor (lowest index on ties);
/// later objects win when two claim the same anchor.
pub fn assign(anchors: &AnchorSet, gts: &[ObjectAnnotation], pos_iou: f64, neg_iou: f64) -> Result<Vec<Assignment>> {
    if !(0.0..=1.0).contains(&neg_iou) || !(0.0..=1.0).contains(&pos_iou) || neg_iou > pos_iou {
        return Err(Error::invalid(format!(
            "need 0 <= neg_iou <= pos_iou <= 1, got {neg_iou}, {pos_iou}"
        )));
    }
    let real: Vec<usize> = (0..gts.len()).filter(|&j| !gts[j].is_dont_care()).collect();
    let dont_care: Vec<&ObjectAnnotation> = gts.iter().filter(|g| g.is_dont_care()).collect();
    let mut best_anchor: Vec<(usize, f64)> = vec![(usize::MAX, 0.0); real.len()];
    let mut out: Vec<Assignment> = Vec::with_capacity(anchors.len());
    for (i, a) in anchors.anchors.iter().enumerate() {
        let ab = a.box2d();
        let mut best: Option<(usize, f64)> = None;
        for (slot, &j) in real.iter().enumerate() {
            let iou = iou_2d(&ab, &gts[j].box2d);
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
            if iou > best_anchor[slot].1 {
                best_anchor[slot] = (i, iou);
            }
        }
        let verdict = match best {
            Some((j, iou)) if iou >= pos_iou => Assignment::Positive(j),
            Some((_, iou)) if iou >= neg_iou => Assignment::Ignored,
            _ => {
                if dont_care.iter().any(|g| iou_2d(&ab, &g.box2d) >= neg_iou.max(f64::MIN_POSITIVE)) {
                    Assignment::Ignored
                } else {
                    Assignment::Negative
                }
            }
        };
        out.push(verdict);
    }
    for (slot, &j) in real.iter().enumerate() {
        let (i, iou) = best_anchor[slot];
        if iou > 0.0 {
            out[i] = Assignment::Positive(j);
        }
    }
    Ok(out)
}

/// Single-pass mean/variance (Welford) with min/max tracking.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RunningStats {
    pub count: u64,
    mean: f64,
    m2: f64,
    min: f64,
    max: f64,
}

impl RunningStats {
    pub fn push(&mut self, x: f64) {
        if self.count == 0 {
            self.min = x;
            self.max = x;
        } else {
            self.min = self.min.min(x);
            self.max = self.max.max(x);
        }
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    /// Chan et al. parallel combination.
    pub fn merge(&mut self, other: &RunningStats) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let n = (self.count + other.count) as f64;
        let delta = other.mean - self.mean;
        self.mean += delta * other.count as f64 / n;
        self.m2 += other.m2 + delta * delta * self.count as f64 * other.count as f64 / n;
        self.count += other.count;
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
    }

    pub fn mean(&self) -> f64 {
        self.mean.clamp(self.min, self.max)
    }

    /// Population variance.
    pub fn variance(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.m2 / self.count as f64).max(0.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorStats {
    pub mean_z: f64,
    pub var_z: f64,
    pub mean_sin2a: f64,
    pub var_sin2a: f64,
    pub mean_cos2a: f64,
    pub var_cos2a: f64,
    pub sample_count: u64,
}

impl PriorStats {
    pub fn usable(&self) -> bool {
        self.sample_count > 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanDims {
    pub h: f64,
    pub w: f64,
    pub l: f64,
    pub sample_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPriors {
    pub name: String,
    pub dims: MeanDims,
    /// indexed by anchor-shape index
    pub shapes: Vec<PriorStats>,
}

/// Per-class, per-anchor-shape statistics, persisted as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorPriors {
    pub schema_version: u32,
    pub shapes: Vec<AnchorShape>,
    pub classes: Vec<ClassPriors>,
}

impl AnchorPriors {
    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.name == name)
    }

    pub fn stats(&self, class_id: usize, shape_index: usize) -> Option<&PriorStats> {
        self.classes
            .get(class_id)
            .and_then(|c| c.shapes.get(shape_index))
            .filter(|s| s.usable())
    }

    pub fn dims(&self, class_id: usize) -> Option<&MeanDims> {
        self.classes
            .get(class_id)
            .map(|c| &c.dims)
            .filter(|d| d.sample_count > 0 && d.h > 0.0 && d.w > 0.0 && d.l > 0.0)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: AnchorPriors = serde_json::from_str(text)?;
        if p.schema_version != PRIORS_SCHEMA_VERSION {
            return Err(Error::invalid(format!(
                "priors schema version {} is not supported (expected {PRIORS_SCHEMA_VERSION})",
                p.schema_version
            )));
        }
        if p.classes.iter().any(|c| c.shapes.len() != p.shapes.len()) {
            return Err(Error::invalid("priors table size does not match the shape list"));
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, Default)]
struct ClassAccumulator {
    z: Vec<RunningStats>,
    sin2a: Vec<RunningStats>,
    cos2a: Vec<RunningStats>,
    h: RunningStats,
    w: RunningStats,
    l: RunningStats,
}

/// Accumulate depth and orientation statistics of the objects assigned to
/// each anchor shape, separately per class. Frames are matched in parallel
/// and merged in frame order.
pub fn compute_priors<'a, I>(
    dataset: I,
    anchors: &AnchorSet,
    classes: &[String],
    pos_iou: f64,
    neg_iou: f64,
) -> Result<AnchorPriors>
where
    I: IntoIterator<Item = &'a [ObjectAnnotation]>,
{
    let frames: Vec<&[ObjectAnnotation]> = dataset.into_iter().collect();
    if frames.is_empty() {
        return Err(Error::invalid("cannot compute priors from an empty dataset"));
    }
    let n_shapes = anchors.shapes.len();
    let assignments: Vec<Vec<Assignment>> = frames
        .par_iter()
        .map(|gts| assign(anchors, gts, pos_iou, neg_iou))
        .collect::<Result<_>>()?;

    let mut acc: Vec<ClassAccumulator> = (0..classes.len())
        .map(|_| ClassAccumulator {
            z: vec![RunningStats::default(); n_shapes],
            sin2a: vec![RunningStats::default(); n_shapes],
            cos2a: vec![RunningStats::default(); n_shapes],
            ..Default::default()
        })
        .collect();
    for (gts, assigned) in frames.iter().zip(&assignments) {
        for g in gts.iter() {
            if let Some(c) = classes.iter().position(|c| *c == g.class_name) {
                acc[c].h.push(g.h3d);
                acc[c].w.push(g.w3d);
                acc[c].l.push(g.l3d);
            }
        }
        for (a, verdict) in anchors.anchors.iter().zip(assigned) {
            let Assignment::Positive(j) = *verdict else { continue };
            let g = &gts[j];
            let Some(c) = classes.iter().position(|c| *c == g.class_name) else {
                continue;
            };
            let enc = encode_orientation(g.alpha);
            let s = a.shape_index;
            acc[c].z[s].push(g.location[2]);
            acc[c].sin2a[s].push(enc.sin2a);
            acc[c].cos2a[s].push(enc.cos2a);
        }
    }
    let classes = classes
        .iter()
        .zip(acc)
        .map(|(name, a)| ClassPriors {
            name: name.clone(),
            dims: MeanDims {
                h: a.h.mean(),
                w: a.w.mean(),
                l: a.l.mean(),
                sample_count: a.h.count,
            },
            shapes: (0..n_shapes)
                .map(|s| PriorStats {
                    mean_z: a.z[s].mean(),
                    var_z: a.z[s].variance(),
                    mean_sin2a: a.sin2a[s].mean(),
                    var_sin2a: a.sin2a[s].variance(),
                    mean_cos2a: a.cos2a[s].mean(),
                    var_cos2a: a.cos2a[s].variance(),
                    sample_count: a.z[s].count,
                })
                .collect(),
        })
        .collect();
    Ok(AnchorPriors {
        schema_version: PRIORS_SCHEMA_VERSION,
        shapes: anchors.shapes.clone(),
        classes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundPlane {
    /// camera height above the road, meters (y points down)
    pub ground_y: f64,
    pub tolerance: f64,
}

impl Default for GroundPlane {
    fn default() -> Self {
        Self {
            ground_y: 1.65,
            tolerance: 1.0,
        }
    }
}

/// Keep anchors whose center, back-projected at the prior mean depth of
/// `class_id`, lies within `tolerance` of the ground height. Anchors without a
/// usable prior are never kept.
pub fn filter_by_ground_plane(
    anchors: &AnchorSet,
    priors: &AnchorPriors,
    class_id: usize,
    calib: &CalibrationPair,
    ground: &GroundPlane,
) -> Vec<bool> {
    anchors
        .anchors
        .iter()
        .map(|a| match priors.stats(class_id, a.shape_index) {
            Some(p) => {
                let y = calib.back_project_left(a.cx, a.cy, p.mean_z)[1];
                (y - ground.ground_y).abs() <= ground.tolerance
            }
            None => false,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DepthEncoding {
    /// `(z - mean_z) / sqrt(var_z + eps)`
    #[default]
    PriorNormalized,
    /// `z = 1 / sigmoid(v) - 1`, prior-free
    InverseSigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxCodec {
    pub eps: f64,
    pub depth: DepthEncoding,
}

impl Default for BoxCodec {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            depth: DepthEncoding::PriorNormalized,
        }
    }
}

pub fn decode_z_alt(v: f64) -> f64 {
    // 1/sigmoid(v) - 1 == exp(-v)
    (-v).exp()
}

pub fn encode_z_alt(z: f64) -> Result<f64> {
    if !(z > 0.0) {
        return Err(Error::invalid(format!("depth must be positive, got {z}")));
    }
    Ok(-z.ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorTarget {
    /// `[x2d, y2d, w2d, h2d, cx, cy, z, w3d, h3d, l3d, sin2a, cos2a]`
    pub values: [f64; NUM_REGRESSION],
    pub facing: bool,
    pub class_id: usize,
}

fn prior_and_dims(priors: &AnchorPriors, class_id: usize, shape: usize) -> Result<(&PriorStats, &MeanDims)> {
    let p = priors
        .stats(class_id, shape)
        .ok_or_else(|| Error::invalid(format!("no usable prior for class {class_id}, shape {shape}")))?;
    let d = priors
        .dims(class_id)
        .ok_or_else(|| Error::invalid(format!("no mean dimensions for class {class_id}")))?;
    Ok((p, d))
}

pub fn encode_targets(
    gt: &ObjectAnnotation,
    class_id: usize,
    anchor: &Anchor,
    priors: &AnchorPriors,
    calib: &CalibrationPair,
    codec: &BoxCodec,
) -> Result<AnchorTarget> {
    if !(gt.h3d > 0.0 && gt.w3d > 0.0 && gt.l3d > 0.0) {
        return Err(Error::invalid(format!(
            "object dimensions must be positive, got h={} w={} l={}",
            gt.h3d, gt.w3d, gt.l3d
        )));
    }
    let (p, dims) = prior_and_dims(priors, class_id, anchor.shape_index)?;
    let (gx, gy) = gt.box2d.center();
    let center = gt.center3d();
    let (u, v) = calib.project_left(center);
    let z = match codec.depth {
        DepthEncoding::PriorNormalized => (center[2] - p.mean_z) / (p.var_z + codec.eps).sqrt(),
        DepthEncoding::InverseSigmoid => encode_z_alt(center[2])?,
    };
    let enc = encode_orientation(gt.alpha);
    Ok(AnchorTarget {
        values: [
            (gx - anchor.cx) / anchor.w,
            (gy - anchor.cy) / anchor.h,
            (gt.box2d.width() / anchor.w).ln(),
            (gt.box2d.height() / anchor.h).ln(),
            (u - anchor.cx) / anchor.w,
            (v - anchor.cy) / anchor.h,
            z,
            (gt.w3d / dims.w).ln(),
            (gt.h3d / dims.h).ln(),
            (gt.l3d / dims.l).ln(),
            (enc.sin2a - p.mean_sin2a) / (p.var_sin2a + codec.eps).sqrt(),
            (enc.cos2a - p.mean_cos2a) / (p.var_cos2a + codec.eps).sqrt(),
        ],
        facing: enc.facing,
        class_id,
    })
}

/// Inverse of [`encode_targets`] for a single anchor.
pub fn decode_anchor(
    target: &AnchorTarget,
    anchor: &Anchor,
    priors: &AnchorPriors,
    class_name: &str,
    calib: &CalibrationPair,
    codec: &BoxCodec,
    score: f64,
) -> Result<Detection3D> {
    let t = &target.values;
    if t.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("regression output".into()));
    }
    let (p, dims) = prior_and_dims(priors, target.class_id, anchor.shape_index)?;
    let bx = anchor.cx + t[0] * anchor.w;
    let by = anchor.cy + t[1] * anchor.h;
    let bw = anchor.w * t[2].exp();
    let bh = anchor.h * t[3].exp();
    let u = anchor.cx + t[4] * anchor.w;
    let v = anchor.cy + t[5] * anchor.h;
    let z = match codec.depth {
        DepthEncoding::PriorNormalized => p.mean_z + t[6] * (p.var_z + codec.eps).sqrt(),
        DepthEncoding::InverseSigmoid => decode_z_alt(t[6]),
    };
    if !(z > 0.0) {
        return Err(Error::invalid(format!("decoded depth {z} is not positive")));
    }
    let w3d = dims.w * t[7].exp();
    let h3d = dims.h * t[8].exp();
    let l3d = dims.l * t[9].exp();
    let enc = OrientationEncoding {
        sin2a: p.mean_sin2a + t[10] * (p.var_sin2a + codec.eps).sqrt(),
        cos2a: p.mean_cos2a + t[11] * (p.var_cos2a + codec.eps).sqrt(),
        facing: target.facing,
    };
    let alpha = decode_orientation(&enc)?;
    let center = calib.back_project_left(u, v, z);
    let location = [center[0], center[1] + 0.5 * h3d, center[2]];
    let rotation_y = alpha_to_ry(alpha, location[0], location[2])?;
    let det = Detection3D {
        class_name: class_name.to_string(),
        score,
        alpha,
        box2d: Box2d::from_center(bx, by, bw, bh),
        h3d,
        w3d,
        l3d,
        location,
        rotation_y,
    };
    let finite = [det.box2d.x1, det.box2d.y2, h3d, w3d, l3d, location[0], location[1]]
        .iter()
        .all(|v| v.is_finite());
    if !finite {
        return Err(Error::NonFinite("decoded detection".into()));
    }
    Ok(det)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, Default)]
pub struct DecodeOutput {
    pub detections: Vec<Detection3D>,
    /// anchors above the score threshold whose outputs could not be decoded
    pub dropped: usize,
}

/// Decode dense head outputs for a single-level anchor grid.
///
/// `cls` is `[1, K*C, rows, cols]` (channel `k*C + c`), `reg` is
/// `[1, K*13, rows, cols]` (channel `k*13 + p`, the 13th being the facing
/// logit). Each anchor takes its arg-max class; it is skipped when
/// `class_masks[class][anchor]` is false.
#[allow(clippy::too_many_arguments)]
pub fn decode_predictions(
    cls: &Tensor,
    reg: &Tensor,
    anchors: &AnchorSet,
    priors: &AnchorPriors,
    class_names: &[String],
    class_masks: Option<&[Vec<bool>]>,
    calib: &CalibrationPair,
    codec: &BoxCodec,
    score_threshold: f64,
) -> Result<DecodeOutput> {
    let [level] = anchors.levels.as_slice() else {
        return Err(Error::invalid("dense decoding needs a single-level anchor grid"));
    };
    let k = level.shapes_per_cell;
    let n_cls = class_names.len();
    let (_, cc, ch, cw) = cls.dims4()?;
    let (_, rc, rh, rw) = reg.dims4()?;
    if (ch, cw) != (level.rows, level.cols) || (rh, rw) != (level.rows, level.cols) {
        return Err(Error::shape(format!(
            "head outputs {ch}x{cw} / {rh}x{rw} do not match the {}x{} anchor grid",
            level.rows, level.cols
        )));
    }
    if cc != k * n_cls || rc != k * REG_CHANNELS {
        return Err(Error::shape(format!(
            "head channels cls={cc} reg={rc}, expected {} and {}",
            k * n_cls,
            k * REG_CHANNELS
        )));
    }
    let plane = ch * cw;
    let (cd, rd) = (cls.data(), reg.data());
    let mut out = DecodeOutput::default();
    for (i, anchor) in anchors.anchors.iter().enumerate() {
        let cell = i / k;
        let slot = i % k;
        let (mut best_c, mut best_logit) = (0, f32::NEG_INFINITY);
        let mut finite = true;
        for c in 0..n_cls {
            let v = cd[(slot * n_cls + c) * plane + cell];
            finite &= v.is_finite();
            if v > best_logit {
                best_logit = v;
                best_c = c;
            }
        }
        if !finite {
            out.dropped += 1;
            continue;
        }
        if let Some(masks) = class_masks {
            if !masks[best_c][i] {
                continue;
            }
        }
        let score = sigmoid(best_logit as f64);
        if score < score_threshold {
            continue;
        }
        let mut values = [0.0f64; NUM_REGRESSION];
        for (p, v) in values.iter_mut().enumerate() {
            *v = rd[(slot * REG_CHANNELS + p) * plane + cell] as f64;
        }
        let facing_logit = rd[(slot * REG_CHANNELS + NUM_REGRESSION) * plane + cell];
        if !facing_logit.is_finite() {
            out.dropped += 1;
            continue;
        }
        let target = AnchorTarget {
            values,
            facing: facing_logit > 0.0,
            class_id: best_c,
        };
        match decode_anchor(&target, anchor, priors, &class_names[best_c], calib, codec, score) {
            Ok(d) => out.detections.push(d),
            Err(_) => out.dropped += 1,
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn shape(w: f64, h: f64, s: usize) -> AnchorShape {
        AnchorShape { w2d: w, h2d: h, scale_level: s }
    }

    #[test]
    fn grid_examples() {
        let g = generate_grid(16, 16, &[shape(10.0, 10.0, 16)]).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!((g.anchors[0].cx, g.anchors[0].cy), (8.0, 8.0));
        let g = generate_grid(32, 32, &[shape(10.0, 10.0, 16), shape(20.0, 10.0, 16)]).unwrap();
        assert_eq!(g.len(), 8);
        // (row, col, shape) order
        assert_eq!(g.anchors[1].shape_index, 1);
        assert_eq!(g.anchors[2].cx, 24.0);
        let shapes = [shape(8.0, 8.0, 4), shape(16.0, 16.0, 8), shape(32.0, 32.0, 16), shape(64.0, 32.0, 16)];
        let g = generate_grid(1280, 288, &shapes).unwrap();
        let want: usize = [(4usize, 1usize), (8, 1), (16, 2)]
            .iter()
            .map(|&(s, k)| (288 / s) * (1280 / s) * k)
            .sum();
        assert_eq!(g.len(), want);
        assert!(generate_grid(100, 100, &[shape(1.0, 1.0, 16)]).is_err());
    }

    fn gt_box(b: Box2d) -> ObjectAnnotation {
        ObjectAnnotation {
            class_name: "Car".into(),
            truncation: 0.0,
            occlusion: 0,
            alpha: 0.0,
            box2d: b,
            h3d: 1.5,
            w3d: 1.6,
            l3d: 3.9,
            location: [0.0, 1.6, 20.0],
            rotation_y: 0.0,
        }
    }

    fn manual_set(boxes: &[Box2d]) -> AnchorSet {
        AnchorSet {
            shapes: vec![shape(1.0, 1.0, 16)],
            levels: vec![],
            anchors: boxes
                .iter()
                .map(|b| {
                    let (cx, cy) = b.center();
                    Anchor { cx, cy, w: b.width(), h: b.height(), shape_index: 0 }
                })
                .collect(),
        }
    }

    #[test]
    fn assign_examples() {
        let g = Box2d::new(0.0, 0.0, 10.0, 10.0);
        let set = manual_set(&[g, Box2d::new(50.0, 50.0, 60.0, 60.0)]);
        let a = assign(&set, &[gt_box(g)], 0.5, 0.4).unwrap();
        assert_eq!(a, vec![Assignment::Positive(0), Assignment::Negative]);
        assert!(assign(&set, &[], 0.3, 0.4).is_err());
    }

    #[test]
    fn assign_matches_exhaustive_oracle() {
        let anchors = [
            Box2d::new(0.0, 0.0, 10.0, 10.0),
            Box2d::new(4.0, 0.0, 14.0, 10.0),
            Box2d::new(20.0, 0.0, 30.0, 10.0),
        ];
        let gts = [gt_box(Box2d::new(1.0, 0.0, 11.0, 10.0)), gt_box(Box2d::new(23.0, 2.0, 33.0, 12.0))];
        let set = manual_set(&anchors);
        let got = assign(&set, &gts, 0.6, 0.3).unwrap();
        // exhaustive: IoU table then thresholds, then per-GT argmax forcing
        let iou: Vec<Vec<f64>> = anchors
            .iter()
            .map(|a| gts.iter().map(|g| iou_2d(a, &g.box2d)).collect())
            .collect();
        let mut want: Vec<Assignment> = iou
            .iter()
            .map(|row| {
                let (j, m) = row
                    .iter()
                    .enumerate()
                    .fold((0, -1.0), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
                if m >= 0.6 {
                    Assignment::Positive(j)
                } else if m >= 0.3 {
                    Assignment::Ignored
                } else {
                    Assignment::Negative
                }
            })
            .collect();
        for j in 0..gts.len() {
            let i = (0..anchors.len())
                .fold(0, |b, i| if iou[i][j] > iou[b][j] { i } else { b });
            want[i] = Assignment::Positive(j);
        }
        assert_eq!(got, want);
        // GT 1 is below the positive threshold everywhere but still claims anchor 2
        assert_eq!(got[2], Assignment::Positive(1));
    }

    #[test]
    fn dont_care_overlap_is_ignored() {
        let mut dc = gt_box(Box2d::new(50.0, 50.0, 60.0, 60.0));
        dc.class_name = "DontCare".into();
        let set = manual_set(&[Box2d::new(50.0, 50.0, 60.0, 60.0)]);
        assert_eq!(assign(&set, &[dc], 0.5, 0.4).unwrap(), vec![Assignment::Ignored]);
    }

    #[test]
    fn running_stats_match_two_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<f64> = (0..1000).map(|_| rng.gen_range(2.0..70.0)).collect();
        let mut s = RunningStats::default();
        xs.iter().for_each(|&x| s.push(x));
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!(((s.mean() - mean) / mean).abs() < 1e-12);
        assert!(((s.variance() - var) / var).abs() < 1e-9);
        let (mut a, mut b) = (RunningStats::default(), RunningStats::default());
        xs[..300].iter().for_each(|&x| a.push(x));
        xs[300..].iter().for_each(|&x| b.push(x));
        a.merge(&b);
        assert!(((a.variance() - var) / var).abs() < 1e-9);
    }

    fn one_anchor_priors(stats: PriorStats) -> AnchorPriors {
        AnchorPriors {
            schema_version: PRIORS_SCHEMA_VERSION,
            shapes: vec![shape(40.0, 30.0, 16)],
            classes: vec![ClassPriors {
                name: "Car".into(),
                dims: MeanDims { h: 1.5, w: 1.6, l: 3.9, sample_count: 10 },
                shapes: vec![stats],
            }],
        }
    }

    #[test]
    fn priors_hand_examples() {
        let set = manual_set(&[Box2d::new(0.0, 0.0, 10.0, 10.0)]);
        let mut a = gt_box(Box2d::new(0.0, 0.0, 10.0, 10.0));
        a.location[2] = 10.0;
        let mut b = a.clone();
        b.location[2] = 30.0;
        let frames = [vec![a.clone()], vec![b]];
        let p = compute_priors(frames.iter().map(|f| f.as_slice()), &set, &["Car".into()], 0.5, 0.4).unwrap();
        let s = p.stats(0, 0).unwrap();
        assert_eq!((s.mean_z, s.var_z, s.sample_count), (20.0, 100.0, 2));

        a.location[2] = 20.0;
        let frames = [vec![a.clone()], vec![a.clone()], vec![a]];
        let p = compute_priors(frames.iter().map(|f| f.as_slice()), &set, &["Car".into()], 0.5, 0.4).unwrap();
        let s = p.stats(0, 0).unwrap();
        assert_eq!((s.mean_z, s.var_z), (20.0, 0.0));
        let empty: [&[ObjectAnnotation]; 0] = [];
        assert!(compute_priors(empty, &set, &["Car".into()], 0.5, 0.4).is_err());
    }

    #[test]
    fn priors_json_roundtrip_and_version() {
        let p = one_anchor_priors(PriorStats {
            mean_z: 20.0, var_z: 4.0, mean_sin2a: 0.1, var_sin2a: 0.2,
            mean_cos2a: -0.3, var_cos2a: 0.4, sample_count: 7,
        });
        let text = p.to_json().unwrap();
        assert_eq!(AnchorPriors::from_json(&text).unwrap(), p);
        let bumped = text.replace("\"schema_version\": 1", "\"schema_version\": 9");
        assert!(AnchorPriors::from_json(&bumped).is_err());
    }

    #[test]
    fn ground_plane_pinhole_example() {
        let calib = CalibrationPair::from_intrinsics(100.0, 100.0, 50.0, 50.0, 0.5).unwrap();
        let p = one_anchor_priors(PriorStats {
            mean_z: 10.0, var_z: 1.0, mean_sin2a: 0.0, var_sin2a: 1.0,
            mean_cos2a: 0.0, var_cos2a: 1.0, sample_count: 3,
        });
        let mk = |v: f64| Anchor { cx: 50.0, cy: v, w: 10.0, h: 10.0, shape_index: 0 };
        let set = AnchorSet { shapes: p.shapes.clone(), levels: vec![], anchors: vec![mk(70.0), mk(90.0), mk(66.5)] };
        let g = GroundPlane { ground_y: 1.65, tolerance: 1.0 };
        assert_eq!(filter_by_ground_plane(&set, &p, 0, &calib, &g), vec![true, false, true]);
        let inf = GroundPlane { tolerance: f64::INFINITY, ..g };
        assert_eq!(filter_by_ground_plane(&set, &p, 0, &calib, &inf), vec![true; 3]);
        let mut missing = p.clone();
        missing.classes[0].shapes[0].sample_count = 0;
        assert_eq!(filter_by_ground_plane(&set, &missing, 0, &calib, &inf), vec![false; 3]);
    }

    #[test]
    fn z_alt_examples() {
        assert_eq!(decode_z_alt(0.0), 1.0);
        assert_eq!(encode_z_alt(1.0).unwrap(), 0.0);
        for z in [0.5, 5.0, 50.0] {
            let v = encode_z_alt(z).unwrap();
            assert!((decode_z_alt(v) - z).abs() < 1e-9);
            let literal = 1.0 / (1.0 / (1.0 + (-v).exp())) - 1.0;
            assert!((literal - z).abs() < 1e-9 * z.max(1.0));
        }
        assert!(encode_z_alt(0.0).is_err());
        assert!(encode_z_alt(-2.0).is_err());
    }

    #[test]
    fn encode_at_prior_means_is_zero() {
        let calib = CalibrationPair::from_intrinsics(700.0, 700.0, 600.0, 180.0, 0.54).unwrap();
        let alpha: f64 = 0.4;
        let p = one_anchor_priors(PriorStats {
            mean_z: 20.0, var_z: 25.0, mean_sin2a: (2.0 * alpha).sin(), var_sin2a: 0.1,
            mean_cos2a: (2.0 * alpha).cos(), var_cos2a: 0.1, sample_count: 3,
        });
        let mut gt = gt_box(Box2d::new(580.0, 170.0, 640.0, 210.0));
        gt.alpha = alpha;
        gt.location = [0.0, 0.75, 20.0];
        let center = gt.center3d();
        let (u, v) = calib.project_left(center);
        let anchor = Anchor { cx: u, cy: v, w: 60.0, h: 40.0, shape_index: 0 };
        gt.box2d = anchor.box2d();
        let t = encode_targets(&gt, 0, &anchor, &p, &calib, &BoxCodec::default()).unwrap();
        assert!(t.values.iter().all(|v| v.abs() < 1e-12), "{:?}", t.values);

        gt.location[2] = 25.0;
        let t = encode_targets(&gt, 0, &anchor, &p, &calib, &BoxCodec::default()).unwrap();
        assert!((t.values[6] - 1.0).abs() < 1e-4);

        gt.h3d = 0.0;
        assert!(encode_targets(&gt, 0, &anchor, &p, &calib, &BoxCodec::default()).is_err());
    }

    #[test]
    fn encode_decode_roundtrip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let calib = CalibrationPair::from_intrinsics(721.5, 721.5, 609.6, 172.9, 0.54).unwrap();
        for depth in [DepthEncoding::PriorNormalized, DepthEncoding::InverseSigmoid] {
            let codec = BoxCodec { depth, ..Default::default() };
            for _ in 0..200 {
                let p = one_anchor_priors(PriorStats {
                    mean_z: rng.gen_range(5.0..50.0), var_z: rng.gen_range(0.0..100.0),
                    mean_sin2a: rng.gen_range(-1.0..1.0), var_sin2a: rng.gen_range(0.0..1.0),
                    mean_cos2a: rng.gen_range(-1.0..1.0), var_cos2a: rng.gen_range(0.0..1.0),
                    sample_count: 5,
                });
                let alpha = rng.gen_range(-PI..PI);
                let loc = [rng.gen_range(-10.0..10.0), rng.gen_range(0.5..2.5), rng.gen_range(4.0..60.0)];
                let x1 = rng.gen_range(0.0..1100.0);
                let y1 = rng.gen_range(100.0..300.0);
                let gt = ObjectAnnotation {
                    class_name: "Car".into(), truncation: 0.0, occlusion: 0, alpha,
                    box2d: Box2d::new(x1, y1, x1 + rng.gen_range(5.0..200.0), y1 + rng.gen_range(5.0..100.0)),
                    h3d: rng.gen_range(1.0..2.5), w3d: rng.gen_range(1.2..2.2), l3d: rng.gen_range(2.5..5.5),
                    location: loc, rotation_y: alpha_to_ry(alpha, loc[0], loc[2]).unwrap(),
                };
                let anchor = Anchor { cx: x1 + 10.0, cy: y1 + 5.0, w: 60.0, h: 40.0, shape_index: 0 };
                let t = encode_targets(&gt, 0, &anchor, &p, &calib, &codec).unwrap();
                let d = decode_anchor(&t, &anchor, &p, "Car", &calib, &codec, 1.0).unwrap();
                let pairs = [
                    (d.box2d.x1, gt.box2d.x1), (d.box2d.y1, gt.box2d.y1), (d.box2d.x2, gt.box2d.x2),
                    (d.box2d.y2, gt.box2d.y2), (d.h3d, gt.h3d), (d.w3d, gt.w3d), (d.l3d, gt.l3d),
                    (d.location[0], loc[0]), (d.location[1], loc[1]), (d.location[2], loc[2]),
                    (d.alpha, alpha), (d.rotation_y, gt.rotation_y),
                ];
                for (a, b) in pairs {
                    assert!((a - b).abs() < 1e-5, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn decode_predictions_threshold_and_zero_residuals() {
        let calib = CalibrationPair::from_intrinsics(100.0, 100.0, 16.0, 16.0, 0.5).unwrap();
        let set = generate_grid(32, 32, &[shape(16.0, 16.0, 16)]).unwrap();
        let p = AnchorPriors {
            classes: vec![ClassPriors {
                name: "Car".into(),
                dims: MeanDims { h: 1.5, w: 1.6, l: 3.9, sample_count: 1 },
                shapes: vec![PriorStats {
                    mean_z: 10.0, var_z: 1.0, mean_sin2a: 0.0, var_sin2a: 0.1,
                    mean_cos2a: 1.0, var_cos2a: 0.1, sample_count: 1,
                }],
            }],
            schema_version: 1,
            shapes: set.shapes.clone(),
        };
        let names = vec!["Car".to_string()];
        let mut cls = Tensor::full(&[1, 1, 2, 2], -10.0);
        cls.data_mut()[3] = 5.0; // row 1, col 1
        let reg = Tensor::zeros(&[1, REG_CHANNELS, 2, 2]);
        let out = decode_predictions(&cls, &reg, &set, &p, &names, None, &calib, &BoxCodec::default(), 0.5).unwrap();
        assert_eq!(out.detections.len(), 1);
        let d = &out.detections[0];
        assert_eq!(d.box2d, Box2d::from_center(24.0, 24.0, 16.0, 16.0));
        assert!((d.location[2] - 10.0).abs() < 1e-12);
        assert_eq!((d.h3d, d.w3d, d.l3d), (1.5, 1.6, 3.9));
        let none = decode_predictions(&cls, &reg, &set, &p, &names, None, &calib, &BoxCodec::default(), 1.1).unwrap();
        assert!(none.detections.is_empty());
        let masks = vec![vec![true, true, true, false]];
        let masked = decode_predictions(&cls, &reg, &set, &p, &names, Some(&masks), &calib, &BoxCodec::default(), 0.5).unwrap();
        assert!(masked.detections.is_empty());
        let mut bad = reg.clone();
        bad.data_mut()[6 * 4 + 3] = f32::NAN;
        let out = decode_predictions(&cls, &bad, &set, &p, &names, None, &calib, &BoxCodec::default(), 0.5).unwrap();
        assert_eq!((out.detections.len(), out.dropped), (0, 1));
    }
}
