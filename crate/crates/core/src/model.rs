//! Detector assembly: configuration and parameter layout, preprocessing,
//! the siamese residual backbone, classification/regression heads, the
//! auxiliary disparity decoder and end-to-end `detect`.

use image::{imageops, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{
    decode_predictions, filter_by_ground_plane, generate_grid, AnchorPriors, AnchorSet, AnchorShape, BoxCodec, GroundPlane,
    REG_CHANNELS,
};
use crate::error::{Error, Result};
use crate::geometry::{nms_per_class, Box2d};
use crate::kitti::{image_to_tensor, CalibrationPair, Detection3D, ObjectAnnotation, Projection};
use crate::nn::{ConvBn, ForwardTrace};
use crate::stereo::{hierarchical_fusion_forward, FusionConfig, FusionParams, GhostParams, Pyramid};
use crate::tensor::{concat_channels, resample_bilinear, Tensor};
use crate::weights::WeightArchive;

/// Output stride of the detection heads.
pub const HEAD_STRIDE: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub crop_top: usize,
    pub stem_channels: usize,
    /// channels at strides 4, 8 and 16
    pub backbone_channels: [usize; 3],
    pub blocks_per_stage: usize,
    pub fusion: FusionConfig,
    /// stride-2 convolutions between fusion levels instead of average pooling
    pub learned_downsample: bool,
    pub head_channels: usize,
    pub anchor_shapes: Vec<AnchorShape>,
    pub classes: Vec<String>,
    pub disparity_channels: usize,
    /// disparity hypotheses of the auxiliary decoder, at 1/4 scale
    pub disparity_max: usize,
    pub codec: BoxCodec,
    /// anchors are masked per predicted class by this filter when set
    pub ground_filter: Option<GroundPlane>,
}

pub fn default_anchor_shapes() -> Vec<AnchorShape> {
    let mut shapes = Vec::new();
    for h in [24.0, 48.0, 96.0, 192.0] {
        for aspect in [0.5, 1.0, 2.0] {
            shapes.push(AnchorShape {
                w2d: h * aspect,
                h2d: h,
                scale_level: HEAD_STRIDE,
            });
        }
    }
    shapes
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_h: 288,
            input_w: 1280,
            crop_top: 100,
            stem_channels: 16,
            backbone_channels: [32, 64, 128],
            blocks_per_stage: 1,
            fusion: FusionConfig::default(),
            learned_downsample: false,
            head_channels: 32,
            anchor_shapes: default_anchor_shapes(),
            classes: vec!["Car".to_string()],
            disparity_channels: 64,
            disparity_max: 32,
            codec: BoxCodec::default(),
            ground_filter: Some(GroundPlane::default()),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_h == 0 || self.input_w == 0 || !self.input_h.is_multiple_of(HEAD_STRIDE) || !self.input_w.is_multiple_of(HEAD_STRIDE) {
            return Err(Error::invalid(format!(
                "input size {}x{} must be a positive multiple of {HEAD_STRIDE}",
                self.input_h, self.input_w
            )));
        }
        let widths = [self.stem_channels, self.head_channels, self.disparity_channels, self.disparity_max];
        if self.backbone_channels.contains(&0) || widths.contains(&0) {
            return Err(Error::invalid("channel counts must be positive"));
        }
        let f = &self.fusion;
        if f.max_disp4 == 0 || f.max_disp8 == 0 || f.small_volume_channels == 0 || f.small_volume_disp == 0 {
            return Err(Error::invalid("fusion disparity ranges and channels must be positive"));
        }
        if self.classes.is_empty() {
            return Err(Error::invalid("at least one class is required"));
        }
        let mut names = self.classes.clone();
        names.sort();
        names.dedup();
        if names.len() != self.classes.len() {
            return Err(Error::invalid("class names must be unique"));
        }
        if self.anchor_shapes.is_empty() {
            return Err(Error::invalid("at least one anchor shape is required"));
        }
        for (i, s) in self.anchor_shapes.iter().enumerate() {
            if s.scale_level != HEAD_STRIDE || !(s.w2d > 0.0 && s.h2d > 0.0) {
                return Err(Error::invalid(format!(
                    "anchor shape {i} ({s:?}) must be positive and tile stride {HEAD_STRIDE}"
                )));
            }
        }
        Ok(())
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_shapes.len()
    }

    pub fn fused_channels(&self) -> usize {
        self.fusion.output_channels()
    }

    pub fn head_input_channels(&self) -> usize {
        self.fused_channels() + self.backbone_channels[2]
    }

    pub fn head_size(&self) -> (usize, usize) {
        (self.input_h / HEAD_STRIDE, self.input_w / HEAD_STRIDE)
    }
}

/// One convolution's parameters as stored in the archive:
/// `{name}.weight`, `{name}.bias` and, with `affine`, `{name}.scale`/`{name}.shift`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub out_channels: usize,
    pub in_per_group: usize,
    pub kernel: usize,
    pub affine: bool,
}

impl LayerSpec {
    fn new(name: impl Into<String>, out_channels: usize, in_per_group: usize, kernel: usize, affine: bool) -> Self {
        Self {
            name: name.into(),
            out_channels,
            in_per_group,
            kernel,
            affine,
        }
    }

    pub fn tensors(&self) -> Vec<(String, Vec<usize>)> {
        let c = self.out_channels;
        let mut v = vec![
            (format!("{}.weight", self.name), vec![c, self.in_per_group, self.kernel, self.kernel]),
            (format!("{}.bias", self.name), vec![c]),
        ];
        if self.affine {
            v.push((format!("{}.scale", self.name), vec![c]));
            v.push((format!("{}.shift", self.name), vec![c]));
        }
        v
    }
}

/// Every convolution the configured network uses, in forward order.
pub fn layer_specs(cfg: &ModelConfig) -> Vec<LayerSpec> {
    let mut v = vec![LayerSpec::new("backbone.stem", cfg.stem_channels, 3, 3, true)];
    let mut prev = cfg.stem_channels;
    for (stride, &c) in [4, 8, 16].iter().zip(&cfg.backbone_channels) {
        v.push(LayerSpec::new(format!("backbone.s{stride}.down"), c, prev, 3, true));
        for b in 0..cfg.blocks_per_stage {
            v.push(LayerSpec::new(format!("backbone.s{stride}.block{b}.conv1"), c, c, 3, true));
            v.push(LayerSpec::new(format!("backbone.s{stride}.block{b}.conv2"), c, c, 3, true));
        }
        prev = c;
    }
    let g4 = cfg.fusion.ghost4_channels();
    let g8 = cfg.fusion.ghost8_channels();
    v.push(LayerSpec::new("fusion.ghost4.primary", g4, g4, 1, true));
    v.push(LayerSpec::new("fusion.ghost4.cheap", g4, 1, 3, true));
    if cfg.learned_downsample {
        v.push(LayerSpec::new("fusion.down4", 3 * g4, 3 * g4, 3, true));
    }
    v.push(LayerSpec::new("fusion.ghost8.primary", g8, g8, 1, true));
    v.push(LayerSpec::new("fusion.ghost8.cheap", g8, 1, 3, true));
    if cfg.learned_downsample {
        v.push(LayerSpec::new("fusion.down8", 3 * g8, 3 * g8, 3, true));
    }
    v.push(LayerSpec::new(
        "fusion.reduce16",
        cfg.fusion.small_volume_channels,
        cfg.backbone_channels[2],
        1,
        true,
    ));
    let k = cfg.anchors_per_cell();
    let hin = cfg.head_input_channels();
    for (branch, out) in [("cls", k * cfg.classes.len()), ("reg", k * REG_CHANNELS)] {
        v.push(LayerSpec::new(format!("head.{branch}.conv1"), cfg.head_channels, hin, 3, true));
        v.push(LayerSpec::new(format!("head.{branch}.out"), out, cfg.head_channels, 3, false));
    }
    v.push(LayerSpec::new("disparity.conv1", cfg.disparity_channels, cfg.fused_channels(), 1, true));
    v.push(LayerSpec::new("disparity.out", cfg.disparity_max, cfg.disparity_channels, 1, false));
    v
}

pub fn required_tensors(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    layer_specs(cfg).iter().flat_map(LayerSpec::tensors).collect()
}

/// Seeded He-uniform weights, unit-ish affine scales and small shifts. The
/// output layers are scaled down so head outputs stay near zero.
pub fn random_archive(cfg: &ModelConfig, seed: u64) -> Result<WeightArchive> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut archive = WeightArchive::new();
    for spec in layer_specs(cfg) {
        let fan_in = (spec.in_per_group * spec.kernel * spec.kernel) as f32;
        let gain = if spec.affine { 1.0 } else { 0.1 };
        let a = gain * (6.0 / fan_in).sqrt();
        let c = spec.out_channels;
        let shape = [c, spec.in_per_group, spec.kernel, spec.kernel];
        archive.insert(format!("{}.weight", spec.name), Tensor::from_fn(&shape, |_| rng.gen_range(-a..a)));
        archive.insert(format!("{}.bias", spec.name), Tensor::zeros(&[c]));
        if spec.affine {
            archive.insert(format!("{}.scale", spec.name), Tensor::from_fn(&[c], |_| rng.gen_range(0.5..1.0)));
            archive.insert(format!("{}.shift", spec.name), Tensor::from_fn(&[c], |_| rng.gen_range(-0.05..0.05)));
        }
    }
    archive.config = Some(serde_json::to_value(cfg)?);
    Ok(archive)
}

/// Maps original image coordinates to network input coordinates:
/// `x' = x * sx`, `y' = (y - crop_top) * sy`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transform {
    pub crop_top: usize,
    pub sx: f64,
    pub sy: f64,
    pub source_w: usize,
    pub source_h: usize,
}

impl Transform {
    pub fn new(source_w: usize, source_h: usize, cfg: &ModelConfig) -> Result<Self> {
        if source_h <= cfg.crop_top || source_w == 0 {
            return Err(Error::invalid(format!(
                "image {source_w}x{source_h} is too small for a {}-row crop",
                cfg.crop_top
            )));
        }
        Ok(Self {
            crop_top: cfg.crop_top,
            sx: cfg.input_w as f64 / source_w as f64,
            sy: cfg.input_h as f64 / (source_h - cfg.crop_top) as f64,
            source_w,
            source_h,
        })
    }

    pub fn is_identity(&self) -> bool {
        self.crop_top == 0 && self.sx == 1.0 && self.sy == 1.0
    }

    pub fn forward_box(&self, b: &Box2d) -> Box2d {
        let c = self.crop_top as f64;
        Box2d::new(b.x1 * self.sx, (b.y1 - c) * self.sy, b.x2 * self.sx, (b.y2 - c) * self.sy)
    }

    pub fn inverse_box(&self, b: &Box2d) -> Box2d {
        let c = self.crop_top as f64;
        Box2d::new(b.x1 / self.sx, b.y1 / self.sy + c, b.x2 / self.sx, b.y2 / self.sy + c)
    }

    fn forward_projection(&self, p: &Projection) -> Projection {
        let mut out = *p;
        for j in 0..4 {
            out[1][j] = (p[1][j] - self.crop_top as f64 * p[2][j]) * self.sy;
            out[0][j] = p[0][j] * self.sx;
        }
        out
    }

    pub fn forward_calibration(&self, calib: &CalibrationPair) -> Result<CalibrationPair> {
        CalibrationPair::from_matrices(self.forward_projection(&calib.p2), self.forward_projection(&calib.p3))
    }
}

/// Network inputs for one stereo pair plus everything needed to map results
/// back to the original image.
#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub left: Tensor,
    pub right: Tensor,
    pub calib: CalibrationPair,
    pub objects: Vec<ObjectAnnotation>,
    pub transform: Transform,
}

fn prepare_image(img: &RgbImage, cfg: &ModelConfig) -> Result<Tensor> {
    let (w, h) = img.dimensions();
    let crop = cfg.crop_top as u32;
    let t = if crop == 0 {
        image_to_tensor(img)
    } else {
        image_to_tensor(&imageops::crop_imm(img, 0, crop, w, h - crop).to_image())
    };
    if t.shape()[2..] == [cfg.input_h, cfg.input_w] {
        Ok(t)
    } else {
        resample_bilinear(&t, cfg.input_h, cfg.input_w)
    }
}

pub fn preprocess(
    left: &RgbImage,
    right: &RgbImage,
    objects: &[ObjectAnnotation],
    calib: &CalibrationPair,
    cfg: &ModelConfig,
) -> Result<Preprocessed> {
    if left.dimensions() != right.dimensions() {
        return Err(Error::shape(format!(
            "stereo pair sizes differ: {:?} vs {:?}",
            left.dimensions(),
            right.dimensions()
        )));
    }
    let (w, h) = left.dimensions();
    let transform = Transform::new(w as usize, h as usize, cfg)?;
    let objects = objects
        .iter()
        .map(|o| ObjectAnnotation {
            box2d: transform.forward_box(&o.box2d),
            ..o.clone()
        })
        .collect();
    Ok(Preprocessed {
        left: prepare_image(left, cfg)?,
        right: prepare_image(right, cfg)?,
        calib: transform.forward_calibration(calib)?,
        objects,
        transform,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectOptions {
    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub emit_disparity: bool,
}

impl Default for DetectOptions {
    fn default() -> Self {
        Self {
            score_threshold: 0.75,
            nms_threshold: 0.4,
            emit_disparity: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DetectReport {
    /// in original image coordinates, sorted by descending score
    pub detections: Vec<Detection3D>,
    pub trace: ForwardTrace,
    /// `[1, D, H/4, W/4]` logits when requested
    pub disparity: Option<Tensor>,
    /// candidates above threshold that failed to decode
    pub dropped: usize,
}

/// A validated configuration bound to its weights.
#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: WeightArchive,
}

fn add_relu(a: &mut Tensor, b: &Tensor) {
    for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
        let v = *x + y;
        *x = if v < 0.0 { 0.0 } else { v };
    }
}

impl Model {
    /// Checks that every tensor the configuration needs is present with
    /// its exact shape.
    pub fn new(config: ModelConfig, weights: WeightArchive) -> Result<Self> {
        config.validate()?;
        for (name, shape) in required_tensors(&config) {
            weights.expect_shape(&name, &shape)?;
        }
        Ok(Self { config, weights })
    }

    /// Use the configuration recorded in the archive, or the default one.
    pub fn from_archive(weights: WeightArchive) -> Result<Self> {
        let config = match &weights.config {
            Some(v) => serde_json::from_value(v.clone())?,
            None => ModelConfig::default(),
        };
        Self::new(config, weights)
    }

    fn conv(&self, name: &str, stride: usize, padding: usize, groups: usize, affine: bool, relu: bool) -> Result<ConvBn<'_>> {
        let w = &self.weights;
        let affine = if affine {
            Some((w.get(&format!("{name}.scale"))?.data(), w.get(&format!("{name}.shift"))?.data()))
        } else {
            None
        };
        Ok(ConvBn {
            weight: w.get(&format!("{name}.weight"))?,
            bias: w.get(&format!("{name}.bias"))?.data(),
            affine,
            stride,
            padding,
            groups,
            relu,
        })
    }

    /// Residual feature pyramid at strides 4, 8 and 16. Shapes are recorded
    /// in `trace` when `record` is set.
    pub fn backbone_forward(&self, image: &Tensor, trace: &mut ForwardTrace, record: bool) -> Result<Pyramid> {
        const M: &str = "backbone";
        let mut x = self.conv("backbone.stem", 2, 1, 1, true, true)?.forward(image, trace, M)?;
        if record {
            trace.record("backbone.stem", &x);
        }
        let mut levels = Vec::with_capacity(3);
        for stride in [4, 8, 16] {
            x = self.conv(&format!("backbone.s{stride}.down"), 2, 1, 1, true, true)?.forward(&x, trace, M)?;
            for b in 0..self.config.blocks_per_stage {
                let p = format!("backbone.s{stride}.block{b}");
                let y = self.conv(&format!("{p}.conv1"), 1, 1, 1, true, true)?.forward(&x, trace, M)?;
                let y = self.conv(&format!("{p}.conv2"), 1, 1, 1, true, false)?.forward(&y, trace, M)?;
                add_relu(&mut x, &y);
            }
            if record {
                trace.record(format!("backbone.s{stride}"), &x);
            }
            levels.push(x.clone());
        }
        let s16 = levels.pop().expect("three levels");
        let s8 = levels.pop().expect("three levels");
        let s4 = levels.pop().expect("three levels");
        Ok(Pyramid { s4, s8, s16 })
    }

    fn ghost(&self, name: &str, channels: usize) -> Result<GhostParams<'_>> {
        Ok(GhostParams {
            primary: self.conv(&format!("{name}.primary"), 1, 0, 1, true, true)?,
            cheap: self.conv(&format!("{name}.cheap"), 1, 1, channels, true, true)?,
        })
    }

    pub fn fusion_forward(&self, left: &Pyramid, right: &Pyramid, trace: &mut ForwardTrace) -> Result<Tensor> {
        let f = &self.config.fusion;
        let down = |name: &str| -> Result<Option<ConvBn<'_>>> {
            if self.config.learned_downsample {
                Ok(Some(self.conv(name, 2, 1, 1, true, true)?))
            } else {
                Ok(None)
            }
        };
        let params = FusionParams {
            ghost4: self.ghost("fusion.ghost4", f.ghost4_channels())?,
            ghost8: self.ghost("fusion.ghost8", f.ghost8_channels())?,
            down4: down("fusion.down4")?,
            down8: down("fusion.down8")?,
            reduce16: self.conv("fusion.reduce16", 1, 0, 1, true, true)?,
        };
        hierarchical_fusion_forward(left, right, &params, f, trace)
    }

    /// Classification and regression logits over the anchor grid.
    pub fn heads_forward(&self, features: &Tensor, trace: &mut ForwardTrace) -> Result<(Tensor, Tensor)> {
        const M: &str = "head";
        let mut run = |branch: &str| -> Result<Tensor> {
            let h = self.conv(&format!("head.{branch}.conv1"), 1, 1, 1, true, true)?.forward(features, trace, M)?;
            self.conv(&format!("head.{branch}.out"), 1, 1, 1, false, false)?.forward(&h, trace, M)
        };
        let cls = run("cls")?;
        let reg = run("reg")?;
        for (name, t) in [("head.cls", &cls), ("head.reg", &reg)] {
            if !t.all_finite() {
                return Err(Error::NonFinite(format!("{name} output")));
            }
        }
        Ok((cls, reg))
    }

    /// Per-pixel disparity logits upsampled to 1/4 of the input size.
    pub fn disparity_decoder_forward(&self, fused: &Tensor, trace: &mut ForwardTrace) -> Result<Tensor> {
        const M: &str = "disparity";
        let (_, c, _, _) = fused.dims4()?;
        if c != self.config.fused_channels() {
            return Err(Error::shape(format!(
                "disparity decoder expects {} channels, got {c}",
                self.config.fused_channels()
            )));
        }
        let h = self.conv("disparity.conv1", 1, 0, 1, true, true)?.forward(fused, trace, M)?;
        let logits = self.conv("disparity.out", 1, 0, 1, false, false)?.forward(&h, trace, M)?;
        let out = resample_bilinear(&logits, self.config.input_h / 4, self.config.input_w / 4)?;
        trace.record("disparity.logits", &out);
        Ok(out)
    }

    pub fn anchors(&self) -> Result<AnchorSet> {
        generate_grid(self.config.input_w, self.config.input_h, &self.config.anchor_shapes)
    }

    fn check_priors(&self, priors: &AnchorPriors) -> Result<()> {
        if priors.shapes != self.config.anchor_shapes {
            return Err(Error::invalid("priors were computed for different anchor shapes"));
        }
        let names: Vec<&str> = priors.classes.iter().map(|c| c.name.as_str()).collect();
        if names != self.config.classes.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::invalid(format!(
                "priors cover classes {names:?}, model predicts {:?}",
                self.config.classes
            )));
        }
        Ok(())
    }

    /// Full forward pass, decoding, per-class NMS and mapping back to the
    /// original image coordinates.
    pub fn detect(
        &self,
        left: &RgbImage,
        right: &RgbImage,
        calib: &CalibrationPair,
        priors: &AnchorPriors,
        opts: &DetectOptions,
    ) -> Result<DetectReport> {
        self.check_priors(priors)?;
        let pre = preprocess(left, right, &[], calib, &self.config)?;
        let mut trace = ForwardTrace::default();
        trace.record("input.left", &pre.left);
        let lp = self.backbone_forward(&pre.left, &mut trace, true)?;
        let rp = self.backbone_forward(&pre.right, &mut trace, false)?;
        let fused = self.fusion_forward(&lp, &rp, &mut trace)?;
        let head_in = concat_channels(&[&fused, &lp.s16])?;
        trace.record("head.input", &head_in);
        let (cls, reg) = self.heads_forward(&head_in, &mut trace)?;
        trace.record("head.cls", &cls);
        trace.record("head.reg", &reg);

        let anchors = self.anchors()?;
        let masks = self.config.ground_filter.map(|g| {
            (0..self.config.classes.len())
                .map(|c| filter_by_ground_plane(&anchors, priors, c, &pre.calib, &g))
                .collect::<Vec<_>>()
        });
        let decoded = decode_predictions(
            &cls,
            &reg,
            &anchors,
            priors,
            &self.config.classes,
            masks.as_deref(),
            &pre.calib,
            &self.config.codec,
            opts.score_threshold,
        )?;
        let mut detections = nms_per_class(&decoded.detections, opts.nms_threshold);
        for d in &mut detections {
            d.box2d = pre.transform.inverse_box(&d.box2d);
        }
        let disparity = if opts.emit_disparity {
            Some(self.disparity_decoder_forward(&fused, &mut trace)?)
        } else {
            None
        };
        Ok(DetectReport {
            detections,
            trace,
            disparity,
            dropped: decoded.dropped,
        })
    }
}

/// Reorder `[1, D, H, W]` logits to the `[H, W, D]` f64 layout of the
/// stereo focal loss.
pub fn disparity_logits_hwd(logits: &Tensor) -> Result<Vec<f64>> {
    let (b, d, h, w) = logits.dims4()?;
    if b != 1 {
        return Err(Error::shape(format!("expected a single disparity map, got batch {b}")));
    }
    let src = logits.data();
    let mut out = vec![0.0; d * h * w];
    for k in 0..d {
        for i in 0..h * w {
            out[i * d + k] = src[k * h * w + i] as f64;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            input_h: 64,
            input_w: 128,
            crop_top: 8,
            stem_channels: 4,
            backbone_channels: [4, 6, 8],
            fusion: FusionConfig {
                max_disp4: 8,
                max_disp8: 6,
                small_volume_channels: 2,
                small_volume_disp: 3,
            },
            head_channels: 4,
            disparity_channels: 4,
            disparity_max: 5,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn default_config_channel_plan() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.fused_channels(), 2208);
        assert_eq!(c.head_input_channels(), 2336);
        assert_eq!(c.head_size(), (18, 80));
    }

    #[test]
    fn config_validation() {
        let bad = ModelConfig {
            input_h: 290,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            classes: vec!["Car".into(), "Car".into()],
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let mut bad = ModelConfig::default();
        bad.anchor_shapes[0].scale_level = 8;
        assert!(bad.validate().is_err());
        let json = serde_json::to_string(&ModelConfig::default()).unwrap();
        assert_eq!(serde_json::from_str::<ModelConfig>(&json).unwrap(), ModelConfig::default());
        let partial: ModelConfig = serde_json::from_str(r#"{"head_channels": 8}"#).unwrap();
        assert_eq!(partial.head_channels, 8);
        assert_eq!(partial.input_w, 1280);
    }

    #[test]
    fn archive_must_match_config() {
        let cfg = tiny_config();
        let mut w = random_archive(&cfg, 1).unwrap();
        w.remove("head.reg.out.weight");
        match Model::new(cfg.clone(), w) {
            Err(Error::MissingTensor(n)) => assert_eq!(n, "head.reg.out.weight"),
            other => panic!("{other:?}"),
        }
        let mut w = random_archive(&cfg, 1).unwrap();
        w.insert("fusion.reduce16.bias", Tensor::zeros(&[3]));
        assert!(matches!(Model::new(cfg.clone(), w), Err(Error::TensorShape { .. })));
        let m = Model::from_archive(random_archive(&cfg, 1).unwrap()).unwrap();
        assert_eq!(m.config, cfg);
    }

    #[test]
    fn transform_examples() {
        let cfg = ModelConfig::default();
        let t = Transform::new(1242, 375, &cfg).unwrap();
        assert_eq!(t.sy, 288.0 / 275.0);
        assert_eq!(t.sx, 1280.0 / 1242.0);
        let b = Box2d::new(100.25, 180.5, 300.0, 250.0);
        let back = t.inverse_box(&t.forward_box(&b));
        for (x, y) in [(b.x1, back.x1), (b.y1, back.y1), (b.x2, back.x2), (b.y2, back.y2)] {
            assert!((x - y).abs() < 1e-9);
        }
        assert!(Transform::new(1242, 100, &cfg).is_err());
        let id_cfg = ModelConfig {
            crop_top: 0,
            ..ModelConfig::default()
        };
        assert!(Transform::new(1280, 288, &id_cfg).unwrap().is_identity());
    }

    #[test]
    fn calibration_follows_the_image_transform() {
        let cfg = ModelConfig::default();
        let calib = CalibrationPair::from_intrinsics(721.5, 721.5, 609.6, 172.9, 0.54).unwrap();
        let t = Transform::new(1242, 375, &cfg).unwrap();
        let c2 = t.forward_calibration(&calib).unwrap();
        for p in [[1.0, 1.2, 10.0], [-4.0, 0.3, 25.0], [7.0, 1.6, 60.0]] {
            let (u, v) = calib.project_left(p);
            let (u2, v2) = c2.project_left(p);
            let mapped = t.forward_box(&Box2d::new(u, v, u, v));
            assert!((mapped.x1 - u2).abs() < 1e-9 && (mapped.y1 - v2).abs() < 1e-9);
        }
        assert!((c2.baseline - calib.baseline).abs() < 1e-12);
        assert!((c2.cy - (172.9 - 100.0) * 288.0 / 275.0).abs() < 1e-9);
    }

    #[test]
    fn backbone_shapes_zero_input_and_siamese() {
        let cfg = tiny_config();
        let mut w = random_archive(&cfg, 2).unwrap();
        let names: Vec<String> = w.names().filter(|n| n.ends_with(".bias") || n.ends_with(".shift")).map(String::from).collect();
        for n in names {
            w.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let m = Model::new(cfg, w).unwrap();
        let mut trace = ForwardTrace::default();
        let p = m.backbone_forward(&Tensor::zeros(&[1, 3, 64, 128]), &mut trace, true).unwrap();
        assert_eq!(p.s4.shape(), &[1, 4, 16, 32]);
        assert_eq!(p.s8.shape(), &[1, 6, 8, 16]);
        assert_eq!(p.s16.shape(), &[1, 8, 4, 8]);
        assert!(p.s4.data().iter().chain(p.s16.data()).all(|&v| v == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Tensor::from_fn(&[1, 3, 64, 128], |_| rng.gen_range(-2.0..2.0));
        let a = m.backbone_forward(&img, &mut trace, false).unwrap();
        let b = m.backbone_forward(&img, &mut trace, false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn disparity_layout_conversion() {
        let t = Tensor::from_fn(&[1, 3, 2, 2], |i| i as f32);
        let v = disparity_logits_hwd(&t).unwrap();
        // pixel (0, 1) holds channels 0, 1, 2 at flat indices 1, 5, 9
        assert_eq!(&v[3..6], &[1.0, 5.0, 9.0]);
    }
}
