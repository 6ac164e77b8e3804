//! KITTI object-detection artifacts: calibration files, label and
//! detection text, and stereo image pairs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Box2d, Box3d};
use crate::tensor::Tensor;

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

pub type Projection = [[f64; 4]; 3];

/// Rectified left/right projection matrices with derived intrinsics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPair {
    pub p2: Projection,
    pub p3: Projection,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub baseline: f64,
}

impl CalibrationPair {
    pub fn from_matrices(p2: Projection, p3: Projection) -> Result<Self> {
        let fx = p2[0][0];
        let fy = p2[1][1];
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::Invariant(format!(
                "focal lengths must be positive (fx = {fx}, fy = {fy})"
            )));
        }
        let baseline = (p2[0][3] - p3[0][3]) / fx;
        if !(baseline > 0.0) {
            return Err(Error::Invariant(format!(
                "stereo baseline must be positive, got {baseline}"
            )));
        }
        Ok(Self {
            p2,
            p3,
            fx,
            fy,
            cx: p2[0][2],
            cy: p2[1][2],
            baseline,
        })
    }

    /// Ideal rectified pair with the left camera at the origin.
    pub fn from_intrinsics(fx: f64, fy: f64, cx: f64, cy: f64, baseline: f64) -> Result<Self> {
        let p2 = [[fx, 0.0, cx, 0.0], [0.0, fy, cy, 0.0], [0.0, 0.0, 1.0, 0.0]];
        let mut p3 = p2;
        p3[0][3] = -fx * baseline;
        Self::from_matrices(p2, p3)
    }

    pub fn project_left(&self, p: [f64; 3]) -> (f64, f64) {
        project(&self.p2, p)
    }

    pub fn project_right(&self, p: [f64; 3]) -> (f64, f64) {
        project(&self.p3, p)
    }

    /// Exact inverse of [`Self::project_left`] for a known depth `z`.
    pub fn back_project_left(&self, u: f64, v: f64, z: f64) -> [f64; 3] {
        let m = &self.p2;
        // (row0 - u*row2) . X = 0 and (row1 - v*row2) . X = 0, solved for x, y
        let a = [
            [m[0][0] - u * m[2][0], m[0][1] - u * m[2][1]],
            [m[1][0] - v * m[2][0], m[1][1] - v * m[2][1]],
        ];
        let rhs = [
            -((m[0][2] - u * m[2][2]) * z + m[0][3] - u * m[2][3]),
            -((m[1][2] - v * m[2][2]) * z + m[1][3] - v * m[2][3]),
        ];
        let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
        let x = (rhs[0] * a[1][1] - a[0][1] * rhs[1]) / det;
        let y = (a[0][0] * rhs[1] - rhs[0] * a[1][0]) / det;
        [x, y, z]
    }
}

fn project(m: &Projection, p: [f64; 3]) -> (f64, f64) {
    let h = |r: &[f64; 4]| r[0] * p[0] + r[1] * p[1] + r[2] * p[2] + r[3];
    let w = h(&m[2]);
    (h(&m[0]) / w, h(&m[1]) / w)
}

pub fn parse_calibration(text: &str) -> Result<CalibrationPair> {
    let mut p2 = None;
    let mut p3 = None;
    for (i, line) in text.lines().enumerate() {
        let Some((key, rest)) = line.split_once(':') else {
            continue;
        };
        let slot = match key.trim() {
            "P2" => &mut p2,
            "P3" => &mut p3,
            _ => continue,
        };
        let vals: Vec<f64> = rest
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse {
                line: i + 1,
                msg: format!("{}: {e}", key.trim()),
            })?;
        if vals.len() != 12 {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("{} needs 12 values, found {}", key.trim(), vals.len()),
            });
        }
        let mut m = [[0.0; 4]; 3];
        for (k, v) in vals.into_iter().enumerate() {
            m[k / 4][k % 4] = v;
        }
        *slot = Some(m);
    }
    let missing = |k: &str| Error::Parse {
        line: text.lines().count(),
        msg: format!("missing {k} entry"),
    };
    let p2 = p2.ok_or_else(|| missing("P2"))?;
    let p3 = p3.ok_or_else(|| missing("P3"))?;
    CalibrationPair::from_matrices(p2, p3)
}

pub fn write_calibration(calib: &CalibrationPair) -> String {
    let row = |m: &Projection| {
        m.iter()
            .flatten()
            .map(|v| format!("{v:e}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    format!("P2: {}\nP3: {}\n", row(&calib.p2), row(&calib.p3))
}

/// One row of a KITTI label file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    pub class_name: String,
    pub truncation: f64,
    /// 0 = visible .. 3 = unknown; -1 when the file does not say
    pub occlusion: i32,
    pub alpha: f64,
    pub box2d: Box2d,
    pub h3d: f64,
    pub w3d: f64,
    pub l3d: f64,
    /// bottom-center in camera coordinates
    pub location: [f64; 3],
    pub rotation_y: f64,
}

impl ObjectAnnotation {
    pub fn is_dont_care(&self) -> bool {
        self.class_name == "DontCare"
    }

    pub fn box3d(&self) -> Box3d {
        Box3d {
            location: self.location,
            h: self.h3d,
            w: self.w3d,
            l: self.l3d,
            ry: self.rotation_y,
        }
    }

    /// Geometric center of the 3D box.
    pub fn center3d(&self) -> [f64; 3] {
        [self.location[0], self.location[1] - 0.5 * self.h3d, self.location[2]]
    }
}

/// Decoded network output in KITTI terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection3D {
    pub class_name: String,
    pub score: f64,
    pub alpha: f64,
    pub box2d: Box2d,
    pub h3d: f64,
    pub w3d: f64,
    pub l3d: f64,
    pub location: [f64; 3],
    pub rotation_y: f64,
}

impl Detection3D {
    pub fn box3d(&self) -> Box3d {
        Box3d {
            location: self.location,
            h: self.h3d,
            w: self.w3d,
            l: self.l3d,
            ry: self.rotation_y,
        }
    }

    fn geometry(&self) -> [f64; 13] {
        [
            self.alpha,
            self.box2d.x1,
            self.box2d.y1,
            self.box2d.x2,
            self.box2d.y2,
            self.h3d,
            self.w3d,
            self.l3d,
            self.location[0],
            self.location[1],
            self.location[2],
            self.rotation_y,
            self.score,
        ]
    }
}

impl From<&ObjectAnnotation> for Detection3D {
    fn from(a: &ObjectAnnotation) -> Self {
        Self {
            class_name: a.class_name.clone(),
            score: 1.0,
            alpha: a.alpha,
            box2d: a.box2d,
            h3d: a.h3d,
            w3d: a.w3d,
            l3d: a.l3d,
            location: a.location,
            rotation_y: a.rotation_y,
        }
    }
}

fn parse_row(line: &str, lineno: usize, min_fields: usize) -> Result<(ObjectAnnotation, Vec<f64>)> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() < min_fields {
        return Err(Error::Parse {
            line: lineno,
            msg: format!("expected at least {min_fields} fields, found {}", fields.len()),
        });
    }
    let num = |k: usize| -> Result<f64> {
        fields[k].parse::<f64>().map_err(|e| Error::Parse {
            line: lineno,
            msg: format!("field {} ({:?}): {e}", k + 1, fields[k]),
        })
    };
    let occlusion = num(2)?;
    let ann = ObjectAnnotation {
        class_name: fields[0].to_string(),
        truncation: num(1)?,
        occlusion: occlusion as i32,
        alpha: num(3)?,
        box2d: Box2d::new(num(4)?, num(5)?, num(6)?, num(7)?),
        h3d: num(8)?,
        w3d: num(9)?,
        l3d: num(10)?,
        location: [num(11)?, num(12)?, num(13)?],
        rotation_y: num(14)?,
    };
    let extra = (15..fields.len()).map(num).collect::<Result<Vec<_>>>()?;
    Ok((ann, extra))
}

/// Parse a label file; `DontCare` rows are kept (see
/// [`ObjectAnnotation::is_dont_care`]).
pub fn parse_labels(text: &str) -> Result<Vec<ObjectAnnotation>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_row(l, i + 1, 15).map(|(a, _)| a))
        .collect()
}

/// Parse a detection file (label fields plus a trailing score).
pub fn parse_detections(text: &str) -> Result<Vec<Detection3D>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let (a, extra) = parse_row(l, i + 1, 16)?;
            let mut d = Detection3D::from(&a);
            d.score = extra[0];
            Ok(d)
        })
        .collect()
}

/// Label rows in the standard 15-field layout.
pub fn write_labels(objects: &[ObjectAnnotation]) -> String {
    let mut out = String::new();
    for o in objects {
        let b = &o.box2d;
        writeln!(
            out,
            "{} {:.2} {} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2}",
            o.class_name,
            o.truncation,
            o.occlusion,
            o.alpha,
            b.x1,
            b.y1,
            b.x2,
            b.y2,
            o.h3d,
            o.w3d,
            o.l3d,
            o.location[0],
            o.location[1],
            o.location[2],
            o.rotation_y
        )
        .expect("writing to a String cannot fail");
    }
    out
}

pub fn write_detections(dets: &[Detection3D]) -> Result<String> {
    let mut out = String::new();
    for (i, d) in dets.iter().enumerate() {
        if d.geometry().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("detection {i} ({})", d.class_name)));
        }
        let b = &d.box2d;
        writeln!(
            out,
            "{} -1 -1 {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.2} {:.6}",
            d.class_name,
            d.alpha,
            b.x1,
            b.y1,
            b.x2,
            b.y2,
            d.h3d,
            d.w3d,
            d.l3d,
            d.location[0],
            d.location[1],
            d.location[2],
            d.rotation_y,
            d.score
        )
        .expect("writing to a String cannot fail");
    }
    Ok(out)
}

/// Scale 8-bit RGB to `[0, 1]` and normalize per channel.
pub fn image_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = (px[c] as f32 / 255.0 - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
        }
    }
    Tensor::new(vec![1, 3, h, w], data).expect("shape matches pixel count")
}

pub fn load_image_pair(left: &RgbImage, right: &RgbImage) -> Result<(Tensor, Tensor)> {
    if left.dimensions() != right.dimensions() {
        return Err(Error::shape(format!(
            "stereo pair size mismatch: left {:?}, right {:?}",
            left.dimensions(),
            right.dimensions()
        )));
    }
    Ok((image_to_tensor(left), image_to_tensor(right)))
}

/// Read a PNG or binary PPM as 8-bit RGB.
pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)?.to_rgb8())
}

/// Standard KITTI object layout: `image_2/`, `image_3/`, `label_2/`, `calib/`.
#[derive(Debug, Clone)]
pub struct KittiDataset {
    pub root: PathBuf,
}

impl KittiDataset {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    fn image_path(&self, dir: &str, id: &str) -> PathBuf {
        let png = self.root.join(dir).join(format!("{id}.png"));
        if png.exists() {
            png
        } else {
            self.root.join(dir).join(format!("{id}.ppm"))
        }
    }

    pub fn left_path(&self, id: &str) -> PathBuf {
        self.image_path("image_2", id)
    }

    pub fn right_path(&self, id: &str) -> PathBuf {
        self.image_path("image_3", id)
    }

    /// Frame ids present in `image_2`, sorted.
    pub fn frame_ids(&self) -> Result<Vec<String>> {
        let mut ids: Vec<String> = std::fs::read_dir(self.root.join("image_2"))?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let p = e.path();
                match p.extension().and_then(|s| s.to_str()) {
                    Some("png") | Some("ppm") => {
                        p.file_stem().and_then(|s| s.to_str()).map(String::from)
                    }
                    _ => None,
                }
            })
            .collect();
        ids.sort();
        ids.dedup();
        Ok(ids)
    }

    pub fn read_split(path: &Path) -> Result<Vec<String>> {
        Ok(std::fs::read_to_string(path)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect())
    }

    pub fn calibration(&self, id: &str) -> Result<CalibrationPair> {
        parse_calibration(&std::fs::read_to_string(
            self.root.join("calib").join(format!("{id}.txt")),
        )?)
    }

    pub fn labels(&self, id: &str) -> Result<Vec<ObjectAnnotation>> {
        parse_labels(&std::fs::read_to_string(
            self.root.join("label_2").join(format!("{id}.txt")),
        )?)
    }

    pub fn image_pair(&self, id: &str) -> Result<(RgbImage, RgbImage)> {
        Ok((read_rgb(&self.left_path(id))?, read_rgb(&self.right_path(id))?))
    }

    pub fn image_size(&self, id: &str) -> Result<(u32, u32)> {
        Ok(image::image_dimensions(self.left_path(id))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const KITTI_CALIB: &str = "P0: 7.215377e+02 0.000000e+00 6.095593e+02 0.000000e+00 0.000000e+00 7.215377e+02 1.728540e+02 0.000000e+00 0.000000e+00 0.000000e+00 1.000000e+00 0.000000e+00
P1: 7.215377e+02 0.000000e+00 6.095593e+02 -3.875744e+02 0.000000e+00 7.215377e+02 1.728540e+02 0.000000e+00 0.000000e+00 0.000000e+00 1.000000e+00 0.000000e+00
P2: 7.215377e+02 0.000000e+00 6.095593e+02 0.000000e+00 0.000000e+00 7.215377e+02 1.728540e+02 0.000000e+00 0.000000e+00 0.000000e+00 1.000000e+00 0.000000e+00
P3: 7.215377e+02 0.000000e+00 6.095593e+02 -3.861448e+02 0.000000e+00 7.215377e+02 1.728540e+02 0.000000e+00 0.000000e+00 0.000000e+00 1.000000e+00 0.000000e+00
R0_rect: 9.999239e-01 9.837760e-03 -7.445048e-03 -9.869795e-03 9.999421e-01 -4.278459e-03 7.402527e-03 4.351614e-03 9.999631e-01
Tr_velo_to_cam: 7.533745e-03 -9.999714e-01 -6.166020e-04 -4.069766e-03 1.480249e-02 7.280733e-04 -9.998902e-01 -7.631618e-02 9.998621e-01 7.523790e-03 1.480755e-02 -2.717806e-01
";

    #[test]
    fn calibration_baseline() {
        let c = parse_calibration(KITTI_CALIB).unwrap();
        let want = 386.1448 / 721.5377;
        assert!(((c.baseline - want) / want).abs() < 1e-6);
        assert!((c.baseline - 0.5352).abs() < 1e-4);
        assert_eq!(c.fx, 721.5377);
        assert_eq!(c.cx, 609.5593);
        assert_eq!(c.cy, 172.854);
    }

    #[test]
    fn calibration_degenerate_and_malformed() {
        let p = "P2: 700 0 600 0 0 700 180 0 0 0 1 0\n";
        let same = format!("{p}{}", p.replace("P2", "P3"));
        assert!(matches!(parse_calibration(&same), Err(Error::Invariant(_))));
        let err = parse_calibration(p).unwrap_err();
        assert!(err.to_string().contains("P3"), "{err}");
        let short = "P2: 700 0 600 0 0 700 180 0 0 0 1\nP3: 700 0 600 -300 0 700 180 0 0 0 1 0\n";
        match parse_calibration(short) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn calibration_identity_like() {
        let text = "P2: 500 0 320 0 0 500 320 0 0 0 1 0\nP3: 500 0 320 -250 0 500 320 0 0 0 1 0\n";
        let c = parse_calibration(text).unwrap();
        assert_eq!((c.fx, c.cx, c.cy), (500.0, 320.0, 320.0));
        assert_eq!(c.baseline, 0.5);
    }

    #[test]
    fn labels_examples() {
        assert!(parse_labels("").unwrap().is_empty());
        let line = "Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 20.0 -1.59\n";
        let anns = parse_labels(line).unwrap();
        assert_eq!(anns.len(), 1);
        assert_eq!(anns[0].location[2], 20.0);
        assert_eq!(anns[0].class_name, "Car");
        assert!(!anns[0].is_dont_care());

        let dc = "DontCare -1 -1 -10 503.89 169.71 590.61 190.13 -1 -1 -1 -1000 -1000 -1000 -10\n";
        let anns = parse_labels(&format!("{line}{dc}")).unwrap();
        assert_eq!(anns.len(), 2);
        assert!(anns[1].is_dont_care());

        let short = "Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 20.0\n";
        match parse_labels(short) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
    }

    fn sample_det(score: f64) -> Detection3D {
        Detection3D {
            class_name: "Pedestrian".into(),
            score,
            alpha: 0.123,
            box2d: Box2d::new(10.0, 20.0, 30.5, 80.25),
            h3d: 1.7,
            w3d: 0.6,
            l3d: 0.8,
            location: [1.0, 1.5, 12.0],
            rotation_y: 0.2,
        }
    }

    #[test]
    fn write_detection_format() {
        assert_eq!(write_detections(&[]).unwrap(), "");
        let s = write_detections(&[sample_det(1.0)]).unwrap();
        assert!(s.trim_end().ends_with(" 1.000000"), "{s}");
        assert_eq!(s.split_whitespace().count(), 16);
        let mut bad = sample_det(0.5);
        bad.location[2] = f64::NAN;
        assert!(matches!(write_detections(&[bad]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn image_normalization() {
        let black = RgbImage::new(4, 3);
        let (l, r) = load_image_pair(&black, &black).unwrap();
        assert_eq!(l.shape(), &[1, 3, 3, 4]);
        for c in 0..3 {
            assert_eq!(l.at4(0, c, 1, 1), -IMAGENET_MEAN[c] / IMAGENET_STD[c]);
        }
        assert_eq!(l, r);
        let gray = RgbImage::from_pixel(2, 2, image::Rgb([128, 128, 128]));
        let t = image_to_tensor(&gray);
        for c in 0..3 {
            let want = (128.0 / 255.0 - IMAGENET_MEAN[c] as f64) / IMAGENET_STD[c] as f64;
            assert!((t.at4(0, c, 0, 0) as f64 - want).abs() < 1e-6);
        }
        assert!(load_image_pair(&RgbImage::new(200, 100), &RgbImage::new(201, 100)).is_err());
    }

    #[test]
    fn ppm_fixture_reads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        let mut bytes = b"P6\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 0, 255]);
        std::fs::write(&path, bytes).unwrap();
        let img = read_rgb(&path).unwrap();
        assert_eq!(img.dimensions(), (2, 1));
        assert_eq!(img.get_pixel(1, 0).0, [0, 0, 255]);
    }

    fn finite() -> impl Strategy<Value = f64> {
        -500.0..500.0f64
    }

    proptest! {
        #[test]
        fn detection_roundtrip(vals in proptest::collection::vec(finite(), 12), score in 0.0..1.0f64) {
            let d = Detection3D {
                class_name: "Car".into(),
                score,
                alpha: vals[0],
                box2d: Box2d::new(vals[1], vals[2], vals[3], vals[4]),
                h3d: vals[5].abs() + 0.1,
                w3d: vals[6].abs() + 0.1,
                l3d: vals[7].abs() + 0.1,
                location: [vals[8], vals[9], vals[10]],
                rotation_y: vals[11],
            };
            let text = write_detections(std::slice::from_ref(&d)).unwrap();
            let back = &parse_detections(&text).unwrap()[0];
            let ann = &parse_labels(&text).unwrap()[0];
            for (a, b) in d.geometry().iter().zip(back.geometry().iter()) {
                prop_assert!((a - b).abs() <= 0.005 + 1e-9, "{a} vs {b}");
            }
            prop_assert!((ann.location[2] - d.location[2]).abs() <= 0.005 + 1e-9);
        }

        #[test]
        fn calibration_total_over_synthesized_files(
            fx in 100.0..2000.0f64, fy in 100.0..2000.0f64, cx in 0.0..1500.0f64, cy in 0.0..500.0f64,
            b in 0.05..2.0f64, t2 in -100.0..100.0f64, tz in -0.01..0.01f64,
        ) {
            let p2 = [[fx, 0.0, cx, t2], [0.0, fy, cy, 0.2], [0.0, 0.0, 1.0, tz]];
            let mut p3 = p2;
            p3[0][3] = t2 - b * fx;
            let c = CalibrationPair::from_matrices(p2, p3).unwrap();
            let text = format!("P0: 1 0 0 0 0 1 0 0 0 0 1 0\n{}R0_rect: 1 0 0 0 1 0 0 0 1\n", write_calibration(&c));
            let parsed = parse_calibration(&text).unwrap();
            prop_assert!(((parsed.baseline - b) / b).abs() < 1e-6);
            prop_assert_eq!(parsed.fx, fx);
        }
    }
}
