//! KITTI-style difficulty buckets and interpolated average precision.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou_2d, iou_3d, iou_bev, Box2d};
use crate::kitti::{Detection3D, ObjectAnnotation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard];

    pub fn bucket(self) -> DifficultyBucket {
        match self {
            Difficulty::Easy => DifficultyBucket {
                name: self,
                min_box_height: 40.0,
                max_occlusion: 0,
                max_truncation: 0.15,
            },
            Difficulty::Moderate => DifficultyBucket {
                name: self,
                min_box_height: 25.0,
                max_occlusion: 1,
                max_truncation: 0.30,
            },
            Difficulty::Hard => DifficultyBucket {
                name: self,
                min_box_height: 25.0,
                max_occlusion: 2,
                max_truncation: 0.50,
            },
        }
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Difficulty::Easy => "easy",
            Difficulty::Moderate => "moderate",
            Difficulty::Hard => "hard",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DifficultyBucket {
    pub name: Difficulty,
    pub min_box_height: f64,
    pub max_occlusion: i32,
    pub max_truncation: f64,
}

impl DifficultyBucket {
    pub fn admits(&self, ann: &ObjectAnnotation) -> bool {
        !ann.is_dont_care()
            && ann.box2d.height() >= self.min_box_height
            && (0..=self.max_occlusion).contains(&ann.occlusion)
            && ann.truncation <= self.max_truncation
    }
}

pub fn bucket_of(ann: &ObjectAnnotation) -> Vec<Difficulty> {
    Difficulty::ALL
        .into_iter()
        .filter(|d| d.bucket().admits(ann))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IouKind {
    TwoD,
    Bev,
    ThreeD,
}

impl fmt::Display for IouKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            IouKind::TwoD => "2d",
            IouKind::Bev => "bev",
            IouKind::ThreeD => "3d",
        })
    }
}

impl std::str::FromStr for IouKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "2d" => Ok(IouKind::TwoD),
            "bev" => Ok(IouKind::Bev),
            "3d" => Ok(IouKind::ThreeD),
            other => Err(Error::invalid(format!("unknown IoU kind {other:?}"))),
        }
    }
}

fn overlap(kind: IouKind, det: &Detection3D, gt: &ObjectAnnotation) -> f64 {
    match kind {
        IouKind::TwoD => iou_2d(&det.box2d, &gt.box2d),
        IouKind::Bev => iou_bev(&det.box3d().bev(), &gt.box3d().bev()),
        IouKind::ThreeD => iou_3d(&det.box3d(), &gt.box3d()),
    }
}

/// Fraction of `det` covered by `region`.
fn coverage(det: &Box2d, region: &Box2d) -> f64 {
    let a = det.area();
    if a <= 0.0 {
        0.0
    } else {
        det.intersection(region) / a
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Outcome {
    TruePositive,
    FalsePositive,
    Ignored,
}

/// Per-frame greedy matching; returns `(score, outcome)` per detection and
/// the number of ground-truth objects that count toward recall.
fn match_frame(
    gts: &[ObjectAnnotation],
    dets: &[Detection3D],
    class: &str,
    kind: IouKind,
    threshold: f64,
    bucket: &DifficultyBucket,
) -> (Vec<(f64, Outcome)>, usize) {
    // 1 = counts, 0 = same class but outside the bucket (ignored)
    let relevant: Vec<(usize, bool)> = gts
        .iter()
        .enumerate()
        .filter(|(_, g)| g.class_name == class)
        .map(|(i, g)| (i, bucket.admits(g)))
        .collect();
    let dont_care: Vec<&ObjectAnnotation> = gts.iter().filter(|g| g.is_dont_care()).collect();
    let n_counted = relevant.iter().filter(|(_, c)| *c).count();

    let mut order: Vec<usize> = (0..dets.len())
        .filter(|&i| dets[i].class_name == class)
        .collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));

    let mut taken = vec![false; relevant.len()];
    let mut out = Vec::with_capacity(order.len());
    for di in order {
        let det = &dets[di];
        // prefer counted GT, then ignored GT; best overlap within each group
        let mut best: Option<(usize, bool, f64)> = None;
        for (slot, &(gi, counted)) in relevant.iter().enumerate() {
            if taken[slot] {
                continue;
            }
            let iou = overlap(kind, det, &gts[gi]);
            if iou < threshold {
                continue;
            }
            let better = match best {
                None => true,
                Some((_, bc, biou)) => (counted && !bc) || (counted == bc && iou > biou),
            };
            if better {
                best = Some((slot, counted, iou));
            }
        }
        let outcome = match best {
            Some((slot, counted, _)) => {
                taken[slot] = true;
                if counted {
                    Outcome::TruePositive
                } else {
                    Outcome::Ignored
                }
            }
            None => {
                let in_dont_care = dont_care
                    .iter()
                    .any(|g| coverage(&det.box2d, &g.box2d) >= 0.5);
                if in_dont_care || det.box2d.height() < bucket.min_box_height {
                    Outcome::Ignored
                } else {
                    Outcome::FalsePositive
                }
            }
        };
        out.push((det.score, outcome));
    }
    (out, n_counted)
}

/// Interpolated AP over `n_recall_points` recall levels (11 or 40).
///
/// The 11-point variant samples recall `0, 0.1, .., 1`; the 40-point
/// variant samples `1/40, 2/40, .., 1`. Precision at a level is the maximum
/// precision achieved at any recall at or above it.
pub fn average_precision(
    gts: &[Vec<ObjectAnnotation>],
    dets: &[Vec<Detection3D>],
    class: &str,
    kind: IouKind,
    iou_threshold: f64,
    bucket: &DifficultyBucket,
    n_recall_points: usize,
) -> Result<f64> {
    if n_recall_points != 11 && n_recall_points != 40 {
        return Err(Error::invalid(format!(
            "n_recall_points must be 11 or 40, got {n_recall_points}"
        )));
    }
    if gts.len() != dets.len() {
        return Err(Error::invalid(format!(
            "{} ground-truth frames but {} detection frames",
            gts.len(),
            dets.len()
        )));
    }
    let per_frame: Vec<(Vec<(f64, Outcome)>, usize)> = gts
        .par_iter()
        .zip(dets.par_iter())
        .map(|(g, d)| match_frame(g, d, class, kind, iou_threshold, bucket))
        .collect();
    let n_gt: usize = per_frame.iter().map(|(_, n)| n).sum();
    if n_gt == 0 {
        return Err(Error::invalid(format!(
            "no {class} ground truth in the {} bucket; AP is undefined",
            bucket.name
        )));
    }
    let mut scored: Vec<(f64, bool)> = per_frame
        .into_iter()
        .flat_map(|(v, _)| v)
        .filter(|(_, o)| *o != Outcome::Ignored)
        .map(|(s, o)| (s, o == Outcome::TruePositive))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));

    // PR points at every distinct score threshold
    let mut curve: Vec<(f64, f64)> = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < scored.len() {
        let s = scored[i].0;
        while i < scored.len() && scored[i].0 == s {
            if scored[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
    }

    let levels: Vec<f64> = if n_recall_points == 11 {
        (0..11).map(|k| k as f64 / 10.0).collect()
    } else {
        (1..=40).map(|k| k as f64 / 40.0).collect()
    };
    let total: f64 = levels
        .iter()
        .map(|&r| {
            curve
                .iter()
                .filter(|(rec, _)| *rec >= r - 1e-12)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
        })
        .sum();
    Ok(total / levels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApRow {
    pub class: String,
    pub bucket: Difficulty,
    pub kind: IouKind,
    pub iou_threshold: f64,
    pub ap: f64,
}

/// AP for every class present in the ground truth and every bucket that has
/// at least one eligible object.
pub fn evaluate_all(
    gts: &[Vec<ObjectAnnotation>],
    dets: &[Vec<Detection3D>],
    kind: IouKind,
    iou_threshold: f64,
    n_recall_points: usize,
) -> Result<Vec<ApRow>> {
    let mut classes: Vec<&str> = gts
        .iter()
        .flatten()
        .filter(|g| !g.is_dont_care())
        .map(|g| g.class_name.as_str())
        .collect();
    classes.sort_unstable();
    classes.dedup();
    let mut rows = Vec::new();
    for class in classes {
        for diff in Difficulty::ALL {
            let bucket = diff.bucket();
            let any = gts
                .iter()
                .flatten()
                .any(|g| g.class_name == class && bucket.admits(g));
            if !any {
                continue;
            }
            let ap = average_precision(gts, dets, class, kind, iou_threshold, &bucket, n_recall_points)?;
            rows.push(ApRow {
                class: class.to_string(),
                bucket: diff,
                kind,
                iou_threshold,
                ap,
            });
        }
    }
    Ok(rows)
}

pub fn format_report(rows: &[ApRow]) -> String {
    let mut s = String::from("class bucket iou_kind iou_threshold ap\n");
    for r in rows {
        s.push_str(&format!(
            "{} {} {} {:.2} {:.4}\n",
            r.class, r.bucket, r.kind, r.iou_threshold, r.ap
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(x: f64, height: f64, occlusion: i32, truncation: f64) -> ObjectAnnotation {
        ObjectAnnotation {
            class_name: "Car".into(),
            truncation,
            occlusion,
            alpha: 0.1,
            box2d: Box2d::new(x, 100.0, x + 60.0, 100.0 + height),
            h3d: 1.5,
            w3d: 1.6,
            l3d: 3.9,
            location: [x / 50.0 - 5.0, 1.6, 20.0 + x / 20.0],
            rotation_y: 0.1,
        }
    }

    #[test]
    fn bucket_examples() {
        use Difficulty::*;
        assert_eq!(bucket_of(&ann(0.0, 50.0, 0, 0.0)), vec![Easy, Moderate, Hard]);
        assert_eq!(bucket_of(&ann(0.0, 30.0, 1, 0.0)), vec![Moderate, Hard]);
        assert!(bucket_of(&ann(0.0, 10.0, 0, 0.0)).is_empty());
        assert_eq!(bucket_of(&ann(0.0, 50.0, 2, 0.4)), vec![Hard]);
    }

    #[test]
    fn buckets_nested() {
        for h in [10.0, 26.0, 39.0, 41.0, 80.0] {
            for occ in 0..4 {
                for tr in [0.0, 0.2, 0.4, 0.6] {
                    let a = ann(0.0, h, occ, tr);
                    let e = Difficulty::Easy.bucket().admits(&a);
                    let m = Difficulty::Moderate.bucket().admits(&a);
                    let hd = Difficulty::Hard.bucket().admits(&a);
                    assert!(!e || m);
                    assert!(!m || hd);
                }
            }
        }
    }

    fn as_det(a: &ObjectAnnotation, score: f64) -> Detection3D {
        let mut d = Detection3D::from(a);
        d.score = score;
        d
    }

    #[test]
    fn perfect_and_empty() {
        let gts = vec![vec![ann(0.0, 50.0, 0, 0.0), ann(200.0, 45.0, 0, 0.0)]];
        let dets = vec![gts[0].iter().map(|a| as_det(a, 1.0)).collect()];
        let b = Difficulty::Easy.bucket();
        for kind in [IouKind::TwoD, IouKind::Bev, IouKind::ThreeD] {
            assert_eq!(average_precision(&gts, &dets, "Car", kind, 0.7, &b, 40).unwrap(), 1.0);
        }
        let none = vec![vec![]];
        assert_eq!(average_precision(&gts, &none, "Car", IouKind::TwoD, 0.7, &b, 40).unwrap(), 0.0);
        let empty_gt = vec![vec![]];
        assert!(average_precision(&empty_gt, &none, "Car", IouKind::TwoD, 0.7, &b, 40).is_err());
        assert!(average_precision(&gts, &dets, "Car", IouKind::TwoD, 0.7, &b, 12).is_err());
    }

    #[test]
    fn hand_computed_pr_curve() {
        let gts = vec![vec![ann(0.0, 50.0, 0, 0.0), ann(200.0, 50.0, 0, 0.0), ann(400.0, 50.0, 0, 0.0)]];
        let mut wrong = ann(700.0, 50.0, 0, 0.0);
        wrong.location[2] = 60.0;
        let dets = vec![vec![as_det(&gts[0][0], 0.9), as_det(&gts[0][1], 0.8), as_det(&wrong, 0.7)]];
        let b = Difficulty::Moderate.bucket();
        // PR points: (1/3, 1), (2/3, 1), (2/3, 2/3); levels <= 2/3 see precision 1
        let ap40 = average_precision(&gts, &dets, "Car", IouKind::TwoD, 0.5, &b, 40).unwrap();
        assert!((ap40 - 26.0 / 40.0).abs() < 1e-9);
        let ap11 = average_precision(&gts, &dets, "Car", IouKind::TwoD, 0.5, &b, 11).unwrap();
        assert!((ap11 - 7.0 / 11.0).abs() < 1e-9);
    }

    #[test]
    fn dont_care_and_out_of_bucket_are_not_false_positives() {
        let mut dc = ann(500.0, 50.0, 0, 0.0);
        dc.class_name = "DontCare".into();
        let small = ann(300.0, 30.0, 1, 0.0);
        let gts = vec![vec![ann(0.0, 50.0, 0, 0.0), small.clone(), dc.clone()]];
        let mut in_dc = as_det(&dc, 0.95);
        in_dc.class_name = "Car".into();
        let dets = vec![vec![in_dc, as_det(&small, 0.9), as_det(&gts[0][0], 0.5)]];
        let b = Difficulty::Easy.bucket();
        assert_eq!(average_precision(&gts, &dets, "Car", IouKind::TwoD, 0.7, &b, 40).unwrap(), 1.0);
    }

    #[test]
    fn frame_order_invariant_and_monotone() {
        let f0 = vec![ann(0.0, 50.0, 0, 0.0), ann(200.0, 50.0, 0, 0.0)];
        let f1 = vec![ann(100.0, 60.0, 0, 0.0)];
        let mut wrong = ann(600.0, 50.0, 0, 0.0);
        wrong.location[2] = 70.0;
        let d0 = vec![as_det(&f0[0], 0.6), as_det(&wrong, 0.7)];
        let d1 = vec![as_det(&f1[0], 0.5)];
        let b = Difficulty::Hard.bucket();
        let ap = |g: &[Vec<ObjectAnnotation>], d: &[Vec<Detection3D>]| {
            average_precision(g, d, "Car", IouKind::ThreeD, 0.7, &b, 40).unwrap()
        };
        let a = ap(&[f0.clone(), f1.clone()], &[d0.clone(), d1.clone()]);
        let r = ap(&[f1.clone(), f0.clone()], &[d1.clone(), d0.clone()]);
        assert_eq!(a, r);
        let mut boosted = d1.clone();
        boosted[0].score = 0.9;
        assert!(ap(&[f0, f1], &[d0, boosted]) >= a);
    }
}
