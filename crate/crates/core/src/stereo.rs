//! Stereo feature matching in feature space: correlation and concatenation
//! cost volumes, the densely connected ghost block, and the hierarchical
//! multi-scale fusion that turns pyramids of left/right features into one
//! 2D stereo feature map.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ConvBn, ForwardTrace};
use crate::tensor::{avg_pool2, concat_channels, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CostVolumeKind {
    Correlation,
    Concatenation,
}

/// Matching scores per disparity hypothesis. Hypothesis `d` compares left
/// pixel `x` with right pixel `x - d`.
#[derive(Debug, Clone)]
pub struct CostVolume {
    pub kind: CostVolumeKind,
    pub max_disp: usize,
    /// correlation: `[B, D, H, W]`; concatenation: `[B, 2C, D, H, W]`
    pub data: Tensor,
}

fn check_pair(left: &Tensor, right: &Tensor, max_disp: usize) -> Result<(usize, usize, usize, usize)> {
    let dims = left.dims4()?;
    if right.shape() != left.shape() {
        return Err(Error::shape(format!(
            "left {:?} and right {:?} feature shapes differ",
            left.shape(),
            right.shape()
        )));
    }
    if max_disp == 0 {
        return Err(Error::invalid("max_disp must be >= 1"));
    }
    Ok(dims)
}

fn pixel_norms(t: &Tensor) -> Vec<f32> {
    let (b, c, h, w) = t.dims4().expect("checked by caller");
    let plane = h * w;
    let mut out = vec![0.0f32; b * plane];
    for bi in 0..b {
        let dst = &mut out[bi * plane..(bi + 1) * plane];
        for ci in 0..c {
            let src = &t.data()[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o += v * v;
            }
        }
        for o in dst.iter_mut() {
            *o = o.sqrt();
        }
    }
    out
}

/// Cosine similarity over channels between left pixels and right pixels
/// shifted by each hypothesis. Out-of-image shifts and zero-norm pixels
/// give 0. Hypotheses at or beyond the width are all zero.
pub fn correlation_volume(left: &Tensor, right: &Tensor, max_disp: usize) -> Result<CostVolume> {
    let (b, c, h, w) = check_pair(left, right, max_disp)?;
    let plane = h * w;
    let ln = pixel_norms(left);
    let rn = pixel_norms(right);
    let (ld, rd) = (left.data(), right.data());
    let mut out = vec![0.0f32; b * max_disp * plane];
    out.par_chunks_mut(plane).enumerate().for_each(|(idx, acc)| {
        let bi = idx / max_disp;
        let d = idx % max_disp;
        if d >= w {
            return;
        }
        for ci in 0..c {
            let base = (bi * c + ci) * plane;
            for y in 0..h {
                let lrow = &ld[base + y * w..base + (y + 1) * w];
                let rrow = &rd[base + y * w..base + (y + 1) * w];
                let orow = &mut acc[y * w..(y + 1) * w];
                for ((o, &l), &r) in orow[d..].iter_mut().zip(&lrow[d..]).zip(&rrow[..w - d]) {
                    *o += l * r;
                }
            }
        }
        let (lnb, rnb) = (&ln[bi * plane..(bi + 1) * plane], &rn[bi * plane..(bi + 1) * plane]);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                acc[i] = if x < d {
                    0.0
                } else {
                    let denom = lnb[i] * rnb[i - d];
                    if denom > 0.0 {
                        (acc[i] / denom).clamp(-1.0, 1.0)
                    } else {
                        0.0
                    }
                };
            }
        }
    });
    Ok(CostVolume {
        kind: CostVolumeKind::Correlation,
        max_disp,
        data: Tensor::new(vec![b, max_disp, h, w], out)?,
    })
}

/// Left features stacked with horizontally shifted right features for every
/// hypothesis, zero where the shift leaves the image.
pub fn concatenation_volume(left: &Tensor, right: &Tensor, max_disp: usize) -> Result<CostVolume> {
    let (b, c, h, w) = check_pair(left, right, max_disp)?;
    let plane = h * w;
    let slab = max_disp * plane;
    let (ld, rd) = (left.data(), right.data());
    let mut out = vec![0.0f32; b * 2 * c * slab];
    out.par_chunks_mut(slab).enumerate().for_each(|(idx, dst)| {
        let bi = idx / (2 * c);
        let ch = idx % (2 * c);
        if ch < c {
            let src = &ld[(bi * c + ch) * plane..(bi * c + ch + 1) * plane];
            for d in 0..max_disp {
                dst[d * plane..(d + 1) * plane].copy_from_slice(src);
            }
        } else {
            let src = &rd[(bi * c + ch - c) * plane..(bi * c + ch - c + 1) * plane];
            for d in 0..max_disp.min(w) {
                for y in 0..h {
                    let row = &src[y * w..(y + 1) * w];
                    let o = &mut dst[d * plane + y * w..d * plane + (y + 1) * w];
                    o[d..].copy_from_slice(&row[..w - d]);
                }
            }
        }
    });
    Ok(CostVolume {
        kind: CostVolumeKind::Concatenation,
        max_disp,
        data: Tensor::new(vec![b, 2 * c, max_disp, h, w], out)?,
    })
}

/// Pointwise primary branch and depthwise 3x3 cheap branch.
#[derive(Debug, Clone, Copy)]
pub struct GhostParams<'a> {
    pub primary: ConvBn<'a>,
    pub cheap: ConvBn<'a>,
}

impl GhostParams<'_> {
    fn validate(&self, c: usize) -> Result<()> {
        let p = self.primary.weight.shape();
        let q = self.cheap.weight.shape();
        if p != [c, c, 1, 1] {
            return Err(Error::shape(format!(
                "ghost primary weight {p:?}, expected [{c}, {c}, 1, 1]"
            )));
        }
        if q != [c, 1, 3, 3] || self.cheap.groups != c {
            return Err(Error::shape(format!(
                "ghost cheap weight {q:?} (groups {}), expected depthwise [{c}, 1, 3, 3]",
                self.cheap.groups
            )));
        }
        Ok(())
    }
}

/// `concat(input, primary(input), cheap(primary(input)))`: 3C channels with
/// the input passed through untouched.
pub fn ghost_dense_forward(input: &Tensor, params: &GhostParams, trace: &mut ForwardTrace, module: &str) -> Result<Tensor> {
    let (_, c, _, _) = input.dims4()?;
    params.validate(c)?;
    let primary = params.primary.forward(input, trace, module)?;
    let cheap = params.cheap.forward(&primary, trace, module)?;
    concat_channels(&[input, &primary, &cheap])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub max_disp4: usize,
    pub max_disp8: usize,
    /// channels each side is reduced to before the 1/16 concatenation volume
    pub small_volume_channels: usize,
    pub small_volume_disp: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            max_disp4: 96,
            max_disp8: 192,
            small_volume_channels: 16,
            small_volume_disp: 24,
        }
    }
}

impl FusionConfig {
    pub fn ghost4_channels(&self) -> usize {
        self.max_disp4
    }

    pub fn ghost8_channels(&self) -> usize {
        3 * self.max_disp4 + self.max_disp8
    }

    /// Channels of the fused output (average-pool downsampling).
    pub fn output_channels(&self) -> usize {
        3 * self.ghost8_channels() + 2 * self.small_volume_channels * self.small_volume_disp
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FusionParams<'a> {
    pub ghost4: GhostParams<'a>,
    pub ghost8: GhostParams<'a>,
    /// learned stride-2 downsampling; average pooling when absent
    pub down4: Option<ConvBn<'a>>,
    pub down8: Option<ConvBn<'a>>,
    /// 1x1 channel reduction applied to both sides at 1/16
    pub reduce16: ConvBn<'a>,
}

/// Backbone features at strides 4, 8 and 16.
#[derive(Debug, Clone, PartialEq)]
pub struct Pyramid {
    pub s4: Tensor,
    pub s8: Tensor,
    pub s16: Tensor,
}

impl Pyramid {
    fn check(&self, other: &Pyramid) -> Result<()> {
        let (b, _, h, w) = self.s4.dims4()?;
        let (b8, _, h8, w8) = self.s8.dims4()?;
        let (b16, _, h16, w16) = self.s16.dims4()?;
        if b8 != b || b16 != b || h8 != h / 2 || w8 != w / 2 || h16 != h8 / 2 || w16 != w8 / 2 {
            return Err(Error::shape(format!(
                "inconsistent pyramid: {:?} / {:?} / {:?}",
                self.s4.shape(),
                self.s8.shape(),
                self.s16.shape()
            )));
        }
        if self.s4.shape() != other.s4.shape()
            || self.s8.shape() != other.s8.shape()
            || self.s16.shape() != other.s16.shape()
        {
            return Err(Error::shape("left and right pyramids differ in shape"));
        }
        Ok(())
    }
}

fn downsample(x: &Tensor, learned: Option<&ConvBn>, trace: &mut ForwardTrace) -> Result<Tensor> {
    match learned {
        Some(conv) => conv.forward(x, trace, "fusion"),
        None => avg_pool2(x),
    }
}

/// Hierarchical fusion:
/// correlation (1/4) -> ghost -> downsample -> concat correlation (1/8) ->
/// ghost -> downsample -> concat flattened small concatenation volume (1/16).
pub fn hierarchical_fusion_forward(
    left: &Pyramid,
    right: &Pyramid,
    params: &FusionParams,
    config: &FusionConfig,
    trace: &mut ForwardTrace,
) -> Result<Tensor> {
    left.check(right)?;
    let corr4 = correlation_volume(&left.s4, &right.s4, config.max_disp4)?.data;
    trace.record("fusion.corr4", &corr4);
    let g4 = ghost_dense_forward(&corr4, &params.ghost4, trace, "fusion")?;
    trace.record("fusion.ghost4", &g4);
    let d4 = downsample(&g4, params.down4.as_ref(), trace)?;
    trace.record("fusion.down4", &d4);

    let corr8 = correlation_volume(&left.s8, &right.s8, config.max_disp8)?.data;
    trace.record("fusion.corr8", &corr8);
    let cat8 = concat_channels(&[&d4, &corr8])?;
    trace.record("fusion.cat8", &cat8);
    let g8 = ghost_dense_forward(&cat8, &params.ghost8, trace, "fusion")?;
    trace.record("fusion.ghost8", &g8);
    let d8 = downsample(&g8, params.down8.as_ref(), trace)?;
    trace.record("fusion.down8", &d8);

    let rl = params.reduce16.forward(&left.s16, trace, "fusion")?;
    let rr = params.reduce16.forward(&right.s16, trace, "fusion")?;
    trace.record("fusion.reduce16", &rl);
    let vol = concatenation_volume(&rl, &rr, config.small_volume_disp)?.data;
    trace.record("fusion.concat_volume16", &vol);
    let s = vol.shape().to_vec();
    let flat = vol.reshape(vec![s[0], s[1] * s[2], s[3], s[4]])?;
    trace.record("fusion.flat16", &flat);
    let fused = concat_channels(&[&d8, &flat])?;
    trace.record("fusion.out", &fused);
    Ok(fused)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub median_ms: f64,
    pub min_ms: f64,
}

fn timing(mut samples: Vec<f64>) -> TimingStats {
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    let median = if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    };
    TimingStats {
        median_ms: median,
        min_ms: samples[0],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub shape: [usize; 4],
    pub max_disp: usize,
    pub repetitions: usize,
    pub threads: usize,
    pub correlation: TimingStats,
    pub concatenation: TimingStats,
    /// concatenation median / correlation median
    pub ratio: f64,
}

impl BenchReport {
    pub fn to_text(&self) -> String {
        let [b, c, h, w] = self.shape;
        format!(
            "shape {b}x{c}x{h}x{w} max_disp {} reps {} threads {}\n\
             correlation    median {:.3} ms  min {:.3} ms\n\
             concatenation  median {:.3} ms  min {:.3} ms\n\
             ratio {:.2}\n",
            self.max_disp,
            self.repetitions,
            self.threads,
            self.correlation.median_ms,
            self.correlation.min_ms,
            self.concatenation.median_ms,
            self.concatenation.min_ms,
            self.ratio
        )
    }
}

/// Time both cost-volume constructions on the same random inputs.
/// Runs in a dedicated pool of `threads` workers (1 by default).
pub fn bench_cost_volumes(shape: [usize; 4], max_disp: usize, repetitions: usize, threads: Option<usize>) -> Result<BenchReport> {
    if repetitions < 3 {
        return Err(Error::invalid(format!("need at least 3 repetitions, got {repetitions}")));
    }
    let threads = threads.unwrap_or(1).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let left = Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0));
    let right = Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    pool.install(|| {
        let mut corr = Vec::with_capacity(repetitions);
        let mut cat = Vec::with_capacity(repetitions);
        for _ in 0..repetitions {
            let t = Instant::now();
            let v = correlation_volume(&left, &right, max_disp)?;
            corr.push(t.elapsed().as_secs_f64() * 1e3);
            drop(v);
            let t = Instant::now();
            let v = concatenation_volume(&left, &right, max_disp)?;
            cat.push(t.elapsed().as_secs_f64() * 1e3);
            drop(v);
        }
        let correlation = timing(corr);
        let concatenation = timing(cat);
        Ok(BenchReport {
            shape,
            max_disp,
            repetitions,
            threads,
            correlation,
            concatenation,
            ratio: concatenation.median_ms / correlation.median_ms.max(1e-9),
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn cosine_oracle(l: &Tensor, r: &Tensor, max_disp: usize) -> Vec<f64> {
        let (b, c, h, w) = l.dims4().unwrap();
        let mut out = Vec::new();
        for bi in 0..b {
            for d in 0..max_disp {
                for y in 0..h {
                    for x in 0..w {
                        if x < d {
                            out.push(0.0);
                            continue;
                        }
                        let (mut dot, mut nl, mut nr) = (0.0f64, 0.0f64, 0.0f64);
                        for ci in 0..c {
                            let a = l.at4(bi, ci, y, x) as f64;
                            let bb = r.at4(bi, ci, y, x - d) as f64;
                            dot += a * bb;
                            nl += a * a;
                            nr += bb * bb;
                        }
                        out.push(if nl > 0.0 && nr > 0.0 { dot / (nl.sqrt() * nr.sqrt()) } else { 0.0 });
                    }
                }
            }
        }
        out
    }

    #[test]
    fn correlation_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = random(&[1, 8, 6, 10], &mut rng);
        let v = correlation_volume(&l, &l, 4).unwrap();
        assert_eq!(v.data.shape(), &[1, 4, 6, 10]);
        for y in 0..6 {
            for x in 0..10 {
                assert!((v.data.at4(0, 0, y, x) - 1.0).abs() < 1e-6);
                for d in (x + 1)..4 {
                    assert_eq!(v.data.at4(0, d, y, x), 0.0);
                }
            }
        }
        let r = random(&[1, 8, 6, 10], &mut rng);
        let v = correlation_volume(&l, &r, 4).unwrap();
        for (g, w) in v.data.data().iter().zip(cosine_oracle(&l, &r, 4)) {
            assert!((*g as f64 - w).abs() < 1e-5);
        }
        assert!(correlation_volume(&l, &random(&[1, 8, 6, 9], &mut rng), 4).is_err());
    }

    #[test]
    fn correlation_zero_norm_is_zero() {
        let l = Tensor::zeros(&[1, 3, 2, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = random(&[1, 3, 2, 4], &mut rng);
        let v = correlation_volume(&l, &r, 2).unwrap();
        assert!(v.data.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn correlation_beyond_width_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = random(&[1, 2, 3, 4], &mut rng);
        let v = correlation_volume(&l, &l, 6).unwrap();
        assert_eq!(v.data.shape(), &[1, 6, 3, 4]);
        assert!(v.data.slice_channels(4, 6).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn correlation_is_not_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let l = random(&[1, 4, 3, 8], &mut rng);
        let r = random(&[1, 4, 3, 8], &mut rng);
        let a = correlation_volume(&l, &r, 3).unwrap().data;
        let b = correlation_volume(&r, &l, 3).unwrap().data;
        assert_ne!(a, b);
    }

    fn concat_oracle(l: &Tensor, r: &Tensor, max_disp: usize) -> Vec<f32> {
        let (b, c, h, w) = l.dims4().unwrap();
        let mut out = Vec::new();
        for bi in 0..b {
            for ch in 0..2 * c {
                for d in 0..max_disp {
                    for y in 0..h {
                        for x in 0..w {
                            out.push(if ch < c {
                                l.at4(bi, ch, y, x)
                            } else if x >= d {
                                r.at4(bi, ch - c, y, x - d)
                            } else {
                                0.0
                            });
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn concatenation_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let l = random(&[2, 3, 4, 5], &mut rng);
        let r = random(&[2, 3, 4, 5], &mut rng);
        let v = concatenation_volume(&l, &r, 3).unwrap();
        assert_eq!(v.data.shape(), &[2, 6, 3, 4, 5]);
        assert_eq!(v.data.data(), concat_oracle(&l, &r, 3).as_slice());
        // d = 0 slab is the channel concatenation
        let cat = concat_channels(&[&l, &r]).unwrap();
        for bi in 0..2 {
            for ch in 0..6 {
                for y in 0..4 {
                    for x in 0..5 {
                        let idx = (((bi * 6 + ch) * 3) * 4 + y) * 5 + x;
                        assert_eq!(v.data.data()[idx], cat.at4(bi, ch, y, x));
                    }
                }
            }
        }
    }

    fn ghost_weights(c: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        vec![
            random(&[c, c, 1, 1], rng),
            random(&[c], rng),
            random(&[c], rng),
            random(&[c], rng),
            random(&[c, 1, 3, 3], rng),
            random(&[c], rng),
            random(&[c], rng),
            random(&[c], rng),
        ]
    }

    fn ghost_params(w: &[Tensor]) -> GhostParams<'_> {
        let c = w[0].shape()[0];
        GhostParams {
            primary: ConvBn {
                weight: &w[0], bias: w[1].data(), affine: Some((w[2].data(), w[3].data())),
                stride: 1, padding: 0, groups: 1, relu: true,
            },
            cheap: ConvBn {
                weight: &w[4], bias: w[5].data(), affine: Some((w[6].data(), w[7].data())),
                stride: 1, padding: 1, groups: c, relu: true,
            },
        }
    }

    #[test]
    fn ghost_triples_channels_and_matches_composition() {
        use crate::tensor::{affine_norm, conv2d, relu};
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = ghost_weights(5, &mut rng);
        let x = random(&[1, 5, 6, 7], &mut rng);
        let mut trace = ForwardTrace::default();
        let y = ghost_dense_forward(&x, &ghost_params(&w), &mut trace, "t").unwrap();
        assert_eq!(y.shape(), &[1, 15, 6, 7]);
        assert_eq!(y.slice_channels(0, 5).unwrap(), x);
        let p = relu(&affine_norm(&conv2d(&x, &w[0], w[1].data(), 1, 0, 1).unwrap(), w[2].data(), w[3].data()).unwrap());
        let g = relu(&affine_norm(&conv2d(&p, &w[4], w[5].data(), 1, 1, 5).unwrap(), w[6].data(), w[7].data()).unwrap());
        assert_eq!(y.slice_channels(5, 10).unwrap(), p);
        assert_eq!(y.slice_channels(10, 15).unwrap(), g);
        assert_eq!(trace.convs("t"), 2);

        let wrong = ghost_weights(4, &mut rng);
        assert!(ghost_dense_forward(&x, &ghost_params(&wrong), &mut trace, "t").is_err());
    }

    #[test]
    fn bench_rejects_few_reps_and_runs_tiny() {
        assert!(bench_cost_volumes([1, 2, 4, 4], 2, 1, None).is_err());
        let r = bench_cost_volumes([1, 2, 4, 4], 2, 3, None).unwrap();
        let json = serde_json::to_string(&r).unwrap();
        let back: BenchReport = serde_json::from_str(&json).unwrap();
        assert_eq!((back.shape, back.repetitions), (r.shape, r.repetitions));
        assert!((back.ratio - r.ratio).abs() < 1e-12 * r.ratio);
        assert!(r.to_text().contains("ratio"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn correlation_matches_oracle(seed in any::<u64>(), b in 1usize..3, c in 1usize..17, h in 1usize..17, w in 1usize..17, dfrac in 0.0..1.0f64) {
            let max_disp = 1 + ((w - 1) as f64 * dfrac) as usize;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let l = random(&[b, c, h, w], &mut rng);
            let r = random(&[b, c, h, w], &mut rng);
            let v = correlation_volume(&l, &r, max_disp).unwrap();
            for (g, want) in v.data.data().iter().zip(cosine_oracle(&l, &r, max_disp)) {
                prop_assert!((*g as f64 - want).abs() <= 1e-5 * want.abs().max(1.0));
                prop_assert!(g.abs() <= 1.0 + 1e-6);
            }
        }
    }
}
