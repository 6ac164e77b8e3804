//! Dense row-major `f32` tensors and the handful of kernels the forward
//! passes need.
//!
//! Layout for 4-D tensors is always `[batch, channel, height, width]`.
//! Kernels parallelize over whole output planes only, so every output element
//! is accumulated by a single thread in a fixed order and results are
//! bit-identical regardless of the rayon pool size.

use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// `(batch, channels, height, width)` of a 4-D tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[b, c, h, w] => Ok((b, c, h, w)),
            s => Err(Error::shape(format!("expected a 4-D tensor, got shape {s:?}"))),
        }
    }

    pub fn at4(&self, b: usize, c: usize, y: usize, x: usize) -> f32 {
        let (_, cs, hs, ws) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        self.data[((b * cs + c) * hs + y) * ws + x]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Channels `[start, end)` of a 4-D tensor.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Tensor> {
        let (b, c, h, w) = self.dims4()?;
        if start >= end || end > c {
            return Err(Error::shape(format!(
                "channel range {start}..{end} out of bounds for {c} channels"
            )));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(b * (end - start) * plane);
        for bi in 0..b {
            let base = bi * c * plane;
            data.extend_from_slice(&self.data[base + start * plane..base + end * plane]);
        }
        Tensor::new(vec![b, end - start, h, w], data)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// 2-D cross-correlation with zero padding.
///
/// Each output element accumulates `weight * input` over `(cin, ky, kx)` in
/// ascending order and adds the bias last.
pub fn conv2d(
    input: &Tensor,
    weights: &Tensor,
    bias: &[f32],
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor> {
    let (b, cin, h, w) = input.dims4()?;
    let (cout, cin_g, kh, kw) = weights
        .dims4()
        .map_err(|_| Error::shape(format!("weights must be 4-D, got {:?}", weights.shape())))?;
    if stride == 0 {
        return Err(Error::invalid("stride must be >= 1"));
    }
    if groups == 0 || cin % groups != 0 {
        return Err(Error::shape(format!(
            "input channels {cin} not divisible by groups {groups}"
        )));
    }
    if cout % groups != 0 {
        return Err(Error::shape(format!(
            "output channels {cout} not divisible by groups {groups}"
        )));
    }
    if cin_g != cin / groups {
        return Err(Error::shape(format!(
            "weight input-channel dim is {cin_g}, expected {} (cin {cin} / groups {groups})",
            cin / groups
        )));
    }
    if bias.len() != cout {
        return Err(Error::shape(format!(
            "bias length {} does not match output channels {cout}",
            bias.len()
        )));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::shape(format!(
            "kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * padding,
            w + 2 * padding
        )));
    }
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (w + 2 * padding - kw) / stride + 1;
    let cout_g = cout / groups;
    let in_plane = h * w;
    let out_plane = ho * wo;
    let wdata = weights.data();
    let idata = input.data();

    let mut out = vec![0.0f32; b * cout * out_plane];
    out.par_chunks_mut(out_plane)
        .enumerate()
        .for_each(|(plane_idx, acc)| {
            let bi = plane_idx / cout;
            let co = plane_idx % cout;
            let g = co / cout_g;
            for ci in 0..cin_g {
                let ic = g * cin_g + ci;
                let in_base = (bi * cin + ic) * in_plane;
                let w_base = (co * cin_g + ci) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wdata[w_base + ky * kw + kx];
                        // ox range with 0 <= ox*stride + kx - padding < w
                        let ox_lo = if kx >= padding {
                            0
                        } else {
                            (padding - kx).div_ceil(stride)
                        };
                        if w + padding <= kx {
                            continue;
                        }
                        let lim = w + padding - kx; // ox*stride < lim
                        let ox_hi = lim.div_ceil(stride).min(wo);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in 0..ho {
                            let iy = oy * stride + ky;
                            if iy < padding || iy - padding >= h {
                                continue;
                            }
                            let row = &idata[in_base + (iy - padding) * w..in_base + (iy - padding + 1) * w];
                            let out_row = &mut acc[oy * wo..(oy + 1) * wo];
                            let ix0 = ox_lo * stride + kx - padding;
                            if stride == 1 {
                                let n = ox_hi - ox_lo;
                                for (o, &i) in out_row[ox_lo..ox_hi].iter_mut().zip(&row[ix0..ix0 + n]) {
                                    *o += wv * i;
                                }
                            } else {
                                for (k, o) in out_row[ox_lo..ox_hi].iter_mut().enumerate() {
                                    *o += wv * row[ix0 + k * stride];
                                }
                            }
                        }
                    }
                }
            }
            let bv = bias[co];
            if bv != 0.0 {
                for o in acc.iter_mut() {
                    *o += bv;
                }
            }
        });
    Tensor::new(vec![b, cout, ho, wo], out)
}

/// Per-channel `x * scale[c] + shift[c]` (inference-mode batch norm).
pub fn affine_norm(input: &Tensor, scale: &[f32], shift: &[f32]) -> Result<Tensor> {
    let (_, c, h, w) = input.dims4()?;
    if scale.len() != c || shift.len() != c {
        return Err(Error::shape(format!(
            "affine params have lengths {}/{}, expected {c}",
            scale.len(),
            shift.len()
        )));
    }
    let plane = h * w;
    let mut out = input.data.clone();
    out.par_chunks_mut(plane).enumerate().for_each(|(i, p)| {
        let ch = i % c;
        let (s, t) = (scale[ch], shift[ch]);
        for v in p.iter_mut() {
            *v = *v * s + t;
        }
    });
    Tensor::new(input.shape.clone(), out)
}

// `f32::max` would turn NaN into 0 and hide it from later finiteness checks.
fn relu1(v: f32) -> f32 {
    if v < 0.0 {
        0.0
    } else {
        v
    }
}

pub fn relu(input: &Tensor) -> Tensor {
    Tensor {
        shape: input.shape.clone(),
        data: input.data.iter().map(|&v| relu1(v)).collect(),
    }
}

pub fn relu_inplace(t: &mut Tensor) {
    for v in t.data.iter_mut() {
        *v = relu1(*v);
    }
}

/// Source coordinate and blend weight for align-corners=false resampling.
fn source_index(i: usize, in_len: usize, out_len: usize) -> (usize, usize, f32) {
    let scale = in_len as f32 / out_len as f32;
    let src = ((i as f32 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    let frac = if i0 == i1 { 0.0 } else { src - i0 as f32 };
    (i0, i1, frac)
}

fn lerp(a: f32, b: f32, t: f32) -> f32 {
    let v = a + t * (b - a);
    v.clamp(a.min(b), a.max(b))
}

/// Bilinear resampling, align-corners = false, edge-clamped.
pub fn resample_bilinear(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, c, h, w) = input.dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("output size must be >= 1"));
    }
    let ys: Vec<_> = (0..out_h).map(|i| source_index(i, h, out_h)).collect();
    let xs: Vec<_> = (0..out_w).map(|i| source_index(i, w, out_w)).collect();
    let mut out = vec![0.0f32; b * c * out_h * out_w];
    out.par_chunks_mut(out_h * out_w)
        .enumerate()
        .for_each(|(p, dst)| {
            let src = &input.data[p * h * w..(p + 1) * h * w];
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                let r0 = &src[y0 * w..(y0 + 1) * w];
                let r1 = &src[y1 * w..(y1 + 1) * w];
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let top = lerp(r0[x0], r0[x1], fx);
                    let bot = lerp(r1[x0], r1[x1], fx);
                    dst[oy * out_w + ox] = lerp(top, bot, fy);
                }
            }
        });
    Tensor::new(vec![b, c, out_h, out_w], out)
}

/// Concatenate 4-D tensors along the channel axis, in argument order.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat_channels needs at least one part"))?;
    let (b, _, h, w) = first.dims4()?;
    let mut total_c = 0;
    for (i, p) in parts.iter().enumerate() {
        let (pb, pc, ph, pw) = p.dims4()?;
        if (pb, ph, pw) != (b, h, w) {
            return Err(Error::shape(format!(
                "part {i} has batch/height/width ({pb}, {ph}, {pw}), expected ({b}, {h}, {w})"
            )));
        }
        total_c += pc;
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(b * total_c * plane);
    for bi in 0..b {
        for p in parts {
            let pc = p.shape[1];
            data.extend_from_slice(&p.data[bi * pc * plane..(bi + 1) * pc * plane]);
        }
    }
    Tensor::new(vec![b, total_c, h, w], data)
}

/// Numerically stable softmax along `axis`.
pub fn softmax_axis(input: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= input.shape.len() {
        return Err(Error::invalid(format!(
            "axis {axis} out of range for rank {}",
            input.shape.len()
        )));
    }
    let n = input.shape[axis];
    let inner: usize = input.shape[axis + 1..].iter().product();
    let outer: usize = input.shape[..axis].iter().product();
    let mut out = input.data.clone();
    for o in 0..outer {
        let base = o * n * inner;
        for i in 0..inner {
            let idx = |k: usize| base + k * inner + i;
            let m = (0..n).map(|k| input.data[idx(k)]).fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for k in 0..n {
                let e = (input.data[idx(k)] - m).exp();
                out[idx(k)] = e;
                sum += e;
            }
            for k in 0..n {
                out[idx(k)] /= sum;
            }
        }
    }
    Tensor::new(input.shape.clone(), out)
}

/// 2x2 average pooling with stride 2 (odd trailing rows/cols dropped).
pub fn avg_pool2(input: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = input.dims4()?;
    let (ho, wo) = (h / 2, w / 2);
    if ho == 0 || wo == 0 {
        return Err(Error::shape(format!("cannot pool a {h}x{w} map")));
    }
    let mut out = vec![0.0f32; b * c * ho * wo];
    out.par_chunks_mut(ho * wo).enumerate().for_each(|(p, dst)| {
        let src = &input.data[p * h * w..(p + 1) * h * w];
        for y in 0..ho {
            for x in 0..wo {
                let s = src[2 * y * w + 2 * x]
                    + src[2 * y * w + 2 * x + 1]
                    + src[(2 * y + 1) * w + 2 * x]
                    + src[(2 * y + 1) * w + 2 * x + 1];
                dst[y * wo + x] = s * 0.25;
            }
        }
    });
    Tensor::new(vec![b, c, ho, wo], out)
}
