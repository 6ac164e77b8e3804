//! Training losses with analytic gradients: stereo focal loss on the
//! disparity distribution, sigmoid focal loss for classification and
//! smooth-L1 for box regression. All arithmetic is f64.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-pixel soft disparity targets, stored `[H, W, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityTarget {
    pub height: usize,
    pub width: usize,
    pub max_disp: usize,
    pub sigma: f64,
    pub probs: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DisparityTarget {
    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn distribution(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.max_disp;
        &self.probs[i..i + self.max_disp]
    }
}

/// `P(d) = softmax_d(-|d - d_gt| / sigma)` for every pixel with a valid
/// (finite, non-negative) ground-truth disparity. Invalid pixels keep zeros.
pub fn disparity_target(d_gt: &[f32], height: usize, width: usize, max_disp: usize, sigma: f64) -> Result<DisparityTarget> {
    if max_disp == 0 {
        return Err(Error::invalid("max_disp must be >= 1"));
    }
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    if d_gt.len() != height * width {
        return Err(Error::shape(format!(
            "disparity has {} values, expected {height}x{width}",
            d_gt.len()
        )));
    }
    let mut probs = vec![0.0; height * width * max_disp];
    let mut valid = vec![false; height * width];
    for (i, &g) in d_gt.iter().enumerate() {
        if !g.is_finite() || g < 0.0 {
            continue;
        }
        valid[i] = true;
        let g = g as f64;
        let row = &mut probs[i * max_disp..(i + 1) * max_disp];
        // shift by the smallest distance so the largest term is exp(0)
        let nearest = (0..max_disp).map(|d| (d as f64 - g).abs()).fold(f64::INFINITY, f64::min);
        let mut sum = 0.0;
        for (d, p) in row.iter_mut().enumerate() {
            *p = (-((d as f64 - g).abs() - nearest) / sigma).exp();
            sum += *p;
        }
        for p in row.iter_mut() {
            *p /= sum;
        }
    }
    Ok(DisparityTarget {
        height,
        width,
        max_disp,
        sigma,
        probs,
        valid,
    })
}

/// Sign of the focus exponent in `(1 - P)^(±alpha)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum FocusSign {
    /// `(1 - P)^(-alpha)`
    #[default]
    Negative,
    /// `(1 - P)^(+alpha)`
    Positive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

fn focus_weight(p: f64, alpha: f64, sign: FocusSign) -> f64 {
    if alpha == 0.0 {
        return 1.0;
    }
    let base = (1.0 - p).max(f64::EPSILON);
    match sign {
        FocusSign::Negative => base.powf(-alpha),
        FocusSign::Positive => base.powf(alpha),
    }
}

fn log_softmax(z: &[f64], out: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(z) {
        *o = v - lse;
    }
}

/// Mean over valid pixels of `sum_d w_d * (-P(d) log softmax(z)(d))` with
/// `w_d = (1 - P(d))^(±alpha)`. The weights depend only on the target and
/// are constants for the gradient, which is taken w.r.t. the logits.
pub fn stereo_focal_loss(logits: &[f64], target: &DisparityTarget, alpha: f64, sign: FocusSign) -> Result<LossGrad> {
    let d = target.max_disp;
    if logits.len() != target.probs.len() {
        return Err(Error::shape(format!(
            "logits have {} values, target has {}",
            logits.len(),
            target.probs.len()
        )));
    }
    let n_valid = target.num_valid();
    if n_valid == 0 {
        return Err(Error::invalid("stereo focal loss over an empty valid mask"));
    }
    let mut grad = vec![0.0; logits.len()];
    if d == 1 {
        return Ok(LossGrad { loss: 0.0, grad });
    }
    let norm = 1.0 / n_valid as f64;
    let mut loss = 0.0;
    let mut logp = vec![0.0; d];
    let mut w = vec![0.0; d];
    for (pix, &ok) in target.valid.iter().enumerate() {
        if !ok {
            continue;
        }
        let z = &logits[pix * d..(pix + 1) * d];
        let p = &target.probs[pix * d..(pix + 1) * d];
        log_softmax(z, &mut logp);
        let mut wp_sum = 0.0;
        for k in 0..d {
            w[k] = focus_weight(p[k], alpha, sign);
            if p[k] > 0.0 {
                loss -= w[k] * p[k] * logp[k];
            }
            wp_sum += w[k] * p[k];
        }
        let g = &mut grad[pix * d..(pix + 1) * d];
        for k in 0..d {
            g[k] = (logp[k].exp() * wp_sum - w[k] * p[k]) * norm;
        }
    }
    Ok(LossGrad { loss: loss * norm, grad })
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { gamma: 2.0, alpha: 0.25 }
    }
}

/// Sigmoid focal loss for one logit; returns `(loss, dloss/dlogit)`.
pub fn focal_loss(logit: f64, positive: bool, params: FocalParams) -> (f64, f64) {
    let FocalParams { gamma, alpha } = params;
    let p = sigmoid(logit);
    let log_p = -softplus(-logit);
    let log_q = -softplus(logit);
    if positive {
        let q = 1.0 - p;
        let m = q.powf(gamma);
        (-alpha * m * log_p, alpha * m * (gamma * p * log_p - q))
    } else {
        let m = p.powf(gamma);
        (-(1.0 - alpha) * m * log_q, (1.0 - alpha) * m * (p - gamma * (1.0 - p) * log_q))
    }
}

/// Mean smooth-L1 over elements. `grad[i]` is the derivative of element
/// `i`'s own loss, so it lies in `[-1, 1]`; divide by the length for the
/// gradient of the mean.
pub fn smooth_l1(pred: &[f64], target: &[f64], beta: f64) -> Result<LossGrad> {
    if pred.len() != target.len() {
        return Err(Error::shape(format!(
            "smooth-L1 on {} predictions vs {} targets",
            pred.len(),
            target.len()
        )));
    }
    if !(beta > 0.0) {
        return Err(Error::invalid(format!("beta must be positive, got {beta}")));
    }
    if pred.is_empty() {
        return Ok(LossGrad { loss: 0.0, grad: Vec::new() });
    }
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let x = p - t;
            if x.abs() < beta {
                loss += 0.5 * x * x / beta;
                x / beta
            } else {
                loss += x.abs() - 0.5 * beta;
                x.signum()
            }
        })
        .collect();
    Ok(LossGrad {
        loss: loss / pred.len() as f64,
        grad,
    })
}

/// Default smooth-L1 transition point.
pub const SMOOTH_L1_BETA: f64 = 1.0 / 9.0;

/// Unweighted sum of the classification, regression and disparity losses.
pub fn total_loss(cls: f64, reg: f64, disparity: f64) -> Result<f64> {
    for (name, v) in [("classification", cls), ("regression", reg), ("disparity", disparity)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} loss ({v})")));
        }
    }
    Ok(cls + reg + disparity)
}
