//! Sparse block-matching disparity used as auxiliary supervision.

use std::path::Path;

use image::{ImageBuffer, Luma, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const INVALID_DISPARITY: f32 = -1.0;

/// ITU-R 601 luma, rounded half-up, computed in integers so it is exact.
pub fn luminance(img: &RgbImage) -> Vec<u8> {
    img.pixels()
        .map(|p| {
            let [r, g, b] = p.0;
            ((299 * r as u32 + 587 * g as u32 + 114 * b as u32 + 500) / 1000) as u8
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockMatchParams {
    pub window: usize,
    pub search_range: usize,
    pub uniqueness_ratio: f64,
    pub lr_tolerance: usize,
}

impl Default for BlockMatchParams {
    fn default() -> Self {
        Self {
            window: 9,
            search_range: 96,
            uniqueness_ratio: 0.95,
            lr_tolerance: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseDisparityMap {
    pub width: usize,
    pub height: usize,
    /// row-major, `INVALID_DISPARITY` where no match was accepted
    pub values: Vec<f32>,
    pub window: usize,
    pub search_range: usize,
}

impl SparseDisparityMap {
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|&&v| v >= 0.0).count()
    }
}

/// SAD costs for one row: `cost[d * w + x]`, `u32::MAX` where the window
/// at `x - d` would leave the right image.
fn row_costs(left: &[u8], right: &[u8], w: usize, y: usize, r: usize, max_d: usize) -> Vec<u32> {
    let mut cost = vec![u32::MAX; (max_d + 1) * w];
    let mut col = vec![0u32; w];
    for d in 0..=max_d {
        if d + 2 * r >= w {
            break;
        }
        // column sums of |L(x) - R(x - d)| over the window rows
        col.iter_mut().for_each(|c| *c = 0);
        for yy in y - r..=y + r {
            let lrow = &left[yy * w..(yy + 1) * w];
            let rrow = &right[yy * w..(yy + 1) * w];
            for x in d..w {
                col[x] += (lrow[x] as i32 - rrow[x - d] as i32).unsigned_abs();
            }
        }
        let out = &mut cost[d * w..(d + 1) * w];
        let first = d + r;
        let mut acc: u32 = col[first - r..=first + r].iter().sum();
        out[first] = acc;
        for x in first + 1..w - r {
            acc = acc + col[x + r] - col[x - r - 1];
            out[x] = acc;
        }
    }
    cost
}

fn best_two(costs: impl Iterator<Item = (usize, u32)> + Clone) -> Option<(usize, u32, u32)> {
    let (best_d, best) = costs.clone().filter(|&(_, c)| c != u32::MAX).min_by_key(|&(d, c)| (c, d))?;
    let second = costs
        .filter(|&(d, c)| c != u32::MAX && d.abs_diff(best_d) > 1)
        .map(|(_, c)| c)
        .min()
        .unwrap_or(u32::MAX);
    Some((best_d, best, second))
}

/// Integer-disparity SAD block matching with uniqueness and left-right
/// checks. Pixels are matched only where the window and the full search
/// range fit inside the image; everything else is invalid.
pub fn block_match(left: &[u8], right: &[u8], width: usize, height: usize, params: &BlockMatchParams) -> Result<SparseDisparityMap> {
    let BlockMatchParams {
        window,
        search_range,
        uniqueness_ratio,
        lr_tolerance,
    } = *params;
    if left.len() != width * height || right.len() != width * height {
        return Err(Error::shape(format!(
            "block matching needs two {width}x{height} images, got {} and {} pixels",
            left.len(),
            right.len()
        )));
    }
    if window < 3 || window % 2 == 0 {
        return Err(Error::invalid(format!("window must be odd and >= 3, got {window}")));
    }
    if search_range < 1 || search_range >= width {
        return Err(Error::invalid(format!(
            "search range must be in [1, {width}), got {search_range}"
        )));
    }
    let r = window / 2;
    let mut values = vec![INVALID_DISPARITY; width * height];
    if height > 2 * r && width > 2 * r + search_range {
        values
            .par_chunks_mut(width)
            .enumerate()
            .filter(|(y, _)| *y >= r && *y + r < height)
            .for_each(|(y, out)| {
                let cost = row_costs(left, right, width, y, r, search_range);
                let at = |d: usize, x: usize| cost[d * width + x];
                for x in r + search_range..width - r {
                    let Some((d, best, second)) = best_two((0..=search_range).map(|d| (d, at(d, x)))) else {
                        continue;
                    };
                    if second != u32::MAX && best as f64 >= second as f64 * uniqueness_ratio {
                        continue;
                    }
                    // re-match from the right image: C_R(xr, d') = C_L(xr + d', d')
                    let xr = x - d;
                    let back = (0..=search_range)
                        .filter(|&dd| xr + dd < width - r)
                        .map(|dd| (dd, at(dd, xr + dd)))
                        .filter(|&(_, c)| c != u32::MAX)
                        .min_by_key(|&(dd, c)| (c, dd));
                    match back {
                        Some((dd, _)) if dd.abs_diff(d) <= lr_tolerance => out[x] = d as f32,
                        _ => {}
                    }
                }
            });
    }
    Ok(SparseDisparityMap {
        width,
        height,
        values,
        window,
        search_range,
    })
}

/// Shrink a disparity map by `factor`: each block keeps the valid value
/// nearest its median, divided by the factor. Output dims round up.
pub fn downscale_disparity(map: &SparseDisparityMap, factor: usize) -> Result<SparseDisparityMap> {
    if ![2, 4, 8, 16].contains(&factor) {
        return Err(Error::invalid(format!("downscale factor must be 2, 4, 8 or 16, got {factor}")));
    }
    let ow = map.width.div_ceil(factor);
    let oh = map.height.div_ceil(factor);
    let mut values = vec![INVALID_DISPARITY; ow * oh];
    let mut block = Vec::with_capacity(factor * factor);
    for by in 0..oh {
        for bx in 0..ow {
            block.clear();
            for y in by * factor..((by + 1) * factor).min(map.height) {
                for x in bx * factor..((bx + 1) * factor).min(map.width) {
                    let v = map.get(x, y);
                    if v >= 0.0 {
                        block.push(v);
                    }
                }
            }
            if block.is_empty() {
                continue;
            }
            block.sort_by(f32::total_cmp);
            let n = block.len();
            let median = if n % 2 == 1 {
                block[n / 2] as f64
            } else {
                0.5 * (block[n / 2 - 1] as f64 + block[n / 2] as f64)
            };
            // sorted ascending, so ties pick the smaller value
            let pick = block
                .iter()
                .copied()
                .min_by(|a, b| (*a as f64 - median).abs().total_cmp(&(*b as f64 - median).abs()))
                .expect("non-empty");
            values[by * ow + bx] = pick / factor as f32;
        }
    }
    Ok(SparseDisparityMap {
        width: ow,
        height: oh,
        values,
        window: map.window,
        search_range: map.search_range / factor,
    })
}

/// 16-bit PNG, disparity * 256, invalid stored as 0.
pub fn save_disparity_png(map: &SparseDisparityMap, path: &Path) -> Result<()> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(map.width as u32, map.height as u32, |x, y| {
            let v = map.get(x as usize, y as usize);
            Luma([if v < 0.0 { 0 } else { (v * 256.0).round().min(65535.0) as u16 }])
        });
    buf.save(path)?;
    Ok(())
}

/// Inverse of [`save_disparity_png`]. Zero reads back as invalid.
pub fn load_disparity_png(path: &Path) -> Result<SparseDisparityMap> {
    let img = image::open(path)?.into_luma16();
    let (w, h) = img.dimensions();
    let values = img
        .pixels()
        .map(|p| if p.0[0] == 0 { INVALID_DISPARITY } else { p.0[0] as f32 / 256.0 })
        .collect::<Vec<_>>();
    let search_range = values.iter().fold(0.0f32, |m, &v| m.max(v)).ceil() as usize;
    Ok(SparseDisparityMap {
        width: w as usize,
        height: h as usize,
        values,
        window: 0,
        search_range,
    })
}
