//! Category fusion, weighted combination, resampling and thresholding.

use serde::{Deserialize, Serialize};

use super::{shape_err, BinaryMask, ForegroundMap, ProbabilityMap, SegmentError};
use crate::encoder::ClassDistribution;
use crate::nn::sigmoid;

/// Foreground probability of each cell as the dot product of the cell's
/// class distribution with the expression's class distribution.
pub fn fuse(
    pmap: &ProbabilityMap,
    ptext: &ClassDistribution,
) -> Result<ForegroundMap, SegmentError> {
    if pmap.classes != ptext.len() {
        return Err(SegmentError::ClassCountMismatch {
            map: pmap.classes,
            text: ptext.len(),
        });
    }
    let t = ptext.probs();
    let data = (0..pmap.cells())
        .map(|i| {
            let v: f64 = pmap.cell(i).iter().zip(t).map(|(a, b)| a * b).sum();
            v.clamp(0.0, 1.0)
        })
        .collect();
    Ok(ForegroundMap {
        height: pmap.height,
        width: pmap.width,
        data,
    })
}

/// Raw values at or beyond this magnitude saturate the weight: the
/// combination then returns the dominant map unchanged.
pub const RAW_CLAMP: f64 = 30.0;

/// Mixing weight `α = sigmoid(raw)`, always strictly inside `(0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionWeight {
    pub raw: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Saturation {
    /// Only the expression-conditioned map contributes.
    First,
    /// Only the category-fusion map contributes.
    Second,
}

impl Default for FusionWeight {
    fn default() -> Self {
        Self { raw: 0.0 }
    }
}

impl FusionWeight {
    pub fn new(raw: f64) -> Self {
        Self { raw }
    }

    pub fn first_only() -> Self {
        Self { raw: RAW_CLAMP }
    }

    pub fn second_only() -> Self {
        Self { raw: -RAW_CLAMP }
    }

    pub fn alpha(&self) -> f64 {
        sigmoid(self.raw.clamp(-RAW_CLAMP, RAW_CLAMP))
    }

    pub fn saturation(&self) -> Option<Saturation> {
        if self.raw >= RAW_CLAMP {
            Some(Saturation::First)
        } else if self.raw <= -RAW_CLAMP {
            Some(Saturation::Second)
        } else {
            None
        }
    }

    /// `dα/draw`; zero once saturated.
    pub fn dalpha_draw(&self) -> f64 {
        if self.saturation().is_some() {
            0.0
        } else {
            let a = self.alpha();
            a * (1.0 - a)
        }
    }
}

/// Cellwise `α·p1 + (1−α)·p2`.
pub fn combine(
    p1: &ForegroundMap,
    p2: &ForegroundMap,
    weight: FusionWeight,
) -> Result<ForegroundMap, SegmentError> {
    if !p1.same_shape(p2) {
        return Err(shape_err(
            "combined maps",
            format!("{}x{}", p1.height, p1.width),
            format!("{}x{}", p2.height, p2.width),
        ));
    }
    let data = match weight.saturation() {
        Some(Saturation::First) => p1.data.clone(),
        Some(Saturation::Second) => p2.data.clone(),
        None => {
            let a = weight.alpha();
            p1.data
                .iter()
                .zip(&p2.data)
                .map(|(&x, &y)| combine_value(x, y, a))
                .collect()
        }
    };
    Ok(ForegroundMap {
        height: p1.height,
        width: p1.width,
        data,
    })
}

/// Written as `p2 + α (p1 − p2)` so equal inputs come back unchanged; the
/// clamp absorbs rounding at the interval ends.
#[inline]
pub(crate) fn combine_value(p1: f64, p2: f64, alpha: f64) -> f64 {
    (p2 + alpha * (p1 - p2)).clamp(p1.min(p2), p1.max(p2))
}

fn source_coordinate(dst: usize, dst_len: usize, src_len: usize) -> f64 {
    if dst_len <= 1 || src_len <= 1 {
        0.0
    } else {
        dst as f64 * (src_len - 1) as f64 / (dst_len - 1) as f64
    }
}

/// Bilinear resampling with corner-aligned sampling: the first and last
/// output pixels sit exactly on the first and last input cells.
pub fn upsample_bilinear(map: &ForegroundMap, height: usize, width: usize) -> ForegroundMap {
    let (h, w) = (map.height, map.width);
    let xs: Vec<(usize, usize, f64)> = (0..width)
        .map(|x| {
            let s = source_coordinate(x, width, w);
            let x0 = (s.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            (x0, x1, s - x0 as f64)
        })
        .collect();
    let mut data = Vec::with_capacity(height * width);
    for y in 0..height {
        let s = source_coordinate(y, height, h);
        let y0 = (s.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fy = s - y0 as f64;
        for &(x0, x1, fx) in &xs {
            let top = lerp(map.get(y0, x0), map.get(y0, x1), fx);
            let bottom = lerp(map.get(y1, x0), map.get(y1, x1), fx);
            data.push(lerp(top, bottom, fy).clamp(0.0, 1.0));
        }
    }
    ForegroundMap {
        height,
        width,
        data,
    }
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 || a == b {
        a
    } else {
        a + (b - a) * t
    }
}

/// Foreground where the value is at least `threshold`.
pub fn binarize(map: &ForegroundMap, threshold: f64) -> Result<BinaryMask, SegmentError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(SegmentError::BadThreshold(threshold));
    }
    Ok(BinaryMask {
        height: map.height,
        width: map.width,
        data: map.data.iter().map(|&v| u8::from(v >= threshold)).collect(),
    })
}

fn anchor_pixel(cell: usize, cells: usize, pixels: usize) -> usize {
    if cells <= 1 {
        (pixels - 1) / 2
    } else {
        let p = cell as f64 * (pixels - 1) as f64 / (cells - 1) as f64;
        (p.round() as usize).min(pixels - 1)
    }
}

/// Samples a full-resolution mask at the pixels the corner-aligned
/// upsampler anchors each grid cell to.
pub fn downsample_mask(mask: &BinaryMask, height: usize, width: usize) -> BinaryMask {
    let cols: Vec<usize> = (0..width)
        .map(|x| anchor_pixel(x, width, mask.width))
        .collect();
    let mut data = Vec::with_capacity(height * width);
    for y in 0..height {
        let py = anchor_pixel(y, height, mask.height);
        for &px in &cols {
            data.push(mask.data[py * mask.width + px]);
        }
    }
    BinaryMask {
        height,
        width,
        data,
    }
}

/// Per-cell class frequencies of a pixel label map over the same windows
/// as [`coverage_grid`]; `classes` entries per cell.
pub fn class_coverage_grid(
    labels: &[usize],
    src_height: usize,
    src_width: usize,
    height: usize,
    width: usize,
    radius: usize,
    classes: usize,
) -> Vec<f64> {
    let window = |anchor: usize, pixels: usize| {
        anchor.saturating_sub(radius)..(anchor + radius + 1).min(pixels)
    };
    let cols: Vec<_> = (0..width)
        .map(|x| window(anchor_pixel(x, width, src_width), src_width))
        .collect();
    let mut out = Vec::with_capacity(height * width * classes);
    for y in 0..height {
        let rows = window(anchor_pixel(y, height, src_height), src_height);
        for xs in &cols {
            let mut counts = vec![0u32; classes];
            for py in rows.clone() {
                for &l in &labels[py * src_width + xs.start..py * src_width + xs.end] {
                    counts[l] += 1;
                }
            }
            let n = (rows.len() * xs.len()) as f64;
            out.extend(counts.iter().map(|&c| f64::from(c) / n));
        }
    }
    out
}

/// Fraction of foreground pixels in the `(2r+1)^2` window around each
/// cell's anchor pixel, clipped at the image border.
pub fn coverage_grid(mask: &BinaryMask, height: usize, width: usize, radius: usize) -> Vec<f64> {
    let window = |anchor: usize, pixels: usize| {
        anchor.saturating_sub(radius)..(anchor + radius + 1).min(pixels)
    };
    let cols: Vec<_> = (0..width)
        .map(|x| window(anchor_pixel(x, width, mask.width), mask.width))
        .collect();
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        let rows = window(anchor_pixel(y, height, mask.height), mask.height);
        for xs in &cols {
            let mut on = 0u32;
            for py in rows.clone() {
                let row = &mask.data[py * mask.width..(py + 1) * mask.width];
                on += row[xs.clone()].iter().map(|&v| u32::from(v)).sum::<u32>();
            }
            out.push(f64::from(on) / (rows.len() * xs.len()) as f64);
        }
    }
    out
}
