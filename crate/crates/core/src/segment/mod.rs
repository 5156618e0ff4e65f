//! Image-side maps and the segmentation pipeline pieces: feature extraction,
//! the expression-conditioned head, the category head, and fusion.

pub mod backbone;
pub mod fusion;
pub mod heads;

use thiserror::Error;

pub use backbone::{extract_features, Backbone, ConvLayer};
pub use fusion::{binarize, combine, downsample_mask, fuse, upsample_bilinear, FusionWeight};
pub use heads::{baseline_head, category_head, BaselineHead, CategoryHead};

#[derive(Debug, Error, PartialEq)]
pub enum SegmentError {
    #[error("shape mismatch in {what}: expected {expected}, found {found}")]
    ShapeMismatch {
        what: &'static str,
        expected: String,
        found: String,
    },
    #[error("probability map has {map} classes but the text distribution has {text}")]
    ClassCountMismatch { map: usize, text: usize },
    #[error("threshold {0} must lie strictly inside (0, 1)")]
    BadThreshold(f64),
    #[error("invalid image: {0}")]
    InvalidImage(String),
}

pub(crate) fn shape_err(
    what: &'static str,
    expected: impl ToString,
    found: impl ToString,
) -> SegmentError {
    SegmentError::ShapeMismatch {
        what,
        expected: expected.to_string(),
        found: found.to_string(),
    }
}

pub const MIN_IMAGE_SIDE: usize = 8;

/// RGB image with channel values in `[0, 1]`, stored row-major with
/// interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self, SegmentError> {
        if height < MIN_IMAGE_SIDE || width < MIN_IMAGE_SIDE {
            return Err(SegmentError::InvalidImage(format!(
                "{height}x{width} is smaller than {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}"
            )));
        }
        if data.len() != height * width * 3 {
            return Err(shape_err("image data", height * width * 3, data.len()));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(SegmentError::InvalidImage(
                "channel values must lie in [0, 1]".into(),
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Planar copy: `[channel][y][x]`.
    pub fn to_planar(&self) -> Vec<f64> {
        let n = self.height * self.width;
        let mut out = vec![0.0; 3 * n];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * n + p] = px[c];
            }
        }
        out
    }
}

/// Grid of feature cells. Each cell holds `channels` learned features
/// followed by the normalised x and y coordinates of its centre.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn cell_len(&self) -> usize {
        self.channels + 2
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn cell(&self, index: usize) -> &[f64] {
        let n = self.cell_len();
        &self.data[index * n..(index + 1) * n]
    }
}

/// Per-cell class distributions over `classes` classes.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub data: Vec<f64>,
}

impl ProbabilityMap {
    pub fn new(
        height: usize,
        width: usize,
        classes: usize,
        data: Vec<f64>,
    ) -> Result<Self, SegmentError> {
        if data.len() != height * width * classes {
            return Err(shape_err(
                "probability map",
                height * width * classes,
                data.len(),
            ));
        }
        Ok(Self {
            height,
            width,
            classes,
            data,
        })
    }

    pub fn cell(&self, index: usize) -> &[f64] {
        &self.data[index * self.classes..(index + 1) * self.classes]
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn argmax_map(&self) -> Vec<usize> {
        (0..self.cells())
            .map(|i| crate::encoder::argmax(self.cell(i)))
            .collect()
    }
}

/// Grid of foreground probabilities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ForegroundMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ForegroundMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self, SegmentError> {
        if data.len() != height * width {
            return Err(shape_err("foreground map", height * width, data.len()));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(SegmentError::InvalidImage(
                "foreground probabilities must lie in [0, 1]".into(),
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// Hard mask of 0/1 values.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self, SegmentError> {
        if data.len() != height * width {
            return Err(shape_err("binary mask", height * width, data.len()));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(SegmentError::InvalidImage(
                "mask values must be 0 or 1".into(),
            ));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.width + x] = u8::from(on);
    }

    pub fn count(&self) -> u64 {
        self.data.iter().map(|&v| u64::from(v)).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn overlaps(&self, other: &Self) -> bool {
        self.data.iter().zip(&other.data).any(|(a, b)| a & b == 1)
    }
}
