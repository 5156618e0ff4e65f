//! Two 3x3 stride-2 convolutions with ReLU. Stands in for a large CNN
//! backbone behind the same interface: image in, feature grid out.

use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use super::{shape_err, FeatureMap, Image, SegmentError};
use crate::nn::{relu, Params};

const K: usize = 3;
const STRIDE: usize = 2;
const PAD: usize = 1;

/// Output side length of one convolution.
pub fn conv_out(side: usize) -> usize {
    side.div_ceil(STRIDE)
}

/// 3x3 convolution, weights laid out `[out][in][ky][kx]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            weights: vec![0.0; out_channels * in_channels * K * K],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn init<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        let fan_in = in_channels * K * K;
        let fan_out = out_channels * K * K;
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut layer = Self::zeros(in_channels, out_channels);
        for w in &mut layer.weights {
            *w = rng.random_range(-limit..=limit);
        }
        layer
    }

    #[inline]
    fn w(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weights[((o * self.in_channels + i) * K + ky) * K + kx]
    }

    /// Planar input `[in][h][w]` to planar pre-activation output.
    fn forward(&self, input: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
        let (oh, ow) = (conv_out(h), conv_out(w));
        let mut out = vec![0.0; self.out_channels * oh * ow];
        for o in 0..self.out_channels {
            let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
            plane.fill(self.bias[o]);
            for i in 0..self.in_channels {
                let src = &input[i * h * w..(i + 1) * h * w];
                for ky in 0..K {
                    for kx in 0..K {
                        let wt = self.w(o, i, ky, kx);
                        if wt == 0.0 {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * STRIDE + ky) as isize - PAD as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = &src[iy as usize * w..(iy as usize + 1) * w];
                            let dst = &mut plane[oy * ow..(oy + 1) * ow];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = (ox * STRIDE + kx) as isize - PAD as isize;
                                if ix >= 0 && (ix as usize) < w {
                                    *d += wt * row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        (out, oh, ow)
    }

    /// Accumulates weight/bias gradients from `dout` (already masked by the
    /// activation). Fills `dinput` when given.
    fn backward(
        &self,
        input: &[f64],
        h: usize,
        w: usize,
        dout: &[f64],
        grads: &mut ConvLayer,
        mut dinput: Option<&mut [f64]>,
    ) {
        let (oh, ow) = (conv_out(h), conv_out(w));
        for o in 0..self.out_channels {
            let dplane = &dout[o * oh * ow..(o + 1) * oh * ow];
            grads.bias[o] += dplane.iter().sum::<f64>();
            for i in 0..self.in_channels {
                let src = &input[i * h * w..(i + 1) * h * w];
                for ky in 0..K {
                    for kx in 0..K {
                        let widx = ((o * self.in_channels + i) * K + ky) * K + kx;
                        let wt = self.weights[widx];
                        let mut acc = 0.0;
                        for oy in 0..oh {
                            let iy = (oy * STRIDE + ky) as isize - PAD as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let iy = iy as usize;
                            for ox in 0..ow {
                                let ix = (ox * STRIDE + kx) as isize - PAD as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let g = dplane[oy * ow + ox];
                                acc += g * src[iy * w + ix as usize];
                                if let Some(din) = dinput.as_deref_mut() {
                                    din[i * h * w + iy * w + ix as usize] += wt * g;
                                }
                            }
                        }
                        grads.weights[widx] += acc;
                    }
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
}

impl Backbone {
    pub fn zeros(hidden_channels: usize, feature_channels: usize) -> Self {
        Self {
            conv1: ConvLayer::zeros(3, hidden_channels),
            conv2: ConvLayer::zeros(hidden_channels, feature_channels),
        }
    }

    pub fn init<R: Rng + ?Sized>(
        hidden_channels: usize,
        feature_channels: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            conv1: ConvLayer::init(3, hidden_channels, rng),
            conv2: ConvLayer::init(hidden_channels, feature_channels, rng),
        }
    }

    pub fn feature_channels(&self) -> usize {
        self.conv2.out_channels
    }

    fn check(&self) -> Result<(), SegmentError> {
        if self.conv1.in_channels != 3 {
            return Err(shape_err("conv1 input channels", 3, self.conv1.in_channels));
        }
        if self.conv2.in_channels != self.conv1.out_channels {
            return Err(shape_err(
                "conv2 input channels",
                self.conv1.out_channels,
                self.conv2.in_channels,
            ));
        }
        let layers = [&self.conv1, &self.conv2];
        for l in layers {
            if l.weights.len() != l.out_channels * l.in_channels * K * K
                || l.bias.len() != l.out_channels
            {
                return Err(shape_err(
                    "conv weights",
                    l.out_channels * l.in_channels * K * K,
                    l.weights.len(),
                ));
            }
        }
        Ok(())
    }
}

impl Params for Backbone {
    fn blocks(&self) -> Vec<&[f64]> {
        vec![
            &self.conv1.weights,
            &self.conv1.bias,
            &self.conv2.weights,
            &self.conv2.bias,
        ]
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            &mut self.conv1.weights,
            &mut self.conv1.bias,
            &mut self.conv2.weights,
            &mut self.conv2.bias,
        ]
    }
}

/// Activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct BackboneTrace {
    input: Vec<f64>,
    h0: usize,
    w0: usize,
    act1: Vec<f64>,
    h1: usize,
    w1: usize,
    act2: Vec<f64>,
}

impl BackboneTrace {
    pub(crate) fn fold_pattern(&self, hash: &mut u64) {
        crate::nn::fold_pattern(hash, &self.act1);
        crate::nn::fold_pattern(hash, &self.act2);
    }
}

/// Normalised coordinate of cell `index` along an axis with `n` cells.
pub fn cell_coordinate(index: usize, n: usize) -> f64 {
    -1.0 + (2 * index + 1) as f64 / n as f64
}

pub(crate) fn extract_features_traced(
    image: &Image,
    net: &Backbone,
) -> Result<(FeatureMap, BackboneTrace), SegmentError> {
    net.check()?;
    let (h0, w0) = (image.height(), image.width());
    // pixels rescaled to [-1, 1]
    let input: Vec<f64> = image.to_planar().iter().map(|v| 2.0 * v - 1.0).collect();
    let (mut act1, h1, w1) = net.conv1.forward(&input, h0, w0);
    act1.iter_mut().for_each(|v| *v = relu(*v));
    let (mut act2, h2, w2) = net.conv2.forward(&act1, h1, w1);
    act2.iter_mut().for_each(|v| *v = relu(*v));

    let c = net.feature_channels();
    let cell_len = c + 2;
    let cells = h2 * w2;
    let mut data = vec![0.0; cells * cell_len];
    for y in 0..h2 {
        for x in 0..w2 {
            let cell = y * w2 + x;
            let dst = &mut data[cell * cell_len..(cell + 1) * cell_len];
            for ch in 0..c {
                dst[ch] = act2[ch * cells + cell];
            }
            dst[c] = cell_coordinate(x, w2);
            dst[c + 1] = cell_coordinate(y, h2);
        }
    }
    Ok((
        FeatureMap {
            height: h2,
            width: w2,
            channels: c,
            data,
        },
        BackboneTrace {
            input,
            h0,
            w0,
            act1,
            h1,
            w1,
            act2,
        },
    ))
}

/// Feature grid of `ceil(H/4) x ceil(W/4)` cells with `C + 2` channels.
pub fn extract_features(image: &Image, net: &Backbone) -> Result<FeatureMap, SegmentError> {
    Ok(extract_features_traced(image, net)?.0)
}

/// `dfeat` is the gradient w.r.t. the feature map in cell-major layout
/// (coordinate channels are ignored).
pub(crate) fn backbone_backward(
    net: &Backbone,
    trace: &BackboneTrace,
    dfeat: &[f64],
    grads: &mut Backbone,
) {
    let c = net.feature_channels();
    let cell_len = c + 2;
    let (h2, w2) = (conv_out(trace.h1), conv_out(trace.w1));
    let cells = h2 * w2;
    let mut d2 = vec![0.0; c * cells];
    for cell in 0..cells {
        for ch in 0..c {
            if trace.act2[ch * cells + cell] > 0.0 {
                d2[ch * cells + cell] = dfeat[cell * cell_len + ch];
            }
        }
    }
    let mut d1 = vec![0.0; trace.act1.len()];
    net.conv2.backward(
        &trace.act1,
        trace.h1,
        trace.w1,
        &d2,
        &mut grads.conv2,
        Some(&mut d1),
    );
    for (d, a) in d1.iter_mut().zip(&trace.act1) {
        if *a <= 0.0 {
            *d = 0.0;
        }
    }
    net.conv1.backward(
        &trace.input,
        trace.h0,
        trace.w0,
        &d1,
        &mut grads.conv1,
        None,
    );
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        Image::new(h, w, (0..h * w * 3).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn grid_is_quarter_resolution_rounded_up() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(0);
        let net = Backbone::init(4, 6, &mut rng);
        let f = extract_features(&image(32, 32, 1), &net).unwrap();
        assert_eq!((f.height, f.width, f.cell_len()), (8, 8, 8));
        let f = extract_features(&image(45, 13, 1), &net).unwrap();
        assert_eq!((f.height, f.width), (12, 4));
    }

    #[test]
    fn zero_weights_yield_bias_features() {
        let mut net = Backbone::zeros(3, 2);
        net.conv2.bias = vec![0.25, 0.75];
        let f = extract_features(&image(16, 16, 2), &net).unwrap();
        for cell in 0..f.cells() {
            assert_eq!(&f.cell(cell)[..2], &[0.25, 0.75]);
        }
    }

    #[test]
    fn coordinate_channels_are_cell_centres() {
        let net = Backbone::zeros(2, 1);
        let f = extract_features(&image(32, 24, 3), &net).unwrap();
        let (h, w) = (f.height, f.width);
        let tl = f.cell(0);
        assert!((tl[1] - (-1.0 + 1.0 / w as f64)).abs() < 1e-15);
        assert!((tl[2] - (-1.0 + 1.0 / h as f64)).abs() < 1e-15);
        for y in 0..h {
            for x in 0..w {
                let c = f.cell(y * w + x);
                assert_eq!(c[1], -1.0 + (2 * x + 1) as f64 / w as f64);
                assert_eq!(c[2], -1.0 + (2 * y + 1) as f64 / h as f64);
            }
        }
    }

    #[test]
    fn mismatched_layers_are_rejected() {
        let net = Backbone {
            conv1: ConvLayer::zeros(3, 4),
            conv2: ConvLayer::zeros(5, 2),
        };
        assert!(matches!(
            extract_features(&image(16, 16, 0), &net),
            Err(SegmentError::ShapeMismatch { .. })
        ));
    }
}
