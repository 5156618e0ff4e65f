use crate::encoder::{ClassDistribution, EncoderError};
use crate::segment::{shape_err, BinaryMask, ForegroundMap, SegmentError};

pub const PROB_CLAMP: f64 = 1e-7;

/// Mean binary cross-entropy of a foreground map against a mask at the same
/// resolution, with the gradient with respect to every cell.
pub fn bce_loss(p: &ForegroundMap, gt: &BinaryMask) -> Result<(f64, Vec<f64>), SegmentError> {
    if p.height != gt.height || p.width != gt.width {
        return Err(shape_err(
            "loss target",
            format!("{}x{}", p.height, p.width),
            format!("{}x{}", gt.height, gt.width),
        ));
    }
    let y: Vec<f64> = gt.data.iter().map(|&v| f64::from(v)).collect();
    Ok(bce_loss_values(&p.data, &y))
}

/// [`bce_loss`] over raw slices. Probabilities are clamped to
/// `[1e-7, 1 - 1e-7]`; the gradient uses the clamped value and passes
/// straight through the clamp.
pub fn bce_loss_values(p: &[f64], y: &[f64]) -> (f64, Vec<f64>) {
    debug_assert_eq!(p.len(), y.len());
    let n = p.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(p.len());
    for (&pv, &yv) in p.iter().zip(y) {
        let q = pv.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        loss -= yv * q.ln() + (1.0 - yv) * (1.0 - q).ln();
        grad.push((q - yv) / (q * (1.0 - q)) / n);
    }
    (loss / n, grad)
}

/// `-ln dist[label]` and its gradient with respect to the logits that
/// produced `dist` through a softmax: `dist - onehot(label)`.
pub fn cross_entropy_loss(
    dist: &ClassDistribution,
    label: usize,
) -> Result<(f64, Vec<f64>), EncoderError> {
    let p = dist.probs();
    if label >= p.len() {
        return Err(EncoderError::BadLabel {
            label,
            classes: p.len(),
        });
    }
    let loss = -p[label].max(f64::MIN_POSITIVE).ln();
    let mut grad = p.to_vec();
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Cross-entropy against a target distribution, `-sum q ln p`, with the
/// logit gradient `dist - target`. `target` must sum to one.
pub fn soft_cross_entropy(dist: &ClassDistribution, target: &[f64]) -> (f64, Vec<f64>) {
    let p = dist.probs();
    debug_assert_eq!(p.len(), target.len());
    let mut loss = 0.0;
    for (&pv, &q) in p.iter().zip(target) {
        if q > 0.0 {
            loss -= q * pv.max(f64::MIN_POSITIVE).ln();
        }
    }
    let grad = p.iter().zip(target).map(|(pv, q)| pv - q).collect();
    (loss, grad)
}
