//! Per-cell heads on top of the feature grid.
//!
//! The expression-conditioned head tiles the encoded expression over every
//! cell, concatenates it with the cell's features, and applies a 1x1 ReLU
//! layer and a 1x1 logit layer with a sigmoid. Its first layer is stored as
//! separate feature and expression blocks, so the expression projection is
//! computed once per image instead of once per cell.
//!
//! The category head is a 1x1 ReLU layer followed by a 1x1 layer to `M`
//! logits and a per-cell softmax.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{shape_err, FeatureMap, ForegroundMap, ProbabilityMap, SegmentError};
use crate::nn::{relu, sigmoid, softmax_backward, softmax_into, Matrix, Params};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineHead {
    /// hidden × (C + 2)
    pub feature_weights: Matrix,
    /// hidden × H
    pub expr_weights: Matrix,
    pub hidden_bias: Vec<f64>,
    pub output_weights: Vec<f64>,
    pub output_bias: f64,
}

impl BaselineHead {
    pub fn zeros(cell_len: usize, expr_dim: usize, hidden: usize) -> Self {
        Self {
            feature_weights: Matrix::zeros(hidden, cell_len),
            expr_weights: Matrix::zeros(hidden, expr_dim),
            hidden_bias: vec![0.0; hidden],
            output_weights: vec![0.0; hidden],
            output_bias: 0.0,
        }
    }

    pub fn init<R: Rng + ?Sized>(
        cell_len: usize,
        expr_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = cell_len + expr_dim;
        let out = Matrix::glorot(1, hidden, hidden, 1, rng);
        Self {
            feature_weights: Matrix::glorot(hidden, cell_len, fan_in, hidden, rng),
            expr_weights: Matrix::glorot(hidden, expr_dim, fan_in, hidden, rng),
            hidden_bias: vec![0.0; hidden],
            output_weights: out.data,
            output_bias: 0.0,
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden_bias.len()
    }

    fn check(&self, fmap: &FeatureMap, expr: &[f64]) -> Result<(), SegmentError> {
        if self.feature_weights.cols != fmap.cell_len() {
            return Err(shape_err(
                "baseline head feature width",
                self.feature_weights.cols,
                fmap.cell_len(),
            ));
        }
        if self.expr_weights.cols != expr.len() {
            return Err(shape_err(
                "baseline head expression width",
                self.expr_weights.cols,
                expr.len(),
            ));
        }
        let h = self.hidden();
        if self.feature_weights.rows != h
            || self.expr_weights.rows != h
            || self.output_weights.len() != h
        {
            return Err(shape_err(
                "baseline head hidden width",
                h,
                self.output_weights.len(),
            ));
        }
        Ok(())
    }
}

impl Params for BaselineHead {
    fn blocks(&self) -> Vec<&[f64]> {
        vec![
            &self.feature_weights.data,
            &self.expr_weights.data,
            &self.hidden_bias,
            &self.output_weights,
            std::slice::from_ref(&self.output_bias),
        ]
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            &mut self.feature_weights.data,
            &mut self.expr_weights.data,
            &mut self.hidden_bias,
            &mut self.output_weights,
            std::slice::from_mut(&mut self.output_bias),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct BaselineTrace {
    /// cells × hidden, post-ReLU
    hidden: Vec<f64>,
    prob: Vec<f64>,
}

impl BaselineTrace {
    pub(crate) fn fold_pattern(&self, hash: &mut u64) {
        crate::nn::fold_pattern(hash, &self.hidden);
    }
}

pub(crate) fn baseline_head_traced(
    fmap: &FeatureMap,
    expr: &[f64],
    head: &BaselineHead,
) -> Result<(ForegroundMap, BaselineTrace), SegmentError> {
    head.check(fmap, expr)?;
    let nh = head.hidden();
    let mut shared = head.hidden_bias.clone();
    head.expr_weights.matvec_acc(expr, &mut shared);
    let cells = fmap.cells();
    let mut hidden = vec![0.0; cells * nh];
    let mut prob = vec![0.0; cells];
    for cell in 0..cells {
        let a = &mut hidden[cell * nh..(cell + 1) * nh];
        a.copy_from_slice(&shared);
        head.feature_weights.matvec_acc(fmap.cell(cell), a);
        let mut logit = head.output_bias;
        for (v, w) in a.iter_mut().zip(&head.output_weights) {
            *v = relu(*v);
            logit += *v * w;
        }
        prob[cell] = sigmoid(logit);
    }
    Ok((
        ForegroundMap {
            height: fmap.height,
            width: fmap.width,
            data: prob.clone(),
        },
        BaselineTrace { hidden, prob },
    ))
}

/// Per-cell foreground probability conditioned on the encoded expression.
pub fn baseline_head(
    fmap: &FeatureMap,
    expr: &[f64],
    head: &BaselineHead,
) -> Result<ForegroundMap, SegmentError> {
    Ok(baseline_head_traced(fmap, expr, head)?.0)
}

/// Given `dL/dp` per cell, accumulates head gradients, adds the feature
/// gradient into `dfeat` (cell-major) and returns `dL/dexpr`.
pub(crate) fn baseline_head_backward(
    fmap: &FeatureMap,
    head: &BaselineHead,
    trace: &BaselineTrace,
    expr: &[f64],
    dprob: &[f64],
    grads: &mut BaselineHead,
    dfeat: Option<&mut [f64]>,
) -> Vec<f64> {
    let nh = head.hidden();
    let cell_len = fmap.cell_len();
    let mut dshared = vec![0.0; nh];
    let mut dz = vec![0.0; nh];
    let mut dfeat = dfeat;
    for (cell, &dp) in dprob.iter().enumerate() {
        let p = trace.prob[cell];
        let dlogit = dp * p * (1.0 - p);
        if dlogit == 0.0 {
            continue;
        }
        let a = &trace.hidden[cell * nh..(cell + 1) * nh];
        grads.output_bias += dlogit;
        for k in 0..nh {
            grads.output_weights[k] += dlogit * a[k];
            dz[k] = if a[k] > 0.0 {
                dlogit * head.output_weights[k]
            } else {
                0.0
            };
            dshared[k] += dz[k];
        }
        grads.feature_weights.outer_acc(&dz, fmap.cell(cell));
        if let Some(df) = dfeat.as_deref_mut() {
            head.feature_weights
                .matvec_t_acc(&dz, &mut df[cell * cell_len..(cell + 1) * cell_len]);
        }
    }
    for (b, d) in grads.hidden_bias.iter_mut().zip(&dshared) {
        *b += d;
    }
    grads.expr_weights.outer_acc(&dshared, expr);
    let expr_dim = head.expr_weights.cols;
    let mut dexpr = vec![0.0; expr_dim];
    head.expr_weights.matvec_t_acc(&dshared, &mut dexpr);
    dexpr
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryHead {
    pub hidden: Matrix,
    pub hidden_bias: Vec<f64>,
    pub output: Matrix,
    pub output_bias: Vec<f64>,
}

impl CategoryHead {
    pub fn zeros(cell_len: usize, hidden: usize, classes: usize) -> Self {
        Self {
            hidden: Matrix::zeros(hidden, cell_len),
            hidden_bias: vec![0.0; hidden],
            output: Matrix::zeros(classes, hidden),
            output_bias: vec![0.0; classes],
        }
    }

    pub fn init<R: Rng + ?Sized>(
        cell_len: usize,
        hidden: usize,
        classes: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            hidden: Matrix::glorot(hidden, cell_len, cell_len, hidden, rng),
            hidden_bias: vec![0.0; hidden],
            output: Matrix::glorot(classes, hidden, hidden, classes, rng),
            output_bias: vec![0.0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.output.rows
    }
}

impl Params for CategoryHead {
    fn blocks(&self) -> Vec<&[f64]> {
        vec![
            &self.hidden.data,
            &self.hidden_bias,
            &self.output.data,
            &self.output_bias,
        ]
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            &mut self.hidden.data,
            &mut self.hidden_bias,
            &mut self.output.data,
            &mut self.output_bias,
        ]
    }
}

#[derive(Clone, Debug)]
pub struct CategoryTrace {
    hidden: Vec<f64>,
}

impl CategoryTrace {
    pub(crate) fn fold_pattern(&self, hash: &mut u64) {
        crate::nn::fold_pattern(hash, &self.hidden);
    }
}

pub(crate) fn category_head_traced(
    fmap: &FeatureMap,
    head: &CategoryHead,
) -> Result<(ProbabilityMap, CategoryTrace), SegmentError> {
    if head.hidden.cols != fmap.cell_len() {
        return Err(shape_err(
            "category head feature width",
            head.hidden.cols,
            fmap.cell_len(),
        ));
    }
    if head.output.cols != head.hidden.rows || head.output_bias.len() != head.output.rows {
        return Err(shape_err(
            "category head output layer",
            head.hidden.rows,
            head.output.cols,
        ));
    }
    let nh = head.hidden.rows;
    let m = head.classes();
    let cells = fmap.cells();
    let mut hidden = vec![0.0; cells * nh];
    let mut probs = vec![0.0; cells * m];
    let mut logits = vec![0.0; m];
    for cell in 0..cells {
        let a = &mut hidden[cell * nh..(cell + 1) * nh];
        a.copy_from_slice(&head.hidden_bias);
        head.hidden.matvec_acc(fmap.cell(cell), a);
        a.iter_mut().for_each(|v| *v = relu(*v));
        logits.copy_from_slice(&head.output_bias);
        head.output.matvec_acc(a, &mut logits);
        softmax_into(&logits, &mut probs[cell * m..(cell + 1) * m]);
    }
    Ok((
        ProbabilityMap {
            height: fmap.height,
            width: fmap.width,
            classes: m,
            data: probs,
        },
        CategoryTrace { hidden },
    ))
}

/// Per-cell class distribution.
pub fn category_head(
    fmap: &FeatureMap,
    head: &CategoryHead,
) -> Result<ProbabilityMap, SegmentError> {
    Ok(category_head_traced(fmap, head)?.0)
}

/// Given `dL/dP` (cells × M), accumulates gradients and adds the feature
/// gradient into `dfeat`.
pub(crate) fn category_head_backward(
    fmap: &FeatureMap,
    head: &CategoryHead,
    trace: &CategoryTrace,
    pmap: &ProbabilityMap,
    dprobs: &[f64],
    grads: &mut CategoryHead,
    dfeat: Option<&mut [f64]>,
) {
    let dlogits = logits_grad(pmap, dprobs);
    category_head_backward_logits(fmap, head, trace, &dlogits, grads, dfeat);
}

/// `dL/dlogits` for every cell given `dL/dP`.
pub(crate) fn logits_grad(pmap: &ProbabilityMap, dprobs: &[f64]) -> Vec<f64> {
    let m = pmap.classes;
    let mut out = vec![0.0; dprobs.len()];
    for cell in 0..pmap.cells() {
        softmax_backward(
            pmap.cell(cell),
            &dprobs[cell * m..(cell + 1) * m],
            &mut out[cell * m..(cell + 1) * m],
        );
    }
    out
}

/// Backward from per-cell logit gradients (cells × M).
pub(crate) fn category_head_backward_logits(
    fmap: &FeatureMap,
    head: &CategoryHead,
    trace: &CategoryTrace,
    dlogits: &[f64],
    grads: &mut CategoryHead,
    mut dfeat: Option<&mut [f64]>,
) {
    let m = head.classes();
    let nh = head.hidden.rows;
    let cell_len = fmap.cell_len();
    let mut dz = vec![0.0; nh];
    for cell in 0..fmap.cells() {
        let dl = &dlogits[cell * m..(cell + 1) * m];
        let a = &trace.hidden[cell * nh..(cell + 1) * nh];
        grads.output.outer_acc(dl, a);
        for (b, d) in grads.output_bias.iter_mut().zip(dl) {
            *b += d;
        }
        dz.fill(0.0);
        head.output.matvec_t_acc(dl, &mut dz);
        for (d, v) in dz.iter_mut().zip(a) {
            if *v <= 0.0 {
                *d = 0.0;
            }
        }
        grads.hidden.outer_acc(&dz, fmap.cell(cell));
        for (b, d) in grads.hidden_bias.iter_mut().zip(&dz) {
            *b += d;
        }
        if let Some(df) = dfeat.as_deref_mut() {
            head.hidden
                .matvec_t_acc(&dz, &mut df[cell * cell_len..(cell + 1) * cell_len]);
        }
    }
}
