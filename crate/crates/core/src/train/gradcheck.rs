//! Central-difference gradient checks over small random configurations.
//!
//! The numeric derivative uses the fourth-order stencil
//! `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`. A coordinate whose
//! four evaluations land on different ReLU activation patterns straddles a
//! kink, where the finite difference does not estimate the derivative; such
//! coordinates are counted as skipped instead of compared.

use std::fmt;
use std::sync::Arc;

use rand::RngExt;
use serde::Serialize;

use crate::embedding::EmbeddingTable;
use crate::encoder::{
    classifier_backward, classify_traced, lstm_backward, run_lstm, ClassDistribution,
    ClassifierParams, LstmParams, TokenSequence,
};
use crate::model::{GradientOptions, Model, ModelConfig, Paths};
use crate::nn::{Params, PATTERN_SEED};
use crate::segment::backbone::{backbone_backward, extract_features_traced};
use crate::segment::heads::{
    baseline_head_backward, baseline_head_traced, category_head_backward, category_head_traced,
};
use crate::segment::{fuse, Backbone, BaselineHead, CategoryHead, FeatureMap, FusionWeight, Image};
use crate::synth::{derive_seed, rng_from_seed, Rng64};
use crate::train::loss::{bce_loss_values, cross_entropy_loss};

/// Step of the fourth-order central stencil.
pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;

/// Multiple of `eps * |loss| / h`, the size of the rounding error of a
/// central difference, below which a discrepancy is attributed to
/// floating-point noise rather than to the analytic gradient.
pub const ROUNDOFF_FACTOR: f64 = 16.0;

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct GradCheck {
    pub checked: usize,
    pub skipped: usize,
    /// Coordinates whose relative error exceeds [`TOLERANCE`].
    pub over_tolerance: usize,
    /// Coordinates over tolerance whose absolute discrepancy is within the
    /// rounding error of the finite difference itself.
    pub roundoff_limited: usize,
    pub max_rel_error: f64,
    /// Analytic and numeric values at the worst coordinate.
    pub worst: Option<(f64, f64)>,
}

impl GradCheck {
    pub fn merge(&mut self, other: &GradCheck) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        self.over_tolerance += other.over_tolerance;
        self.roundoff_limited += other.roundoff_limited;
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

/// Compares `analytic` against central differences of `eval`, which
/// returns the loss and an activation-pattern hash.
pub fn check_params<P: Params>(
    params: &P,
    analytic: &P,
    eval: impl Fn(&P) -> (f64, u64),
) -> GradCheck {
    let mut report = GradCheck::default();
    let mut probe = params.clone();
    for i in 0..params.num_params() {
        let orig = params.get_flat(i);
        let mut at = |offset: f64| {
            probe.set_flat(i, orig + offset);
            eval(&probe)
        };
        let (plus2, pat) = at(2.0 * STEP);
        let (plus, pat_plus) = at(STEP);
        let (minus, pat_minus) = at(-STEP);
        let (minus2, pat_minus2) = at(-2.0 * STEP);
        probe.set_flat(i, orig);
        if [pat_plus, pat_minus, pat_minus2].iter().any(|&p| p != pat) {
            report.skipped += 1;
            continue;
        }
        let numeric = (8.0 * (plus - minus) - (plus2 - minus2)) / (12.0 * STEP);
        report.checked += 1;
        let a = analytic.get_flat(i);
        let err = relative_error(a, numeric);
        if err.is_nan() || err >= TOLERANCE {
            report.over_tolerance += 1;
            let scale = [plus2, plus, minus, minus2]
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            let noise = 1.5 * f64::EPSILON * scale / STEP;
            if (a - numeric).abs() <= ROUNDOFF_FACTOR * noise {
                report.roundoff_limited += 1;
            }
        }
        if err > report.max_rel_error || err.is_nan() {
            report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
            report.worst = Some((a, numeric));
        }
    }
    report
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Piece {
    /// LSTM, classifier and input vectors under cross-entropy.
    Encoder,
    BaselineHead,
    CategoryHead,
    Backbone,
    /// Every parameter of a small model, including raw α and learned word
    /// vectors, under the training loss.
    FullModel,
}

impl Piece {
    pub const ALL: [Piece; 5] = [
        Piece::Encoder,
        Piece::BaselineHead,
        Piece::CategoryHead,
        Piece::Backbone,
        Piece::FullModel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Piece::Encoder => "lstm+classifier",
            Piece::BaselineHead => "baseline head",
            Piece::CategoryHead => "category head",
            Piece::Backbone => "backbone",
            Piece::FullModel => "full model",
        }
    }
}

impl fmt::Display for Piece {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

// Small sizes shared by every configuration.
const D: usize = 4;
const H: usize = 4;
const M: usize = 3;
const HIDDEN: usize = 5;
const CONV: usize = 3;
const FEAT: usize = 4;
const VOCAB: usize = 6;

fn uniform_vec(rng: &mut Rng64, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn random_targets(rng: &mut Rng64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| f64::from(u8::from(rng.random::<bool>())))
        .collect()
}

fn random_grid(rng: &mut Rng64) -> (usize, usize) {
    (rng.random_range(1..=6), rng.random_range(1..=6))
}

/// Image side whose feature grid has `cells` cells along that axis; the
/// smallest image has a 2-cell grid.
fn side_for_cells(rng: &mut Rng64, cells: usize) -> usize {
    let cells = cells.max(2);
    rng.random_range((4 * cells - 3).max(8)..=4 * cells)
}

/// Image whose feature grid is `cells_y x cells_x`.
fn random_image(rng: &mut Rng64, cells_y: usize, cells_x: usize) -> Image {
    let height = side_for_cells(rng, cells_y);
    let width = side_for_cells(rng, cells_x);
    Image::new(
        height,
        width,
        (0..height * width * 3)
            .map(|_| rng.random::<f64>())
            .collect(),
    )
    .expect("valid size")
}

fn random_features(rng: &mut Rng64) -> FeatureMap {
    let (h, w) = random_grid(rng);
    let cell_len = FEAT + 2;
    FeatureMap {
        height: h,
        width: w,
        channels: FEAT,
        data: uniform_vec(rng, h * w * cell_len, 1.0),
    }
}

#[derive(Clone)]
struct EncoderBundle {
    lstm: LstmParams,
    cls: ClassifierParams,
    inputs: Vec<f64>,
}

impl Params for EncoderBundle {
    fn blocks(&self) -> Vec<&[f64]> {
        let mut v = self.lstm.blocks();
        v.extend(self.cls.blocks());
        v.push(&self.inputs);
        v
    }
    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.lstm.blocks_mut();
        v.extend(self.cls.blocks_mut());
        v.push(&mut self.inputs);
        v
    }
}

fn check_encoder(rng: &mut Rng64) -> GradCheck {
    let len = rng.random_range(1..=5);
    let bundle = EncoderBundle {
        lstm: LstmParams::init(D, H, rng),
        cls: ClassifierParams::init(H, HIDDEN, M, rng),
        inputs: uniform_vec(rng, len * D, 1.0),
    };
    let label = rng.random_range(0..M);
    let eval = |b: &EncoderBundle| {
        let xs: Vec<&[f64]> = b.inputs.chunks(D).collect();
        let (h, _) = run_lstm(&b.lstm, &xs).expect("sizes match");
        let (dist, trace) = classify_traced(&b.cls, &h).expect("sizes match");
        let mut pattern = PATTERN_SEED;
        trace.fold_pattern(&mut pattern);
        (
            cross_entropy_loss(&dist, label).expect("label in range").0,
            pattern,
        )
    };
    let xs: Vec<&[f64]> = bundle.inputs.chunks(D).collect();
    let (h, lstm_trace) = run_lstm(&bundle.lstm, &xs).expect("sizes match");
    let (dist, cls_trace) = classify_traced(&bundle.cls, &h).expect("sizes match");
    let (_, dlogits) = cross_entropy_loss(&dist, label).expect("label in range");
    let mut grads = bundle.zeros_like();
    let dh = classifier_backward(&bundle.cls, &cls_trace, &dlogits, &mut grads.cls);
    let dxs = lstm_backward(&bundle.lstm, &lstm_trace, &dh, &mut grads.lstm);
    grads.inputs = dxs.concat();
    check_params(&bundle, &grads, eval)
}

#[derive(Clone)]
struct HeadBundle<T> {
    head: T,
    features: Vec<f64>,
    expr: Vec<f64>,
}

impl<T: Params> Params for HeadBundle<T> {
    fn blocks(&self) -> Vec<&[f64]> {
        let mut v = self.head.blocks();
        v.push(&self.features);
        v.push(&self.expr);
        v
    }
    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.head.blocks_mut();
        v.push(&mut self.features);
        v.push(&mut self.expr);
        v
    }
}

fn with_data(fmap: &FeatureMap, data: &[f64]) -> FeatureMap {
    FeatureMap {
        data: data.to_vec(),
        ..fmap.clone()
    }
}

fn check_baseline_head(rng: &mut Rng64) -> GradCheck {
    let fmap = random_features(rng);
    let bundle = HeadBundle {
        head: BaselineHead::init(FEAT + 2, H, HIDDEN, rng),
        features: fmap.data.clone(),
        expr: uniform_vec(rng, H, 1.0),
    };
    let target = random_targets(rng, fmap.cells());
    let eval = |b: &HeadBundle<BaselineHead>| {
        let (p, trace) =
            baseline_head_traced(&with_data(&fmap, &b.features), &b.expr, &b.head).expect("sizes");
        let mut pattern = PATTERN_SEED;
        trace.fold_pattern(&mut pattern);
        (bce_loss_values(&p.data, &target).0, pattern)
    };
    let (p, trace) = baseline_head_traced(&fmap, &bundle.expr, &bundle.head).expect("sizes");
    let (_, dp) = bce_loss_values(&p.data, &target);
    let mut grads = bundle.zeros_like();
    grads.expr = baseline_head_backward(
        &fmap,
        &bundle.head,
        &trace,
        &bundle.expr,
        &dp,
        &mut grads.head,
        Some(&mut grads.features),
    );
    check_params(&bundle, &grads, eval)
}

fn check_category_head(rng: &mut Rng64) -> GradCheck {
    let fmap = random_features(rng);
    let bundle = HeadBundle {
        head: CategoryHead::init(FEAT + 2, HIDDEN, M, rng),
        features: fmap.data.clone(),
        expr: Vec::new(),
    };
    let ptext = ClassDistribution::from_logits(&uniform_vec(rng, M, 2.0));
    let target = random_targets(rng, fmap.cells());
    let eval = |b: &HeadBundle<CategoryHead>| {
        let (pmap, trace) =
            category_head_traced(&with_data(&fmap, &b.features), &b.head).expect("sizes");
        let mut pattern = PATTERN_SEED;
        trace.fold_pattern(&mut pattern);
        let p = fuse(&pmap, &ptext).expect("sizes");
        (bce_loss_values(&p.data, &target).0, pattern)
    };
    let (pmap, trace) = category_head_traced(&fmap, &bundle.head).expect("sizes");
    let p = fuse(&pmap, &ptext).expect("sizes");
    let (_, dp) = bce_loss_values(&p.data, &target);
    let t = ptext.probs();
    let dprobs: Vec<f64> = (0..pmap.data.len()).map(|i| dp[i / M] * t[i % M]).collect();
    let mut grads = bundle.zeros_like();
    category_head_backward(
        &fmap,
        &bundle.head,
        &trace,
        &pmap,
        &dprobs,
        &mut grads.head,
        Some(&mut grads.features),
    );
    check_params(&bundle, &grads, eval)
}

fn check_backbone(rng: &mut Rng64) -> GradCheck {
    let (gh, gw) = random_grid(rng);
    let image = random_image(rng, gh.max(2), gw.max(2));
    let net = Backbone::init(CONV, FEAT, rng);
    // small positive biases keep fewer units dead at the start
    let mut net = net;
    for b in net.conv1.bias.iter_mut().chain(net.conv2.bias.iter_mut()) {
        *b = rng.random_range(0.0..0.2);
    }
    let (fmap, trace) = extract_features_traced(&image, &net).expect("sizes");
    let weights = uniform_vec(rng, fmap.data.len(), 1.0);
    let eval = |n: &Backbone| {
        let (f, t) = extract_features_traced(&image, n).expect("sizes");
        let mut pattern = PATTERN_SEED;
        t.fold_pattern(&mut pattern);
        (crate::nn::dot(&f.data, &weights), pattern)
    };
    let mut grads = net.zeros_like();
    backbone_backward(&net, &trace, &weights, &mut grads);
    check_params(&net, &grads, eval)
}

fn small_model(rng: &mut Rng64, learn_embedding: bool) -> Model {
    let tokens: Vec<String> = (0..VOCAB).map(|i| format!("t{i}")).collect();
    let rows: Vec<Vec<f64>> = (0..VOCAB).map(|_| uniform_vec(rng, D, 1.0)).collect();
    let table = EmbeddingTable::from_rows(tokens, rows).expect("valid table");
    let config = ModelConfig {
        embed_dim: D,
        lstm_hidden: H,
        mlp_hidden: HIDDEN,
        classes: M,
        conv_channels: CONV,
        feature_channels: FEAT,
        head_hidden: HIDDEN,
        category_hidden: HIDDEN,
        threshold: 0.5,
    };
    let mut model =
        Model::new(config, Paths::Full, Arc::new(table), learn_embedding, rng).expect("valid");
    model.weights.fusion = FusionWeight::new(rng.random_range(-2.0..2.0));
    let w = &mut model.weights;
    for b in [&mut w.baseline_backbone, &mut w.category_backbone]
        .into_iter()
        .flat_map(|net| net.conv1.bias.iter_mut().chain(net.conv2.bias.iter_mut()))
    {
        *b = rng.random_range(0.0..0.2);
    }
    model
}

fn check_full_model(rng: &mut Rng64, learn_embedding: bool) -> GradCheck {
    let mut model = small_model(rng, learn_embedding);
    let (gh, gw) = random_grid(rng);
    let (gh, gw) = (gh.max(2), gw.max(2));
    let image = random_image(rng, gh, gw);
    let len = rng.random_range(1..=5);
    let words: Vec<String> = (0..len)
        .map(|_| format!("t{}", rng.random_range(0..VOCAB)))
        .collect();
    let seq = TokenSequence::from_tokens(&words).expect("non-empty");
    let target = random_targets(rng, gh * gw);
    let label = Some(rng.random_range(0..M));
    let options = GradientOptions::default();
    let (_, grads) = model
        .example_gradients(&image, &seq, &target, label, &options)
        .expect("consistent sizes");
    let weights = model.weights.clone();
    let eval = |w: &crate::model::Weights| {
        let mut m = model.clone();
        m.weights = w.clone();
        let fw = m
            .forward_example(&image, &seq, &target, label, &options)
            .expect("consistent sizes");
        (fw.loss().total(), fw.activation_pattern())
    };
    let report = check_params(&weights, &grads, eval);
    model.weights = weights;
    report
}

/// Checks one random configuration of `piece`.
pub fn grad_check(piece: Piece, seed: u64) -> GradCheck {
    let mut rng = rng_from_seed(seed);
    match piece {
        Piece::Encoder => check_encoder(&mut rng),
        Piece::BaselineHead => check_baseline_head(&mut rng),
        Piece::CategoryHead => check_category_head(&mut rng),
        Piece::Backbone => check_backbone(&mut rng),
        Piece::FullModel => check_full_model(&mut rng, seed.is_multiple_of(2)),
    }
}

/// Worst error per piece over `configs` random configurations each.
pub fn grad_check_suite(configs: usize, seed: u64) -> Vec<(Piece, GradCheck)> {
    Piece::ALL
        .iter()
        .enumerate()
        .map(|(p, &piece)| {
            let mut total = GradCheck::default();
            for c in 0..configs {
                let s = derive_seed(derive_seed(seed, p as u64), c as u64);
                total.merge(&grad_check(piece, s));
            }
            (piece, total)
        })
        .collect()
}
