//! The full parameter bundle and the end-to-end pipeline:
//! tokenize → encode → {expression-conditioned head; classify → fuse}
//! → combine → upsample → binarize.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingTable;
use crate::encoder::{
    classifier_backward, classify_traced, lstm_backward, run_lstm, tokenize, ClassDistribution,
    ClassifierParams, ClassifierTrace, LstmParams, LstmTrace, TokenSequence,
};
use crate::nn::Params;
use crate::segment::backbone::{backbone_backward, extract_features_traced, BackboneTrace};
use crate::segment::fusion::{combine_value, Saturation};
use crate::segment::heads::{
    baseline_head_backward, baseline_head_traced, category_head_backward,
    category_head_backward_logits, category_head_traced, BaselineTrace, CategoryTrace,
};
use crate::segment::{
    binarize, combine, fuse, upsample_bilinear, Backbone, BaselineHead, BinaryMask, CategoryHead,
    FeatureMap, ForegroundMap, FusionWeight, Image, ProbabilityMap,
};
use crate::synth::Rng64;
use crate::train::loss::{bce_loss_values, cross_entropy_loss, soft_cross_entropy};
use crate::Error;

/// Network sizes. `classes` counts every class the category path knows,
/// including background.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub lstm_hidden: usize,
    pub mlp_hidden: usize,
    pub classes: usize,
    pub conv_channels: usize,
    pub feature_channels: usize,
    pub head_hidden: usize,
    pub category_hidden: usize,
    pub threshold: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 50,
            lstm_hidden: 64,
            mlp_hidden: 64,
            classes: 9,
            conv_channels: 8,
            feature_channels: 16,
            head_hidden: 32,
            category_hidden: 32,
            threshold: 0.5,
        }
    }
}

/// Which foreground paths feed the output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Paths {
    /// Expression-conditioned head only (α pinned to 1).
    Baseline,
    /// Category fusion only (α pinned to 0).
    Category,
    /// Both, mixed by the learned α.
    Full,
}

impl Paths {
    pub fn uses_baseline(self) -> bool {
        matches!(self, Paths::Baseline | Paths::Full)
    }

    pub fn uses_category(self) -> bool {
        matches!(self, Paths::Category | Paths::Full)
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Paths::Baseline => 0,
            Paths::Category => 1,
            Paths::Full => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Paths::Baseline),
            1 => Some(Paths::Category),
            2 => Some(Paths::Full),
            _ => None,
        }
    }
}

/// Every trainable number in the model. Gradients use the same type.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    /// Feature extractor of the expression-conditioned path.
    pub baseline_backbone: Backbone,
    pub seg_lstm: LstmParams,
    pub baseline_head: BaselineHead,
    pub text_lstm: LstmParams,
    pub classifier: ClassifierParams,
    /// Feature extractor of the category segmentation network.
    pub category_backbone: Backbone,
    pub category_head: CategoryHead,
    pub fusion: FusionWeight,
    /// Row-major word vectors when the embedding is learned; empty when the
    /// model reads a fixed pretrained table.
    pub word_vectors: Vec<f64>,
}

impl Params for Weights {
    fn blocks(&self) -> Vec<&[f64]> {
        let mut v = self.baseline_backbone.blocks();
        v.extend(self.seg_lstm.blocks());
        v.extend(self.baseline_head.blocks());
        v.extend(self.text_lstm.blocks());
        v.extend(self.classifier.blocks());
        v.extend(self.category_backbone.blocks());
        v.extend(self.category_head.blocks());
        v.push(std::slice::from_ref(&self.fusion.raw));
        v.push(&self.word_vectors);
        v
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.baseline_backbone.blocks_mut();
        v.extend(self.seg_lstm.blocks_mut());
        v.extend(self.baseline_head.blocks_mut());
        v.extend(self.text_lstm.blocks_mut());
        v.extend(self.classifier.blocks_mut());
        v.extend(self.category_backbone.blocks_mut());
        v.extend(self.category_head.blocks_mut());
        v.push(std::slice::from_mut(&mut self.fusion.raw));
        v.push(&mut self.word_vectors);
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub paths: Paths,
    /// When set, word vectors are trained and live in `weights.word_vectors`;
    /// `embedding` then only supplies the vocabulary until [`Model::sync_embedding`].
    pub learn_embedding: bool,
    pub embedding: Arc<EmbeddingTable>,
    pub weights: Weights,
}

/// Output of [`Model::predict`].
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Foreground probability at image resolution, before thresholding.
    pub heatmap: ForegroundMap,
    pub mask: BinaryMask,
}

/// Grid-level intermediate maps of one forward pass.
#[derive(Clone, Debug)]
pub struct GridOutput {
    pub baseline: Option<ForegroundMap>,
    pub class_map: Option<ProbabilityMap>,
    pub text_distribution: Option<ClassDistribution>,
    pub fused: Option<ForegroundMap>,
    pub combined: ForegroundMap,
}

impl Model {
    pub fn new(
        config: ModelConfig,
        paths: Paths,
        embedding: Arc<EmbeddingTable>,
        learn_embedding: bool,
        rng: &mut Rng64,
    ) -> Result<Self, Error> {
        if embedding.dimension() != config.embed_dim {
            return Err(Error::Config(format!(
                "embedding dimension {} differs from configured {}",
                embedding.dimension(),
                config.embed_dim
            )));
        }
        if config.classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        let cell_len = config.feature_channels + 2;
        let baseline_backbone = Backbone::init(config.conv_channels, config.feature_channels, rng);
        let seg_lstm = LstmParams::init(config.embed_dim, config.lstm_hidden, rng);
        let baseline_head =
            BaselineHead::init(cell_len, config.lstm_hidden, config.head_hidden, rng);
        let text_lstm = LstmParams::init(config.embed_dim, config.lstm_hidden, rng);
        let classifier =
            ClassifierParams::init(config.lstm_hidden, config.mlp_hidden, config.classes, rng);
        let category_backbone = Backbone::init(config.conv_channels, config.feature_channels, rng);
        let category_head =
            CategoryHead::init(cell_len, config.category_hidden, config.classes, rng);
        let fusion = match paths {
            Paths::Baseline => FusionWeight::first_only(),
            Paths::Category => FusionWeight::second_only(),
            Paths::Full => FusionWeight::default(),
        };
        let word_vectors = if learn_embedding {
            embedding.raw_vectors().to_vec()
        } else {
            Vec::new()
        };
        Ok(Self {
            config,
            paths,
            learn_embedding,
            embedding,
            weights: Weights {
                baseline_backbone,
                seg_lstm,
                baseline_head,
                text_lstm,
                classifier,
                category_backbone,
                category_head,
                fusion,
                word_vectors,
            },
        })
    }

    pub fn alpha(&self) -> f64 {
        self.weights.fusion.alpha()
    }

    /// Copies learned word vectors back into the lookup table.
    pub fn sync_embedding(&mut self) {
        if self.learn_embedding {
            let table = Arc::make_mut(&mut self.embedding);
            table
                .raw_vectors_mut()
                .copy_from_slice(&self.weights.word_vectors);
            table.refresh_fallback();
        }
    }

    fn word_vector<'a>(&'a self, token: &str) -> (&'a [f64], Option<usize>) {
        let d = self.config.embed_dim;
        match self.embedding.index_of(token) {
            Some(i) if self.learn_embedding => {
                (&self.weights.word_vectors[i * d..(i + 1) * d], Some(i))
            }
            Some(i) => (self.embedding.row(i), Some(i)),
            None => (self.embedding.fallback(), None),
        }
    }

    fn encode_with(
        &self,
        lstm: &LstmParams,
        seq: &TokenSequence,
    ) -> Result<(Vec<f64>, LstmTrace, Vec<Option<usize>>), Error> {
        let mut inputs = Vec::with_capacity(seq.len());
        let mut rows = Vec::with_capacity(seq.len());
        for t in seq.tokens() {
            let (v, idx) = self.word_vector(t);
            inputs.push(v);
            rows.push(idx);
        }
        let (h, trace) = run_lstm(lstm, &inputs)?;
        Ok((h, trace, rows))
    }

    /// Text-side class distribution for an expression.
    pub fn text_distribution(&self, seq: &TokenSequence) -> Result<ClassDistribution, Error> {
        let (h, _, _) = self.encode_with(&self.weights.text_lstm, seq)?;
        Ok(classify_traced(&self.weights.classifier, &h)?.0)
    }

    /// Forward pass at feature-grid resolution.
    pub fn forward_grid(&self, image: &Image, seq: &TokenSequence) -> Result<GridOutput, Error> {
        let w = &self.weights;
        let saturation = w.fusion.saturation();
        let need_baseline = saturation != Some(Saturation::Second);
        let need_category = saturation != Some(Saturation::First);

        let baseline = if need_baseline {
            let (features, _) = extract_features_traced(image, &w.baseline_backbone)?;
            let (h, _, _) = self.encode_with(&w.seg_lstm, seq)?;
            Some(baseline_head_traced(&features, &h, &w.baseline_head)?.0)
        } else {
            None
        };
        let (class_map, text_distribution, fused) = if need_category {
            let (features, _) = extract_features_traced(image, &w.category_backbone)?;
            let (pmap, _) = category_head_traced(&features, &w.category_head)?;
            let ptext = self.text_distribution(seq)?;
            let fused = fuse(&pmap, &ptext)?;
            (Some(pmap), Some(ptext), Some(fused))
        } else {
            (None, None, None)
        };
        let combined = match (&baseline, &fused) {
            (Some(p1), Some(p2)) => combine(p1, p2, w.fusion)?,
            (Some(p1), None) => p1.clone(),
            (None, Some(p2)) => p2.clone(),
            (None, None) => unreachable!("at least one path is active"),
        };
        Ok(GridOutput {
            baseline,
            class_map,
            text_distribution,
            fused,
            combined,
        })
    }

    /// Full-resolution heatmap and thresholded mask for an expression.
    pub fn predict(&self, image: &Image, expression: &str) -> Result<Prediction, Error> {
        let seq = tokenize(expression)?;
        self.predict_tokens(image, &seq)
    }

    pub fn predict_tokens(&self, image: &Image, seq: &TokenSequence) -> Result<Prediction, Error> {
        let grid = self.forward_grid(image, seq)?;
        let heatmap = upsample_bilinear(&grid.combined, image.height(), image.width());
        let mask = binarize(&heatmap, self.config.threshold)?;
        Ok(Prediction { heatmap, mask })
    }

    pub fn zero_grads(&self) -> Weights {
        self.weights.zeros_like()
    }

    fn scatter_word_grads(&self, rows: &[Option<usize>], dxs: &[Vec<f64>], grads: &mut Weights) {
        if !self.learn_embedding {
            return;
        }
        let d = self.config.embed_dim;
        for (row, dx) in rows.iter().zip(dxs) {
            if let Some(i) = row {
                for (g, v) in grads.word_vectors[i * d..(i + 1) * d].iter_mut().zip(dx) {
                    *g += v;
                }
            }
        }
    }

    /// Forward pass of one training example, keeping everything the
    /// backward pass needs.
    ///
    /// The segmentation loss is the mean per-cell binary cross-entropy of
    /// the combined map against `target` (grid resolution, values 0/1).
    /// When `label` is given and the category path is active, the
    /// classifier's cross-entropy is added with weight `ce_weight`.
    pub(crate) fn forward_example(
        &self,
        image: &Image,
        seq: &TokenSequence,
        target: &[f64],
        label: Option<usize>,
        options: &GradientOptions,
    ) -> Result<ExampleForward, Error> {
        let w = &self.weights;
        let saturation = w.fusion.saturation();
        let use_baseline = saturation != Some(Saturation::Second) && options.p1.is_none();
        let use_category = saturation != Some(Saturation::First) && options.p2.is_none();

        let baseline = if use_baseline {
            let (fmap, backbone) = extract_features_traced(image, &w.baseline_backbone)?;
            let (expr, lstm, rows) = self.encode_with(&w.seg_lstm, seq)?;
            let (p1, head) = baseline_head_traced(&fmap, &expr, &w.baseline_head)?;
            Some(BaselineState {
                fmap,
                backbone,
                expr,
                lstm,
                rows,
                head,
                p1: p1.data,
            })
        } else {
            None
        };
        let category = if use_category {
            let (fmap, backbone) = extract_features_traced(image, &w.category_backbone)?;
            let (pmap, head) = category_head_traced(&fmap, &w.category_head)?;
            let (h, lstm, rows) = self.encode_with(&w.text_lstm, seq)?;
            let (ptext, cls) = classify_traced(&w.classifier, &h)?;
            let p2 = fuse(&pmap, &ptext)?.data;
            Some(CategoryState {
                fmap,
                backbone,
                pmap,
                head,
                lstm,
                rows,
                cls,
                ptext,
                p2,
            })
        } else {
            None
        };

        let p1: Option<Vec<f64>> = options
            .p1
            .map(<[f64]>::to_vec)
            .or_else(|| baseline.as_ref().map(|b| b.p1.clone()));
        let p2: Option<Vec<f64>> = options
            .p2
            .map(<[f64]>::to_vec)
            .or_else(|| category.as_ref().map(|c| c.p2.clone()));
        let alpha = w.fusion.alpha();
        let combined: Vec<f64> = match (&p1, &p2, saturation) {
            (Some(a), _, Some(Saturation::First)) => a.clone(),
            (_, Some(b), Some(Saturation::Second)) => b.clone(),
            (Some(a), Some(b), None) => a
                .iter()
                .zip(b)
                .map(|(&x, &y)| combine_value(x, y, alpha))
                .collect(),
            _ => return Err(Error::Config("no active foreground path".into())),
        };
        if combined.len() != target.len() {
            return Err(Error::Config(format!(
                "target has {} cells, prediction has {}",
                target.len(),
                combined.len()
            )));
        }
        let (seg_loss, dp) = bce_loss_values(&combined, target);
        let ce = match (&category, label) {
            (Some(c), Some(label)) if options.ce_weight > 0.0 => {
                Some(cross_entropy_loss(&c.ptext, label)?)
            }
            _ => None,
        };
        Ok(ExampleForward {
            baseline,
            category,
            p1,
            p2,
            seg_loss,
            dp,
            ce,
            ce_weight: options.ce_weight,
            train_backbone: options.train_backbone,
        })
    }

    /// Gradients of the loss computed by [`Model::forward_example`].
    pub(crate) fn backward_example(&self, fw: &ExampleForward) -> (LossParts, Weights) {
        let w = &self.weights;
        let mut grads = self.zero_grads();
        let alpha = w.fusion.alpha();
        let saturation = w.fusion.saturation();
        let (scale1, scale2) = match saturation {
            Some(Saturation::First) => (1.0, 0.0),
            Some(Saturation::Second) => (0.0, 1.0),
            None => (alpha, 1.0 - alpha),
        };
        if let (Some(a), Some(b), None) = (&fw.p1, &fw.p2, saturation) {
            let dalpha: f64 = fw
                .dp
                .iter()
                .zip(a.iter().zip(b))
                .map(|(g, (x, y))| g * (x - y))
                .sum();
            grads.fusion.raw = dalpha * w.fusion.dalpha_draw();
        }

        if let Some(b) = &fw.baseline {
            let d1: Vec<f64> = fw.dp.iter().map(|g| g * scale1).collect();
            let mut dfeat = vec![0.0; b.fmap.data.len()];
            let dexpr = baseline_head_backward(
                &b.fmap,
                &w.baseline_head,
                &b.head,
                &b.expr,
                &d1,
                &mut grads.baseline_head,
                Some(&mut dfeat),
            );
            if fw.train_backbone {
                backbone_backward(
                    &w.baseline_backbone,
                    &b.backbone,
                    &dfeat,
                    &mut grads.baseline_backbone,
                );
            }
            let dxs = lstm_backward(&w.seg_lstm, &b.lstm, &dexpr, &mut grads.seg_lstm);
            self.scatter_word_grads(&b.rows, &dxs, &mut grads);
        }

        if let Some(c) = &fw.category {
            let m = c.pmap.classes;
            let t = c.ptext.probs();
            let mut dpmap = vec![0.0; c.pmap.data.len()];
            let mut dptext = vec![0.0; m];
            for (cell, &g) in fw.dp.iter().enumerate() {
                let g2 = g * scale2;
                let probs = c.pmap.cell(cell);
                for k in 0..m {
                    dpmap[cell * m + k] = g2 * t[k];
                    dptext[k] += g2 * probs[k];
                }
            }
            let mut dfeat = vec![0.0; c.fmap.data.len()];
            category_head_backward(
                &c.fmap,
                &w.category_head,
                &c.head,
                &c.pmap,
                &dpmap,
                &mut grads.category_head,
                Some(&mut dfeat),
            );
            if fw.train_backbone {
                backbone_backward(
                    &w.category_backbone,
                    &c.backbone,
                    &dfeat,
                    &mut grads.category_backbone,
                );
            }
            let mut dlogits = vec![0.0; m];
            crate::nn::softmax_backward(t, &dptext, &mut dlogits);
            if let Some((_, dce)) = &fw.ce {
                for (d, v) in dlogits.iter_mut().zip(dce) {
                    *d += fw.ce_weight * v;
                }
            }
            let dh = classifier_backward(&w.classifier, &c.cls, &dlogits, &mut grads.classifier);
            let dxs = lstm_backward(&w.text_lstm, &c.lstm, &dh, &mut grads.text_lstm);
            self.scatter_word_grads(&c.rows, &dxs, &mut grads);
        }

        (fw.loss(), grads)
    }

    /// Loss and gradients for one training example; see
    /// [`Model::forward_example`] for the loss.
    pub fn example_gradients(
        &self,
        image: &Image,
        seq: &TokenSequence,
        target: &[f64],
        label: Option<usize>,
        options: &GradientOptions,
    ) -> Result<(LossParts, Weights), Error> {
        let fw = self.forward_example(image, seq, target, label, options)?;
        Ok(self.backward_example(&fw))
    }

    /// Per-cell cross-entropy of the category head against per-cell class
    /// distributions (`classes` values per cell); trains the category
    /// backbone and head only.
    pub fn semantic_gradients(
        &self,
        image: &Image,
        targets: &[f64],
    ) -> Result<(f64, Weights), Error> {
        let w = &self.weights;
        let mut grads = self.zero_grads();
        let (fmap, btrace) = extract_features_traced(image, &w.category_backbone)?;
        let (pmap, head) = category_head_traced(&fmap, &w.category_head)?;
        let m = pmap.classes;
        if targets.len() != pmap.cells() * m {
            return Err(Error::Config(format!(
                "class targets have {} values, feature grid needs {}",
                targets.len(),
                pmap.cells() * m
            )));
        }
        let n = pmap.cells() as f64;
        let mut loss = 0.0;
        let mut dlogits = vec![0.0; pmap.data.len()];
        for (cell, target) in targets.chunks(m).enumerate() {
            let dist = ClassDistribution::new(pmap.cell(cell).to_vec())
                .unwrap_or_else(|| ClassDistribution::uniform(m));
            let (l, d) = soft_cross_entropy(&dist, target);
            loss += l / n;
            for (o, v) in dlogits[cell * m..(cell + 1) * m].iter_mut().zip(d) {
                *o = v / n;
            }
        }
        let mut dfeat = vec![0.0; fmap.data.len()];
        category_head_backward_logits(
            &fmap,
            &w.category_head,
            &head,
            &dlogits,
            &mut grads.category_head,
            Some(&mut dfeat),
        );
        backbone_backward(
            &w.category_backbone,
            &btrace,
            &dfeat,
            &mut grads.category_backbone,
        );
        Ok((loss, grads))
    }

    /// Cross-entropy gradients of the text classifier alone.
    pub fn classifier_gradients(
        &self,
        seq: &TokenSequence,
        label: usize,
    ) -> Result<(f64, Weights), Error> {
        let w = &self.weights;
        let mut grads = self.zero_grads();
        let (h, lstm, rows) = self.encode_with(&w.text_lstm, seq)?;
        let (ptext, cls) = classify_traced(&w.classifier, &h)?;
        let (loss, dlogits) = cross_entropy_loss(&ptext, label)?;
        let dh = classifier_backward(&w.classifier, &cls, &dlogits, &mut grads.classifier);
        let dxs = lstm_backward(&w.text_lstm, &lstm, &dh, &mut grads.text_lstm);
        self.scatter_word_grads(&rows, &dxs, &mut grads);
        Ok((loss, grads))
    }
}

pub(crate) struct BaselineState {
    fmap: FeatureMap,
    backbone: BackboneTrace,
    expr: Vec<f64>,
    lstm: LstmTrace,
    rows: Vec<Option<usize>>,
    head: BaselineTrace,
    p1: Vec<f64>,
}

pub(crate) struct CategoryState {
    fmap: FeatureMap,
    backbone: BackboneTrace,
    pmap: ProbabilityMap,
    head: CategoryTrace,
    lstm: LstmTrace,
    rows: Vec<Option<usize>>,
    cls: ClassifierTrace,
    ptext: ClassDistribution,
    p2: Vec<f64>,
}

pub(crate) struct ExampleForward {
    baseline: Option<BaselineState>,
    category: Option<CategoryState>,
    p1: Option<Vec<f64>>,
    p2: Option<Vec<f64>>,
    seg_loss: f64,
    dp: Vec<f64>,
    ce: Option<(f64, Vec<f64>)>,
    ce_weight: f64,
    train_backbone: bool,
}

impl ExampleForward {
    pub(crate) fn loss(&self) -> LossParts {
        LossParts {
            segmentation: self.seg_loss,
            classification: self.ce.as_ref().map_or(0.0, |(l, _)| self.ce_weight * l),
        }
    }

    /// Hash of which rectified units are active anywhere in the pass.
    pub(crate) fn activation_pattern(&self) -> u64 {
        let mut hash = crate::nn::PATTERN_SEED;
        if let Some(b) = &self.baseline {
            b.backbone.fold_pattern(&mut hash);
            b.head.fold_pattern(&mut hash);
        }
        if let Some(c) = &self.category {
            c.backbone.fold_pattern(&mut hash);
            c.head.fold_pattern(&mut hash);
            c.cls.fold_pattern(&mut hash);
        }
        hash
    }
}

/// Options for [`Model::example_gradients`].
#[derive(Clone, Debug)]
pub struct GradientOptions<'a> {
    pub ce_weight: f64,
    pub train_backbone: bool,
    /// Replaces the expression-conditioned map (grid resolution).
    pub p1: Option<&'a [f64]>,
    /// Replaces the category-fusion map (grid resolution).
    pub p2: Option<&'a [f64]>,
}

impl Default for GradientOptions<'_> {
    fn default() -> Self {
        Self {
            ce_weight: 1.0,
            train_backbone: true,
            p1: None,
            p2: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub segmentation: f64,
    pub classification: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.segmentation + self.classification
    }
}
