//! Losses, the optimizer, gradient checks, and the training entry points.

pub mod ablation;
pub mod classifier;
pub mod gradcheck;
pub mod loss;
pub mod sgd;

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use rand::RngExt;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingTable;
use crate::encoder::{tokenize, TokenSequence};
use crate::metrics::evaluate_model;
use crate::model::{GradientOptions, Model, ModelConfig, Paths, Weights};
use crate::nn::Params;
use crate::segment::backbone::conv_out;
use crate::segment::fusion::{class_coverage_grid, coverage_grid};
use crate::segment::{FusionWeight, Image};
use crate::synth::{derive_seed, mix_datasets, rng_from_seed, ClassCatalog, Sample, StreamEntry};
use crate::Error;

pub use sgd::{sgd_step, Sgd};

/// Which side the α probe feeds with a near-perfect map; the other side
/// gets uniform noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeOracle {
    Baseline,
    Category,
}

/// Learning rate over the epochs of one training phase.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// Decays linearly from the base rate; epoch `e` of `n` uses
    /// `lr * (n - e) / n`.
    #[default]
    Linear,
}

impl LrSchedule {
    pub fn rate(self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Linear => base * (epochs - epoch.min(epochs)) as f64 / epochs.max(1) as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lr_schedule: LrSchedule,
    pub momentum: f64,
    /// Joint training epochs.
    pub epochs: usize,
    /// Epochs of category-head and classifier pretraining before joint
    /// training (category path only).
    pub pretrain_epochs: usize,
    /// Epochs of baseline-path training before joint training.
    pub baseline_epochs: usize,
    /// Base rate for every pretraining phase.
    pub pretrain_learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of synthesized samples in the training stream.
    pub mix_ratio: f64,
    /// Weight of the classifier cross-entropy relative to the
    /// segmentation loss.
    pub ce_weight: f64,
    pub pretrained_embedding: bool,
    pub synthesized_expressions: bool,
    pub category_path: bool,
    pub baseline_path: bool,
    /// Replaces both foreground maps with an oracle and a noise map so
    /// only α learns.
    pub probe: Option<ProbeOracle>,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            lr_schedule: LrSchedule::Linear,
            momentum: 0.9,
            epochs: 5,
            pretrain_epochs: 20,
            baseline_epochs: 60,
            pretrain_learning_rate: 0.1,
            batch_size: 2,
            seed: 0,
            mix_ratio: 0.5,
            ce_weight: 1.0,
            pretrained_embedding: true,
            synthesized_expressions: true,
            category_path: true,
            baseline_path: true,
            probe: None,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return bad("learning_rate must be positive");
        }
        if !self.pretrain_learning_rate.is_finite() || self.pretrain_learning_rate <= 0.0 {
            return bad("pretrain_learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.mix_ratio) {
            return bad("mix_ratio must lie in [0, 1]");
        }
        if self.ce_weight < 0.0 {
            return bad("ce_weight must be non-negative");
        }
        if !self.baseline_path && !self.category_path {
            return bad("at least one of baseline_path and category_path must be on");
        }
        if self.probe.is_some() && !(self.baseline_path && self.category_path) {
            return bad("the alpha probe needs both paths");
        }
        if !(self.model.threshold > 0.0 && self.model.threshold < 1.0) {
            return bad("threshold must lie strictly inside (0, 1)");
        }
        Ok(())
    }

    pub fn paths(&self) -> Paths {
        match (self.baseline_path, self.category_path) {
            (true, true) => Paths::Full,
            (true, false) => Paths::Baseline,
            _ => Paths::Category,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_overall_iou: Option<f64>,
    pub alpha: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    /// One JSON object per epoch, newline-terminated.
    pub fn to_json_lines(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("plain data") + "\n")
            .collect()
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.alpha).collect()
    }
}

/// Everything a training run reads.
#[derive(Clone, Debug)]
pub struct TrainData {
    /// Samples with referring expressions.
    pub referring: Vec<Sample>,
    /// One sample per annotated region; the expression is the class name.
    pub regions: Vec<Sample>,
    pub catalog: ClassCatalog,
    /// Pretrained word vectors, required when `pretrained_embedding` is on.
    pub vectors: Option<Arc<EmbeddingTable>>,
    /// Held-out samples scored after every epoch.
    pub validation: Vec<Sample>,
}

#[derive(Clone, Debug)]
struct Example {
    image: Arc<Image>,
    tokens: TokenSequence,
    target: Vec<f64>,
    label: Option<usize>,
}

fn grid_of(image: &Image) -> (usize, usize) {
    (
        conv_out(conv_out(image.height())),
        conv_out(conv_out(image.width())),
    )
}

/// Half-width of the pixel window a grid cell's training target averages;
/// a cell's anchors sit four pixels apart.
const TARGET_RADIUS: usize = 2;

fn prepare(sample: &Sample) -> Result<Example, Error> {
    let (gh, gw) = grid_of(&sample.image);
    let target = coverage_grid(&sample.gt_mask, gh, gw, TARGET_RADIUS);
    Ok(Example {
        image: sample.image.clone(),
        tokens: tokenize(&sample.expression)?,
        target,
        label: sample.class_label,
    })
}

/// Per-image class frequency grids built from region samples; images are
/// identified by their shared allocation.
fn semantic_grids(
    regions: &[Sample],
    background: usize,
    classes: usize,
) -> Vec<(Arc<Image>, Vec<f64>)> {
    let mut order: Vec<(Arc<Image>, Vec<usize>)> = Vec::new();
    let mut index: HashMap<*const Image, usize> = HashMap::new();
    for s in regions {
        let Some(class) = s.class_label else { continue };
        let key = Arc::as_ptr(&s.image);
        let slot = *index.entry(key).or_insert_with(|| {
            let n = s.image.height() * s.image.width();
            order.push((s.image.clone(), vec![background; n]));
            order.len() - 1
        });
        for (l, &m) in order[slot].1.iter_mut().zip(&s.gt_mask.data) {
            if m == 1 {
                *l = class;
            }
        }
    }
    order
        .into_iter()
        .map(|(image, labels)| {
            let (gh, gw) = grid_of(&image);
            let grid = class_coverage_grid(
                &labels,
                image.height(),
                image.width(),
                gh,
                gw,
                TARGET_RADIUS,
                classes,
            );
            (image, grid)
        })
        .collect()
}

/// Word table learned from scratch over the training vocabulary.
fn learned_vocabulary(
    examples: &[&Example],
    dimension: usize,
    seed: u64,
) -> Result<EmbeddingTable, Error> {
    let vocab: BTreeSet<&str> = examples
        .iter()
        .flat_map(|e| e.tokens.tokens().iter().map(String::as_str))
        .collect();
    let mut rng = rng_from_seed(seed);
    let scale = (3.0 / dimension as f64).sqrt();
    let tokens: Vec<String> = vocab.into_iter().map(str::to_string).collect();
    let rows = tokens
        .iter()
        .map(|_| {
            (0..dimension)
                .map(|_| rng.random_range(-scale..scale))
                .collect()
        })
        .collect();
    Ok(EmbeddingTable::from_rows(tokens, rows)?)
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool, Error> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker threads: {e}")))
}

/// Sums per-item results in input order, so the total does not depend on
/// how work was split across threads.
fn ordered_sum(model: &Model, parts: Vec<(f64, Weights)>) -> (f64, Weights) {
    let mut total = model.zero_grads();
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        total.add_scaled(&g, 1.0);
    }
    (loss, total)
}

struct Optimizer {
    sgd: Sgd<Weights>,
    learn_embedding: bool,
}

impl Optimizer {
    fn new(model: &Model, config: &TrainConfig) -> Self {
        Self {
            sgd: Sgd::new(&model.weights, config.learning_rate, config.momentum),
            learn_embedding: model.learn_embedding,
        }
    }

    /// Averages the summed gradient over the batch and applies one step.
    fn step(&mut self, model: &mut Model, mut grads: Weights, batch: usize) -> Result<(), Error> {
        let scale = 1.0 / batch as f64;
        for b in grads.blocks_mut() {
            b.iter_mut().for_each(|v| *v *= scale);
        }
        if !self.learn_embedding {
            grads.word_vectors.clear();
        }
        self.sgd.step(&mut model.weights, &grads)?;
        if !model.weights.all_finite() {
            return Err(Error::Diverged);
        }
        Ok(())
    }
}

fn noise_map(seed: u64, cells: usize) -> Vec<f64> {
    let mut rng = rng_from_seed(seed);
    (0..cells).map(|_| rng.random::<f64>()).collect()
}

fn oracle_map(target: &[f64]) -> Vec<f64> {
    target.iter().map(|&y| y.clamp(0.05, 0.95)).collect()
}

/// Trains the configured model. Deterministic in `config` and `data`;
/// `jobs` only sets how many threads compute per-sample gradients.
pub fn train_full(
    config: &TrainConfig,
    data: &TrainData,
    jobs: usize,
) -> Result<(Model, TrainHistory), Error> {
    config.validate()?;
    if data.referring.is_empty() && !(config.synthesized_expressions && !data.regions.is_empty()) {
        return Err(Error::Config("no training samples".into()));
    }
    let paths = config.paths();
    if data.catalog.len() != config.model.classes {
        return Err(Error::Config(format!(
            "catalog has {} classes, model expects {}",
            data.catalog.len(),
            config.model.classes
        )));
    }
    let pool = thread_pool(jobs)?;

    let referring: Vec<Example> = data
        .referring
        .iter()
        .map(prepare)
        .collect::<Result<_, _>>()?;
    let synthesized: Vec<Example> = if config.synthesized_expressions {
        data.regions.iter().map(prepare).collect::<Result<_, _>>()?
    } else {
        Vec::new()
    };

    let (table, learn) = if config.pretrained_embedding {
        let table = data.vectors.clone().ok_or_else(|| {
            Error::Config("pretrained_embedding is on but no word vectors were given".into())
        })?;
        (table, false)
    } else {
        let all: Vec<&Example> = referring.iter().chain(&synthesized).collect();
        let table = learned_vocabulary(&all, config.model.embed_dim, derive_seed(config.seed, 1))?;
        (Arc::new(table), true)
    };
    let checksum = table.checksum();

    let mut init_rng = rng_from_seed(derive_seed(config.seed, 2));
    let mut model = Model::new(config.model.clone(), paths, table, learn, &mut init_rng)?;

    if paths.uses_category() && config.probe.is_none() {
        pretrain_category(config, data, &mut model, &pool)?;
        let labelled: Vec<&Example> = referring
            .iter()
            .chain(&synthesized)
            .filter(|e| e.label.is_some())
            .collect();
        pretrain_classifier(config, &labelled, &mut model, &pool)?;
    }

    let examples = Examples {
        referring: &referring,
        synthesized: &synthesized,
    };
    if paths.uses_baseline() && config.probe.is_none() && config.baseline_epochs > 0 {
        pretrain_baseline(config, examples, &mut model, &pool)?;
    }

    let mut history = TrainHistory::default();
    let mut opt = Optimizer::new(&model, config);
    for epoch in 0..config.epochs {
        opt.sgd.lr = config
            .lr_schedule
            .rate(config.learning_rate, epoch, config.epochs);
        let epoch_seed = derive_seed(derive_seed(config.seed, 3), epoch as u64);
        let (epoch_loss, count) = stream_epoch(
            config,
            examples,
            &mut model,
            &mut opt,
            epoch_seed,
            &pool,
            config.ce_weight,
        )?;

        model.sync_embedding();
        let val = if data.validation.is_empty() {
            None
        } else {
            Some(evaluate_model(&model, &data.validation, jobs)?.overall_iou)
        };
        history.epochs.push(EpochRecord {
            epoch: epoch + 1,
            loss: epoch_loss / count.max(1) as f64,
            val_overall_iou: val,
            alpha: model.alpha(),
        });
    }

    if !learn && model.embedding.checksum() != checksum {
        return Err(Error::Config(
            "fixed word vectors changed during training".into(),
        ));
    }
    Ok((model, history))
}

#[derive(Clone, Copy)]
struct Examples<'a> {
    referring: &'a [Example],
    synthesized: &'a [Example],
}

/// One pass over a freshly mixed stream; returns the summed loss and the
/// stream length.
fn stream_epoch(
    config: &TrainConfig,
    examples: Examples<'_>,
    model: &mut Model,
    opt: &mut Optimizer,
    epoch_seed: u64,
    pool: &rayon::ThreadPool,
    ce_weight: f64,
) -> Result<(f64, usize), Error> {
    let Examples {
        referring,
        synthesized,
    } = examples;
    let stream: Vec<&Example> = if synthesized.is_empty() {
        mix_datasets(referring.len(), 0, 0.0, epoch_seed)
    } else {
        mix_datasets(
            referring.len(),
            synthesized.len(),
            config.mix_ratio,
            epoch_seed,
        )
    }
    .into_iter()
    .map(|e| match e {
        StreamEntry::Referring(i) => &referring[i],
        StreamEntry::Synthesized(i) => &synthesized[i],
    })
    .collect();

    let mut total = 0.0;
    for (b, batch) in stream.chunks(config.batch_size).enumerate() {
        let snapshot = &*model;
        let parts: Vec<(f64, Weights)> = pool.install(|| {
            batch
                .par_iter()
                .enumerate()
                .map(|(k, ex)| {
                    let probe_maps = config.probe.map(|oracle| {
                        let noise = noise_map(
                            derive_seed(epoch_seed, (b * config.batch_size + k) as u64),
                            ex.target.len(),
                        );
                        let good = oracle_map(&ex.target);
                        match oracle {
                            ProbeOracle::Baseline => (good, noise),
                            ProbeOracle::Category => (noise, good),
                        }
                    });
                    let options = GradientOptions {
                        ce_weight,
                        train_backbone: true,
                        p1: probe_maps.as_ref().map(|m| m.0.as_slice()),
                        p2: probe_maps.as_ref().map(|m| m.1.as_slice()),
                    };
                    snapshot
                        .example_gradients(&ex.image, &ex.tokens, &ex.target, ex.label, &options)
                        .map(|(loss, g)| (loss.total(), g))
                })
                .collect::<Result<Vec<_>, Error>>()
        })?;
        let (loss, grads) = ordered_sum(model, parts);
        total += loss;
        opt.step(model, grads, batch.len())?;
    }
    model.sync_embedding();
    Ok((total, stream.len()))
}

/// Trains the expression-conditioned path on its own, with α pinned to
/// one, so joint training starts from two working paths.
fn pretrain_baseline(
    config: &TrainConfig,
    examples: Examples<'_>,
    model: &mut Model,
    pool: &rayon::ThreadPool,
) -> Result<(), Error> {
    let fusion = model.weights.fusion;
    model.weights.fusion = FusionWeight::first_only();
    let mut opt = Optimizer::new(model, config);
    for epoch in 0..config.baseline_epochs {
        opt.sgd.lr =
            config
                .lr_schedule
                .rate(config.pretrain_learning_rate, epoch, config.baseline_epochs);
        let seed = derive_seed(derive_seed(config.seed, 8), epoch as u64);
        stream_epoch(config, examples, model, &mut opt, seed, pool, 0.0)?;
    }
    model.weights.fusion = fusion;
    Ok(())
}

/// Trains the expression-conditioned path alone.
pub fn train_baseline(
    config: &TrainConfig,
    data: &TrainData,
    jobs: usize,
) -> Result<(Model, TrainHistory), Error> {
    let config = TrainConfig {
        category_path: false,
        baseline_path: true,
        probe: None,
        ..config.clone()
    };
    train_full(&config, data, jobs)
}

/// Per-cell class supervision of the backbone and category head from
/// region annotations.
fn pretrain_category(
    config: &TrainConfig,
    data: &TrainData,
    model: &mut Model,
    pool: &rayon::ThreadPool,
) -> Result<(), Error> {
    let background = data
        .catalog
        .background()
        .ok_or_else(|| Error::Config("the category path needs a background class".into()))?;
    let grids = semantic_grids(&data.regions, background, data.catalog.len());
    if grids.is_empty() {
        return Ok(());
    }
    let mut opt = Optimizer::new(model, config);
    for epoch in 0..config.pretrain_epochs {
        opt.sgd.lr =
            config
                .lr_schedule
                .rate(config.pretrain_learning_rate, epoch, config.pretrain_epochs);
        let mut order: Vec<usize> = (0..grids.len()).collect();
        let mut rng = rng_from_seed(derive_seed(derive_seed(config.seed, 4), epoch as u64));
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for batch in order.chunks(config.batch_size) {
            let snapshot = &*model;
            let parts = pool.install(|| {
                batch
                    .par_iter()
                    .map(|&i| snapshot.semantic_gradients(&grids[i].0, &grids[i].1))
                    .collect::<Result<Vec<_>, Error>>()
            })?;
            let (_, grads) = ordered_sum(model, parts);
            opt.step(model, grads, batch.len())?;
        }
    }
    Ok(())
}

fn pretrain_classifier(
    config: &TrainConfig,
    labelled: &[&Example],
    model: &mut Model,
    pool: &rayon::ThreadPool,
) -> Result<(), Error> {
    if labelled.is_empty() {
        return Ok(());
    }
    let mut opt = Optimizer::new(model, config);
    for epoch in 0..config.pretrain_epochs {
        opt.sgd.lr =
            config
                .lr_schedule
                .rate(config.pretrain_learning_rate, epoch, config.pretrain_epochs);
        let mut order: Vec<usize> = (0..labelled.len()).collect();
        let mut rng = rng_from_seed(derive_seed(derive_seed(config.seed, 5), epoch as u64));
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for batch in order.chunks(config.batch_size) {
            let snapshot = &*model;
            let parts = pool.install(|| {
                batch
                    .par_iter()
                    .map(|&i| {
                        let ex = labelled[i];
                        let label = ex.label.expect("filtered to labelled samples");
                        snapshot.classifier_gradients(&ex.tokens, label)
                    })
                    .collect::<Result<Vec<_>, Error>>()
            })?;
            let (_, grads) = ordered_sum(model, parts);
            opt.step(model, grads, batch.len())?;
        }
    }
    model.sync_embedding();
    Ok(())
}
