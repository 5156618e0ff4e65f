//! Component ablation: the same data and seeds trained under five
//! component settings, each scored on a test set.

use serde::{Deserialize, Serialize};

use crate::metrics::{evaluate_model, MetricsReport};
use crate::synth::Sample;
use crate::train::{train_full, TrainConfig, TrainData};
use crate::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    pub pretrained_embedding: bool,
    pub synthesized_expressions: bool,
    pub category_path: bool,
    pub baseline_path: bool,
}

impl Toggles {
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            pretrained_embedding: self.pretrained_embedding,
            synthesized_expressions: self.synthesized_expressions,
            category_path: self.category_path,
            baseline_path: self.baseline_path,
            probe: None,
            ..base.clone()
        }
    }
}

/// Row names and settings, in report order.
pub const ROWS: [(&str, Toggles); 5] = [
    (
        "baseline",
        Toggles {
            pretrained_embedding: false,
            synthesized_expressions: false,
            category_path: false,
            baseline_path: true,
        },
    ),
    (
        "+embedding",
        Toggles {
            pretrained_embedding: true,
            synthesized_expressions: false,
            category_path: false,
            baseline_path: true,
        },
    ),
    (
        "+embedding+synthesized",
        Toggles {
            pretrained_embedding: true,
            synthesized_expressions: true,
            category_path: false,
            baseline_path: true,
        },
    ),
    (
        "category-only",
        Toggles {
            pretrained_embedding: true,
            synthesized_expressions: true,
            category_path: true,
            baseline_path: false,
        },
    ),
    (
        "full",
        Toggles {
            pretrained_embedding: true,
            synthesized_expressions: true,
            category_path: true,
            baseline_path: true,
        },
    ),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub toggles: Toggles,
    pub runs: Vec<SeedResult>,
    /// Column-wise median over seeds.
    pub median: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn table(&self) -> String {
        let rows: Vec<(String, MetricsReport)> = self
            .rows
            .iter()
            .map(|r| (r.name.clone(), r.median))
            .collect();
        MetricsReport::table(&rows)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data")
    }
}

/// Lower median of `values`.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v[(v.len() - 1) / 2]
}

pub fn median_report(reports: &[MetricsReport]) -> MetricsReport {
    let col = |f: fn(&MetricsReport) -> f64| median(&reports.iter().map(f).collect::<Vec<_>>());
    MetricsReport {
        n: reports[0].n,
        prec_05: col(|r| r.prec_05),
        prec_06: col(|r| r.prec_06),
        prec_07: col(|r| r.prec_07),
        prec_08: col(|r| r.prec_08),
        prec_09: col(|r| r.prec_09),
        overall_iou: col(|r| r.overall_iou),
    }
}

/// Trains and scores one configuration per seed.
pub fn run_row(
    config: &TrainConfig,
    data: &TrainData,
    test: &[Sample],
    seeds: &[u64],
    jobs: usize,
) -> Result<Vec<SeedResult>, Error> {
    seeds
        .iter()
        .map(|&seed| {
            let cfg = TrainConfig {
                seed,
                ..config.clone()
            };
            let (model, _) = train_full(&cfg, data, jobs)?;
            Ok(SeedResult {
                seed,
                report: evaluate_model(&model, test, jobs)?,
            })
        })
        .collect()
}

pub fn ablation_runs(
    base: &TrainConfig,
    data: &TrainData,
    test: &[Sample],
    seeds: &[u64],
    jobs: usize,
) -> Result<AblationReport, Error> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    if test.is_empty() {
        return Err(Error::Config("ablation needs test samples".into()));
    }
    let mut rows = Vec::with_capacity(ROWS.len());
    for (name, toggles) in ROWS {
        let runs = run_row(&toggles.apply(base), data, test, seeds, jobs)?;
        let reports: Vec<MetricsReport> = runs.iter().map(|r| r.report).collect();
        rows.push(AblationRow {
            name: name.to_string(),
            toggles,
            median: median_report(&reports),
            runs,
        });
    }
    Ok(AblationReport { rows })
}
