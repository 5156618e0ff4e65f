//! Per-sample IoU, precision at IoU thresholds, and cumulative overall IoU.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::Model;
use crate::segment::BinaryMask;
use crate::synth::Sample;
use crate::Error;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("mask shapes differ: prediction {pred:?}, ground truth {gt:?}")]
    ShapeMismatch {
        pred: (usize, usize),
        gt: (usize, usize),
    },
    #[error("ground-truth mask is empty")]
    EmptyGroundTruth,
    #[error("no samples to score")]
    EmptyList,
    #[error("threshold {0} must lie strictly inside (0, 1)")]
    BadThreshold(f64),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IoUStat {
    pub intersection: u64,
    pub union: u64,
}

impl IoUStat {
    pub fn value(&self) -> f64 {
        self.intersection as f64 / self.union as f64
    }
}

pub fn iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<(IoUStat, f64), MetricsError> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(MetricsError::ShapeMismatch {
            pred: (pred.height, pred.width),
            gt: (gt.height, gt.width),
        });
    }
    let mut inter = 0u64;
    let mut union = 0u64;
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        inter += u64::from(p & g);
        union += u64::from(p | g);
    }
    if gt.is_empty() {
        return Err(MetricsError::EmptyGroundTruth);
    }
    let stat = IoUStat {
        intersection: inter,
        union,
    };
    Ok((stat, stat.value()))
}

/// Fraction of IoUs strictly above `theta`.
pub fn precision_at(ious: &[f64], theta: f64) -> Result<f64, MetricsError> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(MetricsError::BadThreshold(theta));
    }
    if ious.is_empty() {
        return Err(MetricsError::EmptyList);
    }
    let hits = ious.iter().filter(|&&v| v > theta).count();
    Ok(hits as f64 / ious.len() as f64)
}

/// Summed intersections over summed unions.
pub fn overall_iou(stats: &[IoUStat]) -> Result<f64, MetricsError> {
    if stats.is_empty() {
        return Err(MetricsError::EmptyList);
    }
    let inter: u64 = stats.iter().map(|s| s.intersection).sum();
    let union: u64 = stats.iter().map(|s| s.union).sum();
    Ok(inter as f64 / union as f64)
}

pub const THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub prec_05: f64,
    pub prec_06: f64,
    pub prec_07: f64,
    pub prec_08: f64,
    pub prec_09: f64,
    pub overall_iou: f64,
}

pub const COLUMNS: [&str; 6] = [
    "prec@0.5",
    "prec@0.6",
    "prec@0.7",
    "prec@0.8",
    "prec@0.9",
    "overall IoU",
];

impl MetricsReport {
    pub fn from_stats(stats: &[IoUStat]) -> Result<Self, MetricsError> {
        let ious: Vec<f64> = stats.iter().map(IoUStat::value).collect();
        let p = THRESHOLDS
            .iter()
            .map(|&t| precision_at(&ious, t))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            n: stats.len(),
            prec_05: p[0],
            prec_06: p[1],
            prec_07: p[2],
            prec_08: p[3],
            prec_09: p[4],
            overall_iou: overall_iou(stats)?,
        })
    }

    /// The six metric columns in table order.
    pub fn values(&self) -> [f64; 6] {
        [
            self.prec_05,
            self.prec_06,
            self.prec_07,
            self.prec_08,
            self.prec_09,
            self.overall_iou,
        ]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain data")
    }

    /// Percentages with two decimals, one row per `(label, report)`.
    pub fn table(rows: &[(String, MetricsReport)]) -> String {
        let label_width = rows
            .iter()
            .map(|(l, _)| l.chars().count())
            .max()
            .unwrap_or(0)
            .max("method".len());
        let mut out = format!("{:<label_width$}", "method");
        for c in COLUMNS {
            write!(out, " | {c:>11}").unwrap();
        }
        out.push('\n');
        out.push_str(&"-".repeat(label_width + COLUMNS.len() * 14));
        out.push('\n');
        for (label, r) in rows {
            write!(out, "{label:<label_width$}").unwrap();
            for v in r.values() {
                write!(out, " | {:>10.2}%", 100.0 * v).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Scores `predict` on every sample. Per-sample work may run on `jobs`
/// threads; counts are combined in sample order.
pub fn evaluate_with<F>(samples: &[Sample], jobs: usize, predict: F) -> Result<MetricsReport, Error>
where
    F: Fn(&Sample) -> Result<BinaryMask, Error> + Sync,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker threads: {e}")))?;
    let stats: Vec<IoUStat> = pool.install(|| {
        samples
            .par_iter()
            .map(|s| Ok(iou(&predict(s)?, &s.gt_mask)?.0))
            .collect::<Result<Vec<_>, Error>>()
    })?;
    Ok(MetricsReport::from_stats(&stats)?)
}

pub fn evaluate_model(
    model: &Model,
    samples: &[Sample],
    jobs: usize,
) -> Result<MetricsReport, Error> {
    evaluate_with(samples, jobs, |s| {
        Ok(model.predict(&s.image, &s.expression)?.mask)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(w: usize, on: &[usize]) -> BinaryMask {
        let mut m = BinaryMask::empty(1, w);
        for &i in on {
            m.data[i] = 1;
        }
        m
    }

    #[test]
    fn iou_examples() {
        let gt = mask(8, &[0, 1, 2, 3]);
        assert_eq!(iou(&gt, &gt).unwrap().1, 1.0);
        assert_eq!(iou(&mask(8, &[5, 6]), &gt).unwrap().1, 0.0);
        let (stat, v) = iou(&mask(8, &[2, 3, 4, 5]), &gt).unwrap();
        assert_eq!(
            stat,
            IoUStat {
                intersection: 2,
                union: 6
            }
        );
        assert_eq!(v, 2.0 / 6.0);
        assert_eq!(iou(&gt, &mask(8, &[])), Err(MetricsError::EmptyGroundTruth));
        assert!(matches!(
            iou(&mask(7, &[1]), &gt),
            Err(MetricsError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn precision_examples() {
        assert_eq!(precision_at(&[0.6, 0.4, 0.9], 0.5).unwrap(), 2.0 / 3.0);
        assert_eq!(precision_at(&[0.7, 0.7], 0.7).unwrap(), 0.0);
        assert_eq!(precision_at(&[1.0, 1.0], 0.9).unwrap(), 1.0);
        assert_eq!(precision_at(&[], 0.5), Err(MetricsError::EmptyList));
        assert_eq!(
            precision_at(&[0.5], 1.0),
            Err(MetricsError::BadThreshold(1.0))
        );
    }

    #[test]
    fn overall_is_cumulative() {
        let stats = [
            IoUStat {
                intersection: 2,
                union: 6,
            },
            IoUStat {
                intersection: 3,
                union: 3,
            },
        ];
        assert_eq!(overall_iou(&stats).unwrap(), 5.0 / 9.0);
        let mean = stats.iter().map(IoUStat::value).sum::<f64>() / 2.0;
        assert!((mean - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(overall_iou(&stats[..1]).unwrap(), 2.0 / 6.0);
        assert_eq!(overall_iou(&[]), Err(MetricsError::EmptyList));
    }

    #[test]
    fn report_json_keys() {
        let r = MetricsReport::from_stats(&[IoUStat {
            intersection: 3,
            union: 4,
        }])
        .unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        assert_eq!(
            keys,
            [
                "n",
                "overall_iou",
                "prec_05",
                "prec_06",
                "prec_07",
                "prec_08",
                "prec_09"
            ]
        );
        assert_eq!(r.prec_07, 1.0);
        assert_eq!(r.prec_08, 0.0);
    }
}
