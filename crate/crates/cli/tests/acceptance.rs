//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `cargo test --release --test acceptance` runs everything; numeric
//! arguments after `--` pick criteria (`-- 1 4 9`). Failures are reported,
//! not turned into a failing exit status, unless `ACCEPTANCE_STRICT` is set.

use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::RngExt;
use refseg_core::dataset::{generate_dataset, GeneratedDataset, SynthConfig};
use refseg_core::encoder::ClassDistribution;
use refseg_core::metrics::{iou, overall_iou, precision_at, IoUStat, MetricsReport};
use refseg_core::model::{Model, ModelConfig, Paths};
use refseg_core::synth::vectors::{random_unit, shape_world_vectors, VectorSpec};
use refseg_core::synth::{rng_from_seed, Rng64, Sample};
use refseg_core::train::ablation::{median, median_report, run_row, ROWS};
use refseg_core::train::classifier::train_classifier;
use refseg_core::train::gradcheck::{grad_check_suite, TOLERANCE};
use refseg_core::train::{train_full, ProbeOracle, TrainData};
use refseg_core::{
    combine, fuse, BinaryMask, EmbeddingTable, ForegroundMap, FusionWeight, ProbabilityMap,
    TrainConfig,
};

const SEEDS: [u64; 3] = [0, 1, 2];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn random_simplex(rng: &mut Rng64, m: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..m)
        .map(|_| -rng.random::<f64>().max(1e-300).ln())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

fn random_mask(rng: &mut Rng64, h: usize, w: usize, density: f64) -> BinaryMask {
    let data = (0..h * w)
        .map(|_| u8::from(rng.random::<f64>() < density))
        .collect();
    BinaryMask::new(h, w, data).unwrap()
}

fn gradient_fidelity() -> Verdict {
    let start = Instant::now();
    let suite = grad_check_suite(100, 7);
    let elapsed = start.elapsed();
    let mut parts = Vec::new();
    let mut over = 0;
    for (piece, r) in &suite {
        over += r.over_tolerance;
        parts.push(format!(
            "{}: {} checked, {} over {TOLERANCE:e} ({} within rounding), max {:.1e}",
            piece.name(),
            r.checked,
            r.over_tolerance,
            r.roundoff_limited,
            r.max_rel_error
        ));
    }
    let pass = over == 0 && elapsed < Duration::from_secs(120);
    verdict(
        pass,
        format!("{:.1}s; {}", elapsed.as_secs_f64(), parts.join("; ")),
    )
}

fn fusion_exactness() -> Verdict {
    let mut rng = rng_from_seed(21);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let m = rng.random_range(2..=9);
        let (h, w) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let cells: Vec<f64> = (0..h * w)
            .flat_map(|_| random_simplex(&mut rng, m))
            .collect();
        let pmap = ProbabilityMap::new(h, w, m, cells).unwrap();
        let t = random_simplex(&mut rng, m);
        let fused = fuse(&pmap, &ClassDistribution::new(t.clone()).unwrap()).unwrap();
        for c in 0..h * w {
            let mut dot = 0.0;
            for k in 0..m {
                dot += pmap.data[c * m + k] * t[k];
            }
            worst = worst.max((dot - fused.data[c]).abs());
        }
    }
    let mut violations = 0;
    for _ in 0..100_000 {
        let m = rng.random_range(2..=9);
        let cell = random_simplex(&mut rng, m);
        let t = random_simplex(&mut rng, m);
        let pmap = ProbabilityMap::new(1, 1, m, cell).unwrap();
        let bound = t.iter().copied().fold(0.0, f64::max);
        let v = fuse(&pmap, &ClassDistribution::new(t).unwrap())
            .unwrap()
            .data[0];
        if v > bound {
            violations += 1;
        }
    }
    let pmap = ProbabilityMap::new(1, 1, 2, vec![0.99, 0.01]).unwrap();
    let scenario = fuse(&pmap, &ClassDistribution::new(vec![0.99, 0.01]).unwrap())
        .unwrap()
        .data[0];
    let pass = worst <= 1e-12 && violations == 0 && scenario == 0.9802;
    verdict(
        pass,
        format!(
            "max recompute diff {worst:.1e}, bound violations {violations}/100000, scenario {scenario}"
        ),
    )
}

fn small_model(seed: u64) -> (Model, refseg_core::Image) {
    let mut rng = rng_from_seed(seed);
    let words = ["circle", "left", "square"];
    let rows: Vec<Vec<f64>> = words.iter().map(|_| random_unit(&mut rng, 4)).collect();
    let table =
        EmbeddingTable::from_rows(words.iter().map(|w| w.to_string()).collect(), rows).unwrap();
    let config = ModelConfig {
        embed_dim: 4,
        lstm_hidden: 4,
        mlp_hidden: 5,
        classes: 3,
        conv_channels: 3,
        feature_channels: 4,
        head_hidden: 5,
        category_hidden: 5,
        threshold: 0.5,
    };
    let model = Model::new(config, Paths::Full, Arc::new(table), false, &mut rng).unwrap();
    let pixels: Vec<f64> = (0..20 * 17 * 3).map(|_| rng.random::<f64>()).collect();
    (model, refseg_core::Image::new(20, 17, pixels).unwrap())
}

fn combination_exactness() -> Verdict {
    let p1 = ForegroundMap::new(1, 1, vec![0.8]).unwrap();
    let p2 = ForegroundMap::new(1, 1, vec![0.4]).unwrap();
    let half = combine(&p1, &p2, FusionWeight::new(0.0)).unwrap().data[0];
    let mut rng = rng_from_seed(33);
    let mut worst: f64 = (half - 0.6).abs();
    for _ in 0..10_000 {
        let (a, b) = (rng.random::<f64>(), rng.random::<f64>());
        let w = FusionWeight::new(rng.random_range(-8.0..8.0));
        let alpha = w.alpha();
        let got = combine(
            &ForegroundMap::new(1, 1, vec![a]).unwrap(),
            &ForegroundMap::new(1, 1, vec![b]).unwrap(),
            w,
        )
        .unwrap()
        .data[0];
        worst = worst.max((got - (alpha * a + (1.0 - alpha) * b)).abs());
    }
    let mut degenerate = true;
    for seed in 0..20 {
        let (mut model, image) = small_model(seed);
        let seq = refseg_core::tokenize("left circle").unwrap();
        model.weights.fusion = FusionWeight::new(0.3);
        let mixed = model.forward_grid(&image, &seq).unwrap();
        let (b, f) = (mixed.baseline.unwrap(), mixed.fused.unwrap());
        model.weights.fusion = FusionWeight::first_only();
        let first = model.forward_grid(&image, &seq).unwrap().combined;
        model.weights.fusion = FusionWeight::second_only();
        let second = model.forward_grid(&image, &seq).unwrap().combined;
        let bits = |m: &ForegroundMap| m.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        degenerate &= bits(&first) == bits(&b) && bits(&second) == bits(&f);
        degenerate &= FusionWeight::new(1e6).alpha() < 1.0 && FusionWeight::new(-1e6).alpha() > 0.0;
    }
    verdict(
        worst <= 1e-12 && degenerate,
        format!("α=0.5 of (0.8, 0.4) = {half}, max arithmetic diff {worst:.1e}, saturated paths bit-identical: {degenerate}"),
    )
}

fn metric_oracle() -> Verdict {
    let mut rng = rng_from_seed(44);
    let mut stats = Vec::new();
    let mut brute = Vec::new();
    let mut mismatches = 0;
    while stats.len() < 1000 {
        let (h, w) = (rng.random_range(1..=24), rng.random_range(1..=24));
        let density = rng.random();
        let gt = random_mask(&mut rng, h, w, density);
        if gt.is_empty() {
            continue;
        }
        let density = rng.random();
        let pred = random_mask(&mut rng, h, w, density);
        let (mut inter, mut union) = (0u64, 0u64);
        for y in 0..h {
            for x in 0..w {
                let (p, g) = (pred.get(y, x), gt.get(y, x));
                inter += u64::from(p && g);
                union += u64::from(p || g);
            }
        }
        let (stat, _) = iou(&pred, &gt).unwrap();
        if stat.intersection != inter || stat.union != union {
            mismatches += 1;
        }
        stats.push(stat);
        brute.push((inter, union));
    }
    let ious: Vec<f64> = brute.iter().map(|&(i, u)| i as f64 / u as f64).collect();
    for theta in [0.5, 0.6, 0.7, 0.8, 0.9] {
        let hits = ious.iter().filter(|&&v| v > theta).count();
        if precision_at(&ious, theta).unwrap() != hits as f64 / ious.len() as f64 {
            mismatches += 1;
        }
    }
    let (si, su) = brute
        .iter()
        .fold((0u64, 0u64), |(a, b), &(i, u)| (a + i, b + u));
    if overall_iou(&stats).unwrap() != si as f64 / su as f64 {
        mismatches += 1;
    }
    let example = [
        IoUStat {
            intersection: 2,
            union: 6,
        },
        IoUStat {
            intersection: 3,
            union: 3,
        },
    ];
    let overall = overall_iou(&example).unwrap();
    let mean = example.iter().map(IoUStat::value).sum::<f64>() / 2.0;
    let pass = mismatches == 0 && overall == 5.0 / 9.0 && (mean - 2.0 / 3.0).abs() < 1e-15;
    verdict(
        pass,
        format!("{mismatches} mismatches on 1000 pairs; worked example overall {overall:.4} vs mean {mean:.4}"),
    )
}

struct Benchmark {
    train: GeneratedDataset,
    test: Vec<Sample>,
}

fn benchmark() -> Benchmark {
    let make = |seed, count| {
        generate_dataset(&SynthConfig {
            seed,
            count,
            classes: 8,
            synonym_rate: 0.3,
            ..SynthConfig::default()
        })
        .unwrap()
    };
    Benchmark {
        train: make(1, 500),
        test: make(2, 100).referring,
    }
}

struct RowResult {
    name: &'static str,
    median: MetricsReport,
    ious: Vec<f64>,
    seconds: Vec<f64>,
}

fn run_rows(names: &[&str], data: &TrainData, test: &[Sample]) -> Vec<RowResult> {
    let base = TrainConfig::default();
    ROWS.iter()
        .filter(|(name, _)| names.contains(name))
        .map(|(name, toggles)| {
            let cfg = toggles.apply(&base);
            let mut reports = Vec::new();
            let mut seconds = Vec::new();
            for seed in SEEDS {
                let start = Instant::now();
                let run = run_row(&cfg, data, test, &[seed], 1).unwrap();
                seconds.push(start.elapsed().as_secs_f64());
                reports.push(run[0].report);
            }
            eprintln!(
                "  {name}: {:?}",
                reports.iter().map(|r| r.overall_iou).collect::<Vec<_>>()
            );
            RowResult {
                name,
                median: median_report(&reports),
                ious: reports.iter().map(|r| r.overall_iou).collect(),
                seconds,
            }
        })
        .collect()
}

fn benchmark_quality(rows: &[RowResult]) -> Verdict {
    let full = rows.iter().find(|r| r.name == "full").unwrap();
    let slowest = full.seconds.iter().copied().fold(0.0, f64::max);
    let pass = full.median.overall_iou >= 0.70 && slowest <= 900.0;
    verdict(
        pass,
        format!(
            "full model overall IoU median {:.4} (runs {:?}), slowest run {:.0}s",
            full.median.overall_iou,
            full.ious
                .iter()
                .map(|v| format!("{v:.4}"))
                .collect::<Vec<_>>(),
            slowest
        ),
    )
}

fn ablation_direction(rows: &[RowResult], bench: &Benchmark) -> Verdict {
    let get =
        |rs: &[RowResult], n: &str| rs.iter().find(|r| r.name == n).unwrap().median.overall_iou;
    let baseline = get(rows, "baseline");
    let emb = get(rows, "+embedding");
    let full = get(rows, "full");
    let a = emb >= baseline;
    let singles_ok = rows
        .iter()
        .filter(|r| r.name != "full")
        .all(|r| full >= r.median.overall_iou);
    let c = singles_ok && full - baseline >= 0.02;

    let mut small = bench.train.train_data();
    small.referring.truncate(small.referring.len() / 5);
    let sub = run_rows(
        &["+embedding", "+embedding+synthesized"],
        &small,
        &bench.test,
    );
    let (sub_emb, sub_syn) = (get(&sub, "+embedding"), get(&sub, "+embedding+synthesized"));
    let b = sub_syn >= sub_emb;

    let table: Vec<String> = rows
        .iter()
        .map(|r| format!("{} {:.4}", r.name, r.median.overall_iou))
        .collect();
    verdict(
        a && b && c,
        format!(
            "(a) {a} (b) {b} [20%: emb {sub_emb:.4}, emb+syn {sub_syn:.4}] (c) {c} [full-baseline {:+.4}]; {}",
            full - baseline,
            table.join(", ")
        ),
    )
}

fn alpha_direction(bench: &Benchmark) -> Verdict {
    let mut data = bench.train.train_data();
    data.referring.truncate(100);
    let finals = |oracle| {
        let alphas: Vec<f64> = SEEDS
            .iter()
            .map(|&seed| {
                let cfg = TrainConfig {
                    seed,
                    probe: Some(oracle),
                    synthesized_expressions: false,
                    ..TrainConfig::default()
                };
                train_full(&cfg, &data, 1).unwrap().0.alpha()
            })
            .collect();
        median(&alphas)
    };
    let up = finals(ProbeOracle::Baseline);
    let down = finals(ProbeOracle::Category);
    verdict(
        up > 0.7 && down < 0.3,
        format!("oracle baseline path: α {up:.4}; oracle category path: α {down:.4}"),
    )
}

/// Replaces each class-name token with one of the class's synonyms.
fn substitute(sample: &Sample, data: &GeneratedDataset, pick: usize) -> Option<String> {
    let class = sample.class_label?;
    let name = data.catalog.names()[class].as_str();
    let syns = data.catalog.synonyms(class);
    if syns.is_empty() {
        return None;
    }
    let syn = &syns[pick % syns.len()];
    Some(
        sample
            .expression
            .split(' ')
            .map(|w| if w == name { syn.as_str() } else { w })
            .collect::<Vec<_>>()
            .join(" "),
    )
}

fn synonym_transfer() -> Verdict {
    let make = |seed, count| {
        generate_dataset(&SynthConfig {
            seed,
            count,
            classes: 8,
            synonym_rate: 0.0,
            ..SynthConfig::default()
        })
        .unwrap()
    };
    let train = make(11, 400);
    let test = make(12, 200);
    let items = |samples: &[Sample]| -> Vec<(String, usize)> {
        samples
            .iter()
            .map(|s| (s.expression.clone(), s.class_label.unwrap()))
            .collect()
    };
    let train_items = items(&train.referring);
    let original = items(&test.referring);
    let swapped: Vec<(String, usize)> = test
        .referring
        .iter()
        .enumerate()
        .filter_map(|(i, s)| Some((substitute(s, &test, i)?, s.class_label?)))
        .collect();

    let near = shape_world_vectors(
        &train.catalog,
        &VectorSpec {
            synonym_spread: 1e-3,
            ..VectorSpec::default()
        },
    );
    let mut rng = rng_from_seed(99);
    let synonyms: Vec<&String> = (0..train.catalog.len())
        .flat_map(|c| train.catalog.synonyms(c))
        .collect();
    let far_rows: Vec<Vec<f64>> = near
        .tokens()
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if synonyms.contains(&t) {
                random_unit(&mut rng, near.dimension())
            } else {
                near.row(i).to_vec()
            }
        })
        .collect();
    let far = EmbeddingTable::from_rows(near.tokens().to_vec(), far_rows).unwrap();

    let cfg = TrainConfig {
        epochs: 10,
        learning_rate: 0.05,
        batch_size: 8,
        ..TrainConfig::default()
    };
    let classes = train.catalog.len();
    let (near_clf, _) = train_classifier(&cfg, Arc::new(near), &train_items, classes).unwrap();
    let (far_clf, _) = train_classifier(&cfg, Arc::new(far), &train_items, classes).unwrap();
    let base = near_clf.accuracy(&original).unwrap();
    let near_acc = near_clf.accuracy(&swapped).unwrap();
    let far_base = far_clf.accuracy(&original).unwrap();
    let far_acc = far_clf.accuracy(&swapped).unwrap();
    let chance = 1.0 / train.catalog.object_classes().len() as f64;
    let pass = near_acc >= 0.9 * base && far_acc <= chance + 0.15;
    verdict(
        pass,
        format!(
            "original {base:.3}, near synonyms {near_acc:.3} (ratio {:.3}); far synonyms {far_acc:.3} (original {far_base:.3}, chance {chance:.3})",
            near_acc / base
        ),
    )
}

fn refseg(args: &[&str], dir: &Path) -> (Vec<u8>, bool) {
    let out = Command::new(env!("CARGO_BIN_EXE_refseg"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap();
    (out.stdout, out.status.success())
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (_, ok) = refseg(
        &[
            "synth-data",
            "--out",
            "data",
            "--count",
            "40",
            "--seed",
            "5",
            "--synonym-rate",
            "0.3",
        ],
        d,
    );
    std::fs::write(
        d.join("c.json"),
        r#"{"epochs": 2, "pretrain_epochs": 2, "baseline_epochs": 2}"#,
    )
    .unwrap();
    let mut ok = ok;
    let mut outputs = Vec::new();
    for (run, jobs) in [("a", "1"), ("b", "1"), ("c", "3")] {
        let ckpt = format!("{run}.bin");
        let (history, trained) = refseg(
            &[
                "train",
                "--config",
                "c.json",
                "--data",
                "data/dataset.tsv",
                "--out",
                &ckpt,
                "--seed",
                "4",
                "--jobs",
                jobs,
                "--validation",
                "data/dataset.tsv",
            ],
            d,
        );
        let (report, evaluated) = refseg(
            &[
                "eval",
                "--ckpt",
                &ckpt,
                "--data",
                "data/dataset.tsv",
                "--jobs",
                jobs,
            ],
            d,
        );
        ok &= trained && evaluated;
        outputs.push((
            std::fs::read(d.join(&ckpt)).unwrap_or_default(),
            history,
            report,
        ));
    }
    let same = outputs.windows(2).all(|w| w[0] == w[1]);
    verdict(
        ok && same && !outputs[0].0.is_empty(),
        format!(
            "3 runs (jobs 1, 1, 3): commands ok {ok}, checkpoints/history/reports identical {same}, checkpoint {} bytes",
            outputs[0].0.len()
        ),
    )
}

fn main() {
    let picked: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let want = |n: u32| picked.is_empty() || picked.contains(&n);
    let names = [
        "gradient fidelity",
        "fusion exactness",
        "combination exactness",
        "metric oracle",
        "benchmark quality",
        "ablation direction",
        "alpha direction",
        "synonym transfer",
        "determinism",
    ];
    let mut results: Vec<(u32, Verdict)> = Vec::new();
    let mut report = |n: u32, v: Verdict| {
        println!(
            "criterion {n} [{}] {}: {}",
            if v.pass { "PASS" } else { "FAIL" },
            names[n as usize - 1],
            v.detail
        );
        results.push((n, v));
    };
    for (n, f) in [
        (1, gradient_fidelity as fn() -> Verdict),
        (2, fusion_exactness),
        (3, combination_exactness),
        (4, metric_oracle),
        (8, synonym_transfer),
        (9, determinism),
    ] {
        if want(n) {
            report(n, f());
        }
    }
    if want(5) || want(6) || want(7) {
        let bench = benchmark();
        if want(7) {
            report(7, alpha_direction(&bench));
        }
        if want(5) || want(6) {
            let names: Vec<&str> = if want(6) {
                ROWS.iter().map(|r| r.0).collect()
            } else {
                vec!["full"]
            };
            let rows = run_rows(&names, &bench.train.train_data(), &bench.test);
            if want(5) {
                report(5, benchmark_quality(&rows));
            }
            if want(6) {
                report(6, ablation_direction(&rows, &bench));
            }
        }
    }
    results.sort_by_key(|r| r.0);
    let failed: Vec<u32> = results.iter().filter(|r| !r.1.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {} of {} criteria pass{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!("; failing: {failed:?}")
        }
    );
    if std::env::var_os("ACCEPTANCE_STRICT").is_some() && !failed.is_empty() {
        std::process::exit(1);
    }
}
