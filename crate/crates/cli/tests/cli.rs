use std::path::Path;
use std::process::{Command, Output};

fn refseg(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_refseg"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

const TINY: &str = r#"{"epochs": 1, "pretrain_epochs": 1, "baseline_epochs": 1}"#;

/// Dataset plus a checkpoint trained on it.
fn trained(dir: &Path) {
    let out = refseg(
        &[
            "synth-data",
            "--out",
            "data",
            "--count",
            "12",
            "--seed",
            "2",
        ],
        dir,
    );
    assert!(out.status.success(), "{}", stderr(&out));
    std::fs::write(dir.join("c.json"), TINY).unwrap();
    let out = refseg(
        &[
            "train",
            "--config",
            "c.json",
            "--data",
            "data/dataset.tsv",
            "--out",
            "m.bin",
        ],
        dir,
    );
    assert!(out.status.success(), "{}", stderr(&out));
}

#[test]
fn help_exits_zero_and_lists_defaults() {
    let dir = tempfile::tempdir().unwrap();
    for sub in [
        "synth-data",
        "train",
        "eval",
        "predict",
        "embed",
        "embed nn",
        "gradcheck",
        "ablate",
    ] {
        let mut args: Vec<&str> = sub.split(' ').collect();
        args.push("--help");
        let out = refseg(&args, dir.path());
        assert_eq!(out.status.code(), Some(0), "{sub}");
        assert!(stdout(&out).contains("Usage: refseg"), "{sub}");
    }
    let train = stdout(&refseg(&["train", "--help"], dir.path()));
    assert!(train.contains("[default: 5]"), "{train}");
    assert!(train.contains("[default: 0.01]"), "{train}");
    let check = stdout(&refseg(&["gradcheck", "--help"], dir.path()));
    assert!(check.contains("[default: 100]"), "{check}");
}

#[test]
fn usage_errors_exit_one_and_name_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let out = refseg(&["train", "--data", "x.tsv"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--out"));

    let out = refseg(
        &["eval", "--ckpt", "m.bin", "--data", "d", "--jobs", "many"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--jobs"));

    let out = refseg(&["frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(1));

    std::fs::write(dir.path().join("bad.json"), r#"{"epochs": 1, "epoch": 2}"#).unwrap();
    let out = refseg(
        &[
            "train", "--config", "bad.json", "--data", "d.tsv", "--out", "m.bin",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(
        stderr(&out).contains("unknown field `epoch`"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = refseg(
        &["eval", "--ckpt", "missing.bin", "--data", "d.tsv"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("missing.bin"));

    std::fs::write(dir.path().join("junk.bin"), b"not a checkpoint").unwrap();
    let out = refseg(
        &["embed", "nn", "--ckpt", "junk.bin", "--token", "circle"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn flags_override_config_file_and_config_is_echoed() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let out = refseg(
        &[
            "train",
            "--config",
            "c.json",
            "--data",
            "data/dataset.tsv",
            "--out",
            "n.bin",
            "--epochs",
            "2",
            "--seed",
            "9",
        ],
        dir.path(),
    );
    assert!(out.status.success());
    let echoed = stderr(&out);
    let line = echoed.lines().find(|l| l.starts_with("config: ")).unwrap();
    let cfg: serde_json::Value = serde_json::from_str(&line["config: ".len()..]).unwrap();
    assert_eq!(cfg["epochs"], 2);
    assert_eq!(cfg["seed"], 9);
    assert_eq!(cfg["pretrain_epochs"], 1);
    assert_eq!(cfg["learning_rate"], 0.01);
    let history: Vec<serde_json::Value> = stdout(&out)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(history.len(), 2);
    assert!(history[1]["alpha"].is_f64());
}

#[test]
fn eval_reports_six_metrics() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let out = refseg(
        &["eval", "--ckpt", "m.bin", "--data", "data/dataset.tsv"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    for key in [
        "prec_05",
        "prec_06",
        "prec_07",
        "prec_08",
        "prec_09",
        "overall_iou",
    ] {
        let v = report[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key} {v}");
    }
}

#[test]
fn predict_writes_image_sized_maps() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path());
    let out = refseg(
        &[
            "predict",
            "--ckpt",
            "m.bin",
            "--image",
            "data/images/00000.ppm",
            "--expr",
            "left square",
            "--out-heatmap",
            "h.pgm",
            "--out-mask",
            "k.pgm",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let image = refseg_core::pnm::read_ppm(&dir.path().join("data/images/00000.ppm")).unwrap();
    for name in ["h.pgm", "k.pgm"] {
        let bytes = std::fs::read(dir.path().join(name)).unwrap();
        let (h, w, pixels) = refseg_core::pnm::decode_pgm_bytes(&bytes).unwrap();
        assert!(bytes.starts_with(b"P5"));
        assert_eq!((h, w), (image.height(), image.width()));
        if name == "k.pgm" {
            assert!(pixels.iter().all(|&p| p == 0 || p == 255));
        }
    }
}

#[test]
fn embed_lists_synonyms_first() {
    let dir = tempfile::tempdir().unwrap();
    let out = refseg(&["synth-data", "--out", "d", "--count", "3"], dir.path());
    assert!(out.status.success());
    let out = refseg(
        &[
            "embed",
            "nn",
            "--vectors",
            "d/vectors.txt",
            "--token",
            "square",
            "--k",
            "3",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let mut words: Vec<String> = stdout(&out)
        .lines()
        .map(|l| l.split('\t').next().unwrap().to_string())
        .collect();
    words.sort();
    assert_eq!(words, ["block", "box", "tile"]);

    let out = refseg(
        &[
            "embed",
            "nn",
            "--vectors",
            "d/vectors.txt",
            "--token",
            "zebra",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synth_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = refseg(
            &["synth-data", "--out", out, "--count", "6", "--seed", "8"],
            dir.path(),
        );
        assert!(o.status.success());
    }
    for file in [
        "dataset.tsv",
        "regions.tsv",
        "classes.txt",
        "vectors.txt",
        "images/00003.ppm",
    ] {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(file)).unwrap(),
            std::fs::read(dir.path().join("b").join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn gradcheck_prints_one_line_per_piece() {
    let dir = tempfile::tempdir().unwrap();
    let out = refseg(&["gradcheck", "--configs", "2", "--seed", "3"], dir.path());
    assert!(out.status.success());
    let lines: Vec<serde_json::Value> = stdout(&out)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 5);
    for l in &lines {
        assert_eq!(l["over_tolerance"], 0, "{l}");
    }
}

#[test]
fn ablate_writes_five_rows() {
    let dir = tempfile::tempdir().unwrap();
    for (split, seed) in [("train", "1"), ("test", "2")] {
        let out = refseg(
            &[
                "synth-data",
                "--out",
                &format!("d/{split}"),
                "--count",
                "8",
                "--seed",
                seed,
            ],
            dir.path(),
        );
        assert!(out.status.success());
    }
    std::fs::write(dir.path().join("c.json"), TINY).unwrap();
    let out = refseg(
        &[
            "ablate",
            "--config",
            "c.json",
            "--data-dir",
            "d",
            "--seeds",
            "0",
            "--out",
            "table.txt",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let table = std::fs::read_to_string(dir.path().join("table.txt")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert!(
        lines[0].contains("prec@0.5") && lines[0].ends_with("overall IoU"),
        "{table}"
    );
    let rows: Vec<&str> = lines
        .iter()
        .filter(|l| {
            ["baseline", "+embedding", "category-only", "full"]
                .iter()
                .any(|n| l.starts_with(n))
        })
        .copied()
        .collect();
    assert_eq!(rows.len(), 5, "{table}");
}
