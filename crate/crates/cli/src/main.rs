//! `refseg`: dataset synthesis, training, evaluation, prediction, embedding
//! inspection, gradient checking and ablations.
//!
//! Exit status: 0 on success, 1 on a usage error, 2 on a data or model
//! error.

mod config;

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use refseg_core::checkpoint;
use refseg_core::dataset::{
    generate_dataset, load_samples, load_train_data, write_dataset, ImageCache, SynthConfig,
    REFERRING_MANIFEST,
};
use refseg_core::metrics::evaluate_model;
use refseg_core::pnm::{encode_pgm_heatmap, encode_pgm_mask, read_ppm, write_bytes};
use refseg_core::train::ablation::ablation_runs;
use refseg_core::train::gradcheck::{grad_check_suite, TOLERANCE};
use refseg_core::train::train_full;
use refseg_core::{EmbeddingTable, TrainConfig};

use config::{load_json, Overrides};

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
}

impl Failure {
    fn data(err: impl Display) -> Self {
        Failure::Data(err.to_string())
    }
}

type Outcome = Result<(), Failure>;

#[derive(Parser, Debug)]
#[command(name = "refseg", version, about = "Referring-expression segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a shape-world dataset directory.
    SynthData(SynthArgs),
    /// Train a model and write its checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Segment one image for one expression.
    Predict(PredictArgs),
    /// Inspect word vectors.
    #[command(subcommand)]
    Embed(EmbedCommand),
    /// Compare analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Train and score the five component settings.
    Ablate(AblateArgs),
}

fn dflt(value: impl Display) -> String {
    format!("[default: {value}]")
}

fn synth_default() -> SynthConfig {
    SynthConfig::default()
}

fn train_default() -> TrainConfig {
    TrainConfig::default()
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// JSON dataset settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, help = format!("Number of scenes {}", dflt(synth_default().count)))]
    count: Option<usize>,
    #[arg(long, help = format!("Object classes {}", dflt(synth_default().classes)))]
    classes: Option<usize>,
    #[arg(long, help = format!("Probability of naming a class by a synonym {}", dflt(synth_default().synonym_rate)))]
    synonym_rate: Option<f64>,
    #[arg(long, help = format!("Seed of the word vectors {}", dflt(synth_default().vector_seed)))]
    vector_seed: Option<u64>,
    #[arg(long, help = format!("Seed of all other randomness {}", dflt(synth_default().seed)))]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainFlags {
    /// JSON training settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, help = format!("Seed of all randomness {}", dflt(train_default().seed)))]
    seed: Option<u64>,
    #[arg(long, help = format!("Joint training epochs {}", dflt(train_default().epochs)))]
    epochs: Option<usize>,
    #[arg(long, help = format!("Joint training learning rate {}", dflt(train_default().learning_rate)))]
    learning_rate: Option<f64>,
    #[arg(long, help = format!("Examples per update {}", dflt(train_default().batch_size)))]
    batch_size: Option<usize>,
    #[arg(
        long,
        default_value_t = 1,
        help = "Worker threads; results do not depend on it"
    )]
    jobs: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    flags: TrainFlags,
    /// Referring manifest; classes.txt, regions.tsv and vectors.txt are read
    /// from its directory.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Manifest scored after every epoch.
    #[arg(long)]
    validation: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    ckpt: PathBuf,
    /// Manifest to score.
    #[arg(long)]
    data: PathBuf,
    #[arg(
        long,
        default_value_t = 1,
        help = "Worker threads; results do not depend on it"
    )]
    jobs: usize,
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    ckpt: PathBuf,
    /// Binary PPM image.
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    expr: String,
    /// Foreground probability as an 8-bit PGM.
    #[arg(long)]
    out_heatmap: PathBuf,
    /// Thresholded mask as a PGM of 0 and 255.
    #[arg(long)]
    out_mask: PathBuf,
}

#[derive(Subcommand, Debug)]
enum EmbedCommand {
    /// Nearest neighbours of a token in a vector file or checkpoint.
    Nn(EmbedArgs),
}

#[derive(Args, Debug)]
struct EmbedArgs {
    /// Word-vector text file.
    #[arg(long, conflicts_with = "ckpt", required_unless_present = "ckpt")]
    vectors: Option<PathBuf>,
    /// Checkpoint whose embedding table is searched.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    token: String,
    #[arg(long, default_value_t = 5)]
    k: usize,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Random configurations per network piece.
    #[arg(long, default_value_t = 100)]
    configs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    flags: TrainFlags,
    /// Directory holding train/ and test/ datasets.
    #[arg(long)]
    data_dir: PathBuf,
    /// Training seeds; each row reports the median.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Where the table goes.
    #[arg(long, default_value = "ablation.txt")]
    out: PathBuf,
    /// Per-seed results as JSON.
    #[arg(long)]
    out_json: Option<PathBuf>,
}

fn resolve_train(flags: &TrainFlags) -> Result<TrainConfig, Failure> {
    let mut cfg: TrainConfig = match &flags.config {
        Some(path) => load_json(path)?,
        None => TrainConfig::default(),
    };
    Overrides::new()
        .set(&mut cfg.seed, flags.seed)
        .set(&mut cfg.epochs, flags.epochs)
        .set(&mut cfg.learning_rate, flags.learning_rate)
        .set(&mut cfg.batch_size, flags.batch_size);
    cfg.validate()
        .map_err(|e| Failure::Usage(format!("--config: {e}")))?;
    echo(&cfg);
    Ok(cfg)
}

fn echo(cfg: &impl serde::Serialize) {
    eprintln!(
        "config: {}",
        serde_json::to_string(cfg).expect("plain data")
    );
}

fn write(path: &Path, bytes: &[u8]) -> Outcome {
    write_bytes(path, bytes).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path) -> Result<refseg_core::Model, Failure> {
    checkpoint::load(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn synth_data(args: SynthArgs) -> Outcome {
    let mut cfg: SynthConfig = match &args.config {
        Some(path) => load_json(path)?,
        None => SynthConfig::default(),
    };
    Overrides::new()
        .set(&mut cfg.count, args.count)
        .set(&mut cfg.classes, args.classes)
        .set(&mut cfg.synonym_rate, args.synonym_rate)
        .set(&mut cfg.vector_seed, args.vector_seed)
        .set(&mut cfg.seed, args.seed);
    echo(&cfg);
    let data = generate_dataset(&cfg).map_err(Failure::data)?;
    write_dataset(&args.out, &data).map_err(Failure::data)?;
    println!(
        "{} samples, {} regions -> {}",
        data.referring.len(),
        data.regions.len(),
        args.out.display()
    );
    Ok(())
}

fn train(args: TrainArgs) -> Outcome {
    let cfg = resolve_train(&args.flags)?;
    let mut cache = ImageCache::default();
    let mut data = load_train_data(&args.data, &mut cache).map_err(Failure::data)?;
    if let Some(path) = &args.validation {
        data.validation = load_samples(path, &mut cache).map_err(Failure::data)?;
    }
    let (model, history) = train_full(&cfg, &data, args.flags.jobs).map_err(Failure::data)?;
    checkpoint::save(&model, &args.out).map_err(Failure::data)?;
    print!("{}", history.to_json_lines());
    Ok(())
}

fn eval(args: EvalArgs) -> Outcome {
    let model = load_model(&args.ckpt)?;
    let samples = load_samples(&args.data, &mut ImageCache::default()).map_err(Failure::data)?;
    let report = evaluate_model(&model, &samples, args.jobs).map_err(Failure::data)?;
    println!("{}", report.to_json());
    Ok(())
}

fn predict(args: PredictArgs) -> Outcome {
    let model = load_model(&args.ckpt)?;
    let image = read_ppm(&args.image)
        .map_err(|e| Failure::Data(format!("{}: {e}", args.image.display())))?;
    let pred = model.predict(&image, &args.expr).map_err(Failure::data)?;
    write(&args.out_heatmap, &encode_pgm_heatmap(&pred.heatmap))?;
    write(&args.out_mask, &encode_pgm_mask(&pred.mask))
}

fn embed(args: EmbedArgs) -> Outcome {
    let table = match (&args.vectors, &args.ckpt) {
        (Some(path), _) => EmbeddingTable::load(path)
            .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?,
        (None, Some(path)) => {
            let model = load_model(path)?;
            (*model.embedding).clone()
        }
        (None, None) => return Err(Failure::Usage("--vectors or --ckpt is required".into())),
    };
    let neighbors = table
        .nearest_neighbors(&args.token, args.k)
        .map_err(Failure::data)?;
    for (token, sim) in neighbors {
        println!("{token}\t{sim:.6}");
    }
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> Outcome {
    for (piece, report) in grad_check_suite(args.configs, args.seed) {
        let line = serde_json::json!({
            "piece": piece.name(),
            "tolerance": TOLERANCE,
            "checked": report.checked,
            "skipped": report.skipped,
            "over_tolerance": report.over_tolerance,
            "roundoff_limited": report.roundoff_limited,
            "max_rel_error": report.max_rel_error,
        });
        println!("{line}");
    }
    Ok(())
}

fn ablate(args: AblateArgs) -> Outcome {
    let cfg = resolve_train(&args.flags)?;
    if args.seeds.is_empty() {
        return Err(Failure::Usage("--seeds: at least one seed needed".into()));
    }
    let mut cache = ImageCache::default();
    let data = load_train_data(
        &args.data_dir.join("train").join(REFERRING_MANIFEST),
        &mut cache,
    )
    .map_err(Failure::data)?;
    let test = load_samples(
        &args.data_dir.join("test").join(REFERRING_MANIFEST),
        &mut cache,
    )
    .map_err(Failure::data)?;
    let report =
        ablation_runs(&cfg, &data, &test, &args.seeds, args.flags.jobs).map_err(Failure::data)?;
    let table = report.table();
    write(&args.out, table.as_bytes())?;
    if let Some(path) = &args.out_json {
        write(path, report.to_json().as_bytes())?;
    }
    print!("{table}");
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::SynthData(a) => synth_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Predict(a) => predict(a),
        Command::Embed(EmbedCommand::Nn(a)) => embed(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
