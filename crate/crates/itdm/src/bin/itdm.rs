//! Experiment CLI: train a classifier with or without in-training
//! distribution matching, or sweep the matching weight over a grid.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use itdm::cli::{run_grid, run_single_with_observer, RunSpec};
use itdm::error::Error;
use itdm::nn::ArchKind;
use itdm::trainer::{DatasetSpec, MatchMode, TrainConfig};

#[derive(Parser)]
#[command(
    name = "itdm",
    about = "SGD training with MMD mini-batch alignment",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train once and write metrics.csv + summary.json.
    Run(RunArgs),
    /// Sweep lambda over {0} + a grid under a shared seed set and emit a
    /// comparison table.
    Grid(GridArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Dataset: fmnist | kmnist | blobs.
    #[arg(long, default_value = "blobs")]
    dataset: String,

    /// IDX image/label paths; default to $ITDM_DATA_DIR/<dataset>/ or
    /// ./data/<dataset>/ with the standard file names.
    #[arg(long)]
    train_images: Option<PathBuf>,
    #[arg(long)]
    train_labels: Option<PathBuf>,
    #[arg(long)]
    test_images: Option<PathBuf>,
    #[arg(long)]
    test_labels: Option<PathBuf>,

    /// Architecture: mlp | smallcnn.
    #[arg(long, default_value = "mlp")]
    arch: String,

    /// Matching mode: none | joint | class.
    #[arg(long = "match", default_value = "none")]
    match_mode: String,

    /// Match loss as MMD (true) or squared MMD (false).
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    use_sqrt: bool,

    /// Kernels in the bandwidth bank.
    #[arg(long, default_value_t = 5)]
    kernels: usize,

    #[arg(long, default_value_t = 150)]
    batch_size: usize,

    #[arg(long, default_value_t = 10)]
    epochs: usize,

    #[arg(long, default_value_t = 0.01)]
    lr: f64,

    #[arg(long, default_value_t = 0.5)]
    momentum: f64,

    /// Learning-rate decay points, "epoch:mult,epoch:mult,..." or "none".
    #[arg(long, default_value = "20:0.2,40:0.2")]
    lr_decay: String,

    #[arg(long, default_value_t = 64)]
    feature_dim: usize,

    /// Train on a seeded subset of this many samples.
    #[arg(long)]
    subset_n: Option<usize>,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,

    /// Full training config as JSON (the `config` object from a
    /// summary.json). Overrides every flag except --out.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Synthetic blob parameters.
    #[arg(long, default_value_t = 3)]
    blob_classes: usize,
    #[arg(long, default_value_t = 4)]
    blob_dim: usize,
    #[arg(long, default_value_t = 500)]
    blob_per_class: usize,
    #[arg(long, default_value_t = 200)]
    blob_test_per_class: usize,
    #[arg(long, default_value_t = 6.0)]
    blob_sep: f64,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Matching loss weight.
    #[arg(long, default_value_t = 0.6)]
    lambda: f64,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Comma-separated non-zero lambda values; 0 is always included.
    #[arg(long, default_value = "0.2,0.4,0.6,0.8,1")]
    lambdas: String,

    /// Replicates per lambda; replicate i uses seed+i for every lambda.
    #[arg(long, default_value_t = 1)]
    seeds: usize,
}

fn standard_idx_paths(dataset: &str, common: &CommonArgs) -> Result<DatasetSpec, Error> {
    let base = match (&common.train_images, &common.train_labels, &common.test_images, &common.test_labels) {
        (Some(ti), Some(tl), Some(vi), Some(vl)) => {
            return Ok(DatasetSpec::Idx {
                name: dataset.to_string(),
                train_images: ti.clone(),
                train_labels: tl.clone(),
                test_images: vi.clone(),
                test_labels: vl.clone(),
                subset_n: common.subset_n,
            })
        }
        (None, None, None, None) => {
            let root = std::env::var_os("ITDM_DATA_DIR")
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("data"));
            root.join(dataset)
        }
        _ => {
            return Err(Error::InvalidArgument(
                "give all four of --train-images/--train-labels/--test-images/--test-labels or none".into(),
            ))
        }
    };
    Ok(DatasetSpec::Idx {
        name: dataset.to_string(),
        train_images: base.join("train-images-idx3-ubyte"),
        train_labels: base.join("train-labels-idx1-ubyte"),
        test_images: base.join("t10k-images-idx3-ubyte"),
        test_labels: base.join("t10k-labels-idx1-ubyte"),
        subset_n: common.subset_n,
    })
}

fn build_config(common: &CommonArgs, lambda: f64) -> Result<TrainConfig, Error> {
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path)?;
        let cfg: TrainConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        return Ok(cfg);
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "--lambda must be finite and >= 0, got {lambda}"
        )));
    }
    let dataset = match common.dataset.as_str() {
        "blobs" => DatasetSpec::Blobs {
            classes: common.blob_classes,
            per_class_train: common.blob_per_class,
            per_class_test: common.blob_test_per_class,
            dim: common.blob_dim,
            separation: common.blob_sep,
        },
        "fmnist" | "kmnist" => standard_idx_paths(&common.dataset, common)?,
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown dataset '{other}' (expected fmnist|kmnist|blobs)"
            )))
        }
    };
    let cfg = TrainConfig {
        match_mode: common.match_mode.parse::<MatchMode>()?,
        lambda,
        use_sqrt: common.use_sqrt,
        kernels: common.kernels,
        batch_size: common.batch_size,
        epochs: common.epochs,
        lr: common.lr,
        momentum: common.momentum,
        lr_schedule: parse_lr_decay(&common.lr_decay)?,
        seed: common.seed,
        arch: common.arch.parse::<ArchKind>()?,
        feature_dim: common.feature_dim,
        dataset,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn parse_lr_decay(text: &str) -> Result<Vec<(usize, f64)>, Error> {
    let text = text.trim();
    if text.is_empty() || text == "none" {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for part in text.split(',') {
        let (epoch, mult) = part.split_once(':').ok_or_else(|| {
            Error::InvalidArgument(format!("bad --lr-decay entry '{part}', expected epoch:mult"))
        })?;
        let epoch = epoch
            .trim()
            .parse::<usize>()
            .map_err(|e| Error::InvalidArgument(format!("bad epoch in '{part}': {e}")))?;
        let mult = mult
            .trim()
            .parse::<f64>()
            .map_err(|e| Error::InvalidArgument(format!("bad multiplier in '{part}': {e}")))?;
        out.push((epoch, mult));
    }
    Ok(out)
}

fn parse_lambdas(text: &str) -> Result<Vec<f64>, Error> {
    let mut out = Vec::new();
    for part in text.split(',') {
        let v = part
            .trim()
            .parse::<f64>()
            .map_err(|e| Error::InvalidArgument(format!("bad lambda '{part}': {e}")))?;
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "lambdas must be finite and >= 0, got {v}"
            )));
        }
        out.push(v);
    }
    Ok(out)
}

fn execute(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run(args) => {
            let config = build_config(&args.common, args.lambda)?;
            let spec = RunSpec::new(config, &args.common.out);
            let summary = run_single_with_observer(&spec, |r| {
                if let (Some(ce), Some(acc)) = (r.test_ce, r.test_acc) {
                    println!(
                        "epoch {:>3}  train_ce {:.4}  test_ce {:.4}  test_acc {:.4}",
                        r.epoch, r.train_ce, ce, acc
                    );
                }
            })?;
            println!(
                "done: {} epochs, final test_ce {:.4}, test_acc {:.4} -> {}",
                summary.epochs_run,
                summary.final_test_ce,
                summary.final_test_acc,
                args.common.out.display()
            );
            Ok(())
        }
        Command::Grid(args) => {
            let config = build_config(&args.common, 0.0)?;
            let mut spec = RunSpec::new(config, &args.common.out);
            spec.lambda_grid = parse_lambdas(&args.lambdas)?;
            spec.seeds = args.seeds;
            let grid = run_grid(&spec)?;
            print!("{}", grid.table());
            println!("outputs under {}", args.common.out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidArgument(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
