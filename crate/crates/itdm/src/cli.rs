//! Experiment drivers behind the command-line front end: single runs, the
//! lambda grid, and the file formats they emit (`metrics.csv`,
//! `summary.json`, `comparison.csv`/`.json`).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_idx, synthetic_blobs, Dataset};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::trainer::{
    summarize, train_with_observer, DatasetSpec, MetricsRecord, RunSummary, TrainConfig,
};

/// Decorrelates dataset generation from the model-init/sampling stream.
const DATA_SALT: u64 = 0xda7a_5eed_0000_0001;
/// Seeds training-subset selection.
const SUBSET_SALT: u64 = 0xda7a_5eed_0000_0002;

pub const METRICS_HEADER: &str =
    "epoch,step,train_ce,match_loss,sigma_med,test_ce,test_acc,classes_matched,wall_ms";

/// One invocation of the experiment harness.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub config: TrainConfig,
    pub out_dir: PathBuf,
    /// Non-zero lambda values for the grid; 0 is always prepended.
    pub lambda_grid: Vec<f64>,
    /// Replicates per lambda; run i uses `config.seed + i` across all lambdas.
    pub seeds: usize,
}

impl RunSpec {
    pub fn new(config: TrainConfig, out_dir: impl Into<PathBuf>) -> Self {
        RunSpec {
            config,
            out_dir: out_dir.into(),
            lambda_grid: vec![0.2, 0.4, 0.6, 0.8, 1.0],
            seeds: 1,
        }
    }

    fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.seeds == 0 {
            return Err(Error::InvalidArgument("need at least one seed".into()));
        }
        if self.lambda_grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::InvalidArgument(
                "grid lambdas must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Materialize the train/test pair a config describes. Synthetic data and
/// subset selection derive from the run seed, so a config echo reproduces
/// the exact run.
pub fn load_datasets(spec: &DatasetSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    match spec {
        DatasetSpec::Blobs {
            classes,
            per_class_train,
            per_class_test,
            dim,
            separation,
        } => {
            let mut rng = Rng::new(seed ^ DATA_SALT);
            let train = synthetic_blobs(*classes, *per_class_train, *dim, *separation, &mut rng)?;
            let test = synthetic_blobs(*classes, *per_class_test, *dim, *separation, &mut rng)?;
            Ok((train, test))
        }
        DatasetSpec::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            subset_n,
            ..
        } => {
            let mut train = load_idx(train_images, train_labels)?;
            let test = load_idx(test_images, test_labels)?;
            if let Some(n) = subset_n {
                train = train.subset_seeded(*n, seed ^ SUBSET_SALT)?;
            }
            Ok((train, test))
        }
    }
}

fn fmt_f64(v: f64) -> String {
    // Shortest representation that round-trips; deterministic.
    format!("{v}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// Render the metrics stream as CSV. Every cell is deterministic for a fixed
/// seed; per-step wall time is deliberately left blank (it lives in the
/// summary).
pub fn metrics_csv_string(records: &[MetricsRecord]) -> String {
    let mut out = String::new();
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},",
            r.epoch,
            r.step,
            fmt_f64(r.train_ce),
            fmt_opt(r.match_loss),
            fmt_opt(r.sigma_med),
            fmt_opt(r.test_ce),
            fmt_opt(r.test_acc),
            r.classes_matched.map(|c| c.to_string()).unwrap_or_default(),
        )
        .expect("string write");
    }
    out
}

pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    fs::write(path, metrics_csv_string(records))?;
    Ok(())
}

fn parse_opt(field: &str) -> Result<Option<f64>> {
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse::<f64>()
        .map(Some)
        .map_err(|e| Error::InvalidArgument(format!("bad float '{field}': {e}")))
}

/// Read a `metrics.csv` back into records (wall times come back as 0).
pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::InvalidArgument("empty metrics file".into()))?;
    if header != METRICS_HEADER {
        return Err(Error::InvalidArgument(format!(
            "unexpected metrics header '{header}'"
        )));
    }
    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(Error::InvalidArgument(format!(
                "line {}: expected 9 fields, got {}",
                lineno + 2,
                fields.len()
            )));
        }
        let parse_usize = |s: &str| -> Result<usize> {
            s.parse()
                .map_err(|e| Error::InvalidArgument(format!("bad integer '{s}': {e}")))
        };
        records.push(MetricsRecord {
            epoch: parse_usize(fields[0])?,
            step: parse_usize(fields[1])?,
            train_ce: fields[2]
                .parse()
                .map_err(|e| Error::InvalidArgument(format!("bad float '{}': {e}", fields[2])))?,
            match_loss: parse_opt(fields[3])?,
            sigma_med: parse_opt(fields[4])?,
            test_ce: parse_opt(fields[5])?,
            test_acc: parse_opt(fields[6])?,
            classes_matched: if fields[7].is_empty() {
                None
            } else {
                Some(parse_usize(fields[7])?)
            },
            wall_ms: fields[8].parse().unwrap_or(0.0),
        });
    }
    Ok(records)
}

/// Execute one training run and write `metrics.csv` + `summary.json` under
/// `out_dir`.
pub fn run_single(spec: &RunSpec) -> Result<RunSummary> {
    run_single_with_observer(spec, |_| {})
}

pub fn run_single_with_observer(
    spec: &RunSpec,
    observer: impl FnMut(&MetricsRecord),
) -> Result<RunSummary> {
    spec.validate()?;
    let cfg = &spec.config;
    let (train_data, test_data) = load_datasets(&cfg.dataset, cfg.seed)?;
    let run = train_with_observer(cfg, &train_data, &test_data, observer)?;
    let summary = summarize(cfg, &run.records)?;
    fs::create_dir_all(&spec.out_dir)?;
    write_metrics_csv(&spec.out_dir.join("metrics.csv"), &run.records)?;
    let file = fs::File::create(spec.out_dir.join("summary.json"))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), &summary)?;
    Ok(summary)
}

/// One row of the grid comparison: seed-averaged final metrics for a lambda,
/// with plain differences against the lambda = 0 row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub lambda: f64,
    pub test_acc: f64,
    pub test_ce: f64,
    pub final_train_ce: f64,
    /// `test_acc - test_acc(lambda = 0)`; positive favors this lambda.
    pub delta_acc: f64,
    /// `test_ce - test_ce(lambda = 0)`; negative favors this lambda.
    pub delta_ce: f64,
}

/// The grid outcome: per-lambda rows (sorted by lambda, baseline first) and
/// the best/worst non-zero lambdas by accuracy and by cross-entropy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridComparison {
    pub rows: Vec<GridRow>,
    pub best_acc_lambda: f64,
    pub worst_acc_lambda: f64,
    pub best_ce_lambda: f64,
    pub worst_ce_lambda: f64,
    pub seeds: usize,
}

impl GridComparison {
    /// Plain-text table, one row per lambda.
    pub fn table(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "{:>8} {:>10} {:>10} {:>14} {:>10} {:>10}",
            "lambda", "test_acc", "test_ce", "final_train_ce", "d_acc", "d_ce"
        )
        .expect("string write");
        for r in &self.rows {
            writeln!(
                out,
                "{:>8} {:>10.4} {:>10.4} {:>14.4} {:>+10.4} {:>+10.4}",
                fmt_f64(r.lambda),
                r.test_acc,
                r.test_ce,
                r.final_train_ce,
                r.delta_acc,
                r.delta_ce
            )
            .expect("string write");
        }
        writeln!(
            out,
            "best acc at lambda={}, worst acc at lambda={}; best CE at lambda={}, worst CE at lambda={}",
            fmt_f64(self.best_acc_lambda),
            fmt_f64(self.worst_acc_lambda),
            fmt_f64(self.best_ce_lambda),
            fmt_f64(self.worst_ce_lambda),
        )
        .expect("string write");
        out
    }
}

pub const COMPARISON_HEADER: &str = "lambda,test_acc,test_ce,final_train_ce,delta_acc,delta_ce";

fn comparison_csv(grid: &GridComparison) -> String {
    let mut out = String::from(COMPARISON_HEADER);
    out.push('\n');
    for r in &grid.rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            fmt_f64(r.lambda),
            fmt_f64(r.test_acc),
            fmt_f64(r.test_ce),
            fmt_f64(r.final_train_ce),
            fmt_f64(r.delta_acc),
            fmt_f64(r.delta_ce)
        )
        .expect("string write");
    }
    out
}

/// Read a `comparison.csv` back into grid rows.
pub fn read_comparison_csv(path: &Path) -> Result<Vec<GridRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::InvalidArgument("empty comparison file".into()))?;
    if header != COMPARISON_HEADER {
        return Err(Error::InvalidArgument(format!(
            "unexpected comparison header '{header}'"
        )));
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::InvalidArgument(format!(
                "line {}: expected 6 fields, got {}",
                lineno + 2,
                fields.len()
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|e| Error::InvalidArgument(format!("bad float '{s}': {e}")))
        };
        rows.push(GridRow {
            lambda: parse(fields[0])?,
            test_acc: parse(fields[1])?,
            test_ce: parse(fields[2])?,
            final_train_ce: parse(fields[3])?,
            delta_acc: parse(fields[4])?,
            delta_ce: parse(fields[5])?,
        });
    }
    Ok(rows)
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Run lambda in {0} + grid under an otherwise identical config with a
/// shared seed set (`config.seed + i` for replicate `i`). Emits per-run
/// outputs under `lambda_<l>/seed_<i>/`, per-lambda aggregate summaries, and
/// the comparison table.
pub fn run_grid(spec: &RunSpec) -> Result<GridComparison> {
    spec.validate()?;
    if spec.lambda_grid.is_empty() {
        return Err(Error::InvalidArgument("empty lambda grid".into()));
    }
    let mut lambdas: Vec<f64> = spec.lambda_grid.clone();
    lambdas.push(0.0);
    lambdas.sort_by(f64::total_cmp);
    lambdas.dedup();

    let mut rows = Vec::new();
    for &lambda in &lambdas {
        let mut summaries = Vec::new();
        for replicate in 0..spec.seeds {
            let mut cfg = spec.config.clone();
            cfg.lambda = lambda;
            cfg.seed = spec.config.seed + replicate as u64;
            let out_dir = spec
                .out_dir
                .join(format!("lambda_{}", fmt_f64(lambda)))
                .join(format!("seed_{}", cfg.seed));
            let sub = RunSpec {
                config: cfg,
                out_dir,
                lambda_grid: Vec::new(),
                seeds: 1,
            };
            summaries.push(run_single(&sub)?);
        }
        let row = GridRow {
            lambda,
            test_acc: mean(summaries.iter().map(|s| s.final_test_acc)),
            test_ce: mean(summaries.iter().map(|s| s.final_test_ce)),
            final_train_ce: mean(summaries.iter().map(|s| s.final_train_ce)),
            delta_acc: 0.0,
            delta_ce: 0.0,
        };
        let file = fs::File::create(
            spec.out_dir
                .join(format!("lambda_{}", fmt_f64(lambda)))
                .join("summary.json"),
        )?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), &summaries)?;
        rows.push(row);
    }

    let base_acc = rows[0].test_acc;
    let base_ce = rows[0].test_ce;
    debug_assert_eq!(rows[0].lambda, 0.0);
    for r in &mut rows {
        r.delta_acc = r.test_acc - base_acc;
        r.delta_ce = r.test_ce - base_ce;
    }

    let nonzero: Vec<&GridRow> = rows.iter().filter(|r| r.lambda > 0.0).collect();
    let pick = |f: &dyn Fn(&GridRow) -> f64, invert: bool| -> f64 {
        let mut best = nonzero[0];
        for r in &nonzero {
            let better = if invert { f(r) < f(best) } else { f(r) > f(best) };
            if better {
                best = r;
            }
        }
        best.lambda
    };
    let grid = GridComparison {
        best_acc_lambda: pick(&|r| r.test_acc, false),
        worst_acc_lambda: pick(&|r| r.test_acc, true),
        best_ce_lambda: pick(&|r| r.test_ce, true),
        worst_ce_lambda: pick(&|r| r.test_ce, false),
        seeds: spec.seeds,
        rows,
    };

    fs::write(spec.out_dir.join("comparison.csv"), comparison_csv(&grid))?;
    let file = fs::File::create(spec.out_dir.join("comparison.json"))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), &grid)?;
    Ok(grid)
}
