//! The training loop: per step, one cross-entropy mini-batch (S1) plus a
//! second independently sampled mini-batch (S2) whose only role is the
//! feature-matching loss. Both gradients are summed into a single momentum
//! update per iteration.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{Batch, Dataset, DualBatchSampler};
use crate::error::{Error, Result};
use crate::mmd::{match_class_conditional, match_joint, FeatureBatch};
use crate::nn::{build_model, softmax_cross_entropy, ArchKind, GradientSet, Model, Optimizer};
use crate::rng::Rng;

/// Which matching loss augments the cross-entropy gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    /// Plain SGD; the matching machinery is skipped entirely.
    None,
    /// One MMD term between the full latent batches.
    Joint,
    /// Average of per-class MMD terms over classes present in both batches.
    Class,
}

impl fmt::Display for MatchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MatchMode::None => write!(f, "none"),
            MatchMode::Joint => write!(f, "joint"),
            MatchMode::Class => write!(f, "class"),
        }
    }
}

impl FromStr for MatchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(MatchMode::None),
            "joint" => Ok(MatchMode::Joint),
            "class" => Ok(MatchMode::Class),
            other => Err(Error::InvalidArgument(format!(
                "unknown match mode '{other}' (expected none|joint|class)"
            ))),
        }
    }
}

/// Where the data comes from; echoed into run summaries so a run can be
/// reproduced from its own output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum DatasetSpec {
    Blobs {
        classes: usize,
        per_class_train: usize,
        per_class_test: usize,
        dim: usize,
        separation: f64,
    },
    Idx {
        name: String,
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        subset_n: Option<usize>,
    },
}

/// Full specification of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub match_mode: MatchMode,
    pub lambda: f64,
    pub use_sqrt: bool,
    /// Number of kernels in the bandwidth bank.
    pub kernels: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    /// `(epoch, multiplier)` pairs applied when the epoch begins.
    pub lr_schedule: Vec<(usize, f64)>,
    pub seed: u64,
    pub arch: ArchKind,
    pub feature_dim: usize,
    pub dataset: DatasetSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            match_mode: MatchMode::None,
            lambda: 0.6,
            use_sqrt: true,
            kernels: 5,
            batch_size: 150,
            epochs: 10,
            lr: 0.01,
            momentum: 0.5,
            lr_schedule: vec![(20, 0.2), (40, 0.2)],
            seed: 0,
            arch: ArchKind::Mlp,
            feature_dim: 64,
            dataset: DatasetSpec::Blobs {
                classes: 3,
                per_class_train: 500,
                per_class_test: 200,
                dim: 4,
                separation: 6.0,
            },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if self.kernels == 0 {
            return Err(Error::InvalidArgument("kernels must be >= 1".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.feature_dim == 0 {
            return Err(Error::InvalidArgument(
                "batch_size, epochs and feature_dim must be >= 1".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        for (epoch, mult) in &self.lr_schedule {
            if *epoch == 0 || !(mult.is_finite() && *mult > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "bad lr schedule entry ({epoch}, {mult})"
                )));
            }
        }
        Ok(())
    }

    fn matching_enabled(&self) -> bool {
        self.match_mode != MatchMode::None && self.lambda > 0.0
    }
}

/// Per-step loss values, before timing and epoch bookkeeping.
#[derive(Debug, Clone, Copy)]
pub struct StepMetrics {
    pub train_ce: f64,
    pub match_loss: Option<f64>,
    pub sigma_med: Option<f64>,
    pub classes_matched: Option<usize>,
}

/// One row of the metrics stream. Test fields are populated only at
/// evaluation points (the last step of each epoch).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub step: usize,
    pub train_ce: f64,
    pub match_loss: Option<f64>,
    pub sigma_med: Option<f64>,
    pub test_ce: Option<f64>,
    pub test_acc: Option<f64>,
    pub classes_matched: Option<usize>,
    /// Measured wall time of the step in milliseconds. Excluded from the
    /// metrics CSV, which is byte-deterministic; totals land in the summary.
    #[serde(default)]
    pub wall_ms: f64,
}

/// Gradient of the full per-step objective: cross-entropy on S1 plus
/// `lambda` times the matching loss between the latent features of S1 and
/// S2. S2 never touches the cross-entropy; with matching disabled this is
/// exactly the plain mini-batch gradient.
pub fn itdm_grads(
    model: &Model,
    s1: &Batch,
    s2: &Batch,
    cfg: &TrainConfig,
) -> Result<(GradientSet, StepMetrics)> {
    let (cache1, h1, logits1) = model.forward(&s1.inputs)?;
    let (train_ce, dlogits) = softmax_cross_entropy(&logits1, &s1.labels)?;

    if !cfg.matching_enabled() {
        let grads = model.backward(&cache1, Some(&dlogits), None)?;
        return Ok((
            grads,
            StepMetrics {
                train_ce,
                match_loss: None,
                sigma_med: None,
                classes_matched: None,
            },
        ));
    }

    let (cache2, h2, _ignored_logits) = model.forward(&s2.inputs)?;
    let b1 = FeatureBatch::new(&h1, &s1.labels)?;
    let b2 = FeatureBatch::new(&h2, &s2.labels)?;
    let result = match cfg.match_mode {
        MatchMode::Joint => match_joint(&b1, &b2, cfg.kernels, cfg.use_sqrt)?,
        MatchMode::Class => match_class_conditional(
            &b1,
            &b2,
            model.num_classes(),
            cfg.kernels,
            cfg.use_sqrt,
        )?,
        MatchMode::None => unreachable!("matching_enabled"),
    };

    let metrics = StepMetrics {
        train_ce,
        match_loss: Some(result.loss),
        sigma_med: match cfg.match_mode {
            MatchMode::Class if result.classes_matched == 0 => None,
            _ => Some(result.sigma_med),
        },
        classes_matched: match cfg.match_mode {
            MatchMode::Class => Some(result.classes_matched),
            _ => None,
        },
    };

    let dfeat1 = result.grad_h1.scaled(cfg.lambda)?;
    let dfeat2 = result.grad_h2.scaled(cfg.lambda)?;
    let mut grads = model.backward(&cache1, Some(&dlogits), Some(&dfeat1))?;
    grads.add_assign(&model.backward(&cache2, None, Some(&dfeat2))?)?;
    Ok((grads, metrics))
}

/// One full update: gradients from both passes summed, then a single
/// momentum step.
pub fn itdm_step(
    model: &mut Model,
    optimizer: &mut Optimizer,
    s1: &Batch,
    s2: &Batch,
    cfg: &TrainConfig,
) -> Result<StepMetrics> {
    let (grads, metrics) = itdm_grads(model, s1, s2, cfg)?;
    optimizer.step(model, &grads)?;
    Ok(metrics)
}

/// Full-pass argmax accuracy and mean cross-entropy. Never mutates the model.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<(f64, f64)> {
    const EVAL_BATCH: usize = 512;
    let n = data.len();
    let mut hits = 0usize;
    let mut ce_sum = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_BATCH).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let batch = data.gather(&idx)?;
        let (_, _, logits) = model.forward(&batch.inputs)?;
        let (mean_ce, _) = softmax_cross_entropy(&logits, &batch.labels)?;
        ce_sum += mean_ce * batch.len() as f64;
        let k = model.num_classes();
        for (r, &label) in batch.labels.iter().enumerate() {
            if crate::nn::argmax(&logits.data()[r * k..(r + 1) * k]) == label {
                hits += 1;
            }
        }
        start = end;
    }
    Ok((hits as f64 / n as f64, ce_sum / n as f64))
}

/// A finished training run: the metrics stream plus the final model.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub records: Vec<MetricsRecord>,
    pub model: Model,
}

/// Train per the config: seeded model init, dual-batch sampling, the step
/// update, LR schedule at epoch boundaries, and one test evaluation per
/// epoch (attached to the epoch's last record). Fully deterministic per seed.
pub fn train(cfg: &TrainConfig, train_data: &Dataset, test_data: &Dataset) -> Result<TrainRun> {
    train_with_observer(cfg, train_data, test_data, |_| {})
}

/// [`train`], invoking `observer` on each finished record (epoch by epoch,
/// after the evaluation fields are attached). The observer sees the same
/// records the run returns; it exists for progress reporting.
pub fn train_with_observer(
    cfg: &TrainConfig,
    train_data: &Dataset,
    test_data: &Dataset,
    mut observer: impl FnMut(&MetricsRecord),
) -> Result<TrainRun> {
    cfg.validate()?;
    if train_data.sample_shape() != test_data.sample_shape() {
        return Err(Error::ShapeMismatch(format!(
            "train samples {:?} vs test samples {:?}",
            train_data.sample_shape(),
            test_data.sample_shape()
        )));
    }
    if train_data.num_classes() != test_data.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "train has {} classes, test has {}",
            train_data.num_classes(),
            test_data.num_classes()
        )));
    }

    let mut rng = Rng::new(cfg.seed);
    let mut model = build_model(
        cfg.arch,
        train_data.sample_shape(),
        cfg.feature_dim,
        train_data.num_classes(),
        &mut rng,
    )?;
    let mut optimizer = Optimizer::new(cfg.lr, cfg.momentum, &model)?;
    let mut sampler = DualBatchSampler::new(train_data.len(), cfg.batch_size, rng)?;

    let mut records = Vec::new();
    let mut initial_ce: Option<f64> = None;
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        for (at, mult) in &cfg.lr_schedule {
            if *at == epoch {
                optimizer.set_lr(optimizer.lr() * mult);
            }
        }
        sampler.start_epoch();
        let epoch_start_record = records.len();
        while let Some((i1, i2)) = sampler.next_pair() {
            step += 1;
            let s1 = train_data.gather(&i1)?;
            let s2 = train_data.gather(&i2)?;
            let t0 = Instant::now();
            let sm = itdm_step(&mut model, &mut optimizer, &s1, &s2, cfg)?;
            let wall_ms = t0.elapsed().as_secs_f64() * 1e3;

            let baseline = *initial_ce.get_or_insert(sm.train_ce);
            if !sm.train_ce.is_finite() || sm.train_ce > 10.0 * baseline {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    train_ce: sm.train_ce,
                    initial_ce: baseline,
                });
            }

            records.push(MetricsRecord {
                epoch,
                step,
                train_ce: sm.train_ce,
                match_loss: sm.match_loss,
                sigma_med: sm.sigma_med,
                test_ce: None,
                test_acc: None,
                classes_matched: sm.classes_matched,
                wall_ms,
            });
        }
        debug_assert!(records.len() > epoch_start_record);
        let t0 = Instant::now();
        let (acc, ce) = evaluate(&model, test_data)?;
        let eval_ms = t0.elapsed().as_secs_f64() * 1e3;
        if let Some(last) = records.last_mut() {
            last.test_ce = Some(ce);
            last.test_acc = Some(acc);
            last.wall_ms += eval_ms;
        }
        for record in &records[epoch_start_record..] {
            observer(record);
        }
    }
    Ok(TrainRun { records, model })
}

/// Aggregates written to `summary.json` next to the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: TrainConfig,
    pub epochs_run: usize,
    pub steps_run: usize,
    /// Mean train CE over the final epoch's steps.
    pub final_train_ce: f64,
    /// Last evaluation of the run.
    pub final_test_ce: f64,
    pub final_test_acc: f64,
    /// Means over the last (up to) 10 evaluations.
    pub last10_test_ce: f64,
    pub last10_test_acc: f64,
    pub total_wall_ms: f64,
}

/// Fold a metrics stream into its summary.
pub fn summarize(cfg: &TrainConfig, records: &[MetricsRecord]) -> Result<RunSummary> {
    let last = records
        .last()
        .ok_or(Error::EmptyInput("metrics records"))?;
    let final_epoch = last.epoch;
    let final_epoch_ce: Vec<f64> = records
        .iter()
        .filter(|r| r.epoch == final_epoch)
        .map(|r| r.train_ce)
        .collect();
    let evals: Vec<(f64, f64)> = records
        .iter()
        .filter_map(|r| Some((r.test_ce?, r.test_acc?)))
        .collect();
    let tail = &evals[evals.len().saturating_sub(10)..];
    let (final_test_ce, final_test_acc) = *evals.last().ok_or(Error::EmptyInput("evaluations"))?;
    Ok(RunSummary {
        config: cfg.clone(),
        epochs_run: final_epoch,
        steps_run: last.step,
        final_train_ce: final_epoch_ce.iter().sum::<f64>() / final_epoch_ce.len() as f64,
        final_test_ce,
        final_test_acc,
        last10_test_ce: tail.iter().map(|(ce, _)| ce).sum::<f64>() / tail.len() as f64,
        last10_test_acc: tail.iter().map(|(_, acc)| acc).sum::<f64>() / tail.len() as f64,
        total_wall_ms: records.iter().map(|r| r.wall_ms).sum(),
    })
}
