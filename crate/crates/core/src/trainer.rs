//! Alternating minibatch training.
//!
//! Each iteration samples one minibatch, first updates the distraction set on
//! the scaled fairness objective, then updates the classifier set on binary
//! cross-entropy. The gradient for each step flows through the whole network
//! but only the owning set's tensors are leaves, and each optimizer only ever
//! holds its own tensors, so the other set is bit-identical across the step.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, NodeId};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{bce_loss, descent_objective, fairness_loss, group_members, FairnessLossKind};
use crate::metrics::{self, DEFAULT_THRESHOLD};
use crate::model::{ForwardPass, ParamId, PartitionedModel, Role, Trainable};
use crate::optim::{AdamHyper, Optimizer, OptimizerKind};

/// Omitted keys take their values from [`TrainConfig::adult`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the fairness objective.
    pub eta: f64,
    /// Learning rate of the classifier set.
    pub lr_network: f64,
    /// Learning rate of the distraction set.
    pub lr_distraction: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub fairness_loss: FairnessLossKind,
    pub optimizer: OptimizerKind,
    pub shuffle: bool,
    /// Draw a fresh minibatch for the classifier step instead of reusing the
    /// distraction step's batch.
    pub resample_classifier_batch: bool,
    /// Never run distraction steps (plain empirical risk minimisation).
    pub freeze_distraction: bool,
    pub adam: AdamHyper,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::adult()
    }
}

impl TrainConfig {
    /// 50 epochs, batch 100, learning rates 1e-3 / 1e-5, η = 100, Adam.
    pub fn adult() -> Self {
        Self {
            eta: 100.0,
            lr_network: 1e-3,
            lr_distraction: 1e-5,
            batch_size: 100,
            epochs: 50,
            seed: 0,
            fairness_loss: FairnessLossKind::GroupGap,
            optimizer: OptimizerKind::Adam,
            shuffle: true,
            resample_classifier_batch: false,
            freeze_distraction: false,
            adam: AdamHyper::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(Error::Config(format!("eta must be >= 0, got {}", self.eta)));
        }
        for (name, lr) in [("lr_network", self.lr_network), ("lr_distraction", self.lr_distraction)] {
            if !(lr >= 0.0) || !lr.is_finite() {
                return Err(Error::Config(format!("{name} must be >= 0, got {lr}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// An optimizer bound to a fixed, ascending list of parameter tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamOptimizer {
    pub params: Vec<ParamId>,
    pub rule: Optimizer,
}

impl ParamOptimizer {
    pub fn new(params: Vec<ParamId>, rule: Optimizer) -> Self {
        debug_assert!(params.windows(2).all(|w| w[0] < w[1]));
        Self { params, rule }
    }

    /// Applies the gradients recorded in `pass` to this optimizer's tensors.
    pub fn step(
        &mut self,
        model: &mut PartitionedModel,
        pass: &mut ForwardPass,
        root: NodeId,
    ) -> Result<()> {
        let grads = pass.graph.backward(root)?;
        let mut collected: Vec<&Matrix> = Vec::with_capacity(self.params.len());
        let mut missing = Vec::new();
        for &id in &self.params {
            match grads.get(pass.param_node(id)) {
                Some(g) => collected.push(g),
                None => missing.push(id),
            }
        }
        if !missing.is_empty() {
            return Err(Error::Contract(format!(
                "no gradient recorded for parameters {missing:?}"
            )));
        }
        let mut tensors = model.tensors_mut(&self.params);
        self.rule.step(&mut tensors, &collected)
    }
}

/// One minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Matrix,
    pub y: Vec<f64>,
    pub a: Vec<usize>,
}

impl Batch {
    pub fn from_rows(data: &Dataset, rows: &[usize]) -> Self {
        Self {
            x: data.x.select_rows(rows),
            y: rows.iter().map(|&i| data.y[i]).collect(),
            a: rows.iter().map(|&i| data.a[i]).collect(),
        }
    }

    pub fn whole(data: &Dataset) -> Self {
        Self {
            x: data.x.clone(),
            y: data.y.clone(),
            a: data.a.clone(),
        }
    }

    pub fn distinct_groups(&self) -> usize {
        group_members(&self.a).len()
    }
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub enum StepOutcome {
    /// Raw (unscaled) fairness loss before the update.
    Applied(f64),
    /// The batch held a single group.
    Skipped,
}

/// Updates the distraction set on `η·fairness` (sign-adjusted for descent).
pub fn distraction_step(
    model: &mut PartitionedModel,
    batch: &Batch,
    optimizer: &mut ParamOptimizer,
    eta: f64,
    kind: FairnessLossKind,
) -> Result<StepOutcome> {
    if batch.distinct_groups() < 2 {
        return Ok(StepOutcome::Skipped);
    }
    let mut pass = model.forward_pass(&batch.x, Trainable::Only(Role::Distraction))?;
    let raw = fairness_loss(&mut pass.graph, kind, pass.probs, &batch.a)?;
    let value = pass.graph.scalar(raw);
    let objective = descent_objective(&mut pass.graph, kind, raw, eta)?;
    optimizer.step(model, &mut pass, objective)?;
    Ok(StepOutcome::Applied(value))
}

/// Updates the classifier set on binary cross-entropy; returns the loss
/// before the update.
pub fn classifier_step(
    model: &mut PartitionedModel,
    batch: &Batch,
    optimizer: &mut ParamOptimizer,
) -> Result<f64> {
    let mut pass = model.forward_pass(&batch.x, Trainable::Only(Role::Classifier))?;
    let loss = bce_loss(&mut pass.graph, pass.probs, &batch.y)?;
    let value = pass.graph.scalar(loss);
    optimizer.step(model, &mut pass, loss)?;
    Ok(value)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean pre-update BCE over the epoch's minibatches.
    pub classifier_loss: f64,
    /// Mean raw fairness loss over applied distraction steps.
    pub fairness_loss: Option<f64>,
    pub train_accuracy: f64,
    pub train_dp_gap: f64,
    pub validation_accuracy: Option<f64>,
    pub validation_dp_gap: Option<f64>,
    pub distraction_steps: usize,
    pub skipped_distraction_steps: usize,
    pub classifier_steps: usize,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epochs: Vec<EpochRecord>,
}

impl TrainTrace {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for rec in &self.epochs {
            out.push_str(&serde_json::to_string(rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn total_skipped(&self) -> usize {
        self.epochs.iter().map(|e| e.skipped_distraction_steps).sum()
    }
}

/// Stream ids that keep shuffling and resampling draws apart.
const SHUFFLE_STREAM: u64 = 1;
const RESAMPLE_STREAM: u64 = 2;

fn epoch_rng(seed: u64, stream: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream << 32 | epoch as u64);
    rng
}

/// Full training state; resumable from a checkpoint.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: PartitionedModel,
    pub cfg: TrainConfig,
    pub classifier_opt: ParamOptimizer,
    pub distraction_opt: ParamOptimizer,
    pub epochs_done: usize,
    pub trace: TrainTrace,
}

impl Trainer {
    pub fn new(model: PartitionedModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (theta_c, theta_d) = model.partition_params();
        let classifier_opt = ParamOptimizer::new(
            theta_c,
            Optimizer::new(cfg.optimizer, cfg.lr_network, cfg.adam),
        );
        let distraction_opt = ParamOptimizer::new(
            theta_d,
            Optimizer::new(cfg.optimizer, cfg.lr_distraction, cfg.adam),
        );
        Ok(Self {
            model,
            cfg,
            classifier_opt,
            distraction_opt,
            epochs_done: 0,
            trace: TrainTrace::default(),
        })
    }

    /// Restores a trainer from saved parts.
    pub fn resume(
        model: PartitionedModel,
        cfg: TrainConfig,
        classifier_opt: ParamOptimizer,
        distraction_opt: ParamOptimizer,
        epochs_done: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let (theta_c, theta_d) = model.partition_params();
        if classifier_opt.params != theta_c || distraction_opt.params != theta_d {
            return Err(Error::Contract(
                "optimizer parameter lists do not match the model partition".into(),
            ));
        }
        Ok(Self {
            model,
            cfg,
            classifier_opt,
            distraction_opt,
            epochs_done,
            trace: TrainTrace::default(),
        })
    }

    fn check_dataset(&self, data: &Dataset) -> Result<()> {
        if data.dim() != self.model.input_dim() {
            return Err(Error::Config(format!(
                "dataset has {} features but the model expects {}",
                data.dim(),
                self.model.input_dim()
            )));
        }
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        Ok(())
    }

    /// Runs one pass over `train` and appends its record to the trace.
    pub fn run_epoch(&mut self, train: &Dataset, validation: Option<&Dataset>) -> Result<EpochRecord> {
        self.check_dataset(train)?;
        if let Some(v) = validation {
            self.check_dataset(v)?;
        }
        let start = Instant::now();
        let epoch = self.epochs_done;
        let n = train.len();
        let mut order: Vec<usize> = (0..n).collect();
        if self.cfg.shuffle {
            order.shuffle(&mut epoch_rng(self.cfg.seed, SHUFFLE_STREAM, epoch));
        }
        let mut resample_rng = epoch_rng(self.cfg.seed, RESAMPLE_STREAM, epoch);

        let (mut bce_sum, mut fair_sum) = (0.0, 0.0);
        let (mut applied, mut skipped, mut classifier_steps) = (0usize, 0usize, 0usize);
        for rows in order.chunks(self.cfg.batch_size) {
            let batch = Batch::from_rows(train, rows);
            if !self.cfg.freeze_distraction {
                match distraction_step(
                    &mut self.model,
                    &batch,
                    &mut self.distraction_opt,
                    self.cfg.eta,
                    self.cfg.fairness_loss,
                )? {
                    StepOutcome::Applied(v) => {
                        if !v.is_finite() {
                            return Err(Error::Diverged {
                                epoch,
                                reason: format!("fairness loss is {v}"),
                            });
                        }
                        fair_sum += v;
                        applied += 1;
                    }
                    StepOutcome::Skipped => skipped += 1,
                }
            }
            let loss = if self.cfg.resample_classifier_batch {
                let rows: Vec<usize> = (0..rows.len()).map(|_| resample_rng.random_range(0..n)).collect();
                classifier_step(&mut self.model, &Batch::from_rows(train, &rows), &mut self.classifier_opt)?
            } else {
                classifier_step(&mut self.model, &batch, &mut self.classifier_opt)?
            };
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    reason: format!("classifier loss is {loss}"),
                });
            }
            bce_sum += loss;
            classifier_steps += 1;
        }

        let summary = |data: &Dataset| -> Result<(f64, f64)> {
            let scores = self.model.predict(&data.x)?;
            let predicted = metrics::hard_labels(&scores, DEFAULT_THRESHOLD);
            let acc = metrics::accuracy(&predicted, &data.labels())?;
            let rates = metrics::positive_rates(&predicted, &data.a);
            let (lo, hi) = rates.values().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &r| {
                (l.min(r), h.max(r))
            });
            Ok((acc, if lo.is_finite() { hi - lo } else { 0.0 }))
        };
        let (train_accuracy, train_dp_gap) = summary(train)?;
        let validation = validation.map(summary).transpose()?;

        let record = EpochRecord {
            epoch,
            classifier_loss: bce_sum / classifier_steps as f64,
            fairness_loss: (applied > 0).then(|| fair_sum / applied as f64),
            train_accuracy,
            train_dp_gap,
            validation_accuracy: validation.map(|v| v.0),
            validation_dp_gap: validation.map(|v| v.1),
            distraction_steps: applied,
            skipped_distraction_steps: skipped,
            classifier_steps,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        log::info!(
            "{}",
            serde_json::to_string(&record).expect("record serializes")
        );
        self.epochs_done += 1;
        self.trace.epochs.push(record.clone());
        Ok(record)
    }

    /// Runs the remaining epochs up to `cfg.epochs`.
    pub fn fit(&mut self, train: &Dataset, validation: Option<&Dataset>) -> Result<()> {
        while self.epochs_done < self.cfg.epochs {
            self.run_epoch(train, validation)?;
        }
        Ok(())
    }
}

/// Trains `model` on `train` for `cfg.epochs` epochs.
pub fn train(
    model: PartitionedModel,
    train: &Dataset,
    cfg: &TrainConfig,
) -> Result<(PartitionedModel, TrainTrace)> {
    let mut trainer = Trainer::new(model, cfg.clone())?;
    trainer.fit(train, None)?;
    Ok((trainer.model, trainer.trace))
}
