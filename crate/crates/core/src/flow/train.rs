use std::time::Instant;

use ndarray::{s, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Architecture, FlowModel, PermutationKind};
use crate::distributions::{rng_from_seed, SampleSet, TargetSpec};
use crate::nn::{AdamState, Tape};
use crate::seed::derive_seed;
use crate::{Error, Result};

/// Seed streams derived from `TrainConfig::seed`.
const STREAM_INIT: u64 = 0;
const STREAM_DATA: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n_bijectors: usize,
    pub hidden_layer_sizes: Vec<usize>,
    pub n_train_samples: usize,
    pub batch_size: usize,
    pub stages: usize,
    pub epochs_per_stage: usize,
    pub patience: usize,
    pub lr0: f64,
    pub lr_drop: f64,
    pub validation_fraction: f64,
    pub seed: u64,
    /// Spline bins, A-RQS only.
    pub bins: usize,
    /// Spline half-width, A-RQS only.
    pub bound: f64,
    pub permutation: PermutationKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_bijectors: 2,
            hidden_layer_sizes: vec![128, 128, 128],
            n_train_samples: 100_000,
            batch_size: 512,
            stages: 3,
            epochs_per_stage: 300,
            patience: 30,
            lr0: 1e-3,
            lr_drop: 0.1,
            validation_fraction: 0.1,
            seed: 0,
            bins: 8,
            bound: 12.0,
            permutation: PermutationKind::Random,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_bijectors", self.n_bijectors),
            ("n_train_samples", self.n_train_samples),
            ("batch_size", self.batch_size),
            ("stages", self.stages),
            ("epochs_per_stage", self.epochs_per_stage),
            ("patience", self.patience),
            ("bins", self.bins),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Contract(format!("{name} must be at least 1")));
            }
        }
        if self.hidden_layer_sizes.is_empty() || self.hidden_layer_sizes.contains(&0) {
            return Err(Error::Contract("hidden_layer_sizes must be non-empty with positive widths".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 0.5) {
            return Err(Error::Contract(format!(
                "validation_fraction must lie in (0, 0.5), got {}",
                self.validation_fraction
            )));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) || !(self.lr_drop > 0.0 && self.lr_drop <= 1.0) {
            return Err(Error::Contract("lr0 must be positive and lr_drop in (0, 1]".into()));
        }
        if !(self.bound > 0.0 && self.bound.is_finite()) {
            return Err(Error::Contract("bound must be positive".into()));
        }
        let n_val = self.n_validation();
        if n_val == 0 || n_val >= self.n_train_samples {
            return Err(Error::Contract(format!(
                "{} samples leave no room for a validation split",
                self.n_train_samples
            )));
        }
        Ok(())
    }

    pub fn n_validation(&self) -> usize {
        (self.n_train_samples as f64 * self.validation_fraction).round() as usize
    }

    pub fn learning_rate(&self, stage: usize) -> f64 {
        self.lr0 * self.lr_drop.powi(stage as i32)
    }

    /// Fresh model of the configured shape, initialized from `seed`.
    pub fn build_model(&self, arch: Architecture, dim: usize) -> Result<FlowModel> {
        FlowModel::build(
            arch,
            dim,
            self.n_bijectors,
            &self.hidden_layer_sizes,
            self.bins,
            self.bound,
            self.permutation,
            derive_seed(self.seed, STREAM_INIT),
        )
    }
}

/// Patience-based stopping on a validation curve. Only strict
/// improvements reset the counter.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    epochs_seen: usize,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            epochs_seen: 0,
            since_best: 0,
        }
    }

    /// Record the next epoch's loss. Returns `true` once `patience`
    /// epochs have passed without improvement.
    pub fn observe(&mut self, loss: f64) -> bool {
        let epoch = self.epochs_seen;
        self.epochs_seen += 1;
        if loss < self.best {
            self.best = loss;
            self.best_epoch = Some(epoch);
            self.since_best = 0;
            return false;
        }
        self.since_best += 1;
        self.since_best >= self.patience
    }

    pub fn improved_last(&self) -> bool {
        self.epochs_seen > 0 && self.best_epoch == Some(self.epochs_seen - 1)
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StopReason {
    EarlyStopped,
    EpochLimit,
    Diverged { batch: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    pub learning_rate: f64,
    pub train_nll: Vec<f64>,
    pub validation_nll: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub best_validation_nll: Option<f64>,
    pub stop_reason: StopReason,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stages: Vec<StageReport>,
    /// `stage{s}-epoch{e}` of the parameters left in the model.
    pub best_checkpoint_id: Option<String>,
    pub best_validation_nll: Option<f64>,
    pub stop_reason: StopReason,
    pub wall_clock_secs: f64,
}

impl TrainReport {
    pub fn diverged(&self) -> bool {
        matches!(self.stop_reason, StopReason::Diverged { .. })
    }

    /// Report with wall-clock fields zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.wall_clock_secs = 0.0;
        for s in &mut r.stages {
            s.wall_clock_secs = 0.0;
        }
        r
    }
}

/// Mean negative log-likelihood of `batch` under `params`, with gradient.
/// `batch_index` is only used to label a divergence.
pub fn nll_loss_and_grad(
    model: &FlowModel,
    params: &[f64],
    batch: ArrayView2<'_, f64>,
    batch_index: usize,
) -> Result<(f64, Vec<f64>)> {
    if batch.ncols() != model.dim() {
        return Err(Error::shape("nll batch", model.dim(), batch.ncols()));
    }
    let mut tape = Tape::new(params);
    let y = tape.constant_view(batch);
    let lp = model.log_prob_tape(&mut tape, y)?;
    let mean = tape.mean_all(lp);
    let loss_id = tape.scale(mean, -1.0);
    let loss = tape.value(loss_id)[[0, 0]];
    if !loss.is_finite() {
        return Err(Error::Divergence {
            batch: batch_index,
            reason: format!("loss is {loss}"),
        });
    }
    let grads = tape.backward(loss_id)?;
    Ok((loss, grads))
}

/// Mean negative log-likelihood of `batch` under the model's parameters.
pub fn nll_loss(model: &FlowModel, batch: &SampleSet) -> Result<f64> {
    if batch.dim() != model.dim() {
        return Err(Error::shape("nll batch", model.dim(), batch.dim()));
    }
    mean_nll(model, model.params.values(), batch.view(), 0)
}

fn mean_nll(model: &FlowModel, params: &[f64], x: ArrayView2<'_, f64>, batch_index: usize) -> Result<f64> {
    let lp = model.log_prob_with(params, x)?;
    let loss = -lp.mean().unwrap_or(f64::NAN);
    if !loss.is_finite() {
        return Err(Error::Divergence {
            batch: batch_index,
            reason: format!("loss is {loss}"),
        });
    }
    Ok(loss)
}

/// Draw `cfg.n_train_samples` points from `target` and fit `model` to them.
pub fn train(model: &mut FlowModel, target: &TargetSpec, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if target.dim() != model.dim() {
        return Err(Error::shape("training target", model.dim(), target.dim()));
    }
    let data = target.sample(cfg.n_train_samples, derive_seed(cfg.seed, STREAM_DATA))?;
    train_on(model, data.view(), cfg)
}

/// Fit `model` to `data`. The last `n_validation` rows are held out.
///
/// Divergence does not return an error: the report's stop reason records
/// it and the model keeps the best parameters seen before it happened.
pub fn train_on(model: &mut FlowModel, data: ArrayView2<'_, f64>, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if data.ncols() != model.dim() {
        return Err(Error::shape("training data", model.dim(), data.ncols()));
    }
    let n_val = ((data.nrows() as f64) * cfg.validation_fraction).round() as usize;
    if n_val == 0 || n_val >= data.nrows() {
        return Err(Error::Contract(format!("{} rows leave no room for a validation split", data.nrows())));
    }
    let n_train = data.nrows() - n_val;
    let train_rows = data.slice(s![..n_train, ..]);
    let val_rows = data.slice(s![n_train.., ..]);

    let started = Instant::now();
    let mut rng = rng_from_seed(derive_seed(cfg.seed, STREAM_SHUFFLE));
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut stages = Vec::with_capacity(cfg.stages);
    let mut best_id = None;
    let mut best_overall = f64::INFINITY;
    let mut batch_counter = 0usize;
    let mut final_reason = StopReason::EpochLimit;

    'stages: for stage in 0..cfg.stages {
        let stage_start = Instant::now();
        let lr = cfg.learning_rate(stage);
        let mut adam = AdamState::new(model.params.len(), lr);
        let mut stopper = EarlyStopping::new(cfg.patience);
        let mut best_params = model.params.values().to_vec();
        let mut train_curve = Vec::new();
        let mut val_curve = Vec::new();
        let mut reason = StopReason::EpochLimit;

        for _epoch in 0..cfg.epochs_per_stage {
            match run_epoch(model, train_rows, cfg.batch_size, &mut order, &mut rng, &mut adam, &mut batch_counter) {
                Ok(loss) => train_curve.push(loss),
                Err(e) => {
                    reason = divergence(e)?;
                    break;
                }
            }
            let val = match mean_nll(model, model.params.values(), val_rows, batch_counter) {
                Ok(v) => v,
                Err(e) => {
                    reason = divergence(e)?;
                    break;
                }
            };
            val_curve.push(val);
            let stop = stopper.observe(val);
            if stopper.improved_last() {
                best_params.copy_from_slice(model.params.values());
            }
            if stop {
                reason = StopReason::EarlyStopped;
                break;
            }
        }

        model.params.set_values(&best_params)?;
        if let Some(e) = stopper.best_epoch() {
            if stopper.best() < best_overall {
                best_overall = stopper.best();
                best_id = Some(format!("stage{stage}-epoch{e}"));
            }
        }
        log::debug!(
            "stage {stage}: {} epochs, best validation NLL {:.6} ({:?})",
            val_curve.len(),
            stopper.best(),
            reason
        );
        let diverged = matches!(reason, StopReason::Diverged { .. });
        stages.push(StageReport {
            stage,
            learning_rate: lr,
            train_nll: train_curve,
            validation_nll: val_curve,
            best_epoch: stopper.best_epoch(),
            best_validation_nll: stopper.best_epoch().map(|_| stopper.best()),
            stop_reason: reason.clone(),
            wall_clock_secs: stage_start.elapsed().as_secs_f64(),
        });
        final_reason = reason;
        if diverged {
            break 'stages;
        }
    }

    Ok(TrainReport {
        stages,
        best_validation_nll: best_id.as_ref().map(|_| best_overall),
        best_checkpoint_id: best_id,
        stop_reason: final_reason,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

fn divergence(e: Error) -> Result<StopReason> {
    match e {
        Error::Divergence { batch, reason } => Ok(StopReason::Diverged { batch, reason }),
        Error::NumericOverflow { index } => Ok(StopReason::Diverged {
            batch: 0,
            reason: format!("non-finite output from bijector {index}"),
        }),
        other => Err(other),
    }
}

/// One shuffled pass over `rows`; returns the sample-weighted mean loss.
fn run_epoch(
    model: &mut FlowModel,
    rows: ArrayView2<'_, f64>,
    batch_size: usize,
    order: &mut [usize],
    rng: &mut impl rand::Rng,
    adam: &mut AdamState,
    batch_counter: &mut usize,
) -> Result<f64> {
    order.shuffle(rng);
    let mut total = 0.0;
    for idx in order.chunks(batch_size) {
        let batch = rows.select(Axis(0), idx);
        let index = *batch_counter;
        *batch_counter += 1;
        let (loss, grads) = nll_loss_and_grad(model, model.params.values(), batch.view(), index)?;
        adam.step(model.params.values_mut(), &grads).map_err(|e| match e {
            Error::Divergence { reason, .. } => Error::Divergence { batch: index, reason },
            other => other,
        })?;
        total += loss * idx.len() as f64;
    }
    Ok(total / rows.nrows() as f64)
}
