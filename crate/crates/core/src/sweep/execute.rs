use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::RunSpec;
use crate::flow::{flow_sample, save_checkpoint, train, StopReason, TrainReport};
use crate::metrics::{evaluate, MetricReport};
use crate::seed::derive_seed;
use crate::{Error, Result};

/// Seed streams below a run seed that are not consumed by training.
const STREAM_REFERENCE: u64 = 100;
const STREAM_FLOW_SAMPLES: u64 = 101;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs_per_stage: Vec<usize>,
    pub best_validation_nll: Option<f64>,
    pub best_checkpoint_id: Option<String>,
    pub stop_reason: StopReason,
    pub wall_clock_secs: f64,
}

impl From<&TrainReport> for TrainSummary {
    fn from(r: &TrainReport) -> Self {
        Self {
            epochs_per_stage: r.stages.iter().map(|s| s.validation_nll.len()).collect(),
            best_validation_nll: r.best_validation_nll,
            best_checkpoint_id: r.best_checkpoint_id.clone(),
            stop_reason: r.stop_reason.clone(),
            wall_clock_secs: r.wall_clock_secs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "lowercase")]
pub enum RunStatus {
    Succeeded,
    Failed { error: String },
}

/// What a runner hands back for one spec.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub train: Option<TrainSummary>,
    pub metrics: Option<MetricReport>,
    /// `Some` marks the run as failed even though the runner returned.
    pub failure: Option<String>,
    pub artifacts: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub spec: RunSpec,
    pub status: RunStatus,
    pub train: Option<TrainSummary>,
    pub metrics: Option<MetricReport>,
    pub wall_clock_secs: f64,
    pub artifacts: Vec<PathBuf>,
}

impl RunRecord {
    pub fn succeeded(&self) -> bool {
        self.status == RunStatus::Succeeded
    }

    pub fn path(out_dir: &Path, spec: &RunSpec) -> PathBuf {
        out_dir.join("records").join(format!("{}.json", spec.id))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&text)?)
    }

    /// Load every record under `out_dir/records`, ordered by run index.
    pub fn load_all(out_dir: &Path) -> Result<Vec<Self>> {
        let dir = out_dir.join("records");
        let mut records = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.extension().is_some_and(|e| e == "json") {
                records.push(Self::load(&path)?);
            }
        }
        records.sort_by_key(|r| r.spec.index);
        Ok(records)
    }
}

#[derive(Debug, Clone)]
pub struct ExecuteOptions {
    pub out_dir: PathBuf,
    pub parallelism: usize,
    /// Keep records already on disk whose spec matches instead of rerunning.
    pub resume: bool,
}

/// Train, checkpoint and evaluate one run.
pub fn default_runner(spec: &RunSpec, out_dir: &Path) -> Result<RunOutcome> {
    let target = spec.target_spec()?;
    let mut model = spec.train.build_model(spec.architecture, spec.dim)?;
    let report = train(&mut model, &target, &spec.train)?;

    let mut artifacts = Vec::new();
    let train_dir = out_dir.join("train");
    let ckpt_dir = out_dir.join("checkpoints");
    for d in [&train_dir, &ckpt_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let report_path = train_dir.join(format!("{}.json", spec.id));
    write_atomic(&report_path, &serde_json::to_vec_pretty(&report)?)?;
    artifacts.push(report_path);
    let ckpt_path = ckpt_dir.join(format!("{}.ckpt", spec.id));
    save_checkpoint(&model, &ckpt_path)?;
    artifacts.push(ckpt_path);

    let summary = TrainSummary::from(&report);
    if let StopReason::Diverged { batch, reason } = &report.stop_reason {
        return Ok(RunOutcome {
            train: Some(summary),
            metrics: None,
            failure: Some(format!("training diverged at batch {batch}: {reason}")),
            artifacts,
        });
    }
    let metrics = evaluate_run(spec, &model, &target)?;
    Ok(RunOutcome {
        train: Some(summary),
        metrics: Some(metrics),
        failure: None,
        artifacts,
    })
}

/// Metrics of a trained model against fresh target draws, seeded from the run.
pub fn evaluate_run(spec: &RunSpec, model: &crate::flow::FlowModel, target: &crate::distributions::TargetSpec) -> Result<MetricReport> {
    let n = spec.metrics.rows_needed();
    let real = target.sample(n, derive_seed(spec.seed, STREAM_REFERENCE))?;
    let generated = flow_sample(model, n, derive_seed(spec.seed, STREAM_FLOW_SAMPLES))?;
    evaluate(real.view(), generated.view(), spec.metrics, &target.marginal_std())
}

/// Execute `plan` with the default runner.
pub fn execute(plan: &[RunSpec], opts: &ExecuteOptions) -> Result<Vec<RunRecord>> {
    execute_with(plan, opts, &default_runner)
}

/// Execute `plan` on up to `opts.parallelism` threads. Each finished run
/// is written to its own record file before the next is picked up; a run
/// that errors becomes a failed record instead of stopping the sweep.
pub fn execute_with<F>(plan: &[RunSpec], opts: &ExecuteOptions, runner: &F) -> Result<Vec<RunRecord>>
where
    F: Fn(&RunSpec, &Path) -> Result<RunOutcome> + Sync,
{
    if plan.is_empty() {
        return Err(Error::Contract("nothing to execute: the plan is empty".into()));
    }
    let records_dir = opts.out_dir.join("records");
    fs::create_dir_all(&records_dir).map_err(|e| Error::io(&records_dir, e))?;

    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<RunRecord>>> = Mutex::new(vec![None; plan.len()]);
    let io_error: Mutex<Option<Error>> = Mutex::new(None);
    let workers = opts.parallelism.clamp(1, plan.len());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= plan.len() || io_error.lock().expect("lock").is_some() {
                    break;
                }
                match run_or_resume(&plan[i], opts, runner) {
                    Ok(record) => slots.lock().expect("lock")[i] = Some(record),
                    Err(e) => {
                        io_error.lock().expect("lock").get_or_insert(e);
                    }
                }
            });
        }
    });

    if let Some(e) = io_error.into_inner().expect("lock") {
        return Err(e);
    }
    Ok(slots.into_inner().expect("lock").into_iter().flatten().collect())
}

/// Errors returned here are record-store failures; run failures are
/// folded into the record.
fn run_or_resume<F>(spec: &RunSpec, opts: &ExecuteOptions, runner: &F) -> Result<RunRecord>
where
    F: Fn(&RunSpec, &Path) -> Result<RunOutcome>,
{
    let path = RunRecord::path(&opts.out_dir, spec);
    if opts.resume && path.exists() {
        match RunRecord::load(&path) {
            Ok(r) if r.spec == *spec => {
                log::info!("{}: already done, skipping", spec.id);
                return Ok(r);
            }
            Ok(_) => log::warn!("{}: stored spec differs, rerunning", spec.id),
            Err(e) => log::warn!("{}: unreadable record ({e}), rerunning", spec.id),
        }
    }
    log::info!("{}: starting", spec.id);
    let started = Instant::now();
    let outcome = runner(spec, &opts.out_dir);
    let wall_clock_secs = started.elapsed().as_secs_f64();
    let record = match outcome {
        Ok(o) => RunRecord {
            spec: spec.clone(),
            status: match o.failure {
                Some(error) => RunStatus::Failed { error },
                None => RunStatus::Succeeded,
            },
            train: o.train,
            metrics: o.metrics,
            wall_clock_secs,
            artifacts: o.artifacts,
        },
        Err(e) => RunRecord {
            spec: spec.clone(),
            status: RunStatus::Failed { error: e.to_string() },
            train: None,
            metrics: None,
            wall_clock_secs,
            artifacts: Vec::new(),
        },
    };
    match &record.status {
        RunStatus::Succeeded => log::info!("{}: done in {wall_clock_secs:.1}s", spec.id),
        RunStatus::Failed { error } => log::warn!("{}: failed: {error}", spec.id),
    }
    write_atomic(&path, &serde_json::to_vec_pretty(&record)?)?;
    Ok(record)
}

/// Write to a sibling temp file and rename, so readers never see a
/// half-written record.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
