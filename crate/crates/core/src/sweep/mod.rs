//! Benchmark sweeps: expand a config into runs, execute them with a
//! bounded worker pool, and tabulate the results.

mod execute;
mod report;

use std::collections::BTreeSet;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use execute::{default_runner, evaluate_run, execute, execute_with, ExecuteOptions, RunOutcome, RunRecord, RunStatus, TrainSummary};
pub use report::{report, ReportFiles};

use crate::distributions::{CgSpec, MogSpec, TargetSpec};
use crate::flow::{Architecture, TrainConfig};
use crate::metrics::Protocol;
use crate::seed::derive_seed;
use crate::{Error, Result};

/// Stream offset separating target seeds from run seeds.
const TARGET_STREAM: u64 = 1 << 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    Mog,
    Cg,
    /// Standard normal; useful for smoke runs.
    Normal,
}

impl TargetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TargetKind::Mog => "mog",
            TargetKind::Cg => "cg",
            TargetKind::Normal => "normal",
        }
    }

    fn index(self) -> u64 {
        match self {
            TargetKind::Mog => 0,
            TargetKind::Cg => 1,
            TargetKind::Normal => 2,
        }
    }

    pub fn build(self, dim: usize, seed: u64) -> Result<TargetSpec> {
        Ok(match self {
            TargetKind::Mog => TargetSpec::Mog(MogSpec::generate(dim, seed)),
            TargetKind::Cg => TargetSpec::Cg(CgSpec::generate(dim, seed)?),
            TargetKind::Normal => TargetSpec::Normal { dim },
        })
    }
}

impl std::fmt::Display for TargetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Scan axes. Every list is deduplicated keeping first occurrences; an
/// empty list yields an empty plan.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Axes {
    pub architecture: Vec<Architecture>,
    pub target: Vec<TargetKind>,
    pub dims: Vec<usize>,
    pub n_bijectors: Vec<usize>,
    pub hidden: Vec<Vec<usize>>,
    pub n_samples: Vec<usize>,
    pub repetitions: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub seed: u64,
    pub axes: Axes,
    /// Defaults for every run; axis values override the matching fields.
    pub train: TrainConfig,
    pub metrics: Protocol,
}

impl SweepConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let root: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| config_err("(document)", e.to_string().trim_end()))?;
        for key in root.keys() {
            if !["seed", "axes", "train", "metrics"].contains(&key.as_str()) {
                return Err(config_err(key, "unknown key"));
            }
        }
        let seed = match root.get("seed") {
            Some(v) => field::<u64>(v, "seed")?,
            None => 0,
        };
        let train: TrainConfig = match root.get("train") {
            Some(v) => field(v, "train")?,
            None => TrainConfig::default(),
        };
        let metrics: Protocol = match root.get("metrics") {
            Some(v) => field(v, "metrics")?,
            None => Protocol::default(),
        };
        if metrics.n_batches == 0 || metrics.batch_size == 0 {
            return Err(config_err("metrics", "n_batches and batch_size must be positive"));
        }
        let empty = toml::Table::new();
        let axes_table = match root.get("axes") {
            Some(toml::Value::Table(t)) => t,
            Some(_) => return Err(config_err("axes", "expected a table")),
            None => &empty,
        };
        let axes = parse_axes(axes_table, &train)?;
        let cfg = Self { seed, axes, train, metrics };
        // Catch invalid training settings now rather than in every run.
        let probe = TrainConfig {
            n_bijectors: 1,
            hidden_layer_sizes: vec![1],
            ..cfg.train.clone()
        };
        probe.validate().map_err(|e| config_err("train", &e.to_string()))?;
        Ok(cfg)
    }
}

fn config_err(path: &str, message: &str) -> Error {
    Error::Config {
        path: path.to_string(),
        message: message.to_string(),
    }
}

fn field<T: DeserializeOwned>(v: &toml::Value, path: &str) -> Result<T> {
    v.clone().try_into().map_err(|e: toml::de::Error| config_err(path, e.message()))
}

fn axis<T: DeserializeOwned + PartialEq>(
    table: &toml::Table,
    key: &str,
    default: Option<T>,
    check: impl Fn(&T) -> std::result::Result<(), String>,
) -> Result<Vec<T>> {
    let path = format!("axes.{key}");
    let items = match table.get(key) {
        None => return Ok(default.into_iter().collect()),
        Some(toml::Value::Array(items)) => items,
        Some(_) => return Err(config_err(&path, "expected a list")),
    };
    let mut out: Vec<T> = Vec::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        let item_path = format!("{path}[{i}]");
        let value: T = field(item, &item_path)?;
        check(&value).map_err(|m| config_err(&item_path, &m))?;
        if !out.contains(&value) {
            out.push(value);
        }
    }
    Ok(out)
}

fn positive(v: &usize) -> std::result::Result<(), String> {
    if *v == 0 {
        Err("must be at least 1".into())
    } else {
        Ok(())
    }
}

fn parse_axes(table: &toml::Table, train: &TrainConfig) -> Result<Axes> {
    const KEYS: [&str; 7] = ["architecture", "target", "dims", "n_bijectors", "hidden", "n_samples", "repetitions"];
    for key in table.keys() {
        if !KEYS.contains(&key.as_str()) {
            return Err(config_err(&format!("axes.{key}"), "unknown axis"));
        }
    }
    let repetitions = match table.get("repetitions") {
        Some(v) => field::<usize>(v, "axes.repetitions")?,
        None => 1,
    };
    Ok(Axes {
        architecture: axis(table, "architecture", None, |_| Ok(()))?,
        target: axis(table, "target", None, |_| Ok(()))?,
        dims: axis(table, "dims", None, positive)?,
        n_bijectors: axis(table, "n_bijectors", Some(train.n_bijectors), positive)?,
        hidden: axis(table, "hidden", Some(train.hidden_layer_sizes.clone()), |h: &Vec<usize>| {
            if h.is_empty() || h.contains(&0) {
                Err("hidden layer list must be non-empty with positive widths".into())
            } else {
                Ok(())
            }
        })?,
        n_samples: axis(table, "n_samples", Some(train.n_train_samples), positive)?,
        repetitions,
    })
}

/// One fully specified training-and-evaluation job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub index: usize,
    pub id: String,
    pub architecture: Architecture,
    pub target: TargetKind,
    pub dim: usize,
    pub target_seed: u64,
    /// Groups runs that differ only by repetition.
    pub hyperparameter_id: String,
    pub repetition: usize,
    pub train: TrainConfig,
    pub metrics: Protocol,
    pub seed: u64,
    /// Set for combinations that run but are known to be a poor match.
    pub flagged: Option<String>,
}

impl RunSpec {
    pub fn target_spec(&self) -> Result<TargetSpec> {
        self.target.build(self.dim, self.target_seed)
    }
}

/// Seed of the target instance shared by every run on `(kind, dim)`.
pub fn target_seed(master: u64, kind: TargetKind, dim: usize) -> u64 {
    derive_seed(derive_seed(master, TARGET_STREAM + kind.index()), dim as u64)
}

fn hyperparameter_id(n_bijectors: usize, hidden: &[usize], n_samples: usize) -> String {
    let widths: BTreeSet<_> = hidden.iter().collect();
    let shape = if widths.len() == 1 {
        format!("{}x{}", hidden[0], hidden.len())
    } else {
        hidden.iter().map(usize::to_string).collect::<Vec<_>>().join("-")
    };
    format!("b{n_bijectors}-h{shape}-n{n_samples}")
}

/// Cartesian product of the axes in a fixed order: target, dimension,
/// architecture, bijector count, hidden shape, sample count, repetition.
pub fn plan(cfg: &SweepConfig) -> Vec<RunSpec> {
    let a = &cfg.axes;
    let mut runs = Vec::new();
    for &target in &a.target {
        for &dim in &a.dims {
            for &architecture in &a.architecture {
                for &n_bijectors in &a.n_bijectors {
                    for hidden in &a.hidden {
                        for &n_samples in &a.n_samples {
                            for repetition in 0..a.repetitions {
                                let index = runs.len();
                                let seed = derive_seed(cfg.seed, index as u64);
                                let hp = hyperparameter_id(n_bijectors, hidden, n_samples);
                                let flagged = (architecture == Architecture::Arqs && target == TargetKind::Cg)
                                    .then(|| "spline flows are not expected to help on a correlated Gaussian".to_string());
                                runs.push(RunSpec {
                                    index,
                                    id: format!("{index:04}-{architecture}-{target}-d{dim}-{hp}-r{repetition}"),
                                    architecture,
                                    target,
                                    dim,
                                    target_seed: target_seed(cfg.seed, target, dim),
                                    hyperparameter_id: hp,
                                    repetition,
                                    train: TrainConfig {
                                        n_bijectors,
                                        hidden_layer_sizes: hidden.clone(),
                                        n_train_samples: n_samples,
                                        seed,
                                        ..cfg.train.clone()
                                    },
                                    metrics: cfg.metrics,
                                    seed,
                                    flagged,
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    runs
}
