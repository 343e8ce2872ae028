use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::execute::write_atomic;
use super::{RunRecord, TargetKind};
use crate::flow::Architecture;
use crate::metrics::{median, MetricReport};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub ks: PathBuf,
    pub wasserstein: PathBuf,
    pub f_norm: PathBuf,
    pub summary: PathBuf,
}

#[derive(Clone, Copy)]
struct Metric {
    file: &'static str,
    label: &'static str,
    extract: fn(&MetricReport) -> Option<f64>,
    /// Lower is better after this transform.
    badness: fn(f64) -> f64,
}

const METRICS: [Metric; 3] = [
    Metric {
        file: "ks.csv",
        label: "KS p-value (ideal 0.5)",
        extract: |m| Some(m.ks_p_median),
        badness: |v| (v - 0.5).abs(),
    },
    Metric {
        file: "wasserstein.csv",
        label: "W-distance",
        extract: |m| Some(m.w_median),
        badness: |v| v,
    },
    Metric {
        file: "fnorm.csv",
        label: "F-norm",
        extract: |m| m.f_norm,
        badness: |v| v,
    },
];

type Cell = (TargetKind, usize, Architecture);

struct Row {
    cell: Cell,
    value: f64,
    hyperparameter_id: String,
}

/// Per cell, the best hyper-parameter point; each point's value is the
/// median over its repetitions.
fn best_rows(records: &[&RunRecord], metric: Metric) -> Vec<Row> {
    let mut groups: BTreeMap<Cell, BTreeMap<&str, Vec<f64>>> = BTreeMap::new();
    for r in records {
        let Some(v) = r.metrics.as_ref().and_then(metric.extract) else {
            continue;
        };
        let s = &r.spec;
        groups
            .entry((s.target, s.dim, s.architecture))
            .or_default()
            .entry(s.hyperparameter_id.as_str())
            .or_default()
            .push(v);
    }
    groups
        .into_iter()
        .filter_map(|(cell, points)| {
            points
                .into_iter()
                .map(|(hp, values)| (hp, median(&values)))
                .min_by(|a, b| (metric.badness)(a.1).total_cmp(&(metric.badness)(b.1)).then(a.0.cmp(b.0)))
                .map(|(hp, value)| Row {
                    cell,
                    value,
                    hyperparameter_id: hp.to_string(),
                })
        })
        .collect()
}

fn write_csv(path: &Path, rows: &[Row]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["architecture", "target", "D", "median_value", "best_hyperparameter_id"])?;
    for r in rows {
        let (target, dim, arch) = r.cell;
        w.write_record([
            arch.as_str(),
            target.as_str(),
            &dim.to_string(),
            &r.value.to_string(),
            &r.hyperparameter_id,
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Report(e.to_string()))?;
    write_atomic(path, &bytes)
}

/// Write one CSV per metric plus `summary.txt` into `out_dir`. Output is
/// a pure function of the successful records, independent of their order.
pub fn report(records: &[RunRecord], out_dir: &Path) -> Result<ReportFiles> {
    let mut ok: Vec<&RunRecord> = records.iter().filter(|r| r.succeeded() && r.metrics.is_some()).collect();
    if ok.is_empty() {
        return Err(Error::Report("no successful runs to report".into()));
    }
    ok.sort_by_key(|r| (r.spec.index, r.spec.id.clone()));
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut summary = String::new();
    let _ = writeln!(
        summary,
        "{} successful of {} runs",
        ok.len(),
        records.len()
    );
    let mut paths = Vec::new();
    for metric in METRICS {
        let rows = best_rows(&ok, metric);
        let path = out_dir.join(metric.file);
        write_csv(&path, &rows)?;
        paths.push(path);

        let _ = writeln!(summary, "\n{}: best architecture per target and D", metric.label);
        let mut by_problem: BTreeMap<(TargetKind, usize), Vec<&Row>> = BTreeMap::new();
        for r in &rows {
            by_problem.entry((r.cell.0, r.cell.1)).or_default().push(r);
        }
        if by_problem.is_empty() {
            let _ = writeln!(summary, "  (not available)");
        }
        for ((target, dim), candidates) in by_problem {
            let best = candidates
                .iter()
                .min_by(|a, b| (metric.badness)(a.value).total_cmp(&(metric.badness)(b.value)))
                .expect("non-empty group");
            let _ = writeln!(
                summary,
                "  {target} D={dim}: {} ({}, {})",
                best.cell.2, best.value, best.hyperparameter_id
            );
        }
    }

    let flagged: Vec<_> = ok.iter().filter(|r| r.spec.flagged.is_some()).map(|r| r.spec.id.as_str()).collect();
    if !flagged.is_empty() {
        let _ = writeln!(summary, "\nflagged runs: {}", flagged.join(", "));
    }
    let summary_path = out_dir.join("summary.txt");
    write_atomic(&summary_path, summary.as_bytes())?;

    let mut it = paths.into_iter();
    Ok(ReportFiles {
        ks: it.next().expect("three metrics"),
        wasserstein: it.next().expect("three metrics"),
        f_norm: it.next().expect("three metrics"),
        summary: summary_path,
    })
}
