//! Run manifests and the reports derived from them.
//!
//! A run directory is self-describing: `manifest.json` holds the full
//! configuration and every per-(method, seed, budget) outcome, and all CSVs
//! and plots are regenerated from it alone. Mean IoU is always recomputed
//! from the per-class values so the aggregation path is checkable against
//! externally published per-class tables.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::learner::{MlpLearner, Segmenter};
use crate::metrics::{mean_present, mean_std};
use crate::runner::{compare_methods, pretrain, train_policy, Benchmark, CompareSettings, Comparison, RunRecord, TrainedPolicy};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub format_version: u32,
    /// Version of the tool that produced the run.
    pub tool_version: String,
    /// Absent for manifests assembled from external tables.
    #[serde(default)]
    pub config: Option<RunConfig>,
    #[serde(default)]
    pub class_names: Vec<String>,
    /// Mean IoU of the initial learner on the test images.
    #[serde(default)]
    pub initial_miou: Option<f64>,
    pub comparison: Comparison,
}

impl RunManifest {
    pub fn new(config: Option<RunConfig>, initial_miou: Option<f64>, comparison: Comparison) -> Self {
        RunManifest {
            format_version: MANIFEST_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            class_names: Vec::new(),
            initial_miou,
            comparison,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: RunManifest = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        if m.format_version != MANIFEST_VERSION {
            return Err(Error::Version { found: m.format_version, expected: MANIFEST_VERSION });
        }
        Ok(m)
    }

    fn num_classes(&self) -> usize {
        self.comparison.records.iter().map(|r| r.per_class.len()).max().unwrap_or(0)
    }

    fn class_name(&self, k: usize) -> String {
        self.class_names.get(k).cloned().unwrap_or_else(|| format!("class_{k}"))
    }
}

/// Builds the benchmark and the initial learner for a configuration.
pub fn prepare(config: &RunConfig) -> Result<(Benchmark, MlpLearner)> {
    config.validate()?;
    let bench = Benchmark::build(&config.benchmark)?;
    let theta0 = pretrain(&bench, &config.learner, config.pretrain)?;
    Ok((bench, theta0))
}

/// Runs the full comparison described by `config`.
pub fn run_comparison(config: &RunConfig) -> Result<(RunManifest, MlpLearner)> {
    let (bench, theta0) = prepare(config)?;
    let initial = theta0.mean_iou(bench.test_set())?;
    let settings = CompareSettings {
        features: &config.features,
        agent: &config.agent,
        policy: &config.policy,
        budgets: &config.evaluation.budgets,
        final_training: config.evaluation.final_training,
    };
    let comparison =
        compare_methods(&bench, &theta0, &config.evaluation.methods, &config.evaluation.seeds, &settings)?;
    Ok((RunManifest::new(Some(config.clone()), Some(initial), comparison), theta0))
}

/// Trains one query policy with the run's default feature variant.
pub fn train_policy_from_config(config: &RunConfig, seed: u64) -> Result<(TrainedPolicy, MlpLearner)> {
    let (bench, theta0) = prepare(config)?;
    let policy = train_policy(&bench, &theta0, &config.agent, &config.features, &config.policy, seed)?;
    Ok((policy, theta0))
}

/// Methods in order of first appearance.
pub fn methods(records: &[RunRecord]) -> Vec<String> {
    let mut seen = Vec::new();
    for r in records {
        if !seen.contains(&r.method) {
            seen.push(r.method.clone());
        }
    }
    seen
}

pub fn budgets(records: &[RunRecord]) -> Vec<usize> {
    records.iter().map(|r| r.budget).collect::<BTreeSet<_>>().into_iter().collect()
}

/// Aggregate over seeds for one (method, budget).
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub budget: usize,
    pub runs: usize,
    pub miou_mean: f64,
    pub miou_std: f64,
    pub entropy_mean: f64,
    pub entropy_std: f64,
    /// Mean over runs of each class IoU; `None` if absent from every run.
    pub per_class: Vec<Option<f64>>,
    pub frequencies: Vec<f64>,
}

pub fn summarize(records: &[RunRecord]) -> Vec<SummaryRow> {
    let c = records.iter().map(|r| r.per_class.len()).max().unwrap_or(0);
    let mut rows = Vec::new();
    for method in methods(records) {
        for budget in budgets(records) {
            let group: Vec<&RunRecord> =
                records.iter().filter(|r| r.method == method && r.budget == budget).collect();
            if group.is_empty() {
                continue;
            }
            let mious: Vec<f64> = group.iter().map(|r| mean_present(&r.per_class)).collect();
            let ents: Vec<f64> = group.iter().map(|r| r.label_entropy).collect();
            let (miou_mean, miou_std) = mean_std(&mious);
            let (entropy_mean, entropy_std) = mean_std(&ents);
            let per_class = (0..c)
                .map(|k| {
                    let v: Vec<f64> = group.iter().filter_map(|r| r.per_class.get(k).copied().flatten()).collect();
                    (!v.is_empty()).then(|| mean_std(&v).0)
                })
                .collect();
            let frequencies = (0..c)
                .map(|k| {
                    let v: Vec<f64> = group.iter().map(|r| r.class_frequencies.get(k).copied().unwrap_or(0.0)).collect();
                    mean_std(&v).0
                })
                .collect();
            rows.push(SummaryRow {
                method: method.clone(),
                budget,
                runs: group.len(),
                miou_mean,
                miou_std,
                entropy_mean,
                entropy_std,
                per_class,
                frequencies,
            });
        }
    }
    rows
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes every CSV and plot for a manifest into `dir`; returns the paths.
pub fn write_report(manifest: &RunManifest, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let records = &manifest.comparison.records;
    let c = manifest.num_classes();
    let class_cols: Vec<String> = (0..c).map(|k| manifest.class_name(k)).collect();
    let summary = summarize(records);
    let mut written = Vec::new();

    let path = dir.join("curves.csv");
    let mut header: Vec<String> = ["method", "seed", "budget", "miou"].map(String::from).to_vec();
    header.extend(class_cols.iter().map(|n| format!("iou_{n}")));
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            let mut row = vec![r.method.clone(), r.seed.to_string(), r.budget.to_string(), fmt(mean_present(&r.per_class))];
            row.extend((0..c).map(|k| fmt_opt(r.per_class.get(k).copied().flatten())));
            row
        })
        .collect();
    write_csv(&path, &header, &rows)?;
    written.push(path);

    let path = dir.join("summary.csv");
    let header = ["method", "budget", "runs", "miou_mean", "miou_std", "entropy_mean", "entropy_std"].map(String::from);
    let rows: Vec<Vec<String>> = summary
        .iter()
        .map(|s| {
            vec![
                s.method.clone(),
                s.budget.to_string(),
                s.runs.to_string(),
                fmt(s.miou_mean),
                fmt(s.miou_std),
                fmt(s.entropy_mean),
                fmt(s.entropy_std),
            ]
        })
        .collect();
    write_csv(&path, &header, &rows)?;
    written.push(path);

    let path = dir.join("per_class.csv");
    let mut header: Vec<String> = ["method", "budget"].map(String::from).to_vec();
    header.extend(class_cols.iter().cloned());
    header.push("miou".into());
    let rows: Vec<Vec<String>> = summary
        .iter()
        .map(|s| {
            let mut row = vec![s.method.clone(), s.budget.to_string()];
            row.extend(s.per_class.iter().map(|v| fmt_opt(*v)));
            row.push(fmt(mean_present(&s.per_class)));
            row
        })
        .collect();
    write_csv(&path, &header, &rows)?;
    written.push(path);

    let path = dir.join("entropy.csv");
    let header = ["method", "seed", "budget", "label_entropy"].map(String::from);
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| vec![r.method.clone(), r.seed.to_string(), r.budget.to_string(), fmt(r.label_entropy)])
        .collect();
    write_csv(&path, &header, &rows)?;
    written.push(path);

    let path = dir.join("frequencies.csv");
    let mut header: Vec<String> = ["method", "budget"].map(String::from).to_vec();
    header.extend(class_cols.iter().cloned());
    let rows: Vec<Vec<String>> = summary
        .iter()
        .map(|s| {
            let mut row = vec![s.method.clone(), s.budget.to_string()];
            row.extend((0..c).map(|k| fmt_opt(s.frequencies.get(k).copied())));
            row
        })
        .collect();
    write_csv(&path, &header, &rows)?;
    written.push(path);

    let policies = &manifest.comparison.policies;
    if !policies.is_empty() {
        let path = dir.join("policy.csv");
        let header = ["method", "seed", "episode", "return"].map(String::from);
        let rows: Vec<Vec<String>> = policies
            .iter()
            .flat_map(|p| {
                p.returns
                    .iter()
                    .enumerate()
                    .map(move |(e, r)| vec![p.method.clone(), p.seed.to_string(), e.to_string(), fmt(*r)])
            })
            .collect();
        write_csv(&path, &header, &rows)?;
        written.push(path);
    }

    if !records.is_empty() {
        let path = dir.join("curves.svg");
        plot_curves(&summary, &path)?;
        written.push(path);
        let path = dir.join("entropy.svg");
        plot_entropy(&summary, &path)?;
        written.push(path);
    }
    Ok(written)
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Plot(e.to_string())
}

fn plot_curves(summary: &[SummaryRow], path: &Path) -> Result<()> {
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let bmax = summary.iter().map(|s| s.budget).max().unwrap_or(1).max(1) as f64;
    let lo = summary.iter().map(|s| s.miou_mean - s.miou_std).fold(f64::INFINITY, f64::min);
    let hi = summary.iter().map(|s| s.miou_mean + s.miou_std).fold(f64::NEG_INFINITY, f64::max);
    let pad = ((hi - lo) * 0.1).max(1e-3);
    let mut chart = ChartBuilder::on(&root)
        .caption("mean IoU vs labeled regions", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(0.0..bmax * 1.05, (lo - pad)..(hi + pad))
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("labeled regions").y_desc("mIoU").draw().map_err(plot_err)?;
    let names = methods_of(summary);
    for (i, m) in names.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let pts: Vec<(f64, f64)> =
            summary.iter().filter(|s| &s.method == m).map(|s| (s.budget as f64, s.miou_mean)).collect();
        chart
            .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(m.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
        chart
            .draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled())))
            .map_err(plot_err)?;
    }
    chart.configure_series_labels().border_style(BLACK).draw().map_err(plot_err)?;
    root.present().map_err(plot_err)
}

fn methods_of(summary: &[SummaryRow]) -> Vec<String> {
    let mut seen: Vec<String> = Vec::new();
    for s in summary {
        if !seen.contains(&s.method) {
            seen.push(s.method.clone());
        }
    }
    seen
}

fn plot_entropy(summary: &[SummaryRow], path: &Path) -> Result<()> {
    let bmax = summary.iter().map(|s| s.budget).max().unwrap_or(0);
    let rows: Vec<&SummaryRow> = summary.iter().filter(|s| s.budget == bmax).collect();
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let top = rows.iter().map(|s| s.entropy_mean).fold(0.0, f64::max).max(1e-3) * 1.15;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("label-distribution entropy at budget {bmax}"), ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(0.0..rows.len() as f64, 0.0..top)
        .map_err(plot_err)?;
    let labels: Vec<String> = rows.iter().map(|s| s.method.clone()).collect();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(rows.len().max(1))
        .x_label_formatter(&|x| labels.get(x.floor() as usize).cloned().unwrap_or_default())
        .y_desc("entropy (nats)")
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(rows.iter().enumerate().map(|(i, s)| {
            let x = i as f64;
            Rectangle::new([(x + 0.15, 0.0), (x + 0.85, s.entropy_mean)], Palette99::pick(i).filled())
        }))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}
