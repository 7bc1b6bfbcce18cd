//! The STL/MTL x modality grid.
//!
//! Every seed trains 21 models: single-task sentiment, single-task emotion
//! and multi-task, each over the seven modality subsets. Dev-set scores are
//! laid out as a results table with rows task x regime x metric and
//! columns T, A, V, T+V, T+A, A+V, T+A+V.
//!
//! A cell's dev score is sentiment accuracy or emotion average weighted
//! accuracy; a regime's mean averages its 14 cells.

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::{create_dir, to_json_pretty, write_file, CompareArgs};
use mtmm_core::checkpoint;
use mtmm_core::data::{load_dataset, Dataset};
use mtmm_core::metrics::MetricsReport;
use mtmm_core::model::{Modalities, TaskMode};
use mtmm_core::training::{check_dims, evaluate, train};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Sentiment,
    Emotion,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Stl,
    Mtl,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub mode: TaskMode,
    pub modalities: Modalities,
    /// Relative to the compare output directory.
    pub dir: String,
    pub best_epoch: Option<usize>,
    pub dev: MetricsReport,
}

/// One table row; `acc` is accuracy for sentiment and weighted accuracy
/// for emotion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub task: Task,
    pub regime: Regime,
    pub f1: Vec<Option<f64>>,
    pub acc: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridTable {
    pub columns: Vec<String>,
    pub rows: Vec<TableRow>,
}

const ROWS: [(Task, Regime); 4] = [
    (Task::Sentiment, Regime::Stl),
    (Task::Sentiment, Regime::Mtl),
    (Task::Emotion, Regime::Stl),
    (Task::Emotion, Regime::Mtl),
];

fn columns() -> Vec<String> {
    Modalities::GRID.iter().map(Modalities::label).collect()
}

impl GridTable {
    pub fn from_cells(cells: &[CellResult]) -> Self {
        let rows = ROWS
            .iter()
            .map(|&(task, regime)| {
                let mode = match (task, regime) {
                    (Task::Sentiment, Regime::Stl) => TaskMode::StlSentiment,
                    (Task::Emotion, Regime::Stl) => TaskMode::StlEmotion,
                    (_, Regime::Mtl) => TaskMode::Mtl,
                };
                let (f1, acc) = Modalities::GRID
                    .iter()
                    .map(|m| {
                        let dev = cells
                            .iter()
                            .find(|c| c.mode == mode && c.modalities == *m)
                            .map(|c| &c.dev);
                        match task {
                            Task::Sentiment => {
                                let s = dev.and_then(|d| d.sentiment.as_ref());
                                (s.map(|s| s.f1), s.map(|s| s.accuracy))
                            }
                            Task::Emotion => {
                                let e = dev.and_then(|d| d.emotion.as_ref());
                                (
                                    e.map(|e| e.average_f1),
                                    e.and_then(|e| e.average_weighted_accuracy),
                                )
                            }
                        }
                    })
                    .unzip();
                TableRow {
                    task,
                    regime,
                    f1,
                    acc,
                }
            })
            .collect();
        Self {
            columns: columns(),
            rows,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.rows.len() == ROWS.len()
            && self
                .rows
                .iter()
                .all(|r| r.f1.iter().chain(&r.acc).all(Option::is_some))
    }

    pub fn num_filled(&self) -> usize {
        self.rows
            .iter()
            .flat_map(|r| r.f1.iter().chain(&r.acc))
            .filter(|v| v.is_some())
            .count()
    }

    /// Mean dev score over the regime's cells, if all are filled.
    pub fn regime_mean(&self, regime: Regime) -> Option<f64> {
        let scores: Option<Vec<f64>> = self
            .rows
            .iter()
            .filter(|r| r.regime == regime)
            .flat_map(|r| r.acc.iter().copied())
            .collect();
        let scores = scores?;
        (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64)
    }

    /// Element-wise mean; a cell is `None` unless it is filled in every table.
    pub fn mean(tables: &[GridTable]) -> Self {
        let avg = |get: &dyn Fn(&GridTable) -> Option<f64>| -> Option<f64> {
            let v: Option<Vec<f64>> = tables.iter().map(get).collect();
            v.filter(|v| !v.is_empty())
                .map(|v| v.iter().sum::<f64>() / v.len() as f64)
        };
        let rows = ROWS
            .iter()
            .enumerate()
            .map(|(i, &(task, regime))| {
                let col = |f: fn(&TableRow) -> &Vec<Option<f64>>| -> Vec<Option<f64>> {
                    (0..Modalities::GRID.len())
                        .map(|j| avg(&|t: &GridTable| t.rows.get(i).and_then(|r| f(r)[j])))
                        .collect()
                };
                TableRow {
                    task,
                    regime,
                    f1: col(|r| &r.f1),
                    acc: col(|r| &r.acc),
                }
            })
            .collect();
        Self {
            columns: columns(),
            rows,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<16}", "");
        for c in &self.columns {
            let _ = write!(s, "{c:>7}");
        }
        s.push('\n');
        for r in &self.rows {
            let task = match r.task {
                Task::Sentiment => "Sent",
                Task::Emotion => "Emo",
            };
            let regime = match r.regime {
                Regime::Stl => "STL",
                Regime::Mtl => "MTL",
            };
            let acc_name = match r.task {
                Task::Sentiment => "Acc",
                Task::Emotion => "W-Acc",
            };
            for (metric, vals) in [("F1", &r.f1), (acc_name, &r.acc)] {
                let _ = write!(s, "{:<16}", format!("{task} {regime} {metric}"));
                for v in vals {
                    match v {
                        Some(v) => {
                            let _ = write!(s, "{:>7.1}", 100.0 * v);
                        }
                        None => {
                            let _ = write!(s, "{:>7}", "NA");
                        }
                    }
                }
                s.push('\n');
            }
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub cells: Vec<CellResult>,
    pub table: GridTable,
    pub stl_mean: Option<f64>,
    pub mtl_mean: Option<f64>,
    pub mtl_ge_stl: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub config: RunConfig,
    pub train_videos: usize,
    pub dev_videos: usize,
    pub runs: Vec<SeedResult>,
    pub mean_table: GridTable,
    pub stl_mean: Option<f64>,
    pub mtl_mean: Option<f64>,
    /// Seeds on which the MTL mean dev score reached the STL mean.
    pub mtl_ge_stl_seeds: usize,
    pub complete: bool,
}

impl CompareReport {
    pub fn to_text(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| format!("{v:.4}"));
        let mut s = String::new();
        let _ = writeln!(
            s,
            "train videos {}, dev videos {}, dev scores in percent",
            self.train_videos, self.dev_videos
        );
        for r in &self.runs {
            let _ = writeln!(s, "\nseed {}", r.seed);
            s.push_str(&r.table.to_text());
            let _ = writeln!(
                s,
                "dev score: STL mean {}, MTL mean {}, MTL >= STL: {}",
                fmt(r.stl_mean),
                fmt(r.mtl_mean),
                r.mtl_ge_stl.map_or("NA", |b| if b { "yes" } else { "no" })
            );
        }
        let _ = writeln!(s, "\nmean over {} seed(s)", self.runs.len());
        s.push_str(&self.mean_table.to_text());
        let _ = writeln!(
            s,
            "dev score: STL mean {}, MTL mean {}, MTL >= STL on {} of {} seed(s)",
            fmt(self.stl_mean),
            fmt(self.mtl_mean),
            self.mtl_ge_stl_seeds,
            self.runs.len()
        );
        let _ = writeln!(
            s,
            "grid complete: {}",
            if self.complete { "yes" } else { "no" }
        );
        s
    }
}

const MODES: [TaskMode; 3] = [TaskMode::StlSentiment, TaskMode::StlEmotion, TaskMode::Mtl];

fn cell_dir(seed: u64, mode: TaskMode, m: Modalities) -> String {
    format!("seed-{seed}/{mode}-{}", m.label().to_lowercase())
}

fn run_cell(
    base: &RunConfig,
    seed: u64,
    mode: TaskMode,
    modalities: Modalities,
    train_set: &Dataset,
    dev_set: &Dataset,
    out: &Path,
) -> Result<CellResult> {
    let cfg = RunConfig {
        seed,
        mode,
        modalities,
        ..base.clone()
    };
    let model = cfg.model_config(train_set.dims)?;
    let (params, history) = train(&model, train_set, Some(dev_set), &cfg.train_options())?;
    let dev = evaluate(&params, &model, dev_set, cfg.thresholds)?;
    let rel = cell_dir(seed, mode, modalities);
    let dir = out.join(&rel);
    create_dir(&dir)?;
    write_file(
        &dir.join("checkpoint.txt"),
        checkpoint::to_string(&params, &model),
    )?;
    write_file(&dir.join("history.json"), to_json_pretty(&history))?;
    write_file(&dir.join("report.json"), to_json_pretty(&dev))?;
    Ok(CellResult {
        mode,
        modalities,
        dir: rel,
        best_epoch: history.best_epoch,
        dev,
    })
}

/// Runs the grid for every seed, writing cell outputs under `out`.
pub fn run_grid(
    cfg: &RunConfig,
    seeds: &[u64],
    train_set: &Dataset,
    dev_set: &Dataset,
    out: &Path,
) -> Result<CompareReport> {
    let jobs: Vec<(u64, TaskMode, Modalities)> = seeds
        .iter()
        .flat_map(|&s| {
            MODES
                .iter()
                .flat_map(move |&mode| Modalities::GRID.iter().map(move |&m| (s, mode, m)))
        })
        .collect();
    let cells = jobs
        .par_iter()
        .map(|&(s, mode, m)| run_cell(cfg, s, mode, m, train_set, dev_set, out))
        .collect::<Result<Vec<_>>>()?;

    let per_seed = MODES.len() * Modalities::GRID.len();
    let runs: Vec<SeedResult> = seeds
        .iter()
        .zip(cells.chunks(per_seed))
        .map(|(&seed, cells)| {
            let table = GridTable::from_cells(cells);
            let stl_mean = table.regime_mean(Regime::Stl);
            let mtl_mean = table.regime_mean(Regime::Mtl);
            SeedResult {
                seed,
                cells: cells.to_vec(),
                stl_mean,
                mtl_mean,
                mtl_ge_stl: stl_mean.zip(mtl_mean).map(|(s, m)| m >= s),
                table,
            }
        })
        .collect();
    let tables: Vec<GridTable> = runs.iter().map(|r| r.table.clone()).collect();
    let mean_table = GridTable::mean(&tables);
    Ok(CompareReport {
        config: cfg.clone(),
        train_videos: train_set.len(),
        dev_videos: dev_set.len(),
        stl_mean: mean_table.regime_mean(Regime::Stl),
        mtl_mean: mean_table.regime_mean(Regime::Mtl),
        mtl_ge_stl_seeds: runs.iter().filter(|r| r.mtl_ge_stl == Some(true)).count(),
        complete: runs.iter().all(|r| r.table.is_complete()),
        runs,
        mean_table,
    })
}

pub fn cmd_compare(a: &CompareArgs) -> Result<()> {
    let mut cfg = RunConfig::base(a.flags.config.as_deref())?;
    a.flags.apply(&mut cfg);
    cfg.train = Some(a.data.clone());
    if a.dev.is_some() {
        cfg.dev = a.dev.clone();
    }
    let out = cfg.resolve_out_dir(a.out.clone());
    cfg.validate()?;
    if !(a.dev_fraction > 0.0 && a.dev_fraction < 1.0) {
        return Err(CliError::Usage(format!(
            "--dev-fraction {} outside (0, 1)",
            a.dev_fraction
        )));
    }
    let seeds = if a.seeds.is_empty() {
        vec![cfg.seed]
    } else {
        a.seeds.clone()
    };

    let data = load_dataset(&a.data)?;
    let (train_set, dev_set) = match cfg.dev.as_deref() {
        Some(p) => (data, load_dataset(p)?),
        None => data.train_dev_split(a.dev_fraction, cfg.seed),
    };
    if train_set.is_empty() || dev_set.is_empty() {
        return Err(CliError::Data(
            "compare needs at least one training and one dev video".into(),
        ));
    }
    let model = cfg.model_config(train_set.dims)?;
    check_dims(&model, &dev_set)?;

    create_dir(&out)?;
    let report = run_grid(&cfg, &seeds, &train_set, &dev_set, &out)?;
    let text = report.to_text();
    write_file(&out.join("config.json"), cfg.to_json())?;
    write_file(&out.join("compare.json"), to_json_pretty(&report))?;
    write_file(&out.join("compare.txt"), &text)?;
    print!("{text}");
    Ok(())
}
