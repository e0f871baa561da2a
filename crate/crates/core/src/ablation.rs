//! Sweeps over NF, LSTM cells, VCL or the short/long-term memory switches,
//! training each configuration from scratch and tracking AUC per epoch.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions};
use crate::model::Movad;
use crate::train::{init_rng, StepMetrics, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Nf,
    LstmCells,
    Vcl,
    /// Short-term memory on (NF = 3) or off (NF = 1) crossed with long-term
    /// memory on (2 cells) or off (0 cells).
    MemoryOnoff,
}

impl std::str::FromStr for AblationAxis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.replace('-', "_").as_str() {
            "nf" => Ok(Self::Nf),
            "lstm_cells" | "cells" => Ok(Self::LstmCells),
            "vcl" => Ok(Self::Vcl),
            "memory_onoff" | "memory" => Ok(Self::MemoryOnoff),
            _ => Err(format!("unknown ablation axis {s:?}")),
        }
    }
}

/// The four memory rows as `(nf, lstm_cells)`, in table order.
pub const MEMORY_ROWS: [(usize, usize); 4] = [(1, 0), (3, 0), (1, 2), (3, 2)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationPoint {
    pub nf: usize,
    pub lstm_cells: usize,
    pub vcl: usize,
}

impl AblationPoint {
    pub fn label(&self, axis: AblationAxis) -> String {
        match axis {
            AblationAxis::Nf => format!("nf={}", self.nf),
            AblationAxis::LstmCells => format!("cells={}", self.lstm_cells),
            AblationAxis::Vcl => format!("vcl={}", self.vcl),
            AblationAxis::MemoryOnoff => format!("nf={},cells={}", self.nf, self.lstm_cells),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub axis: AblationAxis,
    /// Axis values; for the memory axis, 1-based row numbers of
    /// [`MEMORY_ROWS`] (all four when empty).
    pub values: Vec<usize>,
    pub base: RunConfig,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    #[serde(default)]
    pub eval: EvalOptions,
}

impl AblationGrid {
    pub fn points(&self) -> Result<Vec<AblationPoint>> {
        let base = AblationPoint {
            nf: self.base.model.stmm.nf,
            lstm_cells: self.base.model.head.lstm_cells,
            vcl: self.base.train.vcl,
        };
        if self.axis == AblationAxis::MemoryOnoff {
            let rows: Vec<usize> = if self.values.is_empty() { vec![1, 2, 3, 4] } else { self.values.clone() };
            return rows
                .into_iter()
                .map(|r| {
                    let &(nf, lstm_cells) = MEMORY_ROWS
                        .get(r.wrapping_sub(1))
                        .ok_or_else(|| Error::Config(format!("memory row {r} is not in 1..=4")))?;
                    Ok(AblationPoint { nf, lstm_cells, ..base })
                })
                .collect();
        }
        if self.values.is_empty() {
            return Err(Error::Config("ablation grid has no values".into()));
        }
        Ok(self
            .values
            .iter()
            .map(|&v| match self.axis {
                AblationAxis::Nf => AblationPoint { nf: v, ..base },
                AblationAxis::LstmCells => AblationPoint { lstm_cells: v, ..base },
                AblationAxis::Vcl => AblationPoint { vcl: v, ..base },
                AblationAxis::MemoryOnoff => unreachable!(),
            })
            .collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.epochs == 0 {
            return Err(Error::Config("ablation needs at least one seed and one epoch".into()));
        }
        for p in self.points()? {
            for &seed in &self.seeds {
                self.config_for(&p, seed).validate()?;
            }
        }
        Ok(())
    }

    pub fn config_for(&self, point: &AblationPoint, seed: u64) -> RunConfig {
        let mut cfg = self.base.clone();
        cfg.model.stmm.nf = point.nf;
        cfg.model.head.lstm_cells = point.lstm_cells;
        cfg.train.vcl = point.vcl;
        cfg.train.seed = seed;
        cfg.train.epochs = self.epochs;
        cfg
    }
}

/// AUC after every epoch of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub curve: Vec<f64>,
    pub best_auc: f64,
    pub best_epoch: usize,
    pub final_auc: f64,
}

impl RunOutcome {
    fn from_curve(curve: Vec<f64>) -> Self {
        let (best_epoch, best_auc) = curve
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
        Self {
            final_auc: *curve.last().unwrap_or(&f64::NAN),
            best_auc,
            best_epoch,
            curve,
        }
    }
}

/// Trains `config` from a fresh seeded initialization, evaluating on `eval`
/// after each epoch. Returns the trainer and the AUC curve.
pub fn train_and_evaluate(
    config: &RunConfig,
    train: &Dataset,
    eval: &Dataset,
    options: EvalOptions,
    on_step: impl FnMut(&StepMetrics),
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(Trainer, RunOutcome)> {
    config.validate()?;
    let mut model = Movad::new(&config.model)?;
    model.init_params(&mut init_rng(config.train.seed));
    let mut trainer = Trainer::new(model, &config.train, train)?;
    let mut curve = Vec::with_capacity(config.train.epochs);
    trainer.fit(train, config.train.epochs, on_step, |epoch, t| {
        let auc = evaluate(&Arc::new(t.model.clone()), eval, options)?.overall_auc;
        on_epoch(epoch, auc);
        curve.push(auc);
        Ok(())
    })?;
    Ok((trainer, RunOutcome::from_curve(curve)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub axis: AblationAxis,
    pub value: String,
    pub nf: usize,
    pub lstm_cells: usize,
    pub vcl: usize,
    pub seed: u64,
    pub best_auc: Option<f64>,
    pub final_auc: Option<f64>,
    pub best_epoch: Option<usize>,
    pub curve: Vec<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub point: AblationPoint,
    pub label: String,
    pub mean_best_auc: Option<f64>,
    pub mean_final_auc: Option<f64>,
    /// Mean AUC per epoch over the successful seeds.
    pub mean_curve: Vec<f64>,
    pub runs: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub axis: AblationAxis,
    pub runs: Vec<RunRecord>,
    pub summary: Vec<SummaryRow>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Runs every `(point, seed)` of the grid. A failing run is recorded and the
/// sweep continues.
pub fn run_ablation(
    grid: &AblationGrid,
    train: &Dataset,
    eval: &Dataset,
    mut progress: impl FnMut(&RunRecord),
) -> Result<AblationReport> {
    grid.validate()?;
    let mut runs = Vec::new();
    let mut summary = Vec::new();
    for point in grid.points()? {
        let label = point.label(grid.axis);
        let mut outcomes = Vec::new();
        let mut failures = 0;
        for &seed in &grid.seeds {
            let cfg = grid.config_for(&point, seed);
            let result = train_and_evaluate(&cfg, train, eval, grid.eval, |_| {}, |_, _| {});
            let record = match result {
                Ok((_, o)) => {
                    let r = RunRecord {
                        axis: grid.axis,
                        value: label.clone(),
                        nf: point.nf,
                        lstm_cells: point.lstm_cells,
                        vcl: point.vcl,
                        seed,
                        best_auc: Some(o.best_auc),
                        final_auc: Some(o.final_auc),
                        best_epoch: Some(o.best_epoch),
                        curve: o.curve.clone(),
                        error: None,
                    };
                    outcomes.push(o);
                    r
                }
                Err(e) => {
                    log::warn!("ablation run {label} seed {seed} failed: {e}");
                    failures += 1;
                    RunRecord {
                        axis: grid.axis,
                        value: label.clone(),
                        nf: point.nf,
                        lstm_cells: point.lstm_cells,
                        vcl: point.vcl,
                        seed,
                        best_auc: None,
                        final_auc: None,
                        best_epoch: None,
                        curve: vec![],
                        error: Some(e.to_string()),
                    }
                }
            };
            progress(&record);
            runs.push(record);
        }
        let best: Vec<f64> = outcomes.iter().map(|o| o.best_auc).collect();
        let last: Vec<f64> = outcomes.iter().map(|o| o.final_auc).collect();
        let mean_curve = (0..grid.epochs)
            .map(|e| mean(&outcomes.iter().map(|o| o.curve[e]).collect::<Vec<_>>()).unwrap_or(f64::NAN))
            .collect();
        summary.push(SummaryRow {
            point,
            label,
            mean_best_auc: mean(&best),
            mean_final_auc: mean(&last),
            mean_curve,
            runs: outcomes.len(),
            failures,
        });
    }
    Ok(AblationReport {
        axis: grid.axis,
        runs,
        summary,
    })
}

fn fmt_auc(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |v| format!("{v:.6}"))
}

impl AblationReport {
    pub fn summary_row(&self, nf: usize, lstm_cells: usize) -> Option<&SummaryRow> {
        self.summary
            .iter()
            .find(|r| r.point.nf == nf && r.point.lstm_cells == lstm_cells)
    }

    /// One JSON record per run.
    pub fn runs_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.runs {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Tab separated summary. The memory axis uses one row per
    /// short-term/long-term combination.
    pub fn summary_tsv(&self) -> String {
        let mut out = String::new();
        if self.axis == AblationAxis::MemoryOnoff {
            out.push_str("short_term\tlong_term\tnf\tlstm_cells\tmean_best_auc\tmean_final_auc\truns\tfailures\n");
            for r in &self.summary {
                let yes = |b: bool| if b { "yes" } else { "no" };
                let _ = writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    yes(r.point.nf > 1),
                    yes(r.point.lstm_cells > 0),
                    r.point.nf,
                    r.point.lstm_cells,
                    fmt_auc(r.mean_best_auc),
                    fmt_auc(r.mean_final_auc),
                    r.runs,
                    r.failures
                );
            }
        } else {
            out.push_str("value\tmean_best_auc\tmean_final_auc\truns\tfailures\n");
            for r in &self.summary {
                let _ = writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{}",
                    r.label,
                    fmt_auc(r.mean_best_auc),
                    fmt_auc(r.mean_final_auc),
                    r.runs,
                    r.failures
                );
            }
        }
        out
    }

    /// Mean AUC-vs-epoch curve of every grid value.
    pub fn plot_svg(&self, path: &Path) -> Result<()> {
        let plot_err = |e: &dyn std::fmt::Display| Error::Plot(e.to_string());
        let epochs = self.summary.iter().map(|r| r.mean_curve.len()).max().unwrap_or(0).max(1);
        let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| plot_err(&e))?;
        let mut chart = ChartBuilder::on(&root)
            .caption(format!("AUC per epoch ({:?})", self.axis), ("sans-serif", 20))
            .margin(10)
            .x_label_area_size(35)
            .y_label_area_size(45)
            .build_cartesian_2d(1..epochs.max(2), 0.0..1.0)
            .map_err(|e| plot_err(&e))?;
        chart
            .configure_mesh()
            .x_desc("epoch")
            .y_desc("frame AUC")
            .draw()
            .map_err(|e| plot_err(&e))?;
        for (i, r) in self.summary.iter().enumerate() {
            let colour = Palette99::pick(i).to_rgba();
            let points: Vec<(usize, f64)> = r
                .mean_curve
                .iter()
                .enumerate()
                .filter(|(_, v)| v.is_finite())
                .map(|(e, &v)| (e + 1, v))
                .collect();
            chart
                .draw_series(LineSeries::new(points, colour.stroke_width(2)))
                .map_err(|e| plot_err(&e))?
                .label(r.label.clone())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], colour));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| plot_err(&e))?;
        root.present().map_err(|e| plot_err(&e))?;
        Ok(())
    }

    /// Writes `runs.jsonl`, `summary.tsv` and `curves.svg` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let runs = dir.join("runs.jsonl");
        std::fs::write(&runs, self.runs_jsonl()?).map_err(|e| Error::io(&runs, e))?;
        let tsv = dir.join("summary.tsv");
        std::fs::write(&tsv, self.summary_tsv()).map_err(|e| Error::io(&tsv, e))?;
        self.plot_svg(&dir.join("curves.svg"))
    }
}
