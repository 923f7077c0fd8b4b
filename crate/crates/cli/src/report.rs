//! Report types shared by the subcommands.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use bigat_core::data::{CleanReport, Dataset};
use bigat_core::metrics::{evaluate, BenchReport, EvalReport, RocCurve};
use bigat_core::model::{ModelParams, VariantSpec};
use bigat_core::training::{train_with, History};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantInfo {
    /// Ablation id, absent for a custom spec.
    pub id: Option<u8>,
    pub name: String,
    pub canonical: bool,
    pub param_total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub classes: Vec<String>,
    pub seq_len: usize,
    pub train_rows: usize,
    /// Rows seen per epoch after balancing.
    pub train_rows_balanced: usize,
    pub test_rows: usize,
    pub train_class_counts: Vec<usize>,
    pub test_class_counts: Vec<usize>,
    pub clean: Option<CleanReport>,
}

/// One results row: accuracy, loss, macro precision/recall/F1, macro FPR
/// and measured inference time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsRow {
    pub accuracy: f64,
    pub loss: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub fpr: f64,
    pub inference_sec_per_instance: f64,
}

impl ResultsRow {
    pub fn new(eval: &EvalReport, bench: &BenchReport) -> Self {
        let h = &eval.headline;
        Self {
            accuracy: h.accuracy,
            loss: h.loss,
            precision: h.precision,
            recall: h.recall,
            f1: h.f1,
            fpr: h.fpr,
            inference_sec_per_instance: bench.mean_sec_per_instance,
        }
    }

    pub const COLUMNS: [&'static str; 7] = ["Acc (%)", "Loss", "Pr (%)", "Rc (%)", "F1 (%)", "FPR (%)", "Inf time (sec/inst)"];

    /// Header plus one line, percentages to two decimals.
    pub fn to_table(&self) -> String {
        let pct = |v: f64| format!("{:.2}", 100.0 * v);
        let cells = [
            pct(self.accuracy),
            format!("{:.4}", self.loss),
            pct(self.precision),
            pct(self.recall),
            pct(self.f1),
            pct(self.fpr),
            format!("{:.6}", self.inference_sec_per_instance),
        ];
        format!("{}\n{}\n", Self::COLUMNS.join(" | "), cells.join(" | "))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub prepare_sec: f64,
    pub train_sec: f64,
    pub eval_sec: f64,
    pub bench_sec: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub checkpoint: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub history_csv: Option<PathBuf>,
    pub roc_csvs: Vec<PathBuf>,
    pub attribution_csvs: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub status: Status,
    /// Effective configuration after file, environment and flag merging.
    pub config: RunConfig,
    pub variant: VariantInfo,
    pub data: DataSummary,
    pub history: History,
    pub eval: EvalReport,
    pub results: ResultsRow,
    pub bench: BenchReport,
    pub timings: Timings,
    pub artifacts: Artifacts,
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// A trained model scored on a held-out set.
pub(crate) struct Fit {
    pub params: ModelParams,
    pub history: History,
    pub eval: EvalReport,
    pub curves: Vec<RocCurve>,
    pub train_sec: f64,
    pub eval_sec: f64,
}

/// Trains `spec` on `train` with `test` as the validation set, then scores
/// `test`.
pub(crate) fn fit_and_evaluate(cfg: &RunConfig, spec: &VariantSpec, train: &Dataset, test: &Dataset) -> Result<Fit> {
    let t = Instant::now();
    let (params, history) = train_with(spec, train, Some(test), &cfg.train, |r, _| {
        log::info!(
            "{} epoch {}: loss {:.4} acc {:.4} val_loss {:.4} val_acc {:.4}",
            spec.name,
            r.epoch,
            r.train_loss,
            r.train_acc,
            r.val_loss.unwrap_or(f64::NAN),
            r.val_acc.unwrap_or(f64::NAN)
        );
    })
    .context("stage: train")?;
    let train_sec = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let (eval, curves) = evaluate(&params, spec, test).context("stage: evaluate")?;
    Ok(Fit {
        params,
        history,
        eval,
        curves,
        train_sec,
        eval_sec: t.elapsed().as_secs_f64(),
    })
}
