//! The twelve-variant ablation sweep, with and without balancing.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use anyhow::{anyhow, Context, Result};
use bigat_core::data::{Balancing, Dataset};
use bigat_core::model::{param_total, VariantSpec, CANONICAL_VARIANT};
use bigat_core::RngStream;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::pipeline::prepare;
use crate::report::{fit_and_evaluate, write_json, Status};

/// Acc, Loss and FPR of one variant under one balancing setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingResult {
    pub balancing: Balancing,
    pub status: Status,
    pub accuracy: Option<f64>,
    pub loss: Option<f64>,
    pub fpr: Option<f64>,
    pub error: Option<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub id: u8,
    pub name: String,
    pub canonical: bool,
    pub param_total: Option<usize>,
    pub before: SettingResult,
    pub after: SettingResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    /// Failed only when every cell failed.
    pub status: Status,
    pub config: RunConfig,
    pub settings: [Balancing; 2],
    pub rows: Vec<AblationRow>,
    pub csv: PathBuf,
    pub report: PathBuf,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let (a, b) = (self.settings[0].label(), self.settings[1].label());
        let mut out = format!(
            "id,name,canonical,params,acc_{a},loss_{a},fpr_{a},status_{a},acc_{b},loss_{b},fpr_{b},status_{b}\n"
        );
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let status = |s: &SettingResult| match s.status {
            Status::Ok => "ok",
            Status::Failed => "failed",
        };
        for r in &self.rows {
            out.push_str(&format!(
                "{},\"{}\",{},{},{},{},{},{},{},{},{},{}\n",
                r.id,
                r.name,
                r.canonical,
                r.param_total.map(|p| p.to_string()).unwrap_or_default(),
                opt(r.before.accuracy),
                opt(r.before.loss),
                opt(r.before.fpr),
                status(&r.before),
                opt(r.after.accuracy),
                opt(r.after.loss),
                opt(r.after.fpr),
                status(&r.after),
            ));
        }
        out
    }
}

/// The second setting: the configured strategy, or RoS when none is set.
pub fn balanced_setting(cfg: &RunConfig) -> Balancing {
    match cfg.train.balancing {
        Balancing::None => Balancing::Ros,
        b => b,
    }
}

/// Seed for variant `id`, derived from the configured seed.
pub fn variant_seed(base: u64, id: u8) -> u64 {
    RngStream::new(base).fork(1000 + id as u64).next_u64()
}

fn run_cell(cfg: &RunConfig, spec: &VariantSpec, balancing: Balancing, seed: u64, train: &Dataset, test: &Dataset) -> SettingResult {
    let mut cell_cfg = cfg.clone();
    cell_cfg.train.balancing = balancing;
    cell_cfg.train.seed = seed;
    let outcome = catch_unwind(AssertUnwindSafe(|| fit_and_evaluate(&cell_cfg, spec, train, test)))
        .unwrap_or_else(|_| Err(anyhow!("panicked while training")));
    match outcome {
        Ok(fit) => SettingResult {
            balancing,
            status: Status::Ok,
            accuracy: Some(fit.eval.accuracy),
            loss: Some(fit.eval.loss),
            fpr: Some(fit.eval.fpr_macro),
            error: None,
            seed,
        },
        Err(e) => {
            log::warn!("{} ({}) failed: {e:#}", spec.name, balancing.label());
            SettingResult {
                balancing,
                status: Status::Failed,
                accuracy: None,
                loss: None,
                fpr: None,
                error: Some(format!("{e:#}")),
                seed,
            }
        }
    }
}

/// Trains and scores every ablation variant without balancing and with
/// [`balanced_setting`]. A failing cell is recorded and the sweep goes on.
/// Writes `ablation.csv` and `ablation.json` into the output directory.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<AblationReport> {
    let prepared = prepare(cfg, None)?;
    let (train, test) = (&prepared.train, &prepared.test);
    let settings = [Balancing::None, balanced_setting(cfg)];
    let mut rows = Vec::new();
    for (id, spec) in cfg.all_variants(train.seq_len(), train.n_classes()) {
        let seed = variant_seed(cfg.train.seed, id);
        log::info!("ablation #{id}: {}", spec.name);
        rows.push(AblationRow {
            id,
            name: spec.name.clone(),
            canonical: id == CANONICAL_VARIANT,
            param_total: param_total(&spec).ok(),
            before: run_cell(cfg, &spec, settings[0], seed, train, test),
            after: run_cell(cfg, &spec, settings[1], seed, train, test),
        });
    }
    let any_ok = rows
        .iter()
        .any(|r| r.before.status == Status::Ok || r.after.status == Status::Ok);
    std::fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    let report = AblationReport {
        status: if any_ok { Status::Ok } else { Status::Failed },
        config: cfg.clone(),
        settings,
        rows,
        csv: cfg.output_dir.join("ablation.csv"),
        report: cfg.output_dir.join("ablation.json"),
    };
    std::fs::write(&report.csv, report.to_csv()).with_context(|| format!("writing {}", report.csv.display()))?;
    write_json(&report, &report.report)?;
    Ok(report)
}
