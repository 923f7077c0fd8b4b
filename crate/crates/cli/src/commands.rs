//! train, evaluate, bench, explain, synth and inspect.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context, Result};
use bigat_core::data::{write_dataset_csv, default_feature_names, synth_generate, Dataset, Sidecar, SynthConfig};
use bigat_core::explain::{attribution_summary, Attribution, AttributionSettings, ModelPredictor};
use bigat_core::metrics::{evaluate, inference_bench, write_roc_csvs, BenchReport, EvalReport};
use bigat_core::model::{
    format_summary, load, param_total, save, variant_by_id, CheckpointMeta, Hyper, ModelParams, VariantSpec,
    CANONICAL_VARIANT,
};
use bigat_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::pipeline::{prepare, Fitted, Prepared};
use crate::report::{
    fit_and_evaluate, write_json, Artifacts, DataSummary, ResultsRow, RunReport, Status, Timings, VariantInfo,
};

pub const CHECKPOINT_FILE: &str = "model.bgid";
pub const REPORT_FILE: &str = "report.json";
pub const HISTORY_FILE: &str = "history.csv";

fn output_dir(cfg: &RunConfig) -> Result<PathBuf> {
    std::fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("stage: persist: creating {}", cfg.output_dir.display()))?;
    Ok(cfg.output_dir.clone())
}

pub(crate) fn variant_info(cfg: &RunConfig, spec: &VariantSpec) -> Result<VariantInfo> {
    let id = cfg.spec.is_none().then_some(cfg.variant);
    Ok(VariantInfo {
        id,
        name: spec.name.clone(),
        canonical: id == Some(CANONICAL_VARIANT),
        param_total: param_total(spec)?,
    })
}

pub(crate) fn data_summary(p: &Prepared, train_rows_balanced: usize) -> DataSummary {
    DataSummary {
        classes: p.fitted.codec.classes().to_vec(),
        seq_len: p.train.seq_len(),
        train_rows: p.train.len(),
        train_rows_balanced,
        test_rows: p.test.len(),
        train_class_counts: p.train.class_counts(),
        test_class_counts: p.test.class_counts(),
        clean: p.clean.clone(),
    }
}

/// Full pipeline: prepare, train, score the test split, time inference and
/// write the checkpoint, history, ROC curves and report into the output
/// directory.
pub fn cmd_train(cfg: &RunConfig) -> Result<RunReport> {
    let t = Instant::now();
    let prepared = prepare(cfg, None)?;
    let prepare_sec = t.elapsed().as_secs_f64();
    let spec = cfg
        .variant_spec(prepared.train.seq_len(), prepared.train.n_classes())
        .context("stage: build")?;
    let variant = variant_info(cfg, &spec).context("stage: build")?;
    log::info!("training {} ({} parameters)", spec.name, variant.param_total);
    let fit = fit_and_evaluate(cfg, &spec, &prepared.train, &prepared.test)?;

    let t = Instant::now();
    let bench = inference_bench(
        &fit.params,
        &spec,
        &prepared.test.x,
        cfg.bench_warmup,
        cfg.bench_repeats,
        cfg.bench_batch,
    )
    .context("stage: bench")?;
    let bench_sec = t.elapsed().as_secs_f64();

    let dir = output_dir(cfg)?;
    let checkpoint = dir.join(CHECKPOINT_FILE);
    save(&fit.params, &checkpoint_meta(cfg, &spec, &prepared.fitted)?, &checkpoint).context("stage: persist")?;
    let history_csv = dir.join(HISTORY_FILE);
    fit.history.write_csv(&history_csv).context("stage: persist")?;
    let roc_csvs = write_roc_csvs(&fit.curves, prepared.fitted.codec.classes(), &dir).context("stage: persist")?;
    let report_path = dir.join(REPORT_FILE);

    let report = RunReport {
        status: Status::Ok,
        config: cfg.clone(),
        variant,
        data: data_summary(&prepared, fit.history.train_rows),
        results: ResultsRow::new(&fit.eval, &bench),
        history: fit.history,
        eval: fit.eval,
        bench,
        timings: Timings {
            prepare_sec,
            train_sec: fit.train_sec,
            eval_sec: fit.eval_sec,
            bench_sec,
        },
        artifacts: Artifacts {
            checkpoint: Some(checkpoint),
            report: Some(report_path.clone()),
            history_csv: Some(history_csv),
            roc_csvs,
            attribution_csvs: Vec::new(),
        },
    };
    write_json(&report, &report_path).context("stage: persist")?;
    Ok(report)
}

pub(crate) fn checkpoint_meta(cfg: &RunConfig, spec: &VariantSpec, fitted: &Fitted) -> Result<CheckpointMeta> {
    let mut meta = CheckpointMeta::new(spec.clone()).with_train_config(cfg)?;
    meta.codec = Some(fitted.codec.clone());
    meta.encoder = fitted.encoder.clone();
    meta.scaler = fitted.scaler.clone();
    Ok(meta)
}

/// A loaded checkpoint with its data pipeline re-run under the stored
/// preprocessing.
pub struct Loaded {
    pub params: ModelParams,
    pub meta: CheckpointMeta,
    pub config: RunConfig,
    pub prepared: Prepared,
}

/// Loads `path` and prepares data with the checkpoint's codec, encoder and
/// scaler. When `cfg` names no data source, the source, split fraction and
/// seed recorded in the checkpoint are used.
pub fn load_for_data(path: &Path, cfg: &RunConfig) -> Result<Loaded> {
    let (params, meta) = load(path).with_context(|| format!("stage: load checkpoint {}", path.display()))?;
    let codec = meta
        .codec
        .clone()
        .context("stage: load checkpoint: no class list stored")?;
    let mut config = cfg.clone();
    if config.data.is_none() && config.synth.is_none() {
        let stored: RunConfig = serde_json::from_value(meta.train_config.clone())
            .context("stage: load checkpoint: no usable data source in the stored config; pass one")?;
        config.data = stored.data;
        config.synth = stored.synth;
        config.label_column = stored.label_column;
        config.train_frac = stored.train_frac;
        config.train.seed = stored.train.seed;
    }
    let fitted = Fitted {
        codec,
        encoder: meta.encoder.clone(),
        scaler: meta.scaler.clone(),
    };
    let prepared = prepare(&config, Some(&fitted))?;
    check_width(&meta.spec, &prepared.test)?;
    Ok(Loaded {
        params,
        meta,
        config,
        prepared,
    })
}

fn check_width(spec: &VariantSpec, ds: &Dataset) -> Result<()> {
    if ds.seq_len() != spec.seq_len || ds.input_dim() != spec.input_dim {
        bail!(
            "incompatible input: checkpoint expects {}x{} features per row, data has {}x{}",
            spec.seq_len,
            spec.input_dim,
            ds.seq_len(),
            ds.input_dim()
        );
    }
    if ds.n_classes() != spec.n_classes {
        bail!(
            "incompatible input: checkpoint has {} classes, data has {}",
            spec.n_classes,
            ds.n_classes()
        );
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    /// The held-out split produced by the configured fraction and seed.
    Test,
    /// Every row of the data source.
    All,
}

fn concat(a: &Dataset, b: &Dataset) -> Result<Dataset> {
    let mut data = a.x.data().to_vec();
    data.extend_from_slice(b.x.data());
    let mut shape = a.x.shape().to_vec();
    shape[0] += b.len();
    let mut y = a.y.clone();
    y.extend_from_slice(&b.y);
    Ok(Dataset::new(Tensor::new(shape, data)?, y, a.codec.clone())?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateReport {
    pub status: Status,
    pub config: RunConfig,
    pub checkpoint: PathBuf,
    pub split: EvalSplit,
    pub eval: EvalReport,
    pub roc_csvs: Vec<PathBuf>,
}

pub fn cmd_evaluate(checkpoint: &Path, cfg: &RunConfig, split: EvalSplit) -> Result<EvaluateReport> {
    let loaded = load_for_data(checkpoint, cfg)?;
    let ds = match split {
        EvalSplit::Test => loaded.prepared.test.clone(),
        EvalSplit::All => concat(&loaded.prepared.train, &loaded.prepared.test)?,
    };
    let (eval, curves) = evaluate(&loaded.params, &loaded.meta.spec, &ds).context("stage: evaluate")?;
    let dir = output_dir(cfg)?;
    let roc_csvs = write_roc_csvs(&curves, ds.codec.classes(), &dir).context("stage: persist")?;
    let report = EvaluateReport {
        status: Status::Ok,
        config: loaded.config,
        checkpoint: checkpoint.to_path_buf(),
        split,
        eval,
        roc_csvs,
    };
    write_json(&report, &dir.join("eval.json")).context("stage: persist")?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRun {
    pub status: Status,
    pub config: RunConfig,
    pub checkpoint: PathBuf,
    pub model: String,
    pub bench: BenchReport,
}

/// Times eval-mode inference over the test split.
pub fn cmd_bench(checkpoint: &Path, cfg: &RunConfig) -> Result<BenchRun> {
    let loaded = load_for_data(checkpoint, cfg)?;
    let bench = inference_bench(
        &loaded.params,
        &loaded.meta.spec,
        &loaded.prepared.test.x,
        cfg.bench_warmup,
        cfg.bench_repeats,
        cfg.bench_batch,
    )
    .context("stage: bench")?;
    let run = BenchRun {
        status: Status::Ok,
        config: loaded.config,
        checkpoint: checkpoint.to_path_buf(),
        model: loaded.meta.spec.name.clone(),
        bench,
    };
    write_json(&run, &output_dir(cfg)?.join("bench.json")).context("stage: persist")?;
    Ok(run)
}

/// `k` row indices spread evenly over `0..n`. Splits are stored class by
/// class, so a prefix would cover only the first classes.
fn spread(n: usize, k: usize) -> Vec<usize> {
    let k = k.min(n);
    (0..k).map(|i| i * n / k).collect()
}

fn flat_rows(ds: &Dataset, idx: &[usize]) -> Result<Tensor> {
    let sub = ds.subset(idx);
    Ok(sub.x.reshape(&[idx.len(), ds.row_width()])?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainReport {
    pub status: Status,
    pub config: RunConfig,
    pub checkpoint: PathBuf,
    pub attribution: Attribution,
    pub attribution_csv: PathBuf,
    pub top_features_json: PathBuf,
}

/// Mean absolute Shapley values over a spread sample of the test split,
/// against a spread background drawn from the training split.
pub fn cmd_explain(checkpoint: &Path, cfg: &RunConfig, settings: &AttributionSettings) -> Result<ExplainReport> {
    let loaded = load_for_data(checkpoint, cfg)?;
    let (train, test) = (&loaded.prepared.train, &loaded.prepared.test);
    ensure!(settings.sample_size > 0, "stage: explain: sample_size must be >= 1");
    ensure!(settings.background_size > 0, "stage: explain: background_size must be >= 1");
    let sample = flat_rows(test, &spread(test.len(), settings.sample_size))?;
    let background = flat_rows(train, &spread(train.len(), settings.background_size))?;
    let spec = &loaded.meta.spec;
    let names = if loaded.prepared.feature_names.len() == spec.seq_len * spec.input_dim {
        loaded.prepared.feature_names.clone()
    } else {
        default_feature_names(spec.seq_len * spec.input_dim)
    };
    let model = ModelPredictor {
        params: &loaded.params,
        spec,
    };
    let attribution = attribution_summary(&model, &background, &sample, &names, test.codec.classes(), settings)
        .context("stage: explain")?;
    let dir = output_dir(cfg)?;
    let csv = dir.join("attribution.csv");
    let top = dir.join("attribution_top.json");
    attribution.write(&csv, &top).context("stage: persist")?;
    let report = ExplainReport {
        status: Status::Ok,
        config: loaded.config,
        checkpoint: checkpoint.to_path_buf(),
        attribution,
        attribution_csv: csv,
        top_features_json: top,
    };
    write_json(&report, &dir.join("explain.json")).context("stage: persist")?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthOutput {
    pub settings: SynthConfig,
    pub csv: PathBuf,
    pub sidecar: PathBuf,
    pub rows: usize,
    pub class_counts: Vec<(String, usize)>,
}

/// Writes a synthetic flow table `synth.csv` and its sidecar into `dir`.
pub fn cmd_synth(settings: &SynthConfig, label_column: &str, dir: &Path) -> Result<SynthOutput> {
    let ds = synth_generate(settings).context("stage: synth")?;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let csv = dir.join("synth.csv");
    let sidecar = dir.join("synth.sidecar.json");
    write_dataset_csv(&ds, &default_feature_names(ds.row_width()), label_column, &csv).context("stage: persist")?;
    let side = Sidecar::describe(&ds, None, None);
    side.save(&sidecar).context("stage: persist")?;
    Ok(SynthOutput {
        settings: settings.clone(),
        csv,
        sidecar,
        rows: ds.len(),
        class_counts: side.class_counts.into_iter().collect(),
    })
}

pub enum InspectTarget<'a> {
    Variant { id: u8, seq_len: usize, n_classes: usize },
    Checkpoint(&'a Path),
}

/// Per-layer output shapes and parameter counts as a text table.
pub fn cmd_inspect(target: InspectTarget<'_>, hyper: &Hyper) -> Result<String> {
    let spec = match target {
        InspectTarget::Variant { id, seq_len, n_classes } => variant_by_id(id, seq_len, n_classes, hyper)?,
        InspectTarget::Checkpoint(path) => {
            load(path)
                .with_context(|| format!("loading checkpoint {}", path.display()))?
                .1
                .spec
        }
    };
    Ok(format!("Model: {}\n{}", spec.name, format_summary(&spec)?))
}
