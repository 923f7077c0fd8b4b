//! Leave-one-attack-out runs: an attack class is removed from training and
//! its test rows stand in for unseen traffic.

use std::path::PathBuf;

use anyhow::{bail, ensure, Context, Result};
use bigat_core::data::{argmax_rows, Dataset, LabelCodec, MinMaxScaler};
use bigat_core::metrics::EvalReport;
use bigat_core::layers::Mode;
use bigat_core::model::predict;
use bigat_core::training::History;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::pipeline::{normal_class, prepare, Prepared};
use crate::report::{fit_and_evaluate, write_json, Status};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoaoFold {
    pub held_out: String,
    pub retained_classes: Vec<String>,
    pub train_rows: usize,
    /// Counted on the training split actually handed to the trainer.
    pub held_out_rows_in_train: usize,
    pub retained_test_rows: usize,
    pub held_out_test_rows: usize,
    /// Accuracy over test rows of retained classes only.
    pub retained_accuracy: f64,
    /// Share of held-out test rows predicted as some attack class.
    pub zero_day_detection_rate: f64,
    /// Accuracy over every test row, counting a held-out row as correct when
    /// it is flagged as an attack.
    pub all_rows_accuracy: f64,
    pub retained_eval: EvalReport,
    pub history: History,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoaoReport {
    pub status: Status,
    pub config: RunConfig,
    pub normal_class: String,
    /// Test accuracy of the same model trained on every class.
    pub baseline_accuracy: Option<f64>,
    pub folds: Vec<LoaoFold>,
    pub report: PathBuf,
}

/// Splits `ds` into rows of retained classes, relabelled under `retained`,
/// and rows of `held_out`. Also returns the original labels of the kept rows.
fn without_class(ds: &Dataset, held_out: usize, retained: &LabelCodec) -> Result<(Dataset, Dataset, Vec<usize>)> {
    let remap: Vec<Option<usize>> = ds
        .codec
        .classes()
        .iter()
        .map(|c| retained.index(c).ok())
        .collect();
    let (keep, drop): (Vec<usize>, Vec<usize>) = (0..ds.len()).partition(|&i| ds.y[i] != held_out);
    let kept = ds.subset(&keep);
    let y = kept
        .y
        .iter()
        .map(|&l| remap[l].context("label outside the retained codec"))
        .collect::<Result<_>>()?;
    Ok((Dataset::new(kept.x, y, retained.clone())?, ds.subset(&drop), kept.y))
}

fn fit_scaler(cfg: &RunConfig, train: &Dataset) -> Result<Option<MinMaxScaler>> {
    Ok(if cfg.scale {
        Some(MinMaxScaler::fit(&train.x).context("stage: scale")?)
    } else {
        None
    })
}

fn apply(scaler: &Option<MinMaxScaler>, ds: Dataset) -> Result<Dataset> {
    Ok(match scaler {
        Some(s) => ds.scaled(s).context("stage: scale")?,
        None => ds,
    })
}

fn run_fold(cfg: &RunConfig, raw: &Prepared, held_out: usize, normal: usize) -> Result<LoaoFold> {
    let codec = &raw.fitted.codec;
    let held_name = codec.name(held_out)?.to_string();
    let retained_names: Vec<String> = codec.classes().iter().filter(|c| **c != held_name).cloned().collect();
    let retained = LabelCodec::from_classes(&retained_names);
    let (train, _, train_origin) = without_class(&raw.train, held_out, &retained).context("stage: split")?;
    let (test_kept, test_held, _) = without_class(&raw.test, held_out, &retained).context("stage: split")?;

    // The trainer must never see the held-out class.
    let leaked = train_origin.iter().filter(|&&l| l == held_out).count();
    ensure!(leaked == 0, "{leaked} rows of '{held_name}' leaked into training");
    ensure!(
        train.codec.index(&held_name).is_err(),
        "held-out class '{held_name}' is still in the training codec"
    );
    ensure!(!test_held.is_empty(), "class '{held_name}' has no test rows to score");

    // Scaling is fitted on the retained training rows only.
    let scaler = fit_scaler(cfg, &train)?;
    let train = apply(&scaler, train)?;
    let test_kept = apply(&scaler, test_kept)?;
    let test_held = apply(&scaler, test_held)?;

    let spec = cfg
        .variant_spec(train.seq_len(), retained.len())
        .context("stage: build")?;
    let fit = fit_and_evaluate(cfg, &spec, &train, &test_kept)?;
    let normal_new = retained.index(codec.name(normal)?)?;
    let (probs, _) = predict(&fit.params, &spec, &test_held.x, Mode::Eval, None).context("stage: evaluate")?;
    let detected = argmax_rows(&probs).iter().filter(|&&p| p != normal_new).count();
    let n_kept = test_kept.len();
    let correct_kept = fit.eval.confusion.iter().enumerate().map(|(i, r)| r[i]).sum::<u64>() as usize;
    Ok(LoaoFold {
        held_out: held_name,
        retained_classes: retained_names,
        train_rows: train.len(),
        held_out_rows_in_train: leaked,
        retained_test_rows: n_kept,
        held_out_test_rows: test_held.len(),
        retained_accuracy: fit.eval.accuracy,
        zero_day_detection_rate: detected as f64 / test_held.len() as f64,
        all_rows_accuracy: (correct_kept + detected) as f64 / (n_kept + test_held.len()) as f64,
        retained_eval: fit.eval,
        history: fit.history,
    })
}

/// Runs LOAO for `held_out`, or for every attack class in turn when it is
/// `None`. With `baseline` an all-class model is also trained for
/// comparison. Writes `loao.json` into the output directory.
pub fn cmd_loao(cfg: &RunConfig, held_out: Option<&str>, baseline: bool) -> Result<LoaoReport> {
    let mut unscaled = cfg.clone();
    unscaled.scale = false;
    let raw = prepare(&unscaled, None)?;
    let codec = raw.fitted.codec.clone();
    let normal = normal_class(cfg, &codec).context("stage: config")?;
    let targets: Vec<usize> = match held_out {
        Some(name) => {
            let idx = codec
                .index(name)
                .with_context(|| format!("stage: config: held-out class '{name}' is not in the data"))?;
            if idx == normal {
                bail!("stage: config: '{name}' is the normal class; only attack classes can be held out");
            }
            vec![idx]
        }
        None => (0..codec.len()).filter(|&k| k != normal).collect(),
    };
    let baseline_accuracy = if baseline {
        let scaler = fit_scaler(cfg, &raw.train)?;
        let (train, test) = (apply(&scaler, raw.train.clone())?, apply(&scaler, raw.test.clone())?);
        let spec = cfg.variant_spec(train.seq_len(), train.n_classes()).context("stage: build")?;
        Some(fit_and_evaluate(cfg, &spec, &train, &test)?.eval.accuracy)
    } else {
        None
    };
    let mut folds = Vec::new();
    for k in targets {
        log::info!("LOAO: holding out {}", codec.name(k)?);
        folds.push(run_fold(cfg, &raw, k, normal).with_context(|| format!("LOAO fold '{}'", codec.name(k).unwrap_or("?")))?);
    }
    std::fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    let report = LoaoReport {
        status: Status::Ok,
        config: cfg.clone(),
        normal_class: codec.name(normal)?.to_string(),
        baseline_accuracy,
        folds,
        report: cfg.output_dir.join("loao.json"),
    };
    write_json(&report, &report.report)?;
    Ok(report)
}
