//! Classification metrics, ROC analysis and inference timing.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{argmax_rows, one_hot, Dataset};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::{predict, ModelParams, VariantSpec};
use crate::numerics::Tensor;
use crate::training::cce_loss;

/// Counts with rows = true class and columns = predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

pub fn confusion(y_true: &[usize], y_pred: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Shape(format!(
            "{} true labels but {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    let mut counts = vec![0u64; classes * classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        for l in [t, p] {
            if l >= classes {
                return Err(Error::LabelOutOfRange { label: l, classes });
            }
        }
        counts[t * classes + p] += 1;
    }
    Ok(ConfusionMatrix { classes, counts })
}

impl ConfusionMatrix {
    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::Shape("confusion matrix must be square".into()));
        }
        Ok(Self {
            classes: c,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        if self.classes == 0 {
            return Vec::new();
        }
        self.counts.chunks(self.classes).map(<[u64]>::to_vec).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|i| self.get(i, i)).sum()
    }

    fn row_sum(&self, i: usize) -> u64 {
        (0..self.classes).map(|j| self.get(i, j)).sum()
    }

    fn col_sum(&self, j: usize) -> u64 {
        (0..self.classes).map(|i| self.get(i, j)).sum()
    }

    /// Each row divided by its sum; rows of absent classes stay zero.
    pub fn normalized_rows(&self) -> Vec<Vec<f64>> {
        (0..self.classes)
            .map(|i| {
                let s = self.row_sum(i);
                (0..self.classes)
                    .map(|j| if s == 0 { 0.0 } else { self.get(i, j) as f64 / s as f64 })
                    .collect()
            })
            .collect()
    }

    /// One-vs-rest `(tp, fp, fn, tn)` for class `i`.
    pub fn one_vs_rest(&self, i: usize) -> (u64, u64, u64, u64) {
        let tp = self.get(i, i);
        let fp = self.col_sum(i) - tp;
        let fn_ = self.row_sum(i) - tp;
        let tn = self.total() - tp - fp - fn_;
        (tp, fp, fn_, tn)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Set when nothing was predicted as this class; precision is reported 0.
    pub precision_undefined: bool,
    /// Set when the class has no true samples; recall is reported 0.
    pub recall_undefined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub per_class: Vec<ClassMetrics>,
    pub accuracy: f64,
    pub macro_avg: Averages,
    pub weighted_avg: Averages,
    pub total: u64,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn class_report(cm: &ConfusionMatrix) -> Result<ClassReport> {
    let total = cm.total();
    if cm.classes() == 0 || total == 0 {
        return Err(Error::EmptyDataset("confusion matrix has no samples".into()));
    }
    let per_class: Vec<ClassMetrics> = (0..cm.classes())
        .map(|i| {
            let (tp, fp, fn_, _) = cm.one_vs_rest(i);
            let (precision, precision_undefined) = ratio(tp, tp + fp);
            let (recall, recall_undefined) = ratio(tp, tp + fn_);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassMetrics {
                precision,
                recall,
                f1,
                support: tp + fn_,
                precision_undefined,
                recall_undefined,
            }
        })
        .collect();
    let c = per_class.len() as f64;
    let macro_avg = Averages {
        precision: per_class.iter().map(|m| m.precision).sum::<f64>() / c,
        recall: per_class.iter().map(|m| m.recall).sum::<f64>() / c,
        f1: per_class.iter().map(|m| m.f1).sum::<f64>() / c,
    };
    let w = |f: fn(&ClassMetrics) -> f64| {
        per_class.iter().map(|m| f(m) * m.support as f64).sum::<f64>() / total as f64
    };
    let weighted_avg = Averages {
        precision: w(|m| m.precision),
        recall: w(|m| m.recall),
        f1: w(|m| m.f1),
    };
    Ok(ClassReport {
        accuracy: cm.trace() as f64 / total as f64,
        per_class,
        macro_avg,
        weighted_avg,
        total,
    })
}

/// One-vs-rest `FP / (FP + TN)` per class (0 when the denominator is 0).
pub fn fpr_per_class(cm: &ConfusionMatrix) -> Vec<f64> {
    (0..cm.classes())
        .map(|i| {
            let (_, fp, _, tn) = cm.one_vs_rest(i);
            ratio(fp, fp + tn).0
        })
        .collect()
}

pub fn fpr_macro(cm: &ConfusionMatrix) -> f64 {
    let f = fpr_per_class(cm);
    if f.is_empty() {
        0.0
    } else {
        f.iter().sum::<f64>() / f.len() as f64
    }
}

/// Pooled `ΣFP / Σ(FP + TN)` over all one-vs-rest problems.
pub fn fpr_micro(cm: &ConfusionMatrix) -> f64 {
    let (fp, neg) = (0..cm.classes()).fold((0, 0), |(fp, neg), i| {
        let (_, f, _, t) = cm.one_vs_rest(i);
        (fp + f, neg + f + t)
    });
    ratio(fp, neg).0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub class: usize,
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    /// `None` when the class has no positive or no negative samples.
    pub auc: Option<f64>,
}

/// ROC points of `scores` against boolean `positive`, thresholding at every
/// distinct score (equal scores form a single step), and the trapezoidal
/// area. Returns `None` for the area if either side is empty.
pub fn roc_curve(scores: &[f64], positive: &[bool]) -> (Vec<(f64, f64)>, Option<f64>) {
    let pos = positive.iter().filter(|&&p| p).count();
    let neg = positive.len() - pos;
    if pos == 0 || neg == 0 {
        return (Vec::new(), None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    let auc = points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum();
    (points, Some(auc))
}

/// One-vs-rest ROC for every class column of `probs`.
pub fn roc_auc_ovr(y_true: &[usize], probs: &Tensor) -> Result<Vec<RocCurve>> {
    let (n, c) = match *probs.shape() {
        [n, c] => (n, c),
        _ => return Err(Error::Shape(format!("probabilities must be [n, c], got {:?}", probs.shape()))),
    };
    if n != y_true.len() {
        return Err(Error::Shape(format!("{} labels for {n} probability rows", y_true.len())));
    }
    if let Some(&bad) = y_true.iter().find(|&&l| l >= c) {
        return Err(Error::LabelOutOfRange { label: bad, classes: c });
    }
    Ok((0..c)
        .map(|k| {
            let scores: Vec<f64> = (0..n).map(|i| probs.data()[i * c + k]).collect();
            let positive: Vec<bool> = y_true.iter().map(|&l| l == k).collect();
            let (points, auc) = roc_curve(&scores, &positive);
            RocCurve { class: k, points, auc }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub mean_sec_per_instance: f64,
    pub median_sec_per_instance: f64,
    pub p95_sec_per_instance: f64,
    pub batch_size: usize,
    pub instances: usize,
    pub warmup: usize,
    pub repeats: usize,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * (sorted.len() - 1) as f64).round() as usize;
    sorted[rank.min(sorted.len() - 1)]
}

/// Times eval-mode prediction of all of `x` in chunks of `batch_size`.
/// Each repeat yields one seconds-per-instance sample.
pub fn inference_bench(
    params: &ModelParams,
    spec: &VariantSpec,
    x: &Tensor,
    warmup: usize,
    repeats: usize,
    batch_size: usize,
) -> Result<BenchReport> {
    if repeats == 0 {
        return Err(Error::Config("benchmark needs at least one timed repeat".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("benchmark batch size must be >= 1".into()));
    }
    let n = x.dim(0);
    if n == 0 {
        return Err(Error::EmptyDataset("nothing to benchmark".into()));
    }
    let step = x.len() / n;
    let chunks: Vec<Tensor> = (0..n)
        .step_by(batch_size)
        .map(|s| {
            let e = (s + batch_size).min(n);
            let mut shape = x.shape().to_vec();
            shape[0] = e - s;
            Tensor::new(shape, x.data()[s * step..e * step].to_vec()).expect("sized")
        })
        .collect();
    let run = || -> Result<()> {
        for c in &chunks {
            std::hint::black_box(predict(params, spec, c, Mode::Eval, None)?);
        }
        Ok(())
    };
    for _ in 0..warmup {
        run()?;
    }
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        run()?;
        samples.push(t.elapsed().as_secs_f64() / n as f64);
    }
    samples.sort_by(f64::total_cmp);
    Ok(BenchReport {
        mean_sec_per_instance: samples.iter().sum::<f64>() / repeats as f64,
        median_sec_per_instance: percentile(&samples, 0.5),
        p95_sec_per_instance: percentile(&samples, 0.95),
        batch_size,
        instances: n,
        warmup,
        repeats,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    pub fpr: f64,
    pub auc: Option<f64>,
    pub flags: Vec<String>,
}

/// Headline columns of a results row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Headline {
    pub accuracy: f64,
    pub loss: f64,
    /// Macro-averaged precision, recall and F1.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Macro one-vs-rest false-positive rate.
    pub fpr: f64,
    pub inference_sec_per_instance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<ClassRow>,
    pub accuracy: f64,
    pub macro_avg: Averages,
    pub weighted_avg: Averages,
    pub loss: f64,
    pub fpr_macro: f64,
    pub fpr_micro: f64,
    pub confusion: Vec<Vec<u64>>,
    pub confusion_normalized: Vec<Vec<f64>>,
    pub samples: u64,
    pub headline: Headline,
}

impl EvalReport {
    pub fn from_predictions(y_true: &[usize], probs: &Tensor, class_names: &[String]) -> Result<(Self, Vec<RocCurve>)> {
        let c = class_names.len();
        if probs.last_dim() != c {
            return Err(Error::Shape(format!(
                "{} probability columns for {c} classes",
                probs.last_dim()
            )));
        }
        let pred = argmax_rows(probs);
        let cm = confusion(y_true, &pred, c)?;
        let report = class_report(&cm)?;
        let curves = roc_auc_ovr(y_true, probs)?;
        let fprs = fpr_per_class(&cm);
        let (loss, _) = cce_loss(probs, &one_hot(y_true, c)?)?;
        let classes = report
            .per_class
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let mut flags = Vec::new();
                if m.precision_undefined {
                    flags.push("precision_undefined".to_string());
                }
                if m.recall_undefined {
                    flags.push("recall_undefined".to_string());
                }
                ClassRow {
                    class: class_names[i].clone(),
                    precision: m.precision,
                    recall: m.recall,
                    f1: m.f1,
                    support: m.support,
                    fpr: fprs[i],
                    auc: curves[i].auc,
                    flags,
                }
            })
            .collect();
        let fpr_macro = fpr_macro(&cm);
        let out = EvalReport {
            classes,
            accuracy: report.accuracy,
            headline: Headline {
                accuracy: report.accuracy,
                loss,
                precision: report.macro_avg.precision,
                recall: report.macro_avg.recall,
                f1: report.macro_avg.f1,
                fpr: fpr_macro,
                inference_sec_per_instance: None,
            },
            macro_avg: report.macro_avg,
            weighted_avg: report.weighted_avg,
            loss,
            fpr_macro,
            fpr_micro: fpr_micro(&cm),
            confusion: cm.rows(),
            confusion_normalized: cm.normalized_rows(),
            samples: cm.total(),
        };
        Ok((out, curves))
    }

    pub fn recall_of(&self, class: usize) -> f64 {
        self.classes[class].recall
    }
}

/// Eval-mode scoring of `ds`. Loss is categorical cross-entropy.
pub fn evaluate(params: &ModelParams, spec: &VariantSpec, ds: &Dataset) -> Result<(EvalReport, Vec<RocCurve>)> {
    let (probs, _) = predict(params, spec, &ds.x, Mode::Eval, None)?;
    EvalReport::from_predictions(&ds.y, &probs, ds.codec.classes())
}

/// Writes `roc_<class>.csv` (columns `fpr,tpr`) for every class with a
/// defined curve and returns the paths.
pub fn write_roc_csvs(curves: &[RocCurve], class_names: &[String], dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for c in curves.iter().filter(|c| c.auc.is_some()) {
        let safe: String = class_names[c.class]
            .chars()
            .map(|ch| if ch.is_ascii_alphanumeric() || ch == '-' || ch == '_' { ch } else { '_' })
            .collect();
        let path = dir.join(format!("roc_{safe}.csv"));
        let mut text = String::from("fpr,tpr\n");
        for (f, t) in &c.points {
            text.push_str(&format!("{f},{t}\n"));
        }
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}
