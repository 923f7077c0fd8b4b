//! Shapley-value feature attribution with background-mean replacement.
//!
//! A feature is "absent" when it is set to the mean of the background rows.
//! Features are the flattened positions of an input row, so a `[T, 1]`
//! sequence has `T` features.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::{predict, ModelParams, VariantSpec};
use crate::numerics::{RngStream, Tensor};

/// Largest feature count accepted by [`shapley_exact_small`].
pub const EXACT_MAX_FEATURES: usize = 12;

/// Rows per batched evaluation when scoring permutation paths.
const ROWS_PER_CALL: usize = 256;

/// A batched black box mapping `m` flattened rows to `m × n_outputs` scores.
pub trait Predictor {
    fn n_features(&self) -> usize;
    fn n_outputs(&self) -> usize;
    /// `rows` holds `m · n_features` values; returns `m · n_outputs` values.
    fn predict_rows(&self, rows: &[f64], m: usize) -> Result<Vec<f64>>;
}

/// Class probabilities of a trained network.
pub struct ModelPredictor<'a> {
    pub params: &'a ModelParams,
    pub spec: &'a VariantSpec,
}

impl Predictor for ModelPredictor<'_> {
    fn n_features(&self) -> usize {
        self.spec.seq_len * self.spec.input_dim
    }

    fn n_outputs(&self) -> usize {
        self.spec.n_classes
    }

    fn predict_rows(&self, rows: &[f64], m: usize) -> Result<Vec<f64>> {
        let x = Tensor::new(vec![m, self.spec.seq_len, self.spec.input_dim], rows.to_vec())?;
        Ok(predict(self.params, self.spec, &x, Mode::Eval, None)?.0.into_data())
    }
}

/// Wraps a per-row closure as a [`Predictor`].
pub struct FnPredictor<F> {
    pub f: F,
    pub n_features: usize,
    pub n_outputs: usize,
}

impl<F: Fn(&[f64]) -> Vec<f64>> Predictor for FnPredictor<F> {
    fn n_features(&self) -> usize {
        self.n_features
    }

    fn n_outputs(&self) -> usize {
        self.n_outputs
    }

    fn predict_rows(&self, rows: &[f64], m: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(m * self.n_outputs);
        for r in rows.chunks(self.n_features).take(m) {
            let y = (self.f)(r);
            if y.len() != self.n_outputs {
                return Err(Error::Shape(format!("predictor returned {} outputs, expected {}", y.len(), self.n_outputs)));
            }
            out.extend(y);
        }
        Ok(out)
    }
}

/// Column means of `[n, ...]` rows.
pub fn background_mean(background: &Tensor) -> Result<Vec<f64>> {
    let n = background.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::EmptyDataset("background sample is empty".into()));
    }
    let f = background.len() / n;
    let mut mean = vec![0.0; f];
    for r in background.data().chunks(f) {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    Ok(mean)
}

/// Monte Carlo Shapley values for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapleyEstimate {
    pub values: Vec<f64>,
    /// Standard error of each value across permutations.
    pub std_err: Vec<f64>,
    pub permutations: usize,
}

/// Per-feature, per-output mean and standard error over permutations,
/// both `[features][outputs]`.
fn permutation_shapley(
    model: &dyn Predictor,
    x: &[f64],
    baseline: &[f64],
    n_permutations: usize,
    rng: &mut RngStream,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let nf = model.n_features();
    let no = model.n_outputs();
    if x.len() != nf || baseline.len() != nf {
        return Err(Error::Shape(format!(
            "instance has {} values and baseline {}, model expects {nf}",
            x.len(),
            baseline.len()
        )));
    }
    if n_permutations == 0 {
        return Err(Error::Config("need at least one permutation".into()));
    }
    let path_rows = nf + 1;
    let per_call = (ROWS_PER_CALL / path_rows).max(1);
    let mut sum = vec![vec![0.0; no]; nf];
    let mut sum_sq = vec![vec![0.0; no]; nf];
    let mut perm: Vec<usize> = (0..nf).collect();
    let mut done = 0;
    while done < n_permutations {
        let group = per_call.min(n_permutations - done);
        let mut rows = Vec::with_capacity(group * path_rows * nf);
        let mut orders = Vec::with_capacity(group);
        for _ in 0..group {
            rng.shuffle(&mut perm);
            let mut row = baseline.to_vec();
            rows.extend_from_slice(&row);
            for &j in &perm {
                row[j] = x[j];
                rows.extend_from_slice(&row);
            }
            orders.push(perm.clone());
        }
        let out = model.predict_rows(&rows, group * path_rows)?;
        for (g, order) in orders.iter().enumerate() {
            let base = g * path_rows;
            for (step, &j) in order.iter().enumerate() {
                let before = &out[(base + step) * no..(base + step + 1) * no];
                let after = &out[(base + step + 1) * no..(base + step + 2) * no];
                for o in 0..no {
                    let d = after[o] - before[o];
                    sum[j][o] += d;
                    sum_sq[j][o] += d * d;
                }
            }
        }
        done += group;
    }
    let n = n_permutations as f64;
    let mean: Vec<Vec<f64>> = sum.iter().map(|r| r.iter().map(|s| s / n).collect()).collect();
    let se = sum_sq
        .iter()
        .zip(&mean)
        .map(|(sq, m)| {
            sq.iter()
                .zip(m)
                .map(|(s2, mu)| {
                    if n_permutations < 2 {
                        f64::INFINITY
                    } else {
                        ((s2 / n - mu * mu).max(0.0) * n / (n - 1.0) / n).sqrt()
                    }
                })
                .collect()
        })
        .collect();
    Ok((mean, se))
}

/// Permutation-sampling Shapley values of output `class_index` at `x`,
/// with absent features replaced by the background mean.
pub fn shapley_estimate(
    model: &dyn Predictor,
    background: &Tensor,
    x: &[f64],
    class_index: usize,
    n_permutations: usize,
    rng: &mut RngStream,
) -> Result<ShapleyEstimate> {
    if class_index >= model.n_outputs() {
        return Err(Error::LabelOutOfRange {
            label: class_index,
            classes: model.n_outputs(),
        });
    }
    let baseline = background_mean(background)?;
    let (mean, se) = permutation_shapley(model, x, &baseline, n_permutations, rng)?;
    Ok(ShapleyEstimate {
        values: mean.iter().map(|r| r[class_index]).collect(),
        std_err: se.iter().map(|r| r[class_index]).collect(),
        permutations: n_permutations,
    })
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Exact Shapley values of scalar `f` by enumerating all `2^n` coalitions.
pub fn shapley_exact_small<F>(f: F, x: &[f64], baseline: &[f64]) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    let n = x.len();
    if n > EXACT_MAX_FEATURES {
        return Err(Error::Config(format!(
            "exact enumeration supports at most {EXACT_MAX_FEATURES} features, got {n}"
        )));
    }
    if baseline.len() != n {
        return Err(Error::Shape(format!("baseline has {} values for {n} features", baseline.len())));
    }
    let value: Vec<f64> = (0..1usize << n)
        .map(|mask| {
            let row: Vec<f64> = (0..n).map(|i| if mask >> i & 1 == 1 { x[i] } else { baseline[i] }).collect();
            f(&row)
        })
        .collect();
    let weight: Vec<f64> = (0..n).map(|s| factorial(s) * factorial(n - s - 1) / factorial(n)).collect();
    let mut phi = vec![0.0; n];
    for (i, p) in phi.iter_mut().enumerate() {
        for mask in 0..1usize << n {
            if mask >> i & 1 == 0 {
                let s = mask.count_ones() as usize;
                *p += weight[s] * (value[mask | 1 << i] - value[mask]);
            }
        }
    }
    Ok(phi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionSettings {
    pub sample_size: usize,
    pub permutations: usize,
    pub background_size: usize,
    pub seed: u64,
    pub top_k: usize,
}

impl Default for AttributionSettings {
    fn default() -> Self {
        Self {
            sample_size: 200,
            permutations: 2000,
            background_size: 200,
            seed: 0,
            top_k: 10,
        }
    }
}

/// Mean absolute Shapley value per feature and class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    /// `[features][classes]`
    pub mean_abs: Vec<Vec<f64>>,
    pub feature_names: Vec<String>,
    pub class_names: Vec<String>,
    pub sample_size: usize,
    pub settings: AttributionSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedFeature {
    pub feature: String,
    pub index: usize,
    pub total: f64,
    pub per_class: Vec<f64>,
}

impl Attribution {
    /// Feature indices by decreasing attribution for `class`.
    pub fn ranking(&self, class: usize) -> Vec<usize> {
        self.rank_by(|row| row[class])
    }

    /// Feature indices by decreasing attribution summed over classes.
    pub fn overall_ranking(&self) -> Vec<usize> {
        self.rank_by(|row| row.iter().sum())
    }

    fn rank_by(&self, key: impl Fn(&[f64]) -> f64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.mean_abs.len()).collect();
        idx.sort_by(|&a, &b| key(&self.mean_abs[b]).total_cmp(&key(&self.mean_abs[a])).then(a.cmp(&b)));
        idx
    }

    pub fn top_k(&self, k: usize) -> Vec<RankedFeature> {
        self.overall_ranking()
            .into_iter()
            .take(k)
            .map(|i| RankedFeature {
                feature: self.feature_names[i].clone(),
                index: i,
                total: self.mean_abs[i].iter().sum(),
                per_class: self.mean_abs[i].clone(),
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("feature,class,mean_abs_value\n");
        for (f, row) in self.mean_abs.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                let _ = writeln!(out, "{},{},{}", self.feature_names[f], self.class_names[c], v);
            }
        }
        out
    }

    pub fn write(&self, csv_path: &Path, top_json_path: &Path) -> Result<()> {
        std::fs::write(csv_path, self.to_csv()).map_err(|e| Error::io(csv_path, e))?;
        let top = serde_json::json!({
            "sample_size": self.sample_size,
            "settings": self.settings,
            "classes": self.class_names,
            "top": self.top_k(self.settings.top_k),
        });
        std::fs::write(top_json_path, serde_json::to_string_pretty(&top)?).map_err(|e| Error::io(top_json_path, e))
    }
}

/// Averages `|φ|` over the rows of `sample` for every class at once.
/// Instance `i` uses the random stream `fork(i)` of `settings.seed`.
pub fn attribution_summary(
    model: &dyn Predictor,
    background: &Tensor,
    sample: &Tensor,
    feature_names: &[String],
    class_names: &[String],
    settings: &AttributionSettings,
) -> Result<Attribution> {
    let nf = model.n_features();
    let no = model.n_outputs();
    if feature_names.len() != nf || class_names.len() != no {
        return Err(Error::Shape(format!(
            "{} feature names and {} class names for a {nf}-feature, {no}-output model",
            feature_names.len(),
            class_names.len()
        )));
    }
    let rows = sample.shape().first().copied().unwrap_or(0);
    if rows == 0 {
        return Err(Error::EmptyDataset("attribution sample is empty".into()));
    }
    let baseline = background_mean(background)?;
    let root = RngStream::new(settings.seed);
    let mut acc = vec![vec![0.0; no]; nf];
    for (i, x) in sample.data().chunks(nf).enumerate() {
        let mut rng = root.fork(i as u64);
        let (phi, _) = permutation_shapley(model, x, &baseline, settings.permutations, &mut rng)?;
        for (a, p) in acc.iter_mut().zip(&phi) {
            a.iter_mut().zip(p).for_each(|(s, v)| *s += v.abs());
        }
    }
    acc.iter_mut().flatten().for_each(|v| *v /= rows as f64);
    Ok(Attribution {
        mean_abs: acc,
        feature_names: feature_names.to_vec(),
        class_names: class_names.to_vec(),
        sample_size: rows,
        settings: settings.clone(),
    })
}
