//! Flow-record ingestion: CSV loading, cleaning, encoding, scaling,
//! sequence reshaping, stratified splitting, class balancing and synthetic
//! data generation.

mod balance;
mod synth;

pub use balance::{ros_balance, smote_balance, smote_balance_traced, Balancing, Origin, DEFAULT_SMOTE_K};
pub use synth::{synth_generate, synth_prototypes, SynthConfig};

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor};

pub const DEFAULT_LABEL_COLUMN: &str = "Label";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

/// Untyped rows plus inferred column kinds. The label column is kept in
/// place and excluded from features at encode time.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub columns: Vec<String>,
    pub kinds: Vec<ColumnKind>,
    pub rows: Vec<Vec<String>>,
    pub label: String,
}

impl RawTable {
    pub fn label_index(&self) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == &self.label)
            .ok_or_else(|| Error::MissingColumn(self.label.clone()))
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.columns.iter().filter(|c| **c != self.label).cloned().collect()
    }
}

fn parses_as_real(cell: &str) -> bool {
    cell.trim().parse::<f64>().is_ok()
}

fn infer_kinds(columns: usize, rows: &[Vec<String>]) -> Vec<ColumnKind> {
    (0..columns)
        .map(|j| {
            let numeric = rows
                .iter()
                .map(|r| r[j].trim())
                .filter(|c| !c.is_empty())
                .all(parses_as_real);
            if numeric {
                ColumnKind::Numeric
            } else {
                ColumnKind::Categorical
            }
        })
        .collect()
}

/// Builds a table from in-memory rows, checking arity and inferring kinds.
pub fn table_from_rows(columns: Vec<String>, rows: Vec<Vec<String>>, label: &str) -> Result<RawTable> {
    for (i, r) in rows.iter().enumerate() {
        if r.len() != columns.len() {
            return Err(Error::RaggedRow {
                line: i as u64 + 2,
                expected: columns.len(),
                found: r.len(),
            });
        }
    }
    let t = RawTable {
        kinds: infer_kinds(columns.len(), &rows),
        columns,
        rows,
        label: label.to_string(),
    };
    t.label_index()?;
    Ok(t)
}

pub fn load_csv(path: &Path, label_column: &str) -> Result<RawTable> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(file);
    let columns: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if !columns.iter().any(|c| c == label_column) {
        return Err(Error::MissingColumn(label_column.to_string()));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        if record.len() != columns.len() {
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            return Err(Error::RaggedRow {
                line,
                expected: columns.len(),
                found: record.len(),
            });
        }
        rows.push(record.iter().map(str::to_string).collect());
    }
    table_from_rows(columns, rows, label_column)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleanReport {
    pub input_rows: usize,
    /// Rows with a missing, NaN or infinite numeric feature.
    pub non_finite: usize,
    pub empty_label: usize,
    pub duplicates: usize,
    pub kept: usize,
}

/// Drops rows with non-finite numeric cells or empty labels, then exact
/// duplicates (first occurrence kept).
pub fn clean(t: &RawTable) -> Result<(RawTable, CleanReport)> {
    let label = t.label_index()?;
    let mut report = CleanReport {
        input_rows: t.rows.len(),
        ..Default::default()
    };
    let mut seen = HashSet::new();
    let mut rows = Vec::with_capacity(t.rows.len());
    for row in &t.rows {
        if row[label].trim().is_empty() {
            report.empty_label += 1;
            continue;
        }
        let finite = row.iter().zip(&t.kinds).enumerate().all(|(j, (cell, kind))| {
            j == label
                || *kind == ColumnKind::Categorical
                || cell.trim().parse::<f64>().map(f64::is_finite).unwrap_or(false)
        });
        if !finite {
            report.non_finite += 1;
            continue;
        }
        if !seen.insert(row.clone()) {
            report.duplicates += 1;
            continue;
        }
        rows.push(row.clone());
    }
    report.kept = rows.len();
    if rows.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "cleaning removed all {} rows",
            report.input_rows
        )));
    }
    Ok((
        RawTable {
            rows,
            ..t.clone()
        },
        report,
    ))
}

/// Class names in lexicographic order; index = position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCodec {
    classes: Vec<String>,
}

impl LabelCodec {
    pub fn fit<'a>(labels: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<&str> = labels.into_iter().collect();
        Self {
            classes: set.into_iter().map(str::to_string).collect(),
        }
    }

    /// Uses `classes` as given after sorting and deduplicating.
    pub fn from_classes(classes: &[String]) -> Self {
        Self::fit(classes.iter().map(String::as_str))
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn index(&self, name: &str) -> Result<usize> {
        self.classes
            .binary_search_by(|c| c.as_str().cmp(name))
            .map_err(|_| Error::UnknownClass(name.to_string()))
    }

    pub fn name(&self, index: usize) -> Result<&str> {
        self.classes.get(index).map(String::as_str).ok_or(Error::LabelOutOfRange {
            label: index,
            classes: self.classes.len(),
        })
    }

    /// Index of the benign class: the first class named "benign" or "normal",
    /// ignoring case.
    pub fn normal_class(&self) -> Option<usize> {
        self.classes
            .iter()
            .position(|c| c.eq_ignore_ascii_case("benign") || c.eq_ignore_ascii_case("normal"))
    }
}

/// Fitted mapping from table columns to numeric features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureEncoder {
    pub names: Vec<String>,
    pub kinds: Vec<ColumnKind>,
    /// Sorted categories per feature column (empty for numeric columns).
    pub categories: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub codec: LabelCodec,
    pub encoder: FeatureEncoder,
}

/// Fits a label codec and categorical codes on `t`, then applies them.
pub fn encode(t: &RawTable) -> Result<Encoded> {
    let label = t.label_index()?;
    let codec = LabelCodec::fit(t.rows.iter().map(|r| r[label].trim()));
    let mut names = Vec::new();
    let mut kinds = Vec::new();
    let mut categories = Vec::new();
    for (j, (name, kind)) in t.columns.iter().zip(&t.kinds).enumerate() {
        if j == label {
            continue;
        }
        names.push(name.clone());
        kinds.push(*kind);
        categories.push(match kind {
            ColumnKind::Numeric => Vec::new(),
            ColumnKind::Categorical => {
                let set: BTreeSet<&str> = t.rows.iter().map(|r| r[j].trim()).collect();
                set.into_iter().map(str::to_string).collect()
            }
        });
    }
    let encoder = FeatureEncoder { names, kinds, categories };
    encode_with(t, &codec, &encoder)
}

/// Applies a previously fitted codec and encoder. Unseen labels are an
/// error; unseen categorical values map to one past the last known code.
pub fn encode_with(t: &RawTable, codec: &LabelCodec, encoder: &FeatureEncoder) -> Result<Encoded> {
    let label = t.label_index()?;
    let mut column_of = Vec::with_capacity(encoder.names.len());
    for name in &encoder.names {
        let j = t
            .columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::MissingColumn(name.clone()))?;
        column_of.push(j);
    }
    let width = encoder.names.len();
    let mut data = Vec::with_capacity(t.rows.len() * width);
    let mut labels = Vec::with_capacity(t.rows.len());
    for row in &t.rows {
        labels.push(codec.index(row[label].trim())?);
        for (f, &j) in column_of.iter().enumerate() {
            let cell = row[j].trim();
            let v = match encoder.kinds[f] {
                ColumnKind::Numeric => cell
                    .parse::<f64>()
                    .map_err(|_| Error::Incompatible(format!("column '{}' value '{cell}' is not numeric", encoder.names[f])))?,
                ColumnKind::Categorical => {
                    let cats = &encoder.categories[f];
                    cats.binary_search_by(|c| c.as_str().cmp(cell)).unwrap_or(cats.len()) as f64
                }
            };
            data.push(v);
        }
    }
    Ok(Encoded {
        features: Tensor::new(vec![t.rows.len(), width], data)?,
        labels,
        codec: codec.clone(),
        encoder: encoder.clone(),
    })
}

/// Per-feature min-max parameters fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMaxScaler {
    /// Fits on a `[n, F]` matrix or an `[n, T, 1]` sequence tensor.
    pub fn fit(x: &Tensor) -> Result<Self> {
        let (n, f) = rows_cols(x)?;
        if n == 0 {
            return Err(Error::EmptyDataset("cannot fit a scaler on zero rows".into()));
        }
        let mut min = vec![f64::INFINITY; f];
        let mut max = vec![f64::NEG_INFINITY; f];
        for r in x.data().chunks(f) {
            for j in 0..f {
                min[j] = min[j].min(r[j]);
                max[j] = max[j].max(r[j]);
            }
        }
        Ok(Self { min, max })
    }

    pub fn width(&self) -> usize {
        self.min.len()
    }

    /// Maps each feature to `[0, 1]`, clamping values outside the fitted
    /// range. Constant features map to 0.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (_, f) = rows_cols(x)?;
        if f != self.width() {
            return Err(Error::Incompatible(format!(
                "scaler fitted on {} features, input has {f}",
                self.width()
            )));
        }
        let mut out = x.clone();
        for r in out.data_mut().chunks_mut(f) {
            for j in 0..f {
                let span = self.max[j] - self.min[j];
                r[j] = if span > 0.0 {
                    ((r[j] - self.min[j]) / span).clamp(0.0, 1.0)
                } else {
                    0.0
                };
            }
        }
        Ok(out)
    }
}

fn rows_cols(x: &Tensor) -> Result<(usize, usize)> {
    match *x.shape() {
        [n, f] => Ok((n, f)),
        [n, t, d] => Ok((n, t * d)),
        _ => Err(Error::Shape(format!("expected a rank-2 or rank-3 tensor, got {:?}", x.shape()))),
    }
}

/// `[n, T]` → `[n, T, 1]`; feature order becomes the time axis.
pub fn to_sequences(features: &Tensor) -> Result<Tensor> {
    match *features.shape() {
        [n, t] => features.clone().reshape(&[n, t, 1]),
        _ => Err(Error::Shape(format!("expected [n, T], got {:?}", features.shape()))),
    }
}

/// Sequences with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[n, T, d]`
    pub x: Tensor,
    pub y: Vec<usize>,
    pub codec: LabelCodec,
}

impl Dataset {
    pub fn new(x: Tensor, y: Vec<usize>, codec: LabelCodec) -> Result<Self> {
        if x.rank() != 3 {
            return Err(Error::Shape(format!("dataset tensor must be [n, T, d], got {:?}", x.shape())));
        }
        if x.dim(0) != y.len() {
            return Err(Error::Shape(format!("{} rows but {} labels", x.dim(0), y.len())));
        }
        if let Some(&bad) = y.iter().find(|&&l| l >= codec.len()) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: codec.len(),
            });
        }
        Ok(Self { x, y, codec })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.codec.len()
    }

    pub fn seq_len(&self) -> usize {
        self.x.dim(1)
    }

    pub fn input_dim(&self) -> usize {
        self.x.dim(2)
    }

    pub fn row_width(&self) -> usize {
        self.seq_len() * self.input_dim()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let w = self.row_width();
        &self.x.data()[i * w..(i + 1) * w]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for &l in &self.y {
            counts[l] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let w = self.row_width();
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Dataset {
            x: Tensor::new(vec![indices.len(), self.seq_len(), self.input_dim()], data).expect("sized"),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            codec: self.codec.clone(),
        }
    }

    /// Features of rows `range` as a `[len, T, d]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        self.subset(indices).x
    }

    /// Applies `scaler` to the flattened feature rows.
    pub fn scaled(&self, scaler: &MinMaxScaler) -> Result<Dataset> {
        Ok(Dataset {
            x: scaler.apply(&self.x)?,
            y: self.y.clone(),
            codec: self.codec.clone(),
        })
    }

    pub fn from_encoded(e: &Encoded) -> Result<Dataset> {
        Dataset::new(to_sequences(&e.features)?, e.labels.clone(), e.codec.clone())
    }
}

/// Per-class split: each class contributes `round(frac · count)` rows to the
/// training side, clamped so both sides keep at least one row.
pub fn stratified_split(ds: &Dataset, train_frac: f64, rng: &mut RngStream) -> Result<(Dataset, Dataset)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must lie strictly between 0 and 1, got {train_frac}"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.n_classes()];
    for (i, &l) in ds.y.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, mut members) in by_class.into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < 2 {
            return Err(Error::Stratification(format!(
                "class '{}' has {} sample(s); at least 2 are needed",
                ds.codec.name(class)?,
                members.len()
            )));
        }
        rng.shuffle(&mut members);
        let k = ((train_frac * members.len() as f64).round() as usize).clamp(1, members.len() - 1);
        train.extend_from_slice(&members[..k]);
        test.extend_from_slice(&members[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((ds.subset(&train), ds.subset(&test)))
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::LabelOutOfRange { label: l, classes });
        }
        t.data_mut()[i * classes + l] = 1.0;
    }
    Ok(t)
}

/// Index of the largest entry per row; ties resolve to the lowest index.
pub fn argmax_rows(x: &Tensor) -> Vec<usize> {
    let c = x.last_dim();
    if c == 0 {
        return Vec::new();
    }
    x.data()
        .chunks(c)
        .map(|r| {
            let mut best = 0;
            for j in 1..c {
                if r[j] > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Codec, encoder and scaler written next to exported CSVs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub codec: LabelCodec,
    pub encoder: Option<FeatureEncoder>,
    pub scaler: Option<MinMaxScaler>,
    pub class_counts: BTreeMap<String, usize>,
}

impl Sidecar {
    pub fn describe(ds: &Dataset, encoder: Option<FeatureEncoder>, scaler: Option<MinMaxScaler>) -> Self {
        let class_counts = ds
            .codec
            .classes()
            .iter()
            .cloned()
            .zip(ds.class_counts())
            .collect();
        Self {
            codec: ds.codec.clone(),
            encoder,
            scaler,
            class_counts,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Writes one row per sample: the flattened features then the class name.
pub fn write_dataset_csv(ds: &Dataset, feature_names: &[String], label_column: &str, path: &Path) -> Result<()> {
    if feature_names.len() != ds.row_width() {
        return Err(Error::Shape(format!(
            "{} feature names for rows of width {}",
            feature_names.len(),
            ds.row_width()
        )));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let mut header: Vec<&str> = feature_names.iter().map(String::as_str).collect();
    header.push(label_column);
    w.write_record(&header)?;
    for i in 0..ds.len() {
        let mut record: Vec<String> = ds.sample(i).iter().map(|v| format!("{v}")).collect();
        record.push(ds.codec.name(ds.y[i])?.to_string());
        w.write_record(&record)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let mut inner = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    inner.flush().map_err(|e| Error::io(path, e))
}

/// Default feature names `f0..f{n-1}`.
pub fn default_feature_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("f{i}")).collect()
}
