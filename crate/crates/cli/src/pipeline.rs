//! Ingest → clean → encode → split → scale, with stage-attributed errors.

use anyhow::{bail, Context, Result};
use bigat_core::data::{
    clean, default_feature_names, encode, encode_with, load_csv, stratified_split, synth_generate, CleanReport,
    Dataset, FeatureEncoder, LabelCodec, MinMaxScaler,
};
use bigat_core::RngStream;

use crate::config::RunConfig;

/// Preprocessing state fitted on a training split.
#[derive(Debug, Clone, PartialEq)]
pub struct Fitted {
    pub codec: LabelCodec,
    pub encoder: Option<FeatureEncoder>,
    pub scaler: Option<MinMaxScaler>,
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub feature_names: Vec<String>,
    pub fitted: Fitted,
    pub clean: Option<CleanReport>,
}

/// Tag for the random stream that drives the train/test split.
const SPLIT_STREAM: u64 = 100;

/// Runs the preprocessing pipeline. With `fitted` the stored codec, encoder
/// and scaler are applied instead of being refitted.
pub fn prepare(cfg: &RunConfig, fitted: Option<&Fitted>) -> Result<Prepared> {
    cfg.validate().context("stage: config")?;
    let (full, feature_names, encoder, clean_report) = if let Some(path) = &cfg.data {
        let table = load_csv(path, &cfg.label_column).with_context(|| format!("stage: ingest ({})", path.display()))?;
        let (table, report) = clean(&table).context("stage: clean")?;
        log::info!(
            "cleaned {}: kept {} of {} rows ({} non-finite, {} empty labels, {} duplicates)",
            path.display(),
            report.kept,
            report.input_rows,
            report.non_finite,
            report.empty_label,
            report.duplicates
        );
        let encoded = match fitted {
            Some(Fitted {
                codec,
                encoder: Some(enc),
                ..
            }) => encode_with(&table, codec, enc),
            _ => encode(&table),
        }
        .context("stage: encode")?;
        let ds = Dataset::from_encoded(&encoded).context("stage: reshape")?;
        let names = encoded.encoder.names.clone();
        (ds, names, Some(encoded.encoder), Some(report))
    } else {
        let synth = cfg.synth.as_ref().expect("validated source");
        let ds = synth_generate(synth).context("stage: synth")?;
        let names = default_feature_names(ds.row_width());
        (ds, names, None, None)
    };
    if let Some(f) = fitted {
        if f.codec != full.codec {
            bail!(
                "stage: encode: data classes {:?} differ from the model's {:?}",
                full.codec.classes(),
                f.codec.classes()
            );
        }
    }
    let mut rng = RngStream::new(cfg.train.seed).fork(SPLIT_STREAM);
    let (train, test) = stratified_split(&full, cfg.train_frac, &mut rng).context("stage: split")?;
    let scaler = match fitted {
        Some(f) => f.scaler.clone(),
        None if cfg.scale => Some(MinMaxScaler::fit(&train.x).context("stage: scale")?),
        None => None,
    };
    let (train, test) = match &scaler {
        Some(s) => (
            train.scaled(s).context("stage: scale")?,
            test.scaled(s).context("stage: scale")?,
        ),
        None => (train, test),
    };
    Ok(Prepared {
        fitted: Fitted {
            codec: full.codec.clone(),
            encoder,
            scaler,
        },
        train,
        test,
        feature_names,
        clean: clean_report,
    })
}

/// Index of the benign class named by the config or detected by name.
pub fn normal_class(cfg: &RunConfig, codec: &LabelCodec) -> Result<usize> {
    match &cfg.normal_class {
        Some(name) => codec
            .index(name)
            .with_context(|| format!("normal class '{name}' is not among {:?}", codec.classes())),
        None => codec
            .normal_class()
            .with_context(|| format!("no class named Benign or Normal among {:?}; set normal_class", codec.classes())),
    }
}
