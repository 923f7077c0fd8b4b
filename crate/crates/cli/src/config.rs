//! Run configuration: defaults, JSON file, environment, then flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bigat_core::data::{SynthConfig, DEFAULT_LABEL_COLUMN};
use bigat_core::model::{table5_variants_with, variant_by_id, Hyper, VariantSpec, CANONICAL_VARIANT};
use bigat_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

pub const ENV_OUTPUT_DIR: &str = "BIGAT_OUTPUT_DIR";
pub const ENV_SEED: &str = "BIGAT_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// CSV flow table. Exactly one of `data` and `synth` must be set.
    pub data: Option<PathBuf>,
    pub synth: Option<SynthConfig>,
    pub label_column: String,
    /// Name of the benign class; detected from "Benign"/"Normal" when unset.
    pub normal_class: Option<String>,
    pub train_frac: f64,
    /// Min-max scaling fitted on the training split.
    pub scale: bool,
    /// Ablation id (1-12); ignored when `spec` is set.
    pub variant: u8,
    pub spec: Option<VariantSpec>,
    pub hyper: Hyper,
    #[serde(flatten)]
    pub train: TrainConfig,
    pub output_dir: PathBuf,
    pub bench_warmup: usize,
    pub bench_repeats: usize,
    pub bench_batch: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            synth: None,
            label_column: DEFAULT_LABEL_COLUMN.to_string(),
            normal_class: None,
            train_frac: 0.8,
            scale: true,
            variant: CANONICAL_VARIANT,
            spec: None,
            hyper: Hyper::default(),
            train: TrainConfig::default(),
            output_dir: PathBuf::from("runs"),
            bench_warmup: 1,
            bench_repeats: 5,
            bench_batch: 256,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Loads `path` if given, otherwise the defaults, then applies the
    /// environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        cfg.apply_env()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(dir) = std::env::var(ENV_OUTPUT_DIR) {
            self.output_dir = PathBuf::from(dir);
        }
        if let Ok(seed) = std::env::var(ENV_SEED) {
            self.train.seed = seed.parse().with_context(|| format!("{ENV_SEED}={seed} is not an integer"))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.data, &self.synth) {
            (Some(_), Some(_)) => bail!("config names both a CSV file and a synthetic source; pick one"),
            (None, None) => bail!("no data source: set `data` (CSV path) or `synth`"),
            _ => {}
        }
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            bail!("train_frac must lie strictly between 0 and 1, got {}", self.train_frac);
        }
        if !(1..=12).contains(&self.variant) && self.spec.is_none() {
            bail!("variant must be 1-12, got {}", self.variant);
        }
        self.train.validate()?;
        Ok(())
    }

    /// The architecture for `seq_len` inputs and `n_classes` outputs.
    pub fn variant_spec(&self, seq_len: usize, n_classes: usize) -> Result<VariantSpec> {
        match &self.spec {
            Some(s) => {
                let mut s = s.clone();
                s.seq_len = seq_len;
                s.n_classes = n_classes;
                Ok(s)
            }
            None => Ok(variant_by_id(self.variant, seq_len, n_classes, &self.hyper)?),
        }
    }

    pub fn all_variants(&self, seq_len: usize, n_classes: usize) -> Vec<(u8, VariantSpec)> {
        table5_variants_with(seq_len, n_classes, &self.hyper)
    }
}
