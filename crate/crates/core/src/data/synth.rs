//! Desk-scale synthetic flow data: Gaussian clouds around random prototypes.

use serde::{Deserialize, Serialize};

use super::{Dataset, LabelCodec};
use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub classes: usize,
    pub n_per_class: usize,
    pub seq_len: usize,
    pub separation: f64,
    /// Per-class multiplier on `n_per_class`; empty means all 1.
    pub imbalance: Vec<f64>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 6,
            n_per_class: 400,
            seq_len: 20,
            separation: 2.0,
            imbalance: vec![1.0, 1.0, 1.0, 1.0, 0.1, 0.1],
            seed: 7,
        }
    }
}

/// `Benign`, then `Attack1`, `Attack2`, ...
fn class_names(c: usize) -> Vec<String> {
    std::iter::once("Benign".to_string())
        .chain((1..c).map(|i| format!("Attack{i}")))
        .collect()
}

/// Class centres `[c, T]`, drawn as `separation · N(0, I)`. Generation order
/// follows the unsorted class names (`Benign` first).
pub fn synth_prototypes(classes: usize, seq_len: usize, separation: f64, rng: &RngStream) -> Tensor {
    let mut r = rng.fork(1);
    let data = (0..classes * seq_len).map(|_| separation * r.normal()).collect();
    Tensor::new(vec![classes, seq_len], data).expect("sized")
}

/// Draws `round(n_per_class · imbalance[k])` (at least 2) samples for class
/// `k` from `N(prototype_k, I)`. Labels use the lexicographic codec, so the
/// dataset label of generation class `k` is `codec.index(name_k)`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {}", cfg.classes)));
    }
    if cfg.seq_len < 4 {
        return Err(Error::Config(format!("sequence length must be >= 4, got {}", cfg.seq_len)));
    }
    if !cfg.imbalance.is_empty() && cfg.imbalance.len() != cfg.classes {
        return Err(Error::Config(format!(
            "imbalance has {} entries for {} classes",
            cfg.imbalance.len(),
            cfg.classes
        )));
    }
    if cfg.imbalance.iter().any(|m| !(*m > 0.0)) || !(cfg.separation >= 0.0) {
        return Err(Error::Config("imbalance multipliers must be positive and separation non-negative".into()));
    }
    let root = RngStream::new(cfg.seed);
    let protos = synth_prototypes(cfg.classes, cfg.seq_len, cfg.separation, &root);
    let names = class_names(cfg.classes);
    let codec = LabelCodec::from_classes(&names);
    let mut noise = root.fork(2);
    let mut data = Vec::new();
    let mut y = Vec::new();
    for (k, name) in names.iter().enumerate() {
        let mult = cfg.imbalance.get(k).copied().unwrap_or(1.0);
        let n = ((cfg.n_per_class as f64 * mult).round() as usize).max(2);
        let label = codec.index(name)?;
        let centre = protos.row(k);
        for _ in 0..n {
            data.extend(centre.iter().map(|m| m + noise.normal()));
            y.push(label);
        }
    }
    let n = y.len();
    Dataset::new(Tensor::new(vec![n, cfg.seq_len, 1], data)?, y, codec)
}
