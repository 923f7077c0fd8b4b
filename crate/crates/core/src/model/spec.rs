//! Declarative model variants.
//!
//! Variant names use the ablation-table notation: `+` chains blocks inside one
//! branch (left first) and `-` separates parallel branches that all read the
//! raw input sequence. So `(BiGRU64+MHA8)-LSTM32` is the canonical two-branch
//! network.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::LAYER_NORM_EPS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlockSpec {
    BiGru { units: usize },
    LstmLast { units: usize },
    LstmSeq { units: usize },
    Mha { heads: usize, key_dim: usize },
    LayerNorm,
    Dropout { rate: f64 },
    /// Per-time-step linear map to `width` features. Used when attention is
    /// the first block of a branch and would otherwise see width-1 tokens.
    Project { width: usize },
}

impl BlockSpec {
    pub fn label(&self) -> String {
        match self {
            BlockSpec::BiGru { units } => format!("BiGRU{units}"),
            BlockSpec::LstmLast { units } => format!("LSTM{units}"),
            BlockSpec::LstmSeq { units } => format!("LSTM{units}(seq)"),
            BlockSpec::Mha { heads, key_dim } => format!("MHA({heads},{key_dim})"),
            BlockSpec::LayerNorm => "LayerNorm".into(),
            BlockSpec::Dropout { rate } => format!("Dropout({rate})"),
            BlockSpec::Project { width } => format!("Project{width}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub name: String,
    pub seq_len: usize,
    /// Features per time step of the raw input (1 for flow-record vectors).
    pub input_dim: usize,
    pub n_classes: usize,
    pub branches: Vec<Vec<BlockSpec>>,
    /// Hidden widths of the ReLU head; a softmax layer of `n_classes` follows.
    pub head: Vec<usize>,
    pub dropout_rate: f64,
    pub layer_norm_eps: f64,
    pub lstm_forget_bias: f64,
    /// Adds `x + MHA(x)` skip paths. Off for the published stack.
    #[serde(default)]
    pub mha_residual: bool,
}

impl VariantSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |block: &str, reason: String| {
            Err(Error::Construction {
                block: block.to_string(),
                reason,
            })
        };
        if self.seq_len == 0 {
            return bad("input", "sequence length must be at least 1".into());
        }
        if self.input_dim == 0 {
            return bad("input", "input width must be at least 1".into());
        }
        if self.n_classes < 2 {
            return bad("head", format!("need at least 2 classes, got {}", self.n_classes));
        }
        if self.branches.is_empty() || self.branches.len() > 2 {
            return bad("branches", format!("expected 1 or 2 branches, got {}", self.branches.len()));
        }
        if self.head.contains(&0) {
            return bad("head", "dense widths must be positive".into());
        }
        for (b, branch) in self.branches.iter().enumerate() {
            if branch.is_empty() {
                return bad(&format!("branch{b}"), "empty branch".into());
            }
            for block in branch {
                let zero = match block {
                    BlockSpec::BiGru { units } | BlockSpec::LstmLast { units } | BlockSpec::LstmSeq { units } => {
                        *units == 0
                    }
                    BlockSpec::Mha { heads, key_dim } => *heads == 0 || *key_dim == 0,
                    BlockSpec::Project { width } => *width == 0,
                    BlockSpec::Dropout { rate } => !(0.0..1.0).contains(rate),
                    BlockSpec::LayerNorm => false,
                };
                if zero {
                    return bad(&block.label(), "hyperparameter out of range".into());
                }
            }
        }
        Ok(())
    }

    /// Same architecture with every dropout block set to `rate`.
    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout_rate = rate;
        for branch in &mut self.branches {
            for block in branch {
                if let BlockSpec::Dropout { rate: r } = block {
                    *r = rate;
                }
            }
        }
        self
    }
}

/// Base hyperparameters from which the canonical model and the ablation
/// variants are derived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyper {
    pub gru_units: usize,
    pub lstm_units: usize,
    pub heads: usize,
    pub key_dim: usize,
    pub dropout: f64,
    pub head: Vec<usize>,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            gru_units: 64,
            lstm_units: 32,
            heads: 8,
            key_dim: 64,
            dropout: 0.5,
            head: vec![64, 32],
        }
    }
}

impl Hyper {
    /// Small configuration for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            gru_units: 4,
            lstm_units: 4,
            heads: 2,
            key_dim: 3,
            dropout: 0.5,
            head: vec![5, 4],
        }
    }
}

fn variant(name: &str, seq_len: usize, n_classes: usize, h: &Hyper, branches: Vec<Vec<BlockSpec>>) -> VariantSpec {
    VariantSpec {
        name: name.to_string(),
        seq_len,
        input_dim: 1,
        n_classes,
        branches,
        head: h.head.clone(),
        dropout_rate: h.dropout,
        layer_norm_eps: LAYER_NORM_EPS,
        lstm_forget_bias: 0.0,
        mha_residual: false,
    }
}

/// `(BiGRU+LayerNorm+MHA+Dropout) ∥ (LSTM+Dropout)` → Dense head.
pub fn bigat_spec_with(seq_len: usize, n_classes: usize, h: &Hyper) -> VariantSpec {
    let mha = BlockSpec::Mha {
        heads: h.heads,
        key_dim: h.key_dim,
    };
    let drop = BlockSpec::Dropout { rate: h.dropout };
    variant(
        &format!("(BiGRU{}+MHA{})-LSTM{}", h.gru_units, h.heads, h.lstm_units),
        seq_len,
        n_classes,
        h,
        vec![
            vec![BlockSpec::BiGru { units: h.gru_units }, BlockSpec::LayerNorm, mha, drop.clone()],
            vec![BlockSpec::LstmLast { units: h.lstm_units }, drop],
        ],
    )
}

pub fn bigat_spec(seq_len: usize, n_classes: usize) -> VariantSpec {
    bigat_spec_with(seq_len, n_classes, &Hyper::default())
}

/// Id of the canonical configuration within [`table5_variants`].
pub const CANONICAL_VARIANT: u8 = 4;

/// The twelve ablation configurations, ids 1..=12, derived from `h`.
///
/// Expansion rules: layer normalization sits between a recurrent block and a
/// following attention block; every branch ends in one dropout; attention
/// reading the raw input is preceded by a projection to the width of the
/// recurrent block that follows it.
pub fn table5_variants_with(seq_len: usize, n_classes: usize, h: &Hyper) -> Vec<(u8, VariantSpec)> {
    let mha = |heads: usize| BlockSpec::Mha {
        heads,
        key_dim: h.key_dim,
    };
    let drop = BlockSpec::Dropout { rate: h.dropout };
    let g = h.gru_units;
    let l = h.lstm_units;
    let mut out = Vec::with_capacity(12);

    out.push((
        1,
        variant(&format!("BiGRU{g}+MHA{}", h.heads), seq_len, n_classes, h, vec![vec![
            BlockSpec::BiGru { units: g },
            BlockSpec::LayerNorm,
            mha(h.heads),
            drop.clone(),
        ]]),
    ));
    out.push((
        2,
        variant(&format!("LSTM{l}+MHA{}", h.heads), seq_len, n_classes, h, vec![vec![
            BlockSpec::LstmSeq { units: l },
            BlockSpec::LayerNorm,
            mha(h.heads),
            drop.clone(),
        ]]),
    ));
    out.push((
        3,
        variant(&format!("BiGRU{g}-(LSTM{l}+MHA{})", h.heads), seq_len, n_classes, h, vec![
            vec![BlockSpec::BiGru { units: g }, drop.clone()],
            vec![BlockSpec::LstmSeq { units: l }, BlockSpec::LayerNorm, mha(h.heads), drop.clone()],
        ]),
    ));
    out.push((CANONICAL_VARIANT, bigat_spec_with(seq_len, n_classes, h)));
    out.push((
        5,
        variant(&format!("(MHA{}+BiGRU{g})-LSTM{l}", h.heads), seq_len, n_classes, h, vec![
            vec![
                BlockSpec::Project { width: 2 * g },
                mha(h.heads),
                BlockSpec::BiGru { units: g },
                drop.clone(),
            ],
            vec![BlockSpec::LstmLast { units: l }, drop.clone()],
        ]),
    ));
    out.push((
        6,
        variant(&format!("BiGRU{g}-(MHA{}+LSTM{l})", h.heads), seq_len, n_classes, h, vec![
            vec![BlockSpec::BiGru { units: g }, drop.clone()],
            vec![
                BlockSpec::Project { width: l },
                mha(h.heads),
                BlockSpec::LstmLast { units: l },
                drop.clone(),
            ],
        ]),
    ));
    let wide = Hyper {
        gru_units: 2 * g,
        lstm_units: 8 * l,
        ..h.clone()
    };
    out.push((7, bigat_spec_with(seq_len, n_classes, &wide)));
    for (id, heads) in [(8u8, 2usize), (9, 4)] {
        let hh = Hyper { heads, ..h.clone() };
        out.push((id, bigat_spec_with(seq_len, n_classes, &hh)));
    }
    for (id, rate) in [(10u8, 0.3), (11, 0.7), (12, 0.2)] {
        let mut s = bigat_spec_with(seq_len, n_classes, h).with_dropout(rate);
        s.name = format!("{} \"{rate} D\"", s.name);
        out.push((id, s));
    }
    out
}

pub fn table5_variants(seq_len: usize, n_classes: usize) -> Vec<(u8, VariantSpec)> {
    table5_variants_with(seq_len, n_classes, &Hyper::default())
}

pub fn variant_by_id(id: u8, seq_len: usize, n_classes: usize, h: &Hyper) -> Result<VariantSpec> {
    table5_variants_with(seq_len, n_classes, h)
        .into_iter()
        .find(|(i, _)| *i == id)
        .map(|(_, s)| s)
        .ok_or_else(|| Error::Config(format!("no ablation variant #{id} (valid: 1-12)")))
}
