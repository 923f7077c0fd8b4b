//! Assembly of declarative variants into trainable networks.

mod checkpoint;
mod spec;

pub use checkpoint::{decode, encode, load, save, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use spec::{
    bigat_spec, bigat_spec_with, table5_variants, table5_variants_with, variant_by_id, BlockSpec, Hyper,
    VariantSpec, CANONICAL_VARIANT,
};

use crate::error::{Error, Result};
use crate::layers::{
    split_last_axis, DenseAct, DenseParams, GruParams, Layer, LayerCache, LayerNormParams, LstmParams, MhaParams,
    Mode,
};
use crate::numerics::{RngStream, Tensor};

/// Rows per forward call when predicting in evaluation mode.
pub const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Branch(usize),
    Concat,
    Head,
}

#[derive(Debug, Clone)]
enum PlanKind {
    BiGru { input: usize, units: usize },
    Lstm { input: usize, units: usize, seq: bool },
    Mha { d_model: usize, heads: usize, key_dim: usize },
    LayerNorm { width: usize },
    Dropout { rate: f64 },
    Project { input: usize, width: usize },
    Flatten,
    Concat,
    Dense { input: usize, output: usize, act: DenseAct },
}

#[derive(Debug, Clone)]
struct Planned {
    slot: Slot,
    kind: PlanKind,
    /// Output shape without the batch axis.
    out: Vec<usize>,
}

impl Planned {
    fn params(&self) -> usize {
        match self.kind {
            PlanKind::BiGru { input, units } => 2 * GruParams::count(input, units),
            PlanKind::Lstm { input, units, .. } => LstmParams::count(input, units),
            PlanKind::Mha { d_model, heads, key_dim } => MhaParams::count(d_model, heads, key_dim),
            PlanKind::LayerNorm { width } => LayerNormParams::count(width),
            PlanKind::Project { input, width } => DenseParams::count(input, width),
            PlanKind::Dense { input, output, .. } => DenseParams::count(input, output),
            PlanKind::Dropout { .. } | PlanKind::Flatten | PlanKind::Concat => 0,
        }
    }
}

fn plan(spec: &VariantSpec) -> Result<Vec<Planned>> {
    spec.validate()?;
    let t = spec.seq_len;
    let mut out = Vec::new();
    let mut branch_widths = Vec::new();
    for (b, branch) in spec.branches.iter().enumerate() {
        let mut width = spec.input_dim;
        let mut sequence = true;
        let push = |out: &mut Vec<Planned>, kind, shape| {
            out.push(Planned {
                slot: Slot::Branch(b),
                kind,
                out: shape,
            })
        };
        for block in branch {
            let needs_sequence = !matches!(block, BlockSpec::LayerNorm | BlockSpec::Dropout { .. });
            if needs_sequence && !sequence {
                return Err(Error::Construction {
                    block: format!("branch{b}/{}", block.label()),
                    reason: "needs a sequence input but follows a last-state LSTM".into(),
                });
            }
            let cur = |w: usize| if sequence { vec![t, w] } else { vec![w] };
            match *block {
                BlockSpec::BiGru { units } => {
                    push(&mut out, PlanKind::BiGru { input: width, units }, vec![t, 2 * units]);
                    width = 2 * units;
                }
                BlockSpec::LstmLast { units } | BlockSpec::LstmSeq { units } => {
                    let seq = matches!(block, BlockSpec::LstmSeq { .. });
                    let shape = if seq { vec![t, units] } else { vec![units] };
                    push(&mut out, PlanKind::Lstm { input: width, units, seq }, shape);
                    width = units;
                    sequence = seq;
                }
                BlockSpec::Mha { heads, key_dim } => {
                    push(&mut out, PlanKind::Mha { d_model: width, heads, key_dim }, vec![t, width]);
                }
                BlockSpec::LayerNorm => push(&mut out, PlanKind::LayerNorm { width }, cur(width)),
                BlockSpec::Dropout { rate } => push(&mut out, PlanKind::Dropout { rate }, cur(width)),
                BlockSpec::Project { width: w } => {
                    push(&mut out, PlanKind::Project { input: width, width: w }, vec![t, w]);
                    width = w;
                }
            }
        }
        if sequence {
            width *= t;
            push(&mut out, PlanKind::Flatten, vec![width]);
        }
        branch_widths.push(width);
    }
    let mut width: usize = branch_widths.iter().sum();
    if spec.branches.len() > 1 {
        out.push(Planned {
            slot: Slot::Concat,
            kind: PlanKind::Concat,
            out: vec![width],
        });
    }
    let dense_widths = spec.head.iter().copied().chain(std::iter::once(spec.n_classes));
    let last = spec.head.len();
    for (i, w) in dense_widths.enumerate() {
        let act = if i == last { DenseAct::Softmax } else { DenseAct::Relu };
        out.push(Planned {
            slot: Slot::Head,
            kind: PlanKind::Dense {
                input: width,
                output: w,
                act,
            },
            out: vec![w],
        });
        width = w;
    }
    Ok(out)
}

/// Trainable parameters of a built variant: branch layers in order, then the
/// dense head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    branches: Vec<Vec<Layer>>,
    head: Vec<Layer>,
}

impl ModelParams {
    /// `(name, tensor)` pairs in serialization order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (b, branch) in self.branches.iter().enumerate() {
            for (i, layer) in branch.iter().enumerate() {
                for (local, t) in layer.params() {
                    out.push((format!("branch{b}.{i}.{}.{local}", layer.kind().to_lowercase()), t));
                }
            }
        }
        for (i, layer) in self.head.iter().enumerate() {
            for (local, t) in layer.params() {
                out.push((format!("head.{i}.dense.{local}"), t));
            }
        }
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers().flat_map(|l| l.params().into_iter().map(|(_, t)| t)).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.branches
            .iter_mut()
            .flatten()
            .chain(self.head.iter_mut())
            .flat_map(|l| l.params_mut())
            .collect()
    }

    pub fn total(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn branches(&self) -> &[Vec<Layer>] {
        &self.branches
    }

    pub fn head(&self) -> &[Layer] {
        &self.head
    }

    fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.branches.iter().flatten().chain(self.head.iter())
    }

    /// Rounds every weight to the nearest `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

/// Allocates and initializes all parameters for `spec`.
pub fn build(spec: &VariantSpec, rng: &mut RngStream) -> Result<ModelParams> {
    let planned = plan(spec)?;
    let mut branches = vec![Vec::new(); spec.branches.len()];
    let mut head = Vec::new();
    for p in &planned {
        let layer = match p.kind {
            PlanKind::BiGru { input, units } => Layer::BiGru {
                fwd: GruParams::init(input, units, rng),
                bwd: GruParams::init(input, units, rng),
            },
            PlanKind::Lstm { input, units, seq } => Layer::Lstm {
                params: LstmParams::init(input, units, spec.lstm_forget_bias, rng),
                return_sequences: seq,
            },
            PlanKind::Mha { d_model, heads, key_dim } => Layer::Mha {
                params: MhaParams::init(d_model, heads, key_dim, rng),
                heads,
                key_dim,
            },
            PlanKind::LayerNorm { width } => Layer::LayerNorm {
                params: LayerNormParams::new(width),
                eps: spec.layer_norm_eps,
            },
            PlanKind::Dropout { rate } => Layer::Dropout { rate },
            PlanKind::Project { input, width } => Layer::Dense {
                params: DenseParams::init(input, width, rng),
                act: DenseAct::None,
            },
            PlanKind::Flatten => Layer::Flatten,
            PlanKind::Concat => continue,
            PlanKind::Dense { input, output, act } => Layer::Dense {
                params: DenseParams::init(input, output, rng),
                act,
            },
        };
        match p.slot {
            Slot::Branch(b) => branches[b].push(layer),
            Slot::Head => head.push(layer),
            Slot::Concat => unreachable!("concat has no parameters"),
        }
    }
    Ok(ModelParams { branches, head })
}

/// Parameter count computed from the spec alone.
pub fn param_total(spec: &VariantSpec) -> Result<usize> {
    Ok(plan(spec)?.iter().map(Planned::params).sum())
}

/// Cached intermediates of one training-mode forward pass.
#[derive(Debug)]
pub struct ForwardCache {
    branches: Vec<Vec<LayerCache>>,
    widths: Vec<usize>,
    head: Vec<LayerCache>,
}

/// Records `(layer name, output shape)` for every layer a forward pass visits.
pub type ShapeTrace = Vec<(String, Vec<usize>)>;

fn display_name(layer: &Layer) -> &'static str {
    match layer {
        Layer::Dense { act: DenseAct::None, .. } => "Projection",
        Layer::Lstm { .. } => "LSTM",
        other => other.kind(),
    }
}

fn check_input(spec: &VariantSpec, x: &Tensor) -> Result<()> {
    match *x.shape() {
        [_, t, d] if t == spec.seq_len && d == spec.input_dim => Ok(()),
        _ => Err(Error::Shape(format!(
            "model expects input [batch, {}, {}], got {:?}",
            spec.seq_len,
            spec.input_dim,
            x.shape()
        ))),
    }
}

fn forward_pass(
    params: &ModelParams,
    spec: &VariantSpec,
    x: &Tensor,
    mode: Mode,
    mut rng: Option<&mut RngStream>,
    mut trace: Option<&mut ShapeTrace>,
) -> Result<(Tensor, ForwardCache)> {
    let mut cache = ForwardCache {
        branches: Vec::with_capacity(params.branches.len()),
        widths: Vec::new(),
        head: Vec::new(),
    };
    let mut outputs = Vec::new();
    for branch in &params.branches {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(branch.len());
        for layer in branch {
            let (mut y, c) = layer.forward(&h, mode, rng.as_deref_mut())?;
            if spec.mha_residual && matches!(layer, Layer::Mha { .. }) {
                y.add_assign(&h)?;
            }
            if let Some(tr) = trace.as_deref_mut() {
                tr.push((display_name(layer).to_string(), y.shape().to_vec()));
            }
            caches.push(c);
            h = y;
        }
        cache.widths.push(h.last_dim());
        cache.branches.push(caches);
        outputs.push(h);
    }
    let mut h = if outputs.len() == 1 {
        outputs.pop().expect("one branch")
    } else {
        let rows = x.dim(0);
        let width: usize = cache.widths.iter().sum();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for o in &outputs {
                data.extend_from_slice(o.row(r));
            }
        }
        let joined = Tensor::new(vec![rows, width], data)?;
        if let Some(tr) = trace.as_deref_mut() {
            tr.push(("Concatenate".into(), joined.shape().to_vec()));
        }
        joined
    };
    for layer in &params.head {
        let (y, c) = layer.forward(&h, mode, rng.as_deref_mut())?;
        if let Some(tr) = trace.as_deref_mut() {
            tr.push(("Dense".into(), y.shape().to_vec()));
        }
        cache.head.push(c);
        h = y;
    }
    Ok((h, cache))
}

/// Class probabilities `[batch, n_classes]`.
///
/// Evaluation mode is deterministic, runs in chunks of [`EVAL_CHUNK`] rows
/// and returns no cache. Training mode applies dropout from `rng` and returns
/// the cache needed by [`backward`].
pub fn predict(
    params: &ModelParams,
    spec: &VariantSpec,
    x: &Tensor,
    mode: Mode,
    rng: Option<&mut RngStream>,
) -> Result<(Tensor, Option<ForwardCache>)> {
    check_input(spec, x)?;
    match mode {
        Mode::Train => {
            let (p, c) = forward_pass(params, spec, x, mode, rng, None)?;
            Ok((p, Some(c)))
        }
        Mode::Eval => {
            let rows = x.dim(0);
            let step = spec.seq_len * spec.input_dim;
            let mut probs = Vec::with_capacity(rows * spec.n_classes);
            let mut start = 0;
            while start < rows {
                let end = (start + EVAL_CHUNK).min(rows);
                let chunk = Tensor::new(
                    vec![end - start, spec.seq_len, spec.input_dim],
                    x.data()[start * step..end * step].to_vec(),
                )?;
                let (p, _) = forward_pass(params, spec, &chunk, mode, None, None)?;
                probs.extend_from_slice(p.data());
                start = end;
            }
            Ok((Tensor::new(vec![rows, spec.n_classes], probs)?, None))
        }
    }
}

/// Evaluation-mode forward that records the output shape of every layer.
pub fn shape_trace(params: &ModelParams, spec: &VariantSpec, x: &Tensor) -> Result<ShapeTrace> {
    check_input(spec, x)?;
    let mut trace = vec![("Input".to_string(), x.shape().to_vec())];
    forward_pass(params, spec, x, Mode::Eval, None, Some(&mut trace))?;
    Ok(trace)
}

/// Gradients of every parameter, aligned with [`ModelParams::named`], given
/// the gradient of the loss with respect to the output probabilities.
pub fn backward(params: &ModelParams, spec: &VariantSpec, cache: &ForwardCache, d_probs: &Tensor) -> Result<Vec<Tensor>> {
    if cache.branches.len() != params.branches.len() || cache.head.len() != params.head.len() {
        return Err(Error::CacheMismatch("forward cache does not match model layout".into()));
    }
    let mut head_grads = Vec::with_capacity(params.head.len());
    let mut g = d_probs.clone();
    for (layer, c) in params.head.iter().zip(&cache.head).rev() {
        let (dx, grads) = layer.backward(c, &g)?;
        head_grads.push(grads);
        g = dx;
    }
    head_grads.reverse();

    let parts = split_last_axis(&g, &cache.widths)?;
    let mut branch_grads = Vec::with_capacity(params.branches.len());
    for ((branch, caches), mut g) in params.branches.iter().zip(&cache.branches).zip(parts) {
        if branch.len() != caches.len() {
            return Err(Error::CacheMismatch("branch cache length differs".into()));
        }
        let mut grads = Vec::with_capacity(branch.len());
        for (layer, c) in branch.iter().zip(caches).rev() {
            let (mut dx, lg) = layer.backward(c, &g)?;
            if spec.mha_residual && matches!(layer, Layer::Mha { .. }) {
                dx.add_assign(&g)?;
            }
            grads.push(lg);
            g = dx;
        }
        grads.reverse();
        branch_grads.push(grads);
    }
    Ok(branch_grads
        .into_iter()
        .flatten()
        .chain(head_grads)
        .flatten()
        .collect())
}

/// One row of a model summary table.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub layer: String,
    pub unit: String,
    pub output: Vec<usize>,
    pub params: usize,
    pub connected_to: String,
}

/// Per-layer summary in the layout of a Keras `model.summary()`.
pub fn summary(spec: &VariantSpec) -> Result<Vec<SummaryRow>> {
    let planned = plan(spec)?;
    let mut rows = vec![SummaryRow {
        layer: "Input".into(),
        unit: "-".into(),
        output: vec![spec.seq_len, spec.input_dim],
        params: 0,
        connected_to: "-".into(),
    }];
    let mut dropouts = 0;
    let mut prev: Option<String> = None;
    let mut tails: Vec<String> = Vec::new();
    let mut current = None;
    for p in &planned {
        if let Slot::Branch(b) = p.slot {
            if current != Some(b) {
                if let Some(tail) = prev.take() {
                    tails.push(tail);
                }
                current = Some(b);
            }
        }
        let (name, unit) = match &p.kind {
            PlanKind::BiGru { units, .. } => ("BiGRU".to_string(), units.to_string()),
            PlanKind::Lstm { units, .. } => ("LSTM".to_string(), units.to_string()),
            PlanKind::Mha { heads, key_dim, .. } => ("MHA".to_string(), format!("({heads}, {key_dim})")),
            PlanKind::LayerNorm { .. } => ("LayerNorm.".to_string(), "-".to_string()),
            PlanKind::Dropout { .. } => {
                dropouts += 1;
                (format!("Dropout_{dropouts}"), "-".to_string())
            }
            PlanKind::Project { width, .. } => ("Projection".to_string(), width.to_string()),
            PlanKind::Flatten => ("Flatten".to_string(), "-".to_string()),
            PlanKind::Concat => ("Concatenate".to_string(), "-".to_string()),
            PlanKind::Dense { output, .. } => ("Dense".to_string(), output.to_string()),
        };
        let connected_to = match p.kind {
            PlanKind::Concat => {
                if let Some(tail) = prev.take() {
                    tails.push(tail);
                }
                tails.join(", ")
            }
            _ => prev.clone().unwrap_or_else(|| "Input_Layer[0][0]".to_string()),
        };
        rows.push(SummaryRow {
            layer: name.clone(),
            unit,
            output: p.out.clone(),
            params: p.params(),
            connected_to,
        });
        prev = Some(name);
    }
    Ok(rows)
}

pub fn format_shape(shape: &[usize]) -> String {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    format!("(None, {})", dims.join(", "))
}

pub fn group_thousands(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// Text table: index, layer, unit, output shape, parameters, connections,
/// followed by the parameter totals.
pub fn format_summary(spec: &VariantSpec) -> Result<String> {
    let rows = summary(spec)?;
    let mut out = format!(
        "{:<4}{:<14}{:<10}{:<20}{:>10}  {}\n",
        "", "DL Layer", "Unit", "Output Shape", "Param #", "Connected to"
    );
    for (i, r) in rows.iter().enumerate() {
        out.push_str(&format!(
            "{:<4}{:<14}{:<10}{:<20}{:>10}  {}\n",
            i + 1,
            r.layer,
            r.unit,
            format_shape(&r.output),
            group_thousands(r.params),
            r.connected_to
        ));
    }
    let total = group_thousands(param_total(spec)?);
    out.push_str(&format!("Total parameters: {total}\n"));
    out.push_str(&format!("Trainable parameters: {total}\n"));
    out.push_str("Non-trainable parameters: 0\n");
    Ok(out)
}

#[cfg(test)]
mod tests;
