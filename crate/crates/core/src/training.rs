//! Losses, the Adam optimizer and the mini-batch training loop.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{argmax_rows, one_hot, Balancing, Dataset, DEFAULT_SMOTE_K};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::{backward, build, predict, ModelParams, VariantSpec};
use crate::numerics::{RngStream, Tensor};

/// Lower clamp applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

fn check_pair(probs: &Tensor, onehot: &Tensor) -> Result<(usize, usize)> {
    match *probs.shape() {
        [b, c] if onehot.shape() == probs.shape() && b > 0 => Ok((b, c)),
        _ => Err(Error::Shape(format!(
            "loss needs matching non-empty [batch, classes] tensors, got {:?} and {:?}",
            probs.shape(),
            onehot.shape()
        ))),
    }
}

/// Mean categorical cross-entropy and its gradient with respect to `probs`.
pub fn cce_loss(probs: &Tensor, onehot: &Tensor) -> Result<(f64, Tensor)> {
    let (b, _) = check_pair(probs, onehot)?;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros_like(probs);
    for ((p, y), g) in probs.data().iter().zip(onehot.data()).zip(grad.data_mut()) {
        if *y == 0.0 {
            continue;
        }
        let pc = p.clamp(PROB_FLOOR, 1.0);
        loss -= y * pc.ln();
        if *p >= PROB_FLOOR {
            *g = -y / (b as f64 * p);
        }
    }
    Ok((loss / b as f64, grad))
}

/// Mean focal loss `−α_y (1 − p_y)^γ log p_y`. An empty `alpha` means 1 for
/// every class.
pub fn focal_loss(probs: &Tensor, onehot: &Tensor, gamma: f64, alpha: &[f64]) -> Result<(f64, Tensor)> {
    let (b, c) = check_pair(probs, onehot)?;
    if !(gamma >= 0.0) {
        return Err(Error::Config(format!("focal gamma must be >= 0, got {gamma}")));
    }
    if !alpha.is_empty() && alpha.len() != c {
        return Err(Error::Config(format!("{} focal weights for {c} classes", alpha.len())));
    }
    let mut loss = 0.0;
    let mut grad = Tensor::zeros_like(probs);
    let labels = argmax_rows(onehot);
    for (i, &k) in labels.iter().enumerate() {
        let a = alpha.get(k).copied().unwrap_or(1.0);
        let p = probs.data()[i * c + k];
        let pc = p.clamp(PROB_FLOOR, 1.0);
        let q = 1.0 - pc;
        let log_p = pc.ln();
        loss -= a * q.powf(gamma) * log_p;
        if p >= PROB_FLOOR {
            // d/dp [(1-p)^γ log p] = (1-p)^γ / p − γ (1-p)^(γ-1) log p
            let decay = if gamma == 0.0 || q == 0.0 {
                0.0
            } else {
                gamma * q.powf(gamma - 1.0) * log_p
            };
            grad.data_mut()[i * c + k] = -a * (q.powf(gamma) / p - decay) / b as f64;
        }
    }
    Ok((loss / b as f64, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Cce,
    Focal,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cce" => Ok(LossKind::Cce),
            "focal" => Ok(LossKind::Focal),
            other => Err(Error::Config(format!("unknown loss '{other}' (cce|focal)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss: LossKind,
    pub focal_gamma: f64,
    /// Per-class focal weights; empty means all 1.
    pub focal_alpha: Vec<f64>,
    pub seed: u64,
    /// Applied to the training split only.
    pub balancing: Balancing,
    pub smote_k: usize,
    /// Rescale gradients whose global L2 norm exceeds this value.
    pub clip_norm: Option<f64>,
    /// Multiply the learning rate by this factor after every epoch.
    pub lr_decay: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 128,
            epochs: 30,
            loss: LossKind::Cce,
            focal_gamma: 2.0,
            focal_alpha: Vec::new(),
            seed: 42,
            balancing: Balancing::None,
            smote_k: DEFAULT_SMOTE_K,
            clip_norm: None,
            lr_decay: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.focal_gamma >= 0.0) {
            return Err(Error::Config(format!("focal gamma must be >= 0, got {}", self.focal_gamma)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip norm must be > 0, got {c}")));
            }
        }
        if let Some(d) = self.lr_decay {
            if !(d > 0.0) {
                return Err(Error::Config(format!("lr decay must be > 0, got {d}")));
            }
        }
        Ok(())
    }

    pub fn loss(&self, probs: &Tensor, onehot: &Tensor) -> Result<(f64, Tensor)> {
        match self.loss {
            LossKind::Cce => cce_loss(probs, onehot),
            LossKind::Focal => focal_loss(probs, onehot, self.focal_gamma, &self.focal_alpha),
        }
    }
}

/// Adam moments for a list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(Tensor::zeros_like).collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
        }
    }

    pub fn for_model(params: &ModelParams) -> Self {
        Self::new(params.tensors())
    }

    /// One bias-corrected Adam update.
    pub fn update(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "Adam got {} parameters, {} gradients, {} moment slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::Shape(format!(
                    "Adam slot {i}: parameter {:?}, gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for ((p, g), (m, v)) in params.into_iter().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

pub fn adam_step(params: &mut ModelParams, grads: &[Tensor], state: &mut AdamState, lr: f64) -> Result<()> {
    state.update(params.tensors_mut(), grads, lr)
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale(s));
    }
    norm
}

/// Training-mode forward, loss and parameter gradients for one batch.
pub fn loss_and_grads(
    params: &ModelParams,
    spec: &VariantSpec,
    x: &Tensor,
    onehot: &Tensor,
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<(f64, Tensor, Vec<Tensor>)> {
    let (probs, cache) = predict(params, spec, x, Mode::Train, Some(rng))?;
    let (loss, d_probs) = cfg.loss(&probs, onehot)?;
    let grads = backward(params, spec, cache.as_ref().expect("train mode keeps caches"), &d_probs)?;
    Ok((loss, probs, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Optimizer steps taken over the whole run.
    pub steps: usize,
    /// Training rows per epoch after balancing.
    pub train_rows: usize,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_acc,val_loss,val_acc\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.epoch,
                r.train_loss,
                r.train_acc,
                opt(r.val_loss),
                opt(r.val_acc)
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// Eval-mode loss and accuracy of `params` on `ds`.
pub fn evaluate_loss(params: &ModelParams, spec: &VariantSpec, ds: &Dataset, cfg: &TrainConfig) -> Result<(f64, f64)> {
    let (probs, _) = predict(params, spec, &ds.x, Mode::Eval, None)?;
    let onehot = one_hot(&ds.y, spec.n_classes)?;
    let (loss, _) = cfg.loss(&probs, &onehot)?;
    let correct = argmax_rows(&probs).iter().zip(&ds.y).filter(|(a, b)| a == b).count();
    Ok((loss, correct as f64 / ds.len() as f64))
}

fn check_dataset(spec: &VariantSpec, ds: &Dataset, what: &str) -> Result<()> {
    if ds.seq_len() != spec.seq_len || ds.input_dim() != spec.input_dim {
        return Err(Error::Incompatible(format!(
            "{what} rows are [{}, {}], the model expects [{}, {}]",
            ds.seq_len(),
            ds.input_dim(),
            spec.seq_len,
            spec.input_dim
        )));
    }
    if ds.n_classes() != spec.n_classes {
        return Err(Error::Incompatible(format!(
            "{what} has {} classes, the model has {}",
            ds.n_classes(),
            spec.n_classes
        )));
    }
    Ok(())
}

/// Trains a freshly built model. See [`train_with`].
pub fn train(spec: &VariantSpec, train_ds: &Dataset, val_ds: Option<&Dataset>, cfg: &TrainConfig) -> Result<(ModelParams, History)> {
    train_with(spec, train_ds, val_ds, cfg, |_, _| {})
}

/// Mini-batch Adam training.
///
/// The configured balancing is applied to `train_ds` first; `val_ds` is
/// only scored. Each epoch reshuffles, keeps the last partial batch and
/// appends one [`History`] row, after which `on_epoch` is called. The
/// returned weights are rounded to `f32`, the checkpoint precision.
pub fn train_with<F>(
    spec: &VariantSpec,
    train_ds: &Dataset,
    val_ds: Option<&Dataset>,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<(ModelParams, History)>
where
    F: FnMut(&EpochRecord, &ModelParams),
{
    cfg.validate()?;
    if train_ds.is_empty() {
        return Err(Error::EmptyDataset("training set has no rows".into()));
    }
    check_dataset(spec, train_ds, "training set")?;
    if let Some(v) = val_ds {
        check_dataset(spec, v, "validation set")?;
    }
    let root = RngStream::new(cfg.seed);
    let mut params = build(spec, &mut root.fork(1))?;
    let mut order_rng = root.fork(2);
    let mut dropout_rng = root.fork(3);
    let ds = cfg.balancing.apply(train_ds, cfg.smote_k, &mut root.fork(4))?;
    let mut adam = AdamState::for_model(&params);
    let mut lr = cfg.learning_rate;
    let mut history = History {
        train_rows: ds.len(),
        ..Default::default()
    };
    let mut order: Vec<usize> = (0..ds.len()).collect();
    for epoch in 1..=cfg.epochs {
        order_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let sub = ds.subset(idx);
            let onehot = one_hot(&sub.y, spec.n_classes)?;
            let (loss, probs, mut grads) = loss_and_grads(&params, spec, &sub.x, &onehot, cfg, &mut dropout_rng)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    batch: batch + 1,
                    loss,
                });
            }
            if let Some(c) = cfg.clip_norm {
                clip_global_norm(&mut grads, c);
            }
            adam_step(&mut params, &grads, &mut adam, lr)?;
            history.steps += 1;
            loss_sum += loss * idx.len() as f64;
            correct += argmax_rows(&probs).iter().zip(&sub.y).filter(|(a, b)| a == b).count();
        }
        let (val_loss, val_acc) = match val_ds {
            Some(v) if !v.is_empty() => {
                let (l, a) = evaluate_loss(&params, spec, v, cfg)?;
                (Some(l), Some(a))
            }
            _ => (None, None),
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / ds.len() as f64,
            train_acc: correct as f64 / ds.len() as f64,
            val_loss,
            val_acc,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} acc {:.4} val_acc {}",
            record.train_loss,
            record.train_acc,
            val_acc.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into())
        );
        on_epoch(&record, &params);
        history.epochs.push(record);
        if let Some(d) = cfg.lr_decay {
            lr *= d;
        }
    }
    params.round_to_f32();
    Ok((params, history))
}
