//! Finite-difference checks of hand-written backward passes.
//!
//! The loss used for layer checks is `Σ y ⊙ R` for a fixed random `R`, so the
//! upstream gradient is exactly `R`. Dropout masks are held fixed by replaying
//! the same random stream for every evaluation.

use crate::error::Result;
use crate::layers::{Layer, Mode};
use crate::numerics::{finite_diff_grad, max_relative_error, RngStream, Tensor, FINITE_DIFF_STEP};

/// Denominator floor for relative errors; see [`max_relative_error`].
pub const REL_ERROR_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// Name of the tensor holding the worst coordinate.
    pub worst: String,
    pub coordinates: usize,
}

impl GradReport {
    fn new() -> Self {
        Self {
            max_rel_error: 0.0,
            worst: String::new(),
            coordinates: 0,
        }
    }

    pub(crate) fn record(&mut self, name: &str, analytic: &Tensor, numeric: &Tensor) {
        let err = max_relative_error(analytic.data(), numeric.data(), REL_ERROR_FLOOR);
        self.coordinates += analytic.len();
        if err >= self.max_rel_error {
            self.max_rel_error = err;
            self.worst = name.to_string();
        }
    }
}

fn weighted_sum(y: &Tensor, r: &Tensor) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Overwrites every parameter of `layer` with scaled Gaussian draws, biases
/// included, so that bias gradients are exercised away from zero.
pub fn randomize_layer(layer: &mut Layer, scale: f64, rng: &mut RngStream) {
    for t in layer.params_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = scale * rng.normal());
    }
}

pub fn random_tensor(shape: &[usize], scale: f64, rng: &mut RngStream) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.normal()).collect()).expect("sized")
}

/// Compares `layer.backward` against central differences for the input and
/// every parameter tensor.
pub fn check_layer(layer: &Layer, x: &Tensor, seed: u64) -> Result<GradReport> {
    let mut rng = RngStream::new(seed);
    let (y0, cache) = layer.forward(x, Mode::Train, Some(&mut rng.clone()))?;
    let weights = random_tensor(y0.shape(), 1.0, &mut rng);
    let (dx, grads) = layer.backward(&cache, &weights)?;

    let eval = |l: &Layer, input: &Tensor| -> f64 {
        let mut replay = RngStream::new(seed);
        match l.forward(input, Mode::Train, Some(&mut replay)) {
            Ok((y, _)) => weighted_sum(&y, &weights),
            Err(_) => f64::NAN,
        }
    };

    let mut report = GradReport::new();
    let num_dx = finite_diff_grad(|xp| eval(layer, xp), x, FINITE_DIFF_STEP)?;
    report.record("input", &dx, &num_dx);

    let names: Vec<String> = layer.params().iter().map(|(n, _)| n.to_string()).collect();
    for (idx, (name, analytic)) in names.iter().zip(&grads).enumerate() {
        let base = layer.params()[idx].1.clone();
        let numeric = finite_diff_grad(
            |p| {
                let mut probe = layer.clone();
                *probe.params_mut()[idx] = p.clone();
                eval(&probe, x)
            },
            &base,
            FINITE_DIFF_STEP,
        )?;
        report.record(name, analytic, &numeric);
    }
    Ok(report)
}

/// Compares the full-model gradient of the configured loss against central
/// differences for every parameter tensor. Parameters are randomized first
/// so that every bias carries signal.
pub fn check_model(
    spec: &crate::model::VariantSpec,
    cfg: &crate::training::TrainConfig,
    batch: usize,
    seed: u64,
) -> Result<GradReport> {
    use crate::data::one_hot;
    use crate::model::{build, predict};

    let mut rng = RngStream::new(seed);
    let mut params = build(spec, &mut rng)?;
    for t in params.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.5 * rng.normal());
    }
    let x = random_tensor(&[batch, spec.seq_len, spec.input_dim], 1.0, &mut rng);
    let labels: Vec<usize> = (0..batch).map(|_| rng.below(spec.n_classes)).collect();
    let onehot = one_hot(&labels, spec.n_classes)?;
    let dropout_seed = rng.next_u64();

    let (_, _, grads) =
        crate::training::loss_and_grads(&params, spec, &x, &onehot, cfg, &mut RngStream::new(dropout_seed))?;
    let loss_of = |p: &crate::model::ModelParams| -> f64 {
        let mut replay = RngStream::new(dropout_seed);
        predict(p, spec, &x, Mode::Train, Some(&mut replay))
            .and_then(|(probs, _)| cfg.loss(&probs, &onehot))
            .map(|(l, _)| l)
            .unwrap_or(f64::NAN)
    };

    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    let mut report = GradReport::new();
    for (idx, (name, analytic)) in names.iter().zip(&grads).enumerate() {
        let base = params.tensors()[idx].clone();
        let numeric = finite_diff_grad(
            |p| {
                let mut probe = params.clone();
                *probe.tensors_mut()[idx] = p.clone();
                loss_of(&probe)
            },
            &base,
            FINITE_DIFF_STEP,
        )?;
        report.record(name, analytic, &numeric);
    }
    Ok(report)
}
