//! Shapley estimator against exact enumeration and the axioms.

use bigat_core::data::{stratified_split, synth_generate, MinMaxScaler, SynthConfig};
use bigat_core::explain::{
    attribution_summary, background_mean, shapley_estimate, shapley_exact_small, AttributionSettings, FnPredictor,
    ModelPredictor,
};
use bigat_core::model::{bigat_spec_with, Hyper};
use bigat_core::training::{train, TrainConfig};
use bigat_core::{RngStream, Tensor};
use proptest::prelude::*;

/// Nonlinear 8-feature surrogate with interactions.
fn surrogate(r: &[f64]) -> f64 {
    let z = 0.8 * r[0] - 0.5 * r[1] + 0.3 * r[2] * r[3] + 0.6 * r[4].sin() - 0.2 * r[5] * r[6] + 0.4 * r[7];
    1.0 / (1.0 + (-z).exp())
}

fn surrogate_case() -> (Vec<f64>, Vec<f64>, Tensor) {
    let mut rng = RngStream::new(77);
    let bg_rows: Vec<Vec<f64>> = (0..32).map(|_| (0..8).map(|_| rng.normal()).collect()).collect();
    let bg = Tensor::from_rows(&bg_rows).unwrap();
    let x: Vec<f64> = (0..8).map(|_| 1.5 * rng.normal()).collect();
    let base = background_mean(&bg).unwrap();
    (x, base, bg)
}

fn predictor() -> FnPredictor<impl Fn(&[f64]) -> Vec<f64>> {
    FnPredictor {
        f: |r: &[f64]| vec![surrogate(r)],
        n_features: 8,
        n_outputs: 1,
    }
}

proptest! {
    #[test]
    fn exact_values_are_efficient(seed in any::<u64>(), n in 1usize..9) {
        let mut rng = RngStream::new(seed);
        let w: Vec<f64> = (0..n * n).map(|_| rng.normal()).collect();
        let f = |r: &[f64]| {
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    s += w[i * n + j] * r[i] * r[j].tanh();
                }
            }
            s.sin()
        };
        let x: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let phi = shapley_exact_small(f, &x, &b).unwrap();
        prop_assert!((phi.iter().sum::<f64>() - (f(&x) - f(&b))).abs() < 1e-9);
    }

    #[test]
    fn symmetric_features_share_credit(seed in any::<u64>()) {
        let mut rng = RngStream::new(seed);
        let (a, c) = (rng.normal(), rng.normal());
        // Features 0 and 1 enter only through their sum and product.
        let f = |r: &[f64]| ((r[0] + r[1]) * a).tanh() + r[0] * r[1] * r[2] + c * r[3];
        let v = rng.normal();
        let x = [v, v, rng.normal(), rng.normal()];
        let phi = shapley_exact_small(f, &x, &[0.0; 4]).unwrap();
        prop_assert!((phi[0] - phi[1]).abs() < 1e-9);
    }
}

#[test]
fn monte_carlo_matches_exact_on_eight_features() {
    let (x, base, bg) = surrogate_case();
    let exact = shapley_exact_small(surrogate, &x, &base).unwrap();
    let gap = (surrogate(&x) - surrogate(&base)).abs();
    let est = shapley_estimate(&predictor(), &bg, &x, 0, 5_000, &mut RngStream::new(3)).unwrap();
    let err = est.values.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 0.01 * gap, "max error {err} vs gap {gap}");
}

#[test]
fn monte_carlo_error_shrinks_like_inverse_root_n() {
    let (x, base, bg) = surrogate_case();
    let exact = shapley_exact_small(surrogate, &x, &base).unwrap();
    let model = predictor();
    let rms_error = |n: usize| {
        let reps = 20;
        let mut sq = 0.0;
        for r in 0..reps {
            let est = shapley_estimate(&model, &bg, &x, 0, n, &mut RngStream::new(1000 + r)).unwrap();
            sq += est.values.iter().zip(&exact).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        (sq / reps as f64).sqrt()
    };
    let errs: Vec<f64> = [100, 1_000, 10_000].iter().map(|&n| rms_error(n)).collect();
    for w in errs.windows(2) {
        let ratio = w[0] / w[1];
        let expected = 10f64.sqrt();
        assert!(ratio > expected / 3.0 && ratio < expected * 3.0, "errors {errs:?}");
    }
}

#[test]
fn ignored_feature_gets_negligible_credit() {
    let (x, _, bg) = surrogate_case();
    // Feature 8 is appended but never read.
    let model = FnPredictor {
        f: |r: &[f64]| vec![surrogate(&r[..8])],
        n_features: 9,
        n_outputs: 1,
    };
    let mut x9 = x.clone();
    x9.push(4.0);
    let mut bg9 = Vec::new();
    for r in bg.data().chunks(8) {
        bg9.extend_from_slice(r);
        bg9.push(-1.0);
    }
    let bg9 = Tensor::new(vec![32, 9], bg9).unwrap();
    let est = shapley_estimate(&model, &bg9, &x9, 0, 500, &mut RngStream::new(5)).unwrap();
    assert!(est.values[8].abs() <= 3.0 * est.std_err[8] + 1e-15);
}

#[test]
fn model_reading_one_feature_ranks_it_first() {
    let model = FnPredictor {
        f: |r: &[f64]| {
            let z = [2.0 * r[0], -r[0], 0.5 * r[0]];
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        },
        n_features: 5,
        n_outputs: 3,
    };
    let mut rng = RngStream::new(6);
    let rows: Vec<Vec<f64>> = (0..6).map(|_| (0..5).map(|_| rng.normal()).collect()).collect();
    let sample = Tensor::from_rows(&rows).unwrap();
    let names: Vec<String> = (0..5).map(|i| format!("f{i}")).collect();
    let classes: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
    let settings = AttributionSettings {
        permutations: 20,
        ..Default::default()
    };
    let att = attribution_summary(&model, &sample, &sample, &names, &classes, &settings).unwrap();
    for c in 0..3 {
        assert_eq!(att.ranking(c)[0], 0);
    }
    assert!(att.mean_abs.iter().flatten().all(|v| v.is_finite() && *v >= 0.0));
}

fn kendall_tau(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            s += ((a[i] - a[j]) * (b[i] - b[j])).signum();
        }
    }
    s / (n * (n - 1) / 2) as f64
}

#[test]
fn rankings_are_stable_across_seeds_on_trained_model() {
    let synth = SynthConfig {
        n_per_class: 60,
        ..Default::default()
    };
    let ds = synth_generate(&synth).unwrap();
    let (tr, te) = stratified_split(&ds, 0.8, &mut RngStream::new(1)).unwrap();
    let sc = MinMaxScaler::fit(&tr.x).unwrap();
    let (tr, te) = (tr.scaled(&sc).unwrap(), te.scaled(&sc).unwrap());
    let spec = bigat_spec_with(20, 6, &Hyper::tiny());
    let cfg = TrainConfig {
        epochs: 10,
        batch_size: 32,
        learning_rate: 5e-3,
        ..Default::default()
    };
    let (params, _) = train(&spec, &tr, None, &cfg).unwrap();
    let model = ModelPredictor { params: &params, spec: &spec };
    let sample = te.subset(&[0, 10, 20, 30]).x.reshape(&[4, 20]).unwrap();
    let background = tr.x.clone().reshape(&[tr.len(), 20]).unwrap();
    let names: Vec<String> = (0..20).map(|i| format!("feature {i}")).collect();
    let run = |seed| {
        let settings = AttributionSettings {
            permutations: 5_000,
            seed,
            ..Default::default()
        };
        attribution_summary(&model, &background, &sample, &names, ds.codec.classes(), &settings).unwrap()
    };
    let (a, b) = (run(1), run(2));
    let top: Vec<usize> = a.overall_ranking().into_iter().take(10).collect();
    let total = |att: &bigat_core::explain::Attribution, i: usize| att.mean_abs[i].iter().sum::<f64>();
    let va: Vec<f64> = top.iter().map(|&i| total(&a, i)).collect();
    let vb: Vec<f64> = top.iter().map(|&i| total(&b, i)).collect();
    let tau = kendall_tau(&va, &vb);
    assert!(tau >= 0.8, "tau {tau}");
}
