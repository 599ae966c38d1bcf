use std::sync::Arc;

use mli::data::synthetic_blobs;
use mli::nn::{
    evaluate, forward, gradient, loss, warm_up_bn, Activation, Batch, BatchNormState, BnMode, InitScheme, Layout,
    LossKind, NetworkSpec, ParameterVector, Targets,
};
use mli::rng::seeded;
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;

fn random_matrix(rng: &mut impl Rng, r: usize, c: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-scale..scale))
}

fn random_theta(spec: &NetworkSpec, rng: &mut impl Rng) -> ParameterVector {
    let layout = Arc::new(Layout::for_spec(spec));
    let n = layout.total_len();
    ParameterVector::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), layout).unwrap()
}

fn act(a: Activation, x: f64) -> f64 {
    match a {
        Activation::Relu => x.max(0.0),
        Activation::Tanh => x.tanh(),
        Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        Activation::Identity => x,
    }
}

/// Straight-line evaluator with explicit loops, no batch norm.
fn reference_forward(spec: &NetworkSpec, theta: &ParameterVector, x: &Array2<f64>) -> Array2<f64> {
    let mut rows: Vec<Vec<f64>> = x.outer_iter().map(|r| r.to_vec()).collect();
    let last = spec.layer_sizes.len() - 2;
    for l in 0..=last {
        let (fin, fout) = (spec.layer_sizes[l], spec.layer_sizes[l + 1]);
        let w = theta.slice(&format!("layer{l}.weight")).unwrap();
        let b = theta.slice(&format!("layer{l}.bias")).unwrap();
        for r in rows.iter_mut() {
            let mut next = vec![0.0; fout];
            for o in 0..fout {
                let mut z = b[o];
                for i in 0..fin {
                    z += w[o * fin + i] * r[i];
                }
                next[o] = if l == last { z } else { act(spec.activation, z) };
            }
            *r = next;
        }
    }
    let cols = rows[0].len();
    Array2::from_shape_vec((rows.len(), cols), rows.concat()).unwrap()
}

fn reference_loss(kind: LossKind, out: &Array2<f64>, targets: &Targets) -> f64 {
    let n = out.nrows() as f64;
    match (kind, targets) {
        (LossKind::Mse, Targets::Dense(t)) => {
            let mut s = 0.0;
            for i in 0..out.nrows() {
                for j in 0..out.ncols() {
                    s += (out[[i, j]] - t[[i, j]]).powi(2);
                }
            }
            s / (2.0 * n)
        }
        (LossKind::SoftmaxCrossEntropy, Targets::Labels(l)) => {
            let mut s = 0.0;
            for i in 0..out.nrows() {
                let z: f64 = out.row(i).iter().map(|v| v.exp()).sum();
                s -= (out[[i, l[i]]].exp() / z).ln();
            }
            s / n
        }
        _ => unreachable!(),
    }
}

fn random_targets(spec: &NetworkSpec, rng: &mut impl Rng, n: usize) -> Targets {
    match spec.loss {
        LossKind::Mse => Targets::Dense(random_matrix(rng, n, spec.output_dim(), 1.0)),
        LossKind::SoftmaxCrossEntropy => Targets::Labels((0..n).map(|_| rng.random_range(0..spec.output_dim())).collect()),
    }
}

const ACTS: [Activation; 4] = [Activation::Relu, Activation::Tanh, Activation::Sigmoid, Activation::Identity];

#[test]
fn identity_layer_passes_inputs_through() {
    let spec = NetworkSpec::new(vec![3, 3], Activation::Identity, LossKind::Mse);
    let layout = Arc::new(Layout::for_spec(&spec));
    let mut theta = ParameterVector::zeros(layout);
    let w = theta.slice_mut("layer0.weight").unwrap();
    for i in 0..3 {
        w[i * 3 + i] = 1.0;
    }
    let x = Array2::from_shape_vec((2, 3), vec![1.0, -2.0, 3.5, 0.0, 7.0, -1.0]).unwrap();
    let bn = BatchNormState::new(&spec);
    assert_eq!(forward(&spec, &theta, BnMode::Eval(&bn), x.view()).unwrap(), x);
}

#[test]
fn zero_parameters_give_zero_output() {
    let spec = NetworkSpec::new(vec![4, 5, 2], Activation::Tanh, LossKind::Mse);
    let theta = ParameterVector::zeros(Arc::new(Layout::for_spec(&spec)));
    let x = random_matrix(&mut seeded(0, 0), 6, 4, 3.0);
    let bn = BatchNormState::new(&spec);
    let out = forward(&spec, &theta, BnMode::Eval(&bn), x.view()).unwrap();
    assert!(out.iter().all(|&v| v == 0.0));
}

#[test]
fn forward_matches_straight_line_evaluator() {
    let mut rng = seeded(1, 0);
    for a in ACTS {
        for _ in 0..25 {
            let spec = NetworkSpec::new(vec![5, 7, 3], a, LossKind::Mse);
            let theta = random_theta(&spec, &mut rng);
            let x = random_matrix(&mut rng, 9, 5, 2.0);
            let bn = BatchNormState::new(&spec);
            let out = forward(&spec, &theta, BnMode::Eval(&bn), x.view()).unwrap();
            let oracle = reference_forward(&spec, &theta, &x);
            let err = (&out - &oracle).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err < 1e-12, "{a:?}: {err}");
        }
    }
}

#[test]
fn losses_match_definitions() {
    let mut rng = seeded(2, 0);
    for kind in [LossKind::Mse, LossKind::SoftmaxCrossEntropy] {
        for _ in 0..25 {
            let spec = NetworkSpec::new(vec![4, 6, 3], Activation::Tanh, kind);
            let theta = random_theta(&spec, &mut rng);
            let x = random_matrix(&mut rng, 8, 4, 1.0);
            let t = random_targets(&spec, &mut rng, 8);
            let bn = BatchNormState::new(&spec);
            let l = loss(&spec, &theta, BnMode::Eval(&bn), &Batch::new(x.view(), t.view())).unwrap();
            let oracle = reference_loss(kind, &reference_forward(&spec, &theta, &x), &t);
            assert!((l - oracle).abs() < 1e-12, "{l} vs {oracle}");
        }
    }
}

#[test]
#[allow(clippy::approx_constant)]
fn mse_is_zero_at_targets_and_uniform_logits_give_ln_k() {
    let spec = NetworkSpec::new(vec![2, 10], Activation::Identity, LossKind::SoftmaxCrossEntropy);
    let theta = ParameterVector::zeros(Arc::new(Layout::for_spec(&spec)));
    let x = Array2::from_elem((4, 2), 0.3);
    let t = Targets::Labels(vec![0, 3, 9, 5]);
    let bn = BatchNormState::new(&spec);
    let l = loss(&spec, &theta, BnMode::Eval(&bn), &Batch::new(x.view(), t.view())).unwrap();
    assert!((l - 10f64.ln()).abs() < 1e-12);
    assert!((l - 2.302585).abs() < 1e-6);

    let spec = NetworkSpec::new(vec![3, 4, 2], Activation::Relu, LossKind::Mse);
    let theta = random_theta(&spec, &mut seeded(3, 0));
    let x = random_matrix(&mut seeded(3, 1), 5, 3, 1.0);
    let out = forward(&spec, &theta, BnMode::Eval(&bn), x.view()).unwrap();
    let t = Targets::Dense(out);
    let l = loss(&spec, &theta, BnMode::Eval(&BatchNormState::new(&spec)), &Batch::new(x.view(), t.view())).unwrap();
    assert_eq!(l, 0.0);
}

#[test]
fn cross_entropy_is_finite_for_huge_logits() {
    let spec = NetworkSpec::new(vec![1, 3], Activation::Identity, LossKind::SoftmaxCrossEntropy);
    let layout = Arc::new(Layout::for_spec(&spec));
    let theta = ParameterVector::new(vec![1e4, -1e4, 0.0, 0.0, 0.0, 0.0], layout).unwrap();
    let x = Array2::from_elem((2, 1), 1.0);
    let t = Targets::Labels(vec![1, 0]);
    let bn = BatchNormState::new(&spec);
    let l = loss(&spec, &theta, BnMode::Eval(&bn), &Batch::new(x.view(), t.view())).unwrap();
    assert!(l.is_finite());
    assert!((l - 1e4).abs() < 1e-6);
}

#[test]
fn scalar_gradient_by_hand() {
    // L = ½(wx − y)², x = 2, y = 1, w = 0 → dL/dw = (wx − y)x = −2.
    let spec = NetworkSpec::new(vec![1, 1], Activation::Identity, LossKind::Mse);
    let layout = Arc::new(Layout::for_spec(&spec));
    let theta = ParameterVector::zeros(layout);
    let x = Array2::from_elem((1, 1), 2.0);
    let t = Targets::Dense(Array2::from_elem((1, 1), 1.0));
    let g = gradient(&spec, &theta, BnMode::Batch, &Batch::new(x.view(), t.view())).unwrap();
    assert_eq!(g.slice("layer0.weight").unwrap(), &[-2.0]);
}

#[test]
fn least_squares_gradient_vanishes_at_solution() {
    let x = Array2::from_shape_vec((3, 2), vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
    // y = 2·x0 − x1 + 0.5 is exactly representable.
    let y = Array2::from_shape_fn((3, 1), |(i, _)| 2.0 * x[[i, 0]] - x[[i, 1]] + 0.5);
    let spec = NetworkSpec::new(vec![2, 1], Activation::Identity, LossKind::Mse);
    let theta = ParameterVector::new(vec![2.0, -1.0, 0.5], Arc::new(Layout::for_spec(&spec))).unwrap();
    let t = Targets::Dense(y);
    let g = gradient(&spec, &theta, BnMode::Batch, &Batch::new(x.view(), t.view())).unwrap();
    assert!(g.norm() < 1e-10);
}

fn fd_check(spec: &NetworkSpec, seed: u64) {
    let mut rng = seeded(seed, 0);
    let theta = random_theta(spec, &mut rng);
    let mut theta = theta;
    // Keep BN scales away from zero so the check is well conditioned.
    for l in 0..spec.num_layers() {
        if let Some(g) = theta.slice_mut(&format!("layer{l}.bn_gamma")) {
            for v in g {
                *v = 1.0 + 0.5 * *v;
            }
        }
    }
    let x = random_matrix(&mut rng, 6, spec.input_dim(), 1.5);
    let t = random_targets(spec, &mut rng, 6);
    let batch = Batch::new(x.view(), t.view());
    let g = gradient(spec, &theta, BnMode::Batch, &batch).unwrap();
    let h = 1e-5;
    let f = |p: &ParameterVector| loss(spec, p, BnMode::Batch, &batch).unwrap();
    for i in 0..theta.len() {
        let mut plus = theta.clone();
        plus.values_mut()[i] += h;
        let mut minus = theta.clone();
        minus.values_mut()[i] -= h;
        let fd = (f(&plus) - f(&minus)) / (2.0 * h);
        let an = g.values()[i];
        let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-6);
        assert!(rel < 1e-4, "{spec:?} param {i}: analytic {an} vs fd {fd} (rel {rel})");
    }
}

#[test]
fn gradients_match_finite_differences_for_every_combination() {
    let mut seed = 0;
    for a in [Activation::Tanh, Activation::Sigmoid, Activation::Identity, Activation::Relu] {
        for kind in [LossKind::Mse, LossKind::SoftmaxCrossEntropy] {
            for bn in [false, true] {
                for sizes in [vec![3, 4], vec![3, 5, 2], vec![2, 4, 3, 3]] {
                    let spec = NetworkSpec::new(sizes.clone(), a, kind).with_batch_norm(bn);
                    for _ in 0..9 {
                        fd_check(&spec, seed);
                        seed += 1;
                    }
                }
            }
        }
    }
}

#[test]
fn warm_up_equals_single_full_batch_pass() {
    let data = synthetic_blobs(3, 90, 4, 2.0, 5).unwrap();
    let spec = NetworkSpec::new(vec![4, 6, 5, 3], Activation::Relu, LossKind::SoftmaxCrossEntropy).with_batch_norm(true);
    let theta = random_theta(&spec, &mut seeded(6, 0));
    let template = BatchNormState::new(&spec);
    let warmed = warm_up_bn(&spec, &theta, &template, data.inputs.view()).unwrap();
    // Eval with warmed stats equals batch-statistics forward, up to the population/sample convention.
    let a = forward(&spec, &theta, BnMode::Eval(&warmed), data.inputs.view()).unwrap();
    let b = forward(&spec, &theta, BnMode::Batch, data.inputs.view()).unwrap();
    let err = (&a - &b).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(err < 1e-9, "{err}");
    let ev = evaluate(&spec, &theta, &warmed, data.inputs.view(), data.targets.view()).unwrap();
    assert!(ev.loss.is_finite());
}

#[test]
fn nan_parameters_are_reported() {
    let spec = NetworkSpec::new(vec![2, 2], Activation::Identity, LossKind::Mse);
    let mut theta = ParameterVector::zeros(Arc::new(Layout::for_spec(&spec)));
    theta.values_mut()[0] = f64::NAN;
    let x = Array2::zeros((1, 2));
    assert!(forward(&spec, &theta, BnMode::Batch, x.view()).is_err());
    let bad = Array2::zeros((1, 3));
    let theta = ParameterVector::zeros(Arc::new(Layout::for_spec(&spec)));
    assert!(forward(&spec, &theta, BnMode::Batch, bad.view()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn flatten_round_trip_preserves_outputs(seed in 0u64..1000, hidden in 1usize..8) {
        let spec = NetworkSpec::new(vec![3, hidden, 2], Activation::Sigmoid, LossKind::Mse)
            .with_init(InitScheme::Gaussian { scale: 0.7 });
        let (theta, bn) = mli::nn::initialize(&spec, seed).unwrap();
        let rebuilt = ParameterVector::new(theta.clone().into_values(), theta.layout().clone()).unwrap();
        let x = random_matrix(&mut seeded(seed, 9), 4, 3, 1.0);
        let a = forward(&spec, &theta, BnMode::Eval(&bn), x.view()).unwrap();
        let b = forward(&spec, &rebuilt, BnMode::Eval(&bn), x.view()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn eval_mode_is_pure(seed in 0u64..1000) {
        let spec = NetworkSpec::new(vec![3, 4, 2], Activation::Tanh, LossKind::Mse).with_batch_norm(true);
        let (theta, bn) = mli::nn::initialize(&spec, seed).unwrap();
        let x = random_matrix(&mut seeded(seed, 2), 5, 3, 1.0);
        let a = forward(&spec, &theta, BnMode::Eval(&bn), x.view()).unwrap();
        let b = forward(&spec, &theta, BnMode::Eval(&bn), x.view()).unwrap();
        prop_assert_eq!(a, b);
    }
}
