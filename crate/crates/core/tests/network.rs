mod common;

use common::*;
use ndarray::{s, Array2, Axis};
use plain::dataset::{generate_synthetic, SyntheticSpec};
use plain::metrics::hamming_loss;
use plain::network::{sigmoid, LossKind, Mlp, NetworkDims, OptimizerConfig, Risk};
use rand::Rng;

fn loss_at(net: &Mlp, flat: &[f64], x: &Array2<f64>, z: &Array2<f64>, risk: &Risk) -> f64 {
    let mut probe = net.clone();
    probe.set_flat(flat).unwrap();
    let logits = probe.logits(x.view()).unwrap();
    risk.value(logits.view(), z.view())
}

/// Largest relative error between the analytic gradient and central
/// differences over all parameters.
fn gradient_error(net: &Mlp, x: &Array2<f64>, z: &Array2<f64>, risk: &Risk) -> f64 {
    assert!(net.biases().iter().all(|b| b.iter().all(|&v| v != 0.0)), "probe away from ReLU kinks");
    let (_, grads) = net.backward(x.view(), z.view(), risk).unwrap();
    let analytic = grads.flatten();
    let theta = net.flatten();
    let h = 1e-6;
    let mut worst = 0.0f64;
    let scale = analytic.iter().fold(1e-8f64, |m, v| m.max(v.abs()));
    for i in 0..theta.len() {
        let mut plus = theta.clone();
        plus[i] += h;
        let mut minus = theta.clone();
        minus[i] -= h;
        let fd = (loss_at(net, &plus, x, z, risk) - loss_at(net, &minus, x, z, risk)) / (2.0 * h);
        worst = worst.max((fd - analytic[i]).abs() / scale);
    }
    worst
}

/// Random weights and biases; with zero biases a dead first layer puts the
/// next pre-activation exactly on the ReLU kink.
fn generic_net(dims: NetworkDims, seed: u64) -> Mlp {
    let mut net = Mlp::zeros(dims);
    let mut r = rng(seed);
    let theta: Vec<f64> = (0..net.num_params()).map(|_| r.random_range(-0.8..0.8)).collect();
    net.set_flat(&theta).unwrap();
    net
}

#[test]
fn gradients_match_finite_differences_for_every_loss() {
    for kind in LossKind::ALL {
        for mse_on_logits in [true, false] {
            let risk = Risk { kind, mse_on_logits };
            let mut r = rng(1);
            let net = generic_net(NetworkDims([5, 4, 4, 3]), 2);
            let x = uniform(6, 5, -1.0, 1.0, &mut r);
            let z = uniform(6, 3, 0.0, 1.0, &mut r);
            let err = gradient_error(&net, &x, &z, &risk);
            assert!(err < 1e-4, "{kind} on_logits={mse_on_logits}: {err}");
        }
    }
}

#[test]
fn gradients_match_finite_differences_on_random_shapes() {
    let mut r = rng(9);
    for case in 0..10u64 {
        let dims = NetworkDims([
            r.random_range(1..7),
            r.random_range(1..7),
            r.random_range(1..7),
            r.random_range(1..5),
        ]);
        let net = generic_net(dims, case);
        let batch = r.random_range(1..8);
        let x = uniform(batch, dims.input(), -1.0, 1.0, &mut r);
        let z = uniform(batch, dims.output(), 0.0, 1.0, &mut r);
        for kind in LossKind::ALL {
            let err = gradient_error(&net, &x, &z, &Risk::new(kind));
            assert!(err < 1e-4, "case {case} {kind}: {err}");
        }
    }
}

#[test]
fn stable_bce_matches_naive_form() {
    let risk = Risk::new(LossKind::Bce);
    for i in 0..=400 {
        let x = -20.0 + 0.1 * i as f64;
        for z in [0.0, 0.3, 1.0] {
            let s = sigmoid(x);
            // 1 − σ(x) written as σ(−x) so the reference itself does not cancel
            let naive = -z * s.ln() - (1.0 - z) * sigmoid(-x).ln();
            let stable = risk.value(Array2::from_elem((1, 1), x).view(), Array2::from_elem((1, 1), z).view());
            assert!((naive - stable).abs() < 1e-8, "x={x} z={z}");
        }
    }
    for x in [-500.0, 500.0] {
        let stable = risk.value(Array2::from_elem((1, 1), x).view(), Array2::from_elem((1, 1), 1.0 - f64::from(x > 0.0)).view());
        assert!(stable.is_finite() && (stable - 500.0).abs() < 1e-9);
    }
    // a confident wrong positive: 1 − σ(500) rounds to zero
    let s = 1.0 / (1.0 + (-500.0f64).exp());
    assert!((-(1.0 - s).ln()).is_infinite());
}

#[test]
fn duplicated_rows_leave_mean_gradient_unchanged() {
    let mut r = rng(4);
    let net = Mlp::init(NetworkDims([3, 5, 5, 2]), 0);
    let x = uniform(1, 3, -1.0, 1.0, &mut r);
    let z = uniform(1, 2, 0.0, 1.0, &mut r);
    let twice_x = ndarray::concatenate(Axis(0), &[x.view(), x.view()]).unwrap();
    let twice_z = ndarray::concatenate(Axis(0), &[z.view(), z.view()]).unwrap();
    for kind in LossKind::ALL {
        let risk = Risk::new(kind);
        let (l1, g1) = net.backward(x.view(), z.view(), &risk).unwrap();
        let (l2, g2) = net.backward(twice_x.view(), twice_z.view(), &risk).unwrap();
        assert!((l1 - l2).abs() < 1e-14);
        for (a, b) in g1.flatten().iter().zip(g2.flatten()) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}

#[test]
fn pmse_has_no_signal_at_its_own_prediction() {
    let mut r = rng(6);
    let net = Mlp::init(NetworkDims([4, 6, 6, 3]), 1);
    let x = uniform(5, 4, -1.0, 1.0, &mut r);
    let z = net.forward(x.view()).unwrap().probabilities;
    let (loss, g) = net.backward(x.view(), z.view(), &Risk::new(LossKind::Pmse)).unwrap();
    assert_eq!(loss, 0.0);
    assert!(g.flatten().iter().all(|&v| v == 0.0));
}

#[test]
fn small_steps_decrease_a_convex_toy_loss() {
    // with every weight zero only the output biases receive gradient, so the
    // loss is convex in the parameters that move
    let net = Mlp::zeros(NetworkDims([2, 3, 3, 2]));
    let x = uniform(8, 2, -1.0, 1.0, &mut rng(2));
    let z = uniform(8, 2, 0.0, 1.0, &mut rng(3));
    let cfg = OptimizerConfig { learning_rate: 0.1, weight_decay: 0.0, ..Default::default() };
    for kind in [LossKind::Bce, LossKind::Pmse, LossKind::Mse] {
        let risk = Risk::new(kind);
        let mut last = f64::INFINITY;
        let mut net = net.clone();
        for _ in 0..40 {
            let (loss, g) = net.backward(x.view(), z.view(), &risk).unwrap();
            assert!(loss <= last, "{kind}: {loss} > {last}");
            last = loss;
            net.sgd_step(&g, &cfg);
        }
    }
}

#[test]
fn predictions_are_row_independent_and_deterministic() {
    let mut r = rng(8);
    let net = Mlp::init(NetworkDims([4, 8, 8, 3]), 5);
    let x = uniform(10, 4, -1.0, 1.0, &mut r);
    let full = net.forward(x.view()).unwrap().probabilities;
    assert_eq!(full, net.forward(x.view()).unwrap().probabilities);
    assert!(full.iter().all(|&p| p > 0.0 && p < 1.0));
    for i in 0..10 {
        let one = net.forward(x.slice(s![i..i + 1, ..])).unwrap().probabilities;
        assert!(max_abs_diff(&one, &full.slice(s![i..i + 1, ..]).to_owned()) < 1e-12);
    }
    let perm: Vec<usize> = (0..10).rev().collect();
    let permuted = net.forward(x.select(Axis(0), &perm).view()).unwrap().probabilities;
    assert!(max_abs_diff(&permuted, &full.select(Axis(0), &perm)) < 1e-12);
}

/// Trains one network on `targets` long enough to fit the noise and returns
/// its clean test hamming loss. Short runs underfit, and there unclipped
/// MSE is the more accurate of the two.
fn noisy_fit(kind: LossKind, x: &Array2<f64>, targets: &Array2<f64>, xt: &Array2<f64>, truth: &Array2<u8>, seed: u64) -> f64 {
    let risk = Risk::new(kind);
    let mut net = Mlp::init(NetworkDims::for_task(x.ncols(), targets.ncols()), seed);
    let cfg = OptimizerConfig { learning_rate: 0.05, weight_decay: 5e-5, batch_size: 32, seed };
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    let mut r = rng(seed);
    for _ in 0..300 {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut r);
        for batch in order.chunks(cfg.batch_size) {
            let (_, g) = net
                .backward(x.select(Axis(0), batch).view(), targets.select(Axis(0), batch).view(), &risk)
                .unwrap();
            net.sgd_step(&g, &cfg);
        }
    }
    let scores = risk.scores(net.logits(xt.view()).unwrap().view());
    hamming_loss(scores.view(), truth.view(), 0.5)
}

#[test]
fn bce_resists_flipped_labels_better_than_mse() {
    let mut wins = 0;
    for seed in 0..10u64 {
        let data = generate_synthetic(&SyntheticSpec { n: 600, d: 20, labels: 6, noise: 0.3, seed }).unwrap();
        let truth = data.truth().unwrap();
        let x = data.features().slice(s![..400, ..]).to_owned();
        let xt = data.features().slice(s![400.., ..]).to_owned();
        let clean_test = truth.slice(s![400.., ..]).to_owned();
        let mut r = rng(seed + 50);
        let noisy = truth
            .slice(s![..400, ..])
            .mapv(|v| if r.random_bool(0.3) { f64::from(1 - v) } else { f64::from(v) });
        let bce = noisy_fit(LossKind::Bce, &x, &noisy, &xt, &clean_test, seed);
        let mse = noisy_fit(LossKind::Mse, &x, &noisy, &xt, &clean_test, seed);
        eprintln!("seed {seed}: bce {bce:.4} mse {mse:.4}");
        wins += usize::from(bce <= mse);
    }
    assert!(wins >= 8, "BCE matched or beat MSE in {wins} of 10 seeds");
}
