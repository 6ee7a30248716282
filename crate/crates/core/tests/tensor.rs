mod common;

use common::{random_tensor, rng, softmax_reference};
use progdistill::tensor::{
    sgd_step, BatchNormStats, Graph, LrSchedule, Mode, OptimizerState, Padding, SgdConfig, Target, Tensor,
    BN_EPSILON,
};
use rand::Rng;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
}

fn unit_affine(g: &mut Graph<f64>, c: usize) -> (progdistill::tensor::Var, progdistill::tensor::Var) {
    (g.constant(Tensor::full(&[c], 1.0)), g.constant(Tensor::zeros(&[c])))
}

#[test]
fn batch_norm_train_standardizes_each_channel() {
    let mut r = rng(1);
    let x = random_tensor(&mut r, &[4, 3, 5, 6], -3.0, 7.0);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let (gamma, beta) = unit_affine(&mut g, 3);
    let mut stats = BatchNormStats::new(3);
    let y = g.batch_norm(xv, gamma, beta, &mut stats, Mode::Train).unwrap();
    let y = g.value(y);
    for c in 0..3 {
        let vals: Vec<f64> = (0..4).flat_map(|n| y.data()[(n * 3 + c) * 30..(n * 3 + c + 1) * 30].to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-4, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-4, "var {var}");
    }
    assert!(stats.mean.iter().all(|m| *m != 0.0), "running mean updated");
}

#[test]
fn batch_norm_constant_channel_is_zero() {
    let mut g = Graph::new();
    let xv = g.constant(Tensor::full(&[2, 1, 3, 3], 4.5));
    let (gamma, beta) = unit_affine(&mut g, 1);
    let mut stats = BatchNormStats::new(1);
    let y = g.batch_norm(xv, gamma, beta, &mut stats, Mode::Train).unwrap();
    assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-9));
}

#[test]
fn batch_norm_eval_with_identity_stats() {
    let mut r = rng(2);
    let x = random_tensor(&mut r, &[2, 2, 3, 4], -2.0, 2.0);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let (gamma, beta) = unit_affine(&mut g, 2);
    let mut stats = BatchNormStats::new(2);
    let before = stats.clone();
    let y = g.batch_norm(xv, gamma, beta, &mut stats, Mode::Eval).unwrap();
    for (a, b) in g.value(y).data().iter().zip(x.data()) {
        assert!((a - b).abs() < 1e-5);
        assert!((a - b / (1.0 + BN_EPSILON).sqrt()).abs() < 1e-12);
    }
    assert_eq!(stats, before);
}

#[test]
fn batch_norm_rejects_empty_batch_and_wrong_channels() {
    let mut g = Graph::new();
    let xv = g.constant(Tensor::zeros(&[0, 2, 3, 3]));
    let (gamma, beta) = unit_affine(&mut g, 2);
    let mut stats = BatchNormStats::new(2);
    assert!(g.batch_norm(xv, gamma, beta, &mut stats, Mode::Train).is_err());
    let xv = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
    assert!(g.batch_norm(xv, gamma, beta, &mut stats, Mode::Train).is_err());
}

#[test]
fn relu_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
    let y = g.relu(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    let neg = g.constant(Tensor::full(&[4], -0.5));
    let y = g.relu(neg).unwrap();
    assert!(g.value(y).data().iter().all(|v| *v == 0.0));
    let pos = g.constant(t(&[3], &[0.1, 5.0, 3.0]));
    let y = g.relu(pos).unwrap();
    assert_eq!(g.value(y).data(), &[0.1, 5.0, 3.0]);
}

#[test]
fn avg_pool_examples() {
    let mut g = Graph::new();
    let ones = g.constant(Tensor::full(&[1, 1, 3, 5], 1.0));
    let y = g.global_avg_pool(ones).unwrap();
    assert_eq!(g.value(y).data(), &[1.0]);
    let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = g.global_avg_pool(x).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1]);
    assert_eq!(g.value(y).data(), &[2.5]);
    let x = g.constant(t(&[2, 2, 1, 1], &[1.0, -2.0, 3.0, 0.5]));
    let y = g.global_avg_pool(x).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, -2.0, 3.0, 0.5]);
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let z = g.constant(Tensor::full(&[1, 12], 0.3));
    let p = g.softmax(z).unwrap();
    assert!(g.value(p).data().iter().all(|v| (v - 1.0 / 12.0).abs() < 1e-12));
    let z = g.constant(t(&[1, 2], &[1000.0, 0.0]));
    let p = g.softmax(z).unwrap();
    let v = g.value(p).data();
    assert!(v.iter().all(|x| x.is_finite()));
    assert!((v[0] - 1.0).abs() < 1e-12 && v[1] < 1e-12);
}

#[test]
fn softmax_matches_direct_exponentiation() {
    let mut r = rng(4);
    for _ in 0..50 {
        let k = r.gen_range(1..20);
        let z = random_tensor(&mut r, &[3, k], -10.0, 10.0);
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let p = g.softmax(zv).unwrap();
        for row in 0..3 {
            let want = softmax_reference(z.row(row));
            let got = g.value(p).row(row);
            assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::<f64>::new();
    let p = g.constant(Tensor::full(&[1, 12], 1.0 / 12.0));
    let loss = g.cross_entropy(p, Target::Classes(vec![5])).unwrap();
    assert!((g.value(loss).data()[0] - 2.48491).abs() < 1e-5);
    let mut onehot = vec![0.0; 12];
    onehot[3] = 1.0;
    let p = g.constant(t(&[1, 12], &onehot));
    let loss = g.cross_entropy(p, Target::Classes(vec![3])).unwrap();
    assert!(g.value(loss).data()[0].abs() < 1e-12);
    let loss = g.cross_entropy(p, Target::Distribution(t(&[1, 12], &onehot))).unwrap();
    assert!(g.value(loss).data()[0].abs() < 1e-12);
    // A zero probability on the target is clamped, not infinite.
    let loss = g.cross_entropy(p, Target::Classes(vec![0])).unwrap();
    assert!((g.value(loss).data()[0] - (1e12f64).ln()).abs() < 1e-9);
}

fn random_rows(r: &mut rand_chacha::ChaCha8Rng, n: usize, k: usize) -> Tensor<f64> {
    let mut x = random_tensor(r, &[n, k], 0.0, 1.0);
    for row in x.data_mut().chunks_mut(k) {
        // Some exact zeros exercise the skipped terms.
        if k > 2 {
            row[0] = 0.0;
        }
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    x
}

#[test]
fn cross_entropy_and_kl_match_direct_summation() {
    let mut r = rng(6);
    for _ in 0..50 {
        let (n, k) = (r.gen_range(1..6), r.gen_range(2..13));
        let pred = random_rows(&mut r, n, k);
        let target = random_rows(&mut r, n, k);
        let mut ce = 0.0;
        let mut kl = 0.0;
        for (tv, pv) in target.data().iter().zip(pred.data()) {
            ce -= tv * pv.max(1e-12).ln();
            if *tv > 0.0 {
                kl += tv * (tv / pv.max(1e-12)).ln();
            }
        }
        let (ce, kl) = (ce / n as f64, kl / n as f64);
        let mut g = Graph::new();
        let p = g.constant(pred.clone());
        let got_ce = g.cross_entropy(p, Target::Distribution(target.clone())).unwrap();
        let got_kl = g.kl_divergence(p, target.clone()).unwrap();
        assert!((g.value(got_ce).data()[0] - ce).abs() < 1e-6);
        assert!((g.value(got_kl).data()[0] - kl).abs() < 1e-6);
    }
}

#[test]
fn kl_examples() {
    let mut r = rng(8);
    let d = random_rows(&mut r, 2, 6);
    let mut g = Graph::new();
    let p = g.constant(d.clone());
    let kl = g.kl_divergence(p, d).unwrap();
    assert!(g.value(kl).data()[0].abs() < 1e-12);
    let mut onehot = vec![0.0; 12];
    onehot[7] = 1.0;
    let u = g.constant(Tensor::full(&[1, 12], 1.0 / 12.0));
    let kl = g.kl_divergence(u, t(&[1, 12], &onehot)).unwrap();
    assert!((g.value(kl).data()[0] - 2.48491).abs() < 1e-5);
}

#[test]
fn backward_of_sums() {
    let mut g = Graph::new();
    let x = g.param(t(&[2, 3], &[1.0, -2.0, 3.0, 0.0, 5.0, 6.0]));
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|v| *v == 1.0));

    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn backward_needs_a_finite_scalar() {
    let mut g = Graph::new();
    let x = g.param(t(&[2], &[1.0, 2.0]));
    assert!(g.backward(x).is_err());
    let bad = g.param(t(&[1], &[f64::NAN]));
    let s = g.sum(bad).unwrap();
    assert!(g.backward(s).is_err());
}

#[test]
fn constants_get_no_gradient() {
    let mut g = Graph::new();
    let x = g.param(Tensor::full(&[1, 1, 3, 3], 1.0));
    let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = g.conv2d(x, w, (1, 1), Padding::Same).unwrap();
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.get(w).is_none());
    assert_eq!(grads.get(x).unwrap().data()[4], 9.0);
}

fn one_param(v: f64) -> (Tensor<f64>, OptimizerState<f64>) {
    let p = Tensor::full(&[1], v);
    let state = OptimizerState::new(
        SgdConfig {
            momentum: 0.9,
            weight_decay: 0.0,
        },
        &[&p],
        0.1,
    );
    (p, state)
}

#[test]
fn sgd_examples() {
    let (mut p, mut s) = one_param(1.0);
    let zero = Tensor::zeros(&[1]);
    sgd_step(&mut [&mut p], &[&zero], &mut s).unwrap();
    assert_eq!(p.data(), &[1.0]);

    let (mut p, mut s) = one_param(0.0);
    let ones = Tensor::full(&[1], 1.0);
    sgd_step(&mut [&mut p], &[&ones], &mut s).unwrap();
    assert!((p.data()[0] + 0.1).abs() < 1e-12);
    sgd_step(&mut [&mut p], &[&ones], &mut s).unwrap();
    assert!((p.data()[0] + 0.29).abs() < 1e-12);
}

#[test]
fn sgd_weight_decay_and_shape_errors() {
    let mut p = Tensor::full(&[2], 2.0f64);
    let mut s = OptimizerState::new(SgdConfig::default(), &[&p], 0.1);
    let g = Tensor::zeros(&[2]);
    sgd_step(&mut [&mut p], &[&g], &mut s).unwrap();
    assert!((p.data()[0] - (2.0 - 0.1 * 1e-5 * 2.0)).abs() < 1e-15);
    let wrong = Tensor::zeros(&[3]);
    assert!(sgd_step(&mut [&mut p], &[&wrong], &mut s).is_err());
}

#[test]
fn staircase_schedule() {
    let s = LrSchedule::reference_staircase();
    assert_eq!(s.rate(0), 0.1);
    assert_eq!(s.rate(5999), 0.1);
    assert_eq!(s.rate(6000), 0.01);
    assert_eq!(s.rate(12000), 0.001);
    assert!(s.validate().is_ok());
    let bad = LrSchedule::Staircase {
        rates: vec![0.1],
        boundaries: vec![10],
    };
    assert!(bad.validate().is_err());
}
