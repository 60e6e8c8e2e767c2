//! AdamW closed forms and gradient clipping.

use misra::params::ParamStore;
use misra::Tensor;
use misra_harness::optim::{clip_global_norm, global_norm};
use misra_harness::AdamW;

fn scalar_store(theta: f64) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.add("theta", Tensor::new(&[1], vec![theta]).unwrap(), true);
    s.add("buffer", Tensor::new(&[2], vec![3.0, 4.0]).unwrap(), false);
    s
}

fn grad(store: &ParamStore<f64>, g: f64) -> Vec<(misra::params::ParamId, Tensor<f64>)> {
    vec![(store.find("theta").unwrap(), Tensor::new(&[1], vec![g]).unwrap())]
}

fn theta(store: &ParamStore<f64>) -> f64 {
    store.value(store.find("theta").unwrap()).data()[0]
}

#[test]
fn zero_gradient_without_decay_is_a_no_op() {
    let mut s = scalar_store(0.75);
    let before = s.clone();
    let mut opt = AdamW::new(&s, 0.1, 0.0);
    for _ in 0..5 {
        let g = grad(&s, 0.0);
        opt.update(&mut s, &g).unwrap();
    }
    assert_eq!(s, before);
    assert_eq!(opt.step, 5);
}

#[test]
fn first_step_moves_by_the_learning_rate() {
    let mut s = scalar_store(1.0);
    let mut opt = AdamW::new(&s, 0.1, 0.0);
    let g = grad(&s, 1.0);
    opt.update(&mut s, &g).unwrap();
    // m_hat = v_hat = 1, so the ratio is 1 / (1 + eps).
    let want = 1.0 - 0.1 / (1.0 + 1e-8);
    assert!((theta(&s) - want).abs() < 1e-15);
    assert!((theta(&s) - 0.9).abs() < 1e-8);
    assert!((opt.m[0].data()[0] - 0.1).abs() < 1e-15);
    assert!((opt.v[0].data()[0] - 0.001).abs() < 1e-15);
}

#[test]
fn decay_only_path_shrinks_geometrically() {
    let (lr, wd) = (0.1, 1e-3);
    let mut s = scalar_store(2.0);
    let mut opt = AdamW::new(&s, lr, wd);
    for k in 1..=10 {
        let g = grad(&s, 0.0);
        opt.update(&mut s, &g).unwrap();
        let want = 2.0 * (1.0 - lr * wd).powi(k);
        assert!((theta(&s) - want).abs() < 1e-14, "step {k}");
    }
    assert_eq!(s.value(s.find("buffer").unwrap()).data(), &[3.0, 4.0]);
}

#[test]
fn second_step_matches_hand_evaluation() {
    let (lr, b1, b2, eps): (f64, f64, f64, f64) = (0.01, 0.9, 0.999, 1e-8);
    let mut s = scalar_store(0.5);
    let mut opt = AdamW::new(&s, lr, 0.0);
    let g1 = grad(&s, 2.0);
    opt.update(&mut s, &g1).unwrap();
    let g2 = grad(&s, -1.0);
    opt.update(&mut s, &g2).unwrap();
    let mut th = 0.5;
    let (mut m, mut v) = (0.0, 0.0);
    for (t, g) in [(1, 2.0), (2, -1.0)] {
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        th -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
    }
    assert!((theta(&s) - th).abs() < 1e-14);
}

#[test]
fn mismatched_gradients_are_rejected() {
    let mut s = scalar_store(1.0);
    let mut opt = AdamW::new(&s, 0.1, 0.0);
    assert!(opt.update(&mut s, &[]).is_err());
    let bad = vec![(s.find("theta").unwrap(), Tensor::new(&[2], vec![1.0, 1.0]).unwrap())];
    assert!(opt.update(&mut s, &bad).is_err());
    assert_eq!(opt.step, 0);
}

#[test]
fn clipping_rescales_to_the_ceiling() {
    let s = scalar_store(1.0);
    let id = s.find("theta").unwrap();
    let mut g: Vec<(_, Tensor<f64>)> =
        vec![(id, Tensor::new(&[1], vec![-12.0]).unwrap()), (id, Tensor::new(&[1], vec![5.0]).unwrap())];
    assert_eq!(global_norm(&g), 13.0);
    assert_eq!(clip_global_norm(&mut g, 5.0), 13.0);
    assert!((global_norm(&g) - 5.0).abs() < 1e-12);
    assert!((g[0].1.data()[0] + 60.0 / 13.0).abs() < 1e-12);
    let before = g.clone();
    clip_global_norm(&mut g, 10.0);
    assert_eq!(g, before);
}
