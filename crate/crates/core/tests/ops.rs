//! Tensor-engine operations checked against brute-force oracles and central
//! finite differences.

use misra::gradcheck::{random_projection, GradCheck};
use misra::rng::SeededRng;
use misra::{Graph, Result, Tensor, Var};
use proptest::prelude::*;

const OP_TOL: f64 = 1e-4;

fn rand_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut r = SeededRng::new(seed);
    Tensor::from_fn(shape, |_| r.range(lo, hi))
}

/// Distinct values spaced well beyond the finite-difference step, shuffled.
fn distinct_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025).collect();
    SeededRng::new(seed).shuffle(&mut vals);
    Tensor::new(shape, vals).unwrap()
}

/// Values bounded away from zero so ReLU kinks stay outside the FD stencil.
fn off_kink_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = SeededRng::new(seed);
    Tensor::from_fn(shape, |_| {
        let m = r.range(0.1, 1.0);
        if r.coin(0.5) {
            m
        } else {
            -m
        }
    })
}

fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
    let s = x.shape();
    let (n, cin, h, wd) = (s[0], s[1], s[2], s[3]);
    let k = w.shape();
    let (cout, kh, kw) = (k[0], k[2], k[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * cout * ho * wo];
    for bi in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.data()[((bi * cin + ci) * h + iy as usize) * wd + ix as usize]
                                        * w.data()[((co * cin + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                    }
                    out[((bi * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, cout, ho, wo], out).unwrap()
}

#[test]
fn conv2d_matches_sliding_window_oracle() {
    for (seed, size, stride, pad) in [(1, 8, 1, 0), (2, 8, 1, 1), (3, 9, 2, 1), (4, 8, 1, 2), (5, 8, 3, 2)] {
        let x = rand_tensor(&[2, 3, size, size], seed, -1.0, 1.0);
        let w = rand_tensor(&[5, 3, 3, 3], seed + 100, -1.0, 1.0);
        let b = rand_tensor(&[5], seed + 200, -1.0, 1.0);
        let want = conv_oracle(&x, &w, b.data(), stride, pad);
        for (xf, wf, bf) in [(x.cast::<f32>(), w.cast::<f32>(), b.cast::<f32>())] {
            let mut g = Graph::<f32>::new();
            let (xv, wv, bv) = (g.constant(xf), g.constant(wf), g.constant(bf));
            let y = g.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
            assert_eq!(g.value(y).shape(), want.shape());
            for (a, e) in g.value(y).data().iter().zip(want.data()) {
                assert!((*a as f64 - e).abs() < 1e-5, "stride {stride} pad {pad}: {a} vs {e}");
            }
        }
    }
}

#[test]
fn maxpool_matches_window_max_oracle() {
    let x = rand_tensor(&[1, 4, 8, 8], 11, -3.0, 3.0).cast::<f32>();
    let mut g = Graph::<f32>::new();
    let xv = g.constant(x.clone());
    let y = g.maxpool2d(xv, 2).unwrap();
    for c in 0..4 {
        for oy in 0..4 {
            for ox in 0..4 {
                let mut m = f32::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(x.data()[(c * 8 + 2 * oy + dy) * 8 + 2 * ox + dx]);
                    }
                }
                assert_eq!(g.value(y).data()[(c * 4 + oy) * 4 + ox], m);
            }
        }
    }
}

#[test]
fn upsample_matches_triangle_kernel_oracle() {
    let x = rand_tensor(&[1, 2, 3, 3], 21, -1.0, 1.0);
    let mut g = Graph::<f64>::new();
    let xv = g.constant(x.clone());
    let y = g.upsample_bilinear2x(xv).unwrap();
    let tri = |d: f64| (1.0 - d.abs()).max(0.0);
    for c in 0..2 {
        for oy in 0..6 {
            for ox in 0..6 {
                let sy = ((oy as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, 2.0);
                let sx = ((ox as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, 2.0);
                let mut want = 0.0;
                for iy in 0..3 {
                    for ix in 0..3 {
                        want += tri(sy - iy as f64) * tri(sx - ix as f64) * x.data()[(c * 3 + iy) * 3 + ix];
                    }
                }
                let got = g.value(y).data()[(c * 6 + oy) * 6 + ox];
                assert!((got - want).abs() < 1e-6, "({oy},{ox}) {got} vs {want}");
            }
        }
    }
}

#[test]
fn global_avg_pool_matches_mean() {
    let x = rand_tensor(&[2, 3, 5, 4], 31, -2.0, 2.0);
    let mut g = Graph::<f64>::new();
    let xv = g.constant(x.clone());
    let y = g.global_avg_pool(xv).unwrap();
    for (plane, got) in g.value(y).data().iter().enumerate() {
        let m = x.data()[plane * 20..(plane + 1) * 20].iter().sum::<f64>() / 20.0;
        assert!((got - m).abs() < 1e-6);
    }
}

fn check(inputs: &[Tensor<f64>], build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) -> f64 {
    let report = GradCheck::default().check(inputs, build).unwrap();
    assert!(report.max_rel_error < OP_TOL, "{report:?}");
    report.max_rel_error
}

#[test]
fn gradient_conv2d() {
    let x = rand_tensor(&[2, 2, 4, 4], 1, -1.0, 1.0);
    let w = rand_tensor(&[3, 2, 3, 3], 2, -1.0, 1.0);
    let b = rand_tensor(&[3], 3, -1.0, 1.0);
    check(&[x.clone(), w, b], |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
        random_projection(g, y, 9)
    });
    let w = rand_tensor(&[2, 2, 3, 3], 4, -1.0, 1.0);
    let odd = rand_tensor(&[1, 2, 5, 5], 44, -1.0, 1.0);
    check(&[odd, w], |g, v| {
        let y = g.conv2d(v[0], v[1], None, 2, 1)?;
        random_projection(g, y, 10)
    });
    let w1 = rand_tensor(&[3, 2, 1, 1], 5, -1.0, 1.0);
    check(&[x, w1], |g, v| {
        let y = g.conv2d(v[0], v[1], None, 1, 0)?;
        random_projection(g, y, 11)
    });
}

#[test]
fn gradient_pooling_and_resampling() {
    let x = distinct_tensor(&[1, 2, 4, 4], 5);
    check(std::slice::from_ref(&x), |g, v| {
        let y = g.maxpool2d(v[0], 2)?;
        random_projection(g, y, 1)
    });
    check(std::slice::from_ref(&x), |g, v| {
        let y = g.avgpool2d(v[0], 2)?;
        random_projection(g, y, 2)
    });
    check(std::slice::from_ref(&x), |g, v| {
        let y = g.blurpool2d(v[0])?;
        random_projection(g, y, 3)
    });
    let small = rand_tensor(&[1, 2, 3, 2], 6, -1.0, 1.0);
    check(&[small], |g, v| {
        let y = g.upsample_bilinear2x(v[0])?;
        random_projection(g, y, 4)
    });
    check(&[x], |g, v| {
        let y = g.global_avg_pool(v[0])?;
        random_projection(g, y, 5)
    });
}

#[test]
fn gradient_batchnorm() {
    let x = rand_tensor(&[2, 3, 3, 3], 7, -2.0, 2.0);
    let gamma = rand_tensor(&[3], 8, 0.5, 1.5);
    let beta = rand_tensor(&[3], 9, -0.5, 0.5);
    check(&[x.clone(), gamma.clone(), beta.clone()], |g, v| {
        let (y, _) = g.batchnorm2d_train(v[0], v[1], v[2], 1e-5)?;
        random_projection(g, y, 6)
    });
    check(&[x, gamma, beta], |g, v| {
        let y = g.batchnorm2d_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[1.5, 0.7, 2.0], 1e-5)?;
        random_projection(g, y, 7)
    });
}

#[test]
fn gradient_activations() {
    let x = off_kink_tensor(&[1, 3, 2, 2], 12);
    check(std::slice::from_ref(&x), |g, v| {
        let y = g.relu(v[0]);
        random_projection(g, y, 1)
    });
    let z = rand_tensor(&[2, 4, 2, 2], 13, -3.0, 3.0);
    check(std::slice::from_ref(&z), |g, v| {
        let y = g.sigmoid(v[0]);
        random_projection(g, y, 2)
    });
    check(&[z], |g, v| {
        let y = g.softmax_channel(v[0])?;
        random_projection(g, y, 3)
    });
}

#[test]
fn gradient_elementwise_and_reductions() {
    let a = rand_tensor(&[1, 3, 2, 2], 14, 0.2, 2.0);
    let b = rand_tensor(&[1, 3, 2, 2], 15, 0.2, 2.0);
    check(&[a.clone(), b.clone()], |g, v| {
        let s = g.add(v[0], v[1])?;
        let d = g.sub(s, v[1])?;
        let m = g.mul(d, v[1])?;
        let q = g.div(m, v[0])?;
        let l = g.log(q);
        let p = g.powf(q, 4.0 / 3.0);
        let c = g.clamp_min(l, -0.3);
        let sum = g.add(p, c)?;
        let sc = g.scale(sum, -1.5);
        let sh = g.add_scalar(sc, 0.25);
        random_projection(g, sh, 4)
    });
    check(std::slice::from_ref(&a), |g, v| {
        let s = g.sum_per_channel(v[0])?;
        random_projection(g, s, 5)
    });
    check(&[a], |g, v| Ok(g.mean(v[0])));
}

#[test]
fn gradient_channel_ops() {
    let x = distinct_tensor(&[2, 3, 2, 2], 16);
    let cg = rand_tensor(&[2, 3, 1, 1], 17, -1.0, 1.0);
    let sg = rand_tensor(&[2, 1, 2, 2], 18, -1.0, 1.0);
    let extra = rand_tensor(&[2, 2, 2, 2], 19, -1.0, 1.0);
    check(&[x.clone(), cg], |g, v| {
        let y = g.mul_channel(v[0], v[1])?;
        random_projection(g, y, 6)
    });
    check(&[x.clone(), sg], |g, v| {
        let y = g.mul_spatial(v[0], v[1])?;
        random_projection(g, y, 7)
    });
    check(std::slice::from_ref(&x), |g, v| {
        let y = g.channel_mean(v[0])?;
        random_projection(g, y, 8)
    });
    check(std::slice::from_ref(&x), |g, v| {
        let y = g.channel_max(v[0])?;
        random_projection(g, y, 9)
    });
    check(&[x, extra], |g, v| {
        let y = g.concat_channels(&[v[0], v[1], v[0]])?;
        random_projection(g, y, 10)
    });
}

#[test]
fn gradient_composite_pipeline() {
    // conv -> bn -> relu -> maxpool -> upsample -> concat -> softmax, 64-element input.
    let x = rand_tensor(&[1, 4, 4, 4], 40, -1.0, 1.0);
    let w = rand_tensor(&[3, 4, 3, 3], 41, -0.5, 0.5);
    let gamma = rand_tensor(&[3], 42, 0.5, 1.5);
    let beta = rand_tensor(&[3], 43, -0.2, 0.2);
    check(&[x, w, gamma, beta], |g, v| {
        let c = g.conv2d(v[0], v[1], None, 1, 1)?;
        let (n, _) = g.batchnorm2d_train(c, v[2], v[3], 1e-5)?;
        let r = g.sigmoid(n);
        let p = g.blurpool2d(r)?;
        let u = g.upsample_bilinear2x(p)?;
        let cat = g.concat_channels(&[u, r])?;
        let s = g.softmax_channel(cat)?;
        random_projection(g, s, 44)
    });
}

#[test]
fn forward_is_deterministic() {
    let x = rand_tensor(&[2, 3, 8, 8], 50, -1.0, 1.0).cast::<f32>();
    let w = rand_tensor(&[4, 3, 3, 3], 51, -1.0, 1.0).cast::<f32>();
    let run = || {
        let mut g = Graph::<f32>::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = g.conv2d(xv, wv, None, 1, 1).unwrap();
        let p = g.blurpool2d(y).unwrap();
        let s = g.softmax_channel(p).unwrap();
        g.value(s).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_sums_to_one_and_ignores_shift(
        vals in proptest::collection::vec(-30.0f64..30.0, 14),
        shift in -50.0f64..50.0,
    ) {
        let mut g32 = Graph::<f32>::new();
        let z32 = g32.constant(Tensor::new(&[1, 7, 1, 2], vals.clone()).unwrap().cast::<f32>());
        let p32 = g32.softmax_channel(z32).unwrap();
        for px in 0..2 {
            let s: f32 = (0..7).map(|c| g32.value(p32).data()[c * 2 + px]).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }

        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::new(&[1, 7, 1, 2], vals.clone()).unwrap());
        let zs = g.constant(Tensor::new(&[1, 7, 1, 2], vals.iter().map(|v| v + shift).collect()).unwrap());
        let p = g.softmax_channel(z).unwrap();
        let ps = g.softmax_channel(zs).unwrap();
        for (a, b) in g.value(p).data().iter().zip(g.value(ps).data()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn resampling_preserves_constants(c in -100.0f32..100.0, h in 1usize..5, w in 1usize..5) {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full(&[1, 2, 2 * h, 2 * w], c));
        let b = g.blurpool2d(x).unwrap();
        let u = g.upsample_bilinear2x(x).unwrap();
        for &v in g.value(b).data().iter().chain(g.value(u).data()) {
            prop_assert!((v - c).abs() <= 1e-6 * c.abs().max(1.0));
        }
    }
}
