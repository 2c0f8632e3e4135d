//! Forward oracles and gradient contracts for every graph operation.
//!
//! Forward results are checked against independent naive-loop
//! implementations; gradients against central finite differences. Both
//! oracles live here and never call back into the op implementations.

use flare_ssm_core::autodiff::gradcheck::fd_grad;
use flare_ssm_core::{Graph, NodeId, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Direct-summation 3-D convolution, quadruple-nested over output and
/// kernel dims. Kept deliberately naive.
#[allow(clippy::too_many_arguments)]
fn naive_conv3d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    stride: (usize, usize, usize),
    pad: (usize, usize, usize),
) -> Tensor<f64> {
    let (n, cin, d, h, wd) = (
        x.shape()[0],
        x.shape()[1],
        x.shape()[2],
        x.shape()[3],
        x.shape()[4],
    );
    let (cout, kd, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3], w.shape()[4]);
    let dout = (d + 2 * pad.0 - kd) / stride.0 + 1;
    let hout = (h + 2 * pad.1 - kh) / stride.1 + 1;
    let wout = (wd + 2 * pad.2 - kw) / stride.2 + 1;
    let mut out = vec![0.0; n * cout * dout * hout * wout];
    for ni in 0..n {
        for co in 0..cout {
            for od in 0..dout {
                for oh in 0..hout {
                    for ow in 0..wout {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for zd in 0..kd {
                                for zh in 0..kh {
                                    for zw in 0..kw {
                                        let id = (od * stride.0 + zd) as isize - pad.0 as isize;
                                        let ih = (oh * stride.1 + zh) as isize - pad.1 as isize;
                                        let iw = (ow * stride.2 + zw) as isize - pad.2 as isize;
                                        if id < 0
                                            || ih < 0
                                            || iw < 0
                                            || id as usize >= d
                                            || ih as usize >= h
                                            || iw as usize >= wd
                                        {
                                            continue;
                                        }
                                        let xi = x.data()[(((ni * cin + ci) * d + id as usize) * h
                                            + ih as usize)
                                            * wd
                                            + iw as usize];
                                        let wi = w.data()[(((co * cin + ci) * kd + zd) * kh + zh)
                                            * kw
                                            + zw];
                                        acc += xi * wi;
                                    }
                                }
                            }
                        }
                        out[(((ni * cout + co) * dout + od) * hout + oh) * wout + ow] = acc;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n, cout, dout, hout, wout], out)
}

#[test]
fn conv2d_matches_naive_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&[2, 3, 8, 8], &mut rng);
    let w = rand_tensor(&[4, 3, 3, 3], &mut rng);
    for &(stride, pad) in &[(1usize, 0usize), (1, 1), (2, 1)] {
        let g: Graph<f64> = Graph::no_grad();
        let xn = g.constant(x.clone());
        let wn = g.constant(w.clone());
        let y = g.conv2d(xn, wn, (stride, stride), (pad, pad)).unwrap();
        let x5 = x.reshape(&[2, 3, 1, 8, 8]).unwrap();
        let w5 = w.reshape(&[4, 3, 1, 3, 3]).unwrap();
        let expect = naive_conv3d(&x5, &w5, (1, stride, stride), (0, pad, pad));
        let got = g.value(y);
        let flat = got
            .reshape(&[
                got.shape()[0],
                got.shape()[1],
                1,
                got.shape()[2],
                got.shape()[3],
            ])
            .unwrap();
        assert!(flat.max_abs_diff(&expect) < 1e-12);
    }
}

#[test]
fn conv3d_matches_naive_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = rand_tensor(&[2, 2, 4, 6, 5], &mut rng);
    let w = rand_tensor(&[3, 2, 3, 3, 2], &mut rng);
    for &(s, p) in &[((1, 1, 1), (0, 0, 0)), ((1, 2, 2), (1, 1, 1)), ((2, 2, 1), (1, 0, 1))] {
        let g: Graph<f64> = Graph::no_grad();
        let xn = g.constant(x.clone());
        let wn = g.constant(w.clone());
        let y = g.conv3d(xn, wn, s, p).unwrap();
        let expect = naive_conv3d(&x, &w, s, p);
        assert!(g.value(y).max_abs_diff(&expect) < 1e-12);
    }
}

#[test]
fn matmul_and_bmm_match_naive() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let a = rand_tensor(&[3, 5], &mut rng);
    let b = rand_tensor(&[5, 4], &mut rng);
    let g: Graph<f64> = Graph::no_grad();
    let an = g.constant(a.clone());
    let bn = g.constant(b.clone());
    let c = g.value(g.matmul(an, bn, false, false).unwrap());
    for i in 0..3 {
        for j in 0..4 {
            let mut acc = 0.0;
            for k in 0..5 {
                acc += a.data()[i * 5 + k] * b.data()[k * 4 + j];
            }
            assert!((c.data()[i * 4 + j] - acc).abs() < 1e-12);
        }
    }
    let ab = rand_tensor(&[2, 3, 5], &mut rng);
    let bb = rand_tensor(&[2, 5, 4], &mut rng);
    let abn = g.constant(ab.clone());
    let bbn = g.constant(bb.clone());
    let cb = g.value(g.bmm(abn, bbn, false, false).unwrap());
    for n in 0..2 {
        for i in 0..3 {
            for j in 0..4 {
                let mut acc = 0.0;
                for k in 0..5 {
                    acc += ab.data()[(n * 3 + i) * 5 + k] * bb.data()[(n * 5 + k) * 4 + j];
                }
                assert!((cb.data()[(n * 3 + i) * 4 + j] - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = rand_tensor(&[7, 5], &mut rng);
    let g: Graph<f64> = Graph::no_grad();
    let y = g.value(g.softmax_last(g.constant(x)).unwrap());
    for r in 0..7 {
        let s: f64 = y.data()[r * 5..(r + 1) * 5].iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn single_token_attention_returns_value() {
    // softmax over one key is 1, so attention(q,k,v) with T=1 returns v.
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let q = rand_tensor(&[1, 1, 6], &mut rng);
    let k = rand_tensor(&[1, 1, 6], &mut rng);
    let v = rand_tensor(&[1, 1, 6], &mut rng);
    let g: Graph<f64> = Graph::no_grad();
    let (qn, kn, vn) = (g.constant(q), g.constant(k), g.constant(v.clone()));
    let scores = g.bmm(qn, kn, false, true).unwrap();
    let scaled = g.scale(scores, 1.0 / (6.0f64).sqrt()).unwrap();
    let probs = g.softmax_last(scaled).unwrap();
    let out = g.bmm(probs, vn, false, false).unwrap();
    assert!(g.value(out).max_abs_diff(&v) < 1e-15);
}

/// Gradient check harness: loss = sum(weights ⊙ f(x)) for a fixed random
/// weighting, so every output element contributes a distinct gradient.
fn check_grad(
    shape: &[usize],
    build: impl Fn(&Graph<f64>, NodeId) -> NodeId,
    seed: u64,
    tol: f64,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_tensor(shape, &mut rng);
    let g: Graph<f64> = Graph::new();
    let xn = g.var(x.clone());
    let y = build(&g, xn);
    let wt = rand_tensor(&g.shape(y), &mut rng);
    let wn = g.constant(wt.clone());
    let weighted = g.mul(y, wn).unwrap();
    let loss = g.sum_all(weighted).unwrap();
    let analytic = g.backward(loss).unwrap().node(xn).unwrap().clone();

    let eval = |t: &Tensor<f64>| {
        let g: Graph<f64> = Graph::no_grad();
        let xn = g.var(t.clone());
        let y = build(&g, xn);
        let wn = g.constant(wt.clone());
        let weighted = g.mul(y, wn).unwrap();
        g.value(g.sum_all(weighted).unwrap()).data()[0]
    };
    let fd = fd_grad(eval, &x, 1e-5);
    for i in 0..x.len() {
        let (a, f) = (analytic.data()[i], fd.data()[i]);
        let denom = a.abs().max(f.abs()).max(1e-6);
        assert!(
            (a - f).abs() / denom < tol,
            "element {i}: analytic {a} vs fd {f}"
        );
    }
}

#[test]
fn gradients_of_unary_ops() {
    check_grad(&[3, 4], |g, x| g.exp(x).unwrap(), 21, 1e-6);
    check_grad(&[3, 4], |g, x| g.sigmoid(x).unwrap(), 22, 1e-6);
    check_grad(&[3, 4], |g, x| g.gelu(x).unwrap(), 23, 1e-6);
    check_grad(&[3, 4], |g, x| g.sin(x).unwrap(), 24, 1e-6);
    check_grad(&[3, 4], |g, x| g.cos(x).unwrap(), 25, 1e-6);
    check_grad(&[3, 4], |g, x| g.neg(x).unwrap(), 26, 1e-6);
    check_grad(&[3, 4], |g, x| g.scale(x, -2.5).unwrap(), 27, 1e-6);
    check_grad(&[3, 4], |g, x| g.add_scalar(x, 0.7).unwrap(), 28, 1e-6);
    // recip and ln need inputs away from zero: shift into (1, 3).
    check_grad(
        &[3, 4],
        |g, x| {
            let s = g.add_scalar(x, 2.0).unwrap();
            g.recip(s).unwrap()
        },
        29,
        1e-6,
    );
    check_grad(
        &[3, 4],
        |g, x| {
            let s = g.add_scalar(x, 2.0).unwrap();
            g.ln_clamped(s, 1e-12).unwrap()
        },
        30,
        1e-6,
    );
}

#[test]
fn gradients_of_binary_and_broadcast_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let other = rand_tensor(&[3, 4], &mut rng);
    let o2 = other.clone();
    check_grad(&[3, 4], move |g, x| g.add(x, g.constant(other.clone())).unwrap(), 32, 1e-6);
    check_grad(&[3, 4], move |g, x| g.sub(g.constant(o2.clone()), x).unwrap(), 33, 1e-6);
    let w = rand_tensor(&[1, 4], &mut rng);
    let w2 = w.clone();
    check_grad(&[3, 4], move |g, x| g.add_bcast(x, g.constant(w.clone())).unwrap(), 34, 1e-6);
    check_grad(&[3, 4], move |g, x| g.mul_bcast(x, g.constant(w2.clone())).unwrap(), 35, 1e-6);
    // Gradient w.r.t. the broadcast side.
    let big = rand_tensor(&[3, 4], &mut rng);
    check_grad(
        &[1, 4],
        move |g, w| g.mul_bcast(g.constant(big.clone()), w).unwrap(),
        36,
        1e-6,
    );
}

#[test]
fn gradients_of_matmul_family() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for &(ta, tb) in &[(false, false), (true, false), (false, true), (true, true)] {
        let a_shape = if ta { [4, 3] } else { [3, 4] };
        let b_shape = if tb { [5, 4] } else { [4, 5] };
        let b = rand_tensor(&b_shape, &mut rng);
        let bc = b.clone();
        check_grad(
            &a_shape,
            move |g, x| g.matmul(x, g.constant(bc.clone()), ta, tb).unwrap(),
            42,
            1e-6,
        );
        let a = rand_tensor(&a_shape, &mut rng);
        check_grad(
            &b_shape,
            move |g, x| g.matmul(g.constant(a.clone()), x, ta, tb).unwrap(),
            43,
            1e-6,
        );
    }
    let b = rand_tensor(&[2, 4, 5], &mut rng);
    check_grad(
        &[2, 3, 4],
        move |g, x| g.bmm(x, g.constant(b.clone()), false, false).unwrap(),
        44,
        1e-6,
    );
}

#[test]
fn gradients_of_conv_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let w2 = rand_tensor(&[3, 2, 3, 3], &mut rng);
    let w2c = w2.clone();
    check_grad(
        &[2, 2, 5, 5],
        move |g, x| g.conv2d(x, g.constant(w2c.clone()), (2, 2), (1, 1)).unwrap(),
        52,
        1e-5,
    );
    let x2 = rand_tensor(&[2, 2, 5, 5], &mut rng);
    check_grad(
        &[3, 2, 3, 3],
        move |g, w| g.conv2d(g.constant(x2.clone()), w, (2, 2), (1, 1)).unwrap(),
        53,
        1e-5,
    );
    let w3 = rand_tensor(&[2, 2, 3, 3, 3], &mut rng);
    let w3c = w3.clone();
    check_grad(
        &[1, 2, 3, 4, 4],
        move |g, x| {
            g.conv3d(x, g.constant(w3c.clone()), (1, 2, 2), (1, 1, 1)).unwrap()
        },
        54,
        1e-5,
    );
    let x3 = rand_tensor(&[1, 2, 3, 4, 4], &mut rng);
    check_grad(
        &[2, 2, 3, 3, 3],
        move |g, w| {
            g.conv3d(g.constant(x3.clone()), w, (1, 2, 2), (1, 1, 1)).unwrap()
        },
        55,
        1e-5,
    );
}

#[test]
fn gradients_of_norm_softmax_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let gamma = rand_tensor(&[5], &mut rng);
    let beta = rand_tensor(&[5], &mut rng);
    let (gc, bc) = (gamma.clone(), beta.clone());
    check_grad(
        &[4, 5],
        move |g, x| {
            g.layer_norm(x, g.constant(gc.clone()), g.constant(bc.clone()), 1e-5).unwrap()
        },
        62,
        1e-4,
    );
    let x = rand_tensor(&[4, 5], &mut rng);
    let xc = x.clone();
    let bc2 = beta.clone();
    check_grad(
        &[5],
        move |g, gm| {
            g.layer_norm(g.constant(xc.clone()), gm, g.constant(bc2.clone()), 1e-5).unwrap()
        },
        63,
        1e-5,
    );
    let xc2 = x.clone();
    let gc2 = gamma.clone();
    check_grad(
        &[5],
        move |g, bt| {
            g.layer_norm(g.constant(xc2.clone()), g.constant(gc2.clone()), bt, 1e-5).unwrap()
        },
        64,
        1e-5,
    );
    check_grad(&[4, 5], |g, x| g.softmax_last(x).unwrap(), 65, 1e-5);
    check_grad(&[3, 4], |g, x| g.sum_all(x).unwrap(), 66, 1e-6);
    check_grad(&[3, 4], |g, x| g.mean_all(x).unwrap(), 67, 1e-6);
    check_grad(&[3, 4, 2], |g, x| g.mean_axis(x, 1).unwrap(), 68, 1e-6);
    check_grad(&[2, 3, 4, 4], |g, x| g.global_avg_pool_hw(x).unwrap(), 69, 1e-6);
    check_grad(&[2, 7, 3], |g, x| g.adaptive_pool_seq(x, 3).unwrap(), 70, 1e-6);
}

#[test]
fn gradients_of_shape_and_index_ops() {
    check_grad(&[3, 4], |g, x| g.reshape(x, &[2, 6]).unwrap(), 71, 1e-6);
    check_grad(&[2, 3, 4], |g, x| g.permute(x, &[2, 0, 1]).unwrap(), 72, 1e-6);
    check_grad(&[2, 5, 3], |g, x| g.narrow(x, 1, 1, 3).unwrap(), 73, 1e-6);
    let mut rng = ChaCha8Rng::seed_from_u64(74);
    let other = rand_tensor(&[2, 2, 3], &mut rng);
    check_grad(
        &[2, 5, 3],
        move |g, x| g.concat(&[x, g.constant(other.clone())], 1).unwrap(),
        75,
        1e-6,
    );
    check_grad(
        &[2, 4, 3],
        |g, x| g.gather_rows(x, &[vec![0, 2, 2], vec![3, 1, 0]]).unwrap(),
        76,
        1e-6,
    );
    check_grad(&[6], |g, x| g.repeat_rows(x, 4).unwrap(), 77, 1e-6);
    let mut rng = ChaCha8Rng::seed_from_u64(78);
    let other = rand_tensor(&[3, 4], &mut rng);
    check_grad(
        &[3, 4],
        move |g, x| g.interleave2(x, g.constant(other.clone())).unwrap(),
        79,
        1e-6,
    );
}

#[test]
fn forward_ops_are_deterministic_and_finite() {
    // Identical inputs and seed produce bit-identical results.
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x = rand_tensor(&[2, 3, 6, 6], &mut rng);
        let w = rand_tensor(&[4, 3, 3, 3], &mut rng);
        let g: Graph<f64> = Graph::no_grad();
        let y = g.conv2d(g.constant(x), g.constant(w), (1, 1), (1, 1)).unwrap();
        let s = g.sigmoid(y).unwrap();
        let p = g.global_avg_pool_hw(s).unwrap();
        g.value(p).to_f64_vec()
    };
    let a = run();
    let b = run();
    assert_eq!(a, b);
    assert!(a.iter().all(|v| v.is_finite()));
}
