use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Direct cross-correlation, one output element at a time.
fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let [n, cin, h, wd] = x.shape().try_into().unwrap();
    let [cout, _, kh, kw] = w.shape().try_into().unwrap();
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[n, cout, ho, wo]);
    for b in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((b * cin + ci) * h + iy as usize) * wd + ix as usize;
                                let wi = ((co * cin + ci) * kh + ky) * kw + kx;
                                acc += x.data()[xi] * w.data()[wi];
                            }
                        }
                    }
                    out.data_mut()[((b * cout + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_of_zero_input_is_zero() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[1, 2, 5, 5]));
    let w = t.constant(random(&[3, 2, 3, 3], 1));
    let y = t.conv2d(x, w, None, 1, 1).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_identity_kernel() {
    let mut t = Tape::new();
    let xt = random(&[1, 1, 4, 4], 2);
    let x = t.constant(xt.clone());
    let w = t.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    let y = t.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(t.value(y), &xt);
}

#[test]
fn conv_two_by_two_example() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let w = t.constant(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let y = t.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(t.value(y).shape(), &[1, 1, 1, 1]);
    assert_eq!(t.value(y).data(), &[5.0]);
}

#[test]
fn conv_matches_direct_summation() {
    for (stride, pad, seed) in [(1, 1, 3), (2, 1, 4), (1, 0, 5), (2, 0, 6)] {
        let x = random(&[2, 3, 7, 6], seed);
        let w = random(&[4, 3, 3, 3], seed + 100);
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let wv = t.constant(w.clone());
        let y = t.conv2d(xv, wv, None, stride, pad).unwrap();
        let oracle = naive_conv(&x, &w, stride, pad);
        assert_eq!(t.value(y).shape(), oracle.shape());
        for (a, b) in t.value(y).data().iter().zip(oracle.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn conv_shape_error_names_both_shapes() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = t.constant(Tensor::zeros(&[1, 3, 3, 3]));
    let err = t.conv2d(x, w, None, 1, 1).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[1, 2, 4, 4]") && msg.contains("[1, 3, 3, 3]"), "{msg}");
}

#[test]
fn backward_of_sum_is_ones() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::from_vec(vec![0.5, -2.0, 3.0]));
    let s = t.sum(x);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_power_rule() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::from_vec(vec![2.0]));
    let sq = t.mul(x, x).unwrap();
    let s = t.sum(sq);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[4.0]);
}

#[test]
fn backward_errors() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::from_vec(vec![1.0, 2.0]));
    assert!(t.backward(x).is_err());
    let s = t.sum(x);
    t.backward(s).unwrap();
    assert!(matches!(t.backward(s), Err(Error::Backward(_))));
    t.reset_grads();
    t.backward(s).unwrap();
}

#[test]
fn unreached_leaves_get_zero_grads() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::from_vec(vec![1.0, 2.0]));
    let unused = t.leaf(Tensor::zeros(&[2, 2]));
    let s = t.sum(x);
    t.backward(s).unwrap();
    assert_eq!(t.grad(unused).unwrap(), &Tensor::zeros(&[2, 2]));
}

#[test]
fn zero_upstream_gives_zero_grads() {
    let mut t = Tape::new();
    let x = t.leaf(random(&[1, 2, 5, 5], 9));
    let w = t.leaf(random(&[3, 2, 3, 3], 10));
    let y = t.conv2d(x, w, None, 1, 1).unwrap();
    let r = t.relu(y);
    let z = t.mul_scalar(r, 0.0);
    let s = t.sum(z);
    t.backward(s).unwrap();
    assert!(t.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
    assert!(t.grad(w).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut t = Tape::new();
        let x = t.constant(random(&[1, 3, 9, 9], 11));
        let w = t.constant(random(&[5, 3, 3, 3], 12));
        let y = t.conv2d(x, w, None, 2, 1).unwrap();
        t.value(y).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn gradcheck_sum_exact_on_dyadic_input() {
    let x = Tensor::from_vec(vec![1.0, -2.0, 0.5, 4.0]);
    let r = check_gradients(|t, x| Ok(t.sum(x)), &x, 0.0625, 1e-12).unwrap();
    assert_eq!(r.max_rel_error, 0.0);
    let r = check_gradients(|t, x| Ok(t.sum(x)), &random(&[6], 3), 1e-5, 1e-6).unwrap();
    assert!(r.passed, "{}", r.max_rel_error);
}

#[test]
fn gradcheck_conv_then_sum() {
    let w = random(&[3, 2, 3, 3], 70);
    let x = random(&[1, 2, 5, 5], 7);
    let r = check_gradients(
        |t, x| {
            let wv = t.constant(w.clone());
            let y = t.conv2d(x, wv, None, 2, 1)?;
            // square so the gradient depends on x
            let sq = t.mul(y, y)?;
            Ok(t.sum(sq))
        },
        &x,
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(r.passed, "{}", r.max_rel_error);
}

#[test]
fn gradcheck_relu_away_from_kink() {
    let mut x = random(&[20], 8);
    for v in x.data_mut() {
        if v.abs() < 1e-3 {
            *v = 0.5;
        }
    }
    let r = check_gradients(
        |t, x| {
            let y = t.relu(x);
            let sq = t.mul(y, y)?;
            Ok(t.sum(sq))
        },
        &x,
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(r.passed, "{}", r.max_rel_error);
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::from_vec(vec![0.0, 1.0]));
    let y = t.relu(x);
    let s = t.sum(y);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap().data(), &[0.0, 1.0]);
}

#[test]
fn gradcheck_linear_and_cross_entropy() {
    let w = random(&[5, 4], 21);
    let b = random(&[5], 22);
    let x = random(&[3, 4], 23);
    let r = check_gradients(
        |t, x| {
            let wv = t.constant(w.clone());
            let bv = t.constant(b.clone());
            let y = t.linear(x, wv, Some(bv))?;
            t.softmax_cross_entropy(y, &[(0, 1), (1, 4), (2, 0), (0, 3)])
        },
        &x,
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(r.passed, "{}", r.max_rel_error);
}

#[test]
fn gradcheck_stack_gather_pool() {
    let x = random(&[2, 3, 2, 2], 31);
    let r = check_gradients(
        |t, x| {
            let p = t.avg_pool(x)?;
            let g = t.gather(p, vec![5, 0, 0, 2], vec![4])?;
            let s = t.stack(&[g, g])?;
            let sq = t.mul(s, s)?;
            let sc = t.mul_scalar(sq, 0.5);
            Ok(t.sum(sc))
        },
        &x,
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(r.passed, "{}", r.max_rel_error);
}

#[test]
fn cross_entropy_value() {
    let mut t = Tape::new();
    let l = t.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
    let ce = t.softmax_cross_entropy(l, &[(0, 1)]).unwrap();
    assert!((t.value(ce).item().unwrap() - 2f64.ln()).abs() < 1e-15);
}
