//! Forward values against hand computations and brute-force loops.

use mhkd::exec::set_parallel;
use mhkd::tensor::{BnMode, Tape, Tensor};
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = StdRng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Direct seven-loop convolution with zero padding.
fn conv_oracle(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> (Vec<usize>, Vec<f64>) {
    let [n, ci, h, wd] = x.shape().try_into().unwrap();
    let [co, _, kh, kw] = w.shape().try_into().unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Vec::new();
    for bi in 0..n {
        for o in 0..co {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b[o]);
                    for c in 0..ci {
                        for i in 0..kh {
                            for j in 0..kw {
                                let (sy, sx) = (
                                    (y * stride + i) as isize - pad as isize,
                                    (xo * stride + j) as isize - pad as isize,
                                );
                                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < wd {
                                    acc += x.data()[((bi * ci + c) * h + sy as usize) * wd + sx as usize]
                                        * w.data()[((o * ci + c) * kh + i) * kw + j];
                                }
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    (vec![n, co, oh, ow], out)
}

#[test]
fn conv_hand_dot_product() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let w = tape.constant(t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let y = tape.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
    assert_eq!(tape.value(y).data(), &[5.0]);
}

#[test]
fn conv_identity_kernel_is_bit_exact() {
    let input = random(&[2, 1, 5, 7], 11).cast::<f32>();
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(input.clone());
    let w = tape.constant(Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap());
    let b = tape.constant(Tensor::new(&[1], vec![0.0]).unwrap());
    let y = tape.conv2d(x, w, Some(b), 1, 0).unwrap();
    assert!(tape.value(y).bit_eq(&input));
}

#[test]
fn conv_output_shape_and_config_errors() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[1, 3, 32, 32]));
    let w = tape.constant(Tensor::zeros(&[16, 3, 3, 3]));
    assert_eq!(
        {
            let v = tape.conv2d(x, w, None, 1, 1).unwrap();
            tape.shape(v).to_vec()
        },
        &[1, 16, 32, 32]
    );
    let bad = tape.constant(Tensor::zeros(&[16, 4, 3, 3]));
    assert!(tape.conv2d(x, bad, None, 1, 1).is_err());
    let huge = tape.constant(Tensor::zeros(&[1, 3, 40, 40]));
    assert!(tape.conv2d(x, huge, None, 1, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, ..ProptestConfig::default() })]

    #[test]
    fn conv_matches_brute_force(
        b in 1usize..3, ci in 1usize..4, co in 1usize..5, h in 1usize..9, w in 1usize..9,
        k in 1usize..4, stride in 1usize..3, pad in 0usize..2, seed in any::<u64>(),
    ) {
        prop_assume!(k <= h + 2 * pad && k <= w + 2 * pad);
        let x = random(&[b, ci, h, w], seed);
        let wt = random(&[co, ci, k, k], seed.wrapping_add(1));
        let bias = random(&[co], seed.wrapping_add(2));
        let mut tape = Tape::<f64>::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(wt.clone()), tape.constant(bias.clone()));
        let y = tape.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        let (shape, expect) = conv_oracle(&x, &wt, Some(bias.data()), stride, pad);
        prop_assert_eq!(tape.shape(y), &shape[..]);
        for (a, e) in tape.value(y).data().iter().zip(&expect) {
            prop_assert!((a - e).abs() <= 1e-12 * (1.0 + e.abs()), "{} vs {}", a, e);
        }
    }

    #[test]
    fn max_pool_matches_window_scan(seed in any::<u64>(), c in 1usize..3) {
        let x = random(&[1, c, 4, 4], seed);
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.clone());
        let y = tape.max_pool2d(xv, 2, 2).unwrap();
        let mut expect = Vec::new();
        for ch in 0..c {
            for oy in 0..2 {
                for ox in 0..2 {
                    let mut m = f64::NEG_INFINITY;
                    for i in 0..2 {
                        for j in 0..2 {
                            m = m.max(x.data()[ch * 16 + (2 * oy + i) * 4 + 2 * ox + j]);
                        }
                    }
                    expect.push(m);
                }
            }
        }
        prop_assert_eq!(tape.value(y).data(), &expect[..]);
    }

    #[test]
    fn forward_ops_are_pure(seed in any::<u64>()) {
        let x = random(&[2, 3, 6, 6], seed);
        let w = random(&[4, 3, 3, 3], seed ^ 1);
        let (rm, rv) = (vec![0.1; 4], vec![0.9; 4]);
        let run = || {
            let mut tape = Tape::<f64>::new();
            let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
            let g = tape.constant(Tensor::full(&[4], 1.0));
            let b = tape.constant(Tensor::zeros(&[4]));
            let y = tape.conv2d(xv, wv, None, 1, 1).unwrap();
            let (y, _) = tape.batchnorm2d(y, g, b, &rm, &rv, BnMode::Eval, 1e-5).unwrap();
            let y = tape.relu(y).unwrap();
            let y = tape.max_pool2d(y, 2, 2).unwrap();
            let y = tape.global_avg_pool(y).unwrap();
            tape.value(y).clone()
        };
        prop_assert!(run().bit_eq(&run()));
    }
}

#[test]
fn batchnorm_eval_matches_scalar_formula() {
    let x = random(&[3, 2, 4, 4], 5);
    let (m, v) = ([0.3, -0.2], [0.5, 2.0]);
    let (gamma, beta) = ([1.5, 0.7], [0.1, -0.4]);
    let eps = 1e-5;
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x.clone());
    let g = tape.constant(t(&[2], &gamma));
    let b = tape.constant(t(&[2], &beta));
    let (y, stats) = tape.batchnorm2d(xv, g, b, &m, &v, BnMode::Eval, eps).unwrap();
    assert!(stats.is_none());
    for (i, (&out, &inp)) in tape.value(y).data().iter().zip(x.data()).enumerate() {
        let c = (i / 16) % 2;
        let expect = (inp - m[c]) / (v[c] + eps).sqrt() * gamma[c] + beta[c];
        assert!((out - expect).abs() <= 1e-12, "{out} vs {expect}");
    }
}

#[test]
fn batchnorm_train_standardizes_each_channel() {
    // Spread well above eps so the eps bias in the variance stays below 1e-5.
    let x = random(&[4, 3, 5, 5], 9);
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x);
    let xv = tape.scale(xv, 4.0).unwrap();
    let g = tape.constant(Tensor::full(&[3], 1.0));
    let b = tape.constant(Tensor::zeros(&[3]));
    let (y, _) = tape.batchnorm2d(xv, g, b, &[0.0; 3], &[1.0; 3], BnMode::Train, 1e-5).unwrap();
    let y = tape.value(y).data();
    for c in 0..3 {
        let vals: Vec<f64> = (0..4).flat_map(|n| y[(n * 3 + c) * 25..(n * 3 + c + 1) * 25].to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() <= 1e-5, "mean {mean}");
        assert!((var - 1.0).abs() <= 1e-5, "var {var}");
    }
}

#[test]
fn batchnorm_constant_channel_is_zero_and_tiny_batch_is_rejected() {
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(Tensor::full(&[2, 1, 3, 3], 4.2));
    let g = tape.constant(Tensor::full(&[1], 1.0));
    let b = tape.constant(Tensor::zeros(&[1]));
    let (y, _) = tape.batchnorm2d(xv, g, b, &[0.0], &[1.0], BnMode::Train, 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    let single = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
    assert!(tape.batchnorm2d(single, g, b, &[0.0], &[1.0], BnMode::Train, 1e-5).is_err());
}

#[test]
fn relu_linear_and_pool_fixtures() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
    assert_eq!(
        {
            let v = tape.relu(x).unwrap();
            tape.value(v).data().to_vec()
        },
        &[0.0, 0.0, 2.0]
    );

    let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
    let w = tape.constant(t(&[1, 2], &[3.0, 4.0]));
    let b = tape.constant(t(&[1], &[5.0]));
    assert_eq!(
        {
            let v = tape.linear(x, w, b).unwrap();
            tape.value(v).data().to_vec()
        },
        &[16.0]
    );

    let x = tape.constant(Tensor::zeros(&[8, 256]));
    let w = tape.constant(Tensor::zeros(&[100, 256]));
    let b = tape.constant(Tensor::zeros(&[100]));
    assert_eq!(
        {
            let v = tape.linear(x, w, b).unwrap();
            tape.shape(v).to_vec()
        },
        &[8, 100]
    );
    let bad = tape.constant(Tensor::zeros(&[100, 255]));
    assert!(tape.linear(x, bad, b).is_err());

    let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    assert_eq!(
        {
            let v = tape.global_avg_pool(x).unwrap();
            tape.value(v).data().to_vec()
        },
        &[2.5]
    );
    assert_eq!(
        {
            let v = tape.max_pool2d(x, 2, 2).unwrap();
            tape.value(v).data().to_vec()
        },
        &[4.0]
    );
    assert!(tape.max_pool2d(x, 3, 1).is_err());
}

#[test]
fn max_pool_tie_sends_gradient_to_first_element() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::full(&[1, 1, 2, 2], 1.0).with_requires_grad(true));
    let y = tape.max_pool2d(x, 2, 2).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn sequential_and_parallel_paths_agree_bitwise() {
    let x = random(&[8, 4, 10, 10], 21).cast::<f32>();
    let w = random(&[6, 4, 3, 3], 22).cast::<f32>();
    let run = || {
        let mut tape = Tape::<f32>::new();
        let xv = tape.leaf(x.clone().with_requires_grad(true));
        let wv = tape.leaf(w.clone().with_requires_grad(true));
        let y = tape.conv2d(xv, wv, None, 1, 1).unwrap();
        let y = tape.mul(y, y).unwrap();
        let l = tape.sum(y).unwrap();
        tape.backward(l).unwrap();
        (tape.grad(xv).unwrap().to_vec(), tape.grad(wv).unwrap().to_vec(), tape.value(l).item())
    };
    set_parallel(false);
    let seq = run();
    set_parallel(true);
    let par = run();
    assert_eq!(seq.2.to_bits(), par.2.to_bits());
    assert!(seq.0.iter().zip(&par.0).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert!(seq.1.iter().zip(&par.1).all(|(a, b)| a.to_bits() == b.to_bits()));
}
