//! Independent numerical oracles for the tensor primitives: every forward is
//! checked against a differently-structured reference computation, and every
//! backward against central finite differences.

use cage_core::tensor::gradcheck::{grad_check, random_tensor, OpGradPair};
use cage_core::tensor::ops::{self, Activation, BnMode};
use cage_core::Tensor;
use rand::rngs::StdRng;
use rand::SeedableRng;

const OP_TOL: f64 = 1e-6;

fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// forward oracles

/// Zero-pad the input explicitly, then run a pad-free 3x3 convolution. The
/// production kernel instead skips out-of-range taps, so the two
/// implementations share no control flow.
fn conv3x3_padded_oracle(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (bt, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let cout = w.shape()[0];
    let (ph, pw) = (h + 2, wd + 2);
    let mut padded = vec![0.0; bt * cin * ph * pw];
    for bi in 0..bt {
        for ci in 0..cin {
            for y in 0..h {
                for xx in 0..wd {
                    padded[((bi * cin + ci) * ph + y + 1) * pw + xx + 1] =
                        x.data()[((bi * cin + ci) * h + y) * wd + xx];
                }
            }
        }
    }
    let mut out = vec![0.0; bt * cout * h * wd];
    for bi in 0..bt {
        for co in 0..cout {
            for oy in 0..h {
                for ox in 0..wd {
                    let mut acc = b.data()[co];
                    for ci in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                acc += w.data()[((co * cin + ci) * 3 + ky) * 3 + kx]
                                    * padded[((bi * cin + ci) * ph + oy + ky) * pw + ox + kx];
                            }
                        }
                    }
                    out[((bi * cout + co) * h + oy) * wd + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![bt, cout, h, wd], out).unwrap()
}

#[test]
fn conv3x3_matches_explicit_padding_oracle() {
    let mut r = rng(1);
    let x = random_tensor(vec![2, 3, 5, 4], &mut r);
    let w = random_tensor(vec![4, 3, 3, 3], &mut r);
    let b = random_tensor(vec![4], &mut r);
    let got = ops::conv3x3(&x, &w, &b).unwrap();
    let want = conv3x3_padded_oracle(&x, &w, &b);
    assert!(got.max_abs_diff(&want) < 1e-12);
}

#[test]
fn dwconv3x3_equals_conv3x3_with_diagonal_weight() {
    // depthwise conv is a full conv whose cross-channel taps are zero
    let mut r = rng(2);
    let c = 3;
    let x = random_tensor(vec![2, c, 4, 4], &mut r);
    let dw = random_tensor(vec![c, 3, 3], &mut r);
    let b = random_tensor(vec![c], &mut r);
    let mut full = vec![0.0; c * c * 9];
    for ci in 0..c {
        for k in 0..9 {
            full[(ci * c + ci) * 9 + k] = dw.data()[ci * 9 + k];
        }
    }
    let full_w = Tensor::new(vec![c, c, 3, 3], full).unwrap();
    let got = ops::dwconv3x3(&x, &dw, &b).unwrap();
    let want = ops::conv3x3(&x, &full_w, &b).unwrap();
    assert!(got.max_abs_diff(&want) < 1e-12);
}

#[test]
fn conv1x1_matches_per_pixel_matvec_oracle() {
    let mut r = rng(3);
    let (bt, cin, cout, h, wd) = (2, 5, 3, 4, 3);
    let x = random_tensor(vec![bt, cin, h, wd], &mut r);
    let w = random_tensor(vec![cout, cin], &mut r);
    let b = random_tensor(vec![cout], &mut r);
    let got = ops::conv1x1(&x, &w, &b).unwrap();
    for bi in 0..bt {
        for y in 0..h {
            for xx in 0..wd {
                for co in 0..cout {
                    let mut acc = b.data()[co];
                    for ci in 0..cin {
                        acc += w.data()[co * cin + ci]
                            * x.data()[((bi * cin + ci) * h + y) * wd + xx];
                    }
                    let v = got.data()[((bi * cout + co) * h + y) * wd + xx];
                    assert!((v - acc).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn linear_matches_naive_oracle_with_broadcast() {
    let mut r = rng(4);
    let x = random_tensor(vec![2, 3, 4], &mut r);
    let w = random_tensor(vec![4, 5], &mut r);
    let b = random_tensor(vec![5], &mut r);
    let got = ops::linear(&x, &w, Some(&b)).unwrap();
    assert_eq!(got.shape(), [2, 3, 5]);
    for row in 0..6 {
        for o in 0..5 {
            let mut acc = b.data()[o];
            for i in 0..4 {
                acc += x.data()[row * 4 + i] * w.data()[i * 5 + o];
            }
            assert!((got.data()[row * 5 + o] - acc).abs() < 1e-12);
        }
    }
}

#[test]
fn layer_norm_matches_two_pass_oracle() {
    let mut r = rng(5);
    let x = random_tensor(vec![3, 7], &mut r);
    let gain = random_tensor(vec![7], &mut r);
    let shift = random_tensor(vec![7], &mut r);
    let eps = 1e-5;
    let got = ops::layer_norm(&x, &gain, &shift, eps).unwrap();
    for row in 0..3 {
        let vals = &x.data()[row * 7..(row + 1) * 7];
        let mean: f64 = vals.iter().sum::<f64>() / 7.0;
        let var: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
        for i in 0..7 {
            let want = (vals[i] - mean) / (var + eps).sqrt() * gain.data()[i] + shift.data()[i];
            assert!((got.data()[row * 7 + i] - want).abs() < 1e-12);
        }
    }
    // normalized rows (unit gain, zero shift) have mean 0 and variance ~1
    let unit = ops::layer_norm(&x, &Tensor::full(vec![7], 1.0), &Tensor::zeros(vec![7]), eps)
        .unwrap();
    for row in 0..3 {
        let vals = &unit.data()[row * 7..(row + 1) * 7];
        let mean: f64 = vals.iter().sum::<f64>() / 7.0;
        assert!(mean.abs() < 1e-12);
    }
}

/// erf via its Maclaurin series; the implementation calls a libm routine.
fn erf_series(z: f64) -> f64 {
    let mut term = z;
    let mut sum = z;
    for n in 1..60 {
        term *= -z * z / n as f64;
        sum += term / (2 * n + 1) as f64;
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

#[test]
fn gelu_matches_erf_series_oracle() {
    for i in -20..=20 {
        let x = i as f64 * 0.15;
        let want = x * 0.5 * (1.0 + erf_series(x / 2f64.sqrt()));
        assert!((ops::gelu_scalar(x) - want).abs() < 1e-12, "x = {x}");
    }
}

#[test]
fn batch_norm_train_stats_match_manual_oracle() {
    let mut r = rng(6);
    let (bt, c, h, w) = (2, 3, 2, 2);
    let x = random_tensor(vec![bt, c, h, w], &mut r);
    let gain = random_tensor(vec![c], &mut r);
    let shift = random_tensor(vec![c], &mut r);
    let rm = random_tensor(vec![c], &mut r);
    let rv = Tensor::full(vec![c], 1.0);
    let momentum = 0.1;
    let (out, _, stats) =
        ops::batch_norm(&x, &gain, &shift, &rm, &rv, BnMode::Train, 1e-5, momentum).unwrap();
    let stats = stats.unwrap();
    let n = (bt * h * w) as f64;
    for ci in 0..c {
        let mut vals = Vec::new();
        for bi in 0..bt {
            for p in 0..h * w {
                vals.push(x.data()[(bi * c + ci) * h * w + p]);
            }
        }
        let mean = vals.iter().sum::<f64>() / n;
        let biased = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let unbiased = biased * n / (n - 1.0);
        // normalization path uses the biased variance
        let inv = 1.0 / (biased + 1e-5).sqrt();
        let want0 = (vals[0] - mean) * inv * gain.data()[ci] + shift.data()[ci];
        assert!((out.data()[ci * h * w] - want0).abs() < 1e-12);
        // the EMA update uses the unbiased variance
        let want_rm = 0.9 * rm.data()[ci] + momentum * mean;
        let want_rv = 0.9 * 1.0 + momentum * unbiased;
        assert!((stats.mean[ci] - want_rm).abs() < 1e-12);
        assert!((stats.var[ci] - want_rv).abs() < 1e-12);
    }
}

#[test]
fn batch_norm_rejects_single_sample_in_train_mode() {
    let x = Tensor::full(vec![1, 2, 1, 1], 1.0);
    let g = Tensor::full(vec![2], 1.0);
    let z = Tensor::zeros(vec![2]);
    let o = Tensor::full(vec![2], 1.0);
    assert!(ops::batch_norm(&x, &g, &z, &z, &o, BnMode::Train, 1e-5, 0.1).is_err());
}

#[test]
fn softmax_rows_sum_to_one_and_single_key_is_one() {
    let mut r = rng(7);
    let x = random_tensor(vec![4, 6], &mut r);
    let y = ops::softmax_lastdim(&x);
    for row in 0..4 {
        let s: f64 = y.data()[row * 6..(row + 1) * 6].iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
    let one = ops::softmax_lastdim(&random_tensor(vec![3, 1], &mut r));
    assert!(one.iter().all(|v| (v - 1.0).abs() < 1e-15));
    // invariance to a large additive shift (max-subtraction path)
    let shifted = x.map(|v| v + 500.0);
    assert!(ops::softmax_lastdim(&shifted).max_abs_diff(&y) < 1e-12);
}

#[test]
fn reduce_mean_matches_manual_sum() {
    let x = Tensor::new(vec![2, 3, 2], (1..=12).map(f64::from).collect()).unwrap();
    let m = ops::reduce_mean(&x, 1).unwrap();
    assert_eq!(m.shape(), [2, 2]);
    assert_eq!(m.data(), &[3.0, 4.0, 9.0, 10.0]);
}

#[test]
fn concat_split_round_trip() {
    let mut r = rng(8);
    let a = random_tensor(vec![2, 3, 2, 2], &mut r);
    let b = random_tensor(vec![2, 5, 2, 2], &mut r);
    let cat = ops::concat_channels(&a, &b).unwrap();
    assert_eq!(cat.shape(), [2, 8, 2, 2]);
    let (a2, b2) = ops::split_channels(&cat, 3);
    assert!(a.max_abs_diff(&a2) == 0.0);
    assert!(b.max_abs_diff(&b2) == 0.0);
}

#[test]
fn film_identity_at_zero_is_bitwise() {
    let mut r = rng(9);
    let x = random_tensor(vec![2, 3, 2, 2], &mut r);
    let zero = Tensor::zeros(vec![2, 3]);
    let y = ops::film(&x, &zero, &zero).unwrap();
    assert_eq!(x.data(), y.data());
}

// ---------------------------------------------------------------------------
// backward checks against finite differences

fn check(op: OpGradPair, inputs: &[Tensor], seed: u64) {
    let report = grad_check(&op, inputs, OP_TOL, seed).unwrap();
    assert!(
        report.passed(),
        "max rel err {:.3e} at input {} coord {}",
        report.max_rel_err,
        report.worst.0,
        report.worst.1
    );
}

#[test]
fn conv1x1_backward_passes_fd() {
    let mut r = rng(10);
    let inputs = vec![
        random_tensor(vec![2, 3, 3, 2], &mut r),
        random_tensor(vec![4, 3], &mut r),
        random_tensor(vec![4], &mut r),
    ];
    check(
        OpGradPair {
            forward: Box::new(|xs| ops::conv1x1(&xs[0], &xs[1], &xs[2])),
            backward: Box::new(|xs, dy| {
                let (dx, dw, db) = ops::conv1x1_backward(&xs[0], &xs[1], dy);
                Ok(vec![dx, dw, db])
            }),
        },
        &inputs,
        0,
    );
}

#[test]
fn conv3x3_backward_passes_fd() {
    let mut r = rng(11);
    let inputs = vec![
        random_tensor(vec![2, 2, 4, 3], &mut r),
        random_tensor(vec![3, 2, 3, 3], &mut r),
        random_tensor(vec![3], &mut r),
    ];
    check(
        OpGradPair {
            forward: Box::new(|xs| ops::conv3x3(&xs[0], &xs[1], &xs[2])),
            backward: Box::new(|xs, dy| {
                let (dx, dw, db) = ops::conv3x3_backward(&xs[0], &xs[1], dy);
                Ok(vec![dx, dw, db])
            }),
        },
        &inputs,
        1,
    );
}

#[test]
fn dwconv3x3_backward_passes_fd() {
    let mut r = rng(12);
    let inputs = vec![
        random_tensor(vec![2, 3, 4, 3], &mut r),
        random_tensor(vec![3, 3, 3], &mut r),
        random_tensor(vec![3], &mut r),
    ];
    check(
        OpGradPair {
            forward: Box::new(|xs| ops::dwconv3x3(&xs[0], &xs[1], &xs[2])),
            backward: Box::new(|xs, dy| {
                let (dx, dw, db) = ops::dwconv3x3_backward(&xs[0], &xs[1], dy);
                Ok(vec![dx, dw, db])
            }),
        },
        &inputs,
        2,
    );
}

#[test]
fn linear_backward_passes_fd() {
    let mut r = rng(13);
    let inputs = vec![
        random_tensor(vec![2, 3, 4], &mut r),
        random_tensor(vec![4, 5], &mut r),
        random_tensor(vec![5], &mut r),
    ];
    check(
        OpGradPair {
            forward: Box::new(|xs| ops::linear(&xs[0], &xs[1], Some(&xs[2]))),
            backward: Box::new(|xs, dy| {
                let (dx, dw, db) = ops::linear_backward(&xs[0], &xs[1], dy);
                Ok(vec![dx, dw, db])
            }),
        },
        &inputs,
        3,
    );
}

#[test]
fn layer_norm_backward_passes_fd() {
    let mut r = rng(14);
    let inputs = vec![
        random_tensor(vec![3, 6], &mut r),
        random_tensor(vec![6], &mut r),
        random_tensor(vec![6], &mut r),
    ];
    check(
        OpGradPair {
            forward: Box::new(|xs| ops::layer_norm(&xs[0], &xs[1], &xs[2], 1e-5)),
            backward: Box::new(|xs, dy| {
                let (dx, dg, ds) = ops::layer_norm_backward(&xs[0], &xs[1], 1e-5, dy);
                Ok(vec![dx, dg, ds])
            }),
        },
        &inputs,
        4,
    );
}

#[test]
fn batch_norm_backward_passes_fd_in_both_modes() {
    let mut r = rng(15);
    for mode in [BnMode::Train, BnMode::Eval] {
        let inputs = vec![
            random_tensor(vec![2, 3, 2, 2], &mut r),
            random_tensor(vec![3], &mut r),
            random_tensor(vec![3], &mut r),
        ];
        let rm = random_tensor(vec![3], &mut r);
        let rv = random_tensor(vec![3], &mut r).map(|v| v.abs() + 0.5);
        check(
            OpGradPair {
                forward: Box::new(|xs| {
                    ops::batch_norm(&xs[0], &xs[1], &xs[2], &rm, &rv, mode, 1e-5, 0.1)
                        .map(|(y, _, _)| y)
                }),
                backward: Box::new(|xs, dy| {
                    let (_, cache, _) =
                        ops::batch_norm(&xs[0], &xs[1], &xs[2], &rm, &rv, mode, 1e-5, 0.1)?;
                    let (dx, dg, ds) =
                        ops::batch_norm_backward(&xs[0], &xs[1], &cache, 1e-5, dy);
                    Ok(vec![dx, dg, ds])
                }),
            },
            &inputs,
            5,
        );
    }
}

#[test]
fn activation_backwards_pass_fd() {
    let mut r = rng(16);
    for kind in [Activation::Gelu, Activation::Sigmoid] {
        let inputs = vec![random_tensor(vec![3, 5], &mut r)];
        check(
            OpGradPair {
                forward: Box::new(move |xs| Ok(ops::activation(&xs[0], kind))),
                backward: Box::new(move |xs, dy| {
                    Ok(vec![ops::activation_backward(&xs[0], kind, dy)])
                }),
            },
            &inputs,
            6,
        );
    }
}

#[test]
fn softmax_backward_passes_fd() {
    let mut r = rng(17);
    let inputs = vec![random_tensor(vec![3, 5], &mut r)];
    check(
        OpGradPair {
            forward: Box::new(|xs| Ok(ops::softmax_lastdim(&xs[0]))),
            backward: Box::new(|xs, dy| {
                let y = ops::softmax_lastdim(&xs[0]);
                Ok(vec![ops::softmax_lastdim_backward(&y, dy)])
            }),
        },
        &inputs,
        7,
    );
}

#[test]
fn bmm_backwards_pass_fd() {
    let mut r = rng(18);
    let inputs = vec![
        random_tensor(vec![2, 3, 4], &mut r),
        random_tensor(vec![2, 4, 5], &mut r),
    ];
    check(
        OpGradPair {
            forward: Box::new(|xs| ops::bmm(&xs[0], &xs[1])),
            backward: Box::new(|xs, dy| {
                let (da, db) = ops::bmm_backward(&xs[0], &xs[1], dy);
                Ok(vec![da, db])
            }),
        },
        &inputs,
        8,
    );
    let inputs_nt = vec![
        random_tensor(vec![2, 3, 4], &mut r),
        random_tensor(vec![2, 5, 4], &mut r),
    ];
    check(
        OpGradPair {
            forward: Box::new(|xs| ops::bmm_nt(&xs[0], &xs[1])),
            backward: Box::new(|xs, dy| {
                let (da, db) = ops::bmm_nt_backward(&xs[0], &xs[1], dy);
                Ok(vec![da, db])
            }),
        },
        &inputs_nt,
        9,
    );
}

#[test]
fn film_and_gate_backwards_pass_fd() {
    let mut r = rng(19);
    let film_inputs = vec![
        random_tensor(vec![2, 3, 2, 2], &mut r),
        random_tensor(vec![2, 3], &mut r),
        random_tensor(vec![2, 3], &mut r),
    ];
    check(
        OpGradPair {
            forward: Box::new(|xs| ops::film(&xs[0], &xs[1], &xs[2])),
            backward: Box::new(|xs, dy| {
                let (dx, dg, db) = ops::film_backward(&xs[0], &xs[1], dy);
                Ok(vec![dx, dg, db])
            }),
        },
        &film_inputs,
        10,
    );
    let gate_inputs = vec![
        random_tensor(vec![2, 3, 2, 2], &mut r),
        random_tensor(vec![2, 1, 2, 2], &mut r),
    ];
    check(
        OpGradPair {
            forward: Box::new(|xs| ops::mul_gate(&xs[0], &xs[1])),
            backward: Box::new(|xs, dy| {
                let (dx, dg) = ops::mul_gate_backward(&xs[0], &xs[1], dy);
                Ok(vec![dx, dg])
            }),
        },
        &gate_inputs,
        11,
    );
}

#[test]
fn reduce_mean_backward_passes_fd() {
    let mut r = rng(20);
    let inputs = vec![random_tensor(vec![2, 4, 3], &mut r)];
    check(
        OpGradPair {
            forward: Box::new(|xs| ops::reduce_mean(&xs[0], 1)),
            backward: Box::new(|xs, dy| {
                Ok(vec![ops::reduce_mean_backward(xs[0].shape(), 1, dy)])
            }),
        },
        &inputs,
        12,
    );
}

// ---------------------------------------------------------------------------
// property-based invariants

mod properties {
    use super::*;
    use proptest::prelude::*;

    fn small_matrix() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
        (1usize..5, 1usize..6).prop_flat_map(|(r, c)| {
            (
                Just(r),
                Just(c),
                proptest::collection::vec(-10.0..10.0f64, r * c),
            )
        })
    }

    proptest! {
        #[test]
        fn softmax_rows_always_sum_to_one((r, c, vals) in small_matrix()) {
            let x = Tensor::new(vec![r, c], vals).unwrap();
            let y = ops::softmax_lastdim(&x);
            for row in 0..r {
                let s: f64 = y.data()[row * c..(row + 1) * c].iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
                prop_assert!(y.data()[row * c..(row + 1) * c].iter().all(|v| *v >= 0.0));
            }
        }

        #[test]
        fn concat_then_split_is_identity((r, c, vals) in small_matrix()) {
            let a = Tensor::new(vec![1, r, 2, 2], vec![0.5; r * 4]).unwrap();
            let b = Tensor::new(vec![1, c, 2, 2], {
                let mut v = vals.clone();
                v.resize(c * 4, 0.25);
                v.truncate(c * 4);
                v
            })
            .unwrap();
            let cat = ops::concat_channels(&a, &b).unwrap();
            let (a2, b2) = ops::split_channels(&cat, r);
            prop_assert_eq!(a.data(), a2.data());
            prop_assert_eq!(b.data(), b2.data());
        }

        #[test]
        fn gelu_is_monotone_above_minus_one(x in -0.7..30.0f64, dx in 0.001..1.0f64) {
            // gelu is increasing on [-0.75, inf)
            prop_assert!(ops::gelu_scalar(x + dx) >= ops::gelu_scalar(x));
        }
    }
}
