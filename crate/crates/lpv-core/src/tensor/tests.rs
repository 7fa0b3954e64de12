use super::*;
use crate::rng::Rng;
use proptest::prelude::{proptest, prop_assert, prop_assert_eq, ProptestConfig};

fn randt(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.normal()).collect();
    Tensor::constant(shape, data).unwrap()
}

/// Random values kept away from 0 so relu's kink never meets the
/// finite-difference stencil.
fn randt_off_zero(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.normal();
            v + 0.2 * v.signum()
        })
        .collect();
    Tensor::constant(shape, data).unwrap()
}

const FD_EPS: f64 = 1e-5;

#[test]
fn matmul_identity() {
    let eye = Tensor::<f64>::constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let x = Tensor::constant(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let y = eye.matmul(&x).unwrap();
    assert_eq!(y.data(), x.data());
}

#[test]
fn matmul_hand_arithmetic() {
    let a = Tensor::<f64>::constant(&[1, 2], vec![1.0, 2.0]).unwrap();
    let b = Tensor::constant(&[2, 1], vec![3.0, 4.0]).unwrap();
    let c = a.matmul(&b).unwrap();
    assert_eq!(c.shape(), &[1, 1]);
    assert_eq!(c.data(), &[11.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let a = Tensor::<f64>::zeros(&[2, 3]);
    let b = Tensor::<f64>::zeros(&[4, 2]);
    let err = a.matmul(&b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

// Oracle: the textbook triple loop, kept independent of matmul_raw's
// loop order.
fn matmul_reference(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

#[test]
fn matmul_matches_triple_loop_bit_for_bit() {
    let mut rng = Rng::new(11);
    for _ in 0..50 {
        let m = 1 + rng.below(16);
        let k = 1 + rng.below(16);
        let n = 1 + rng.below(16);
        let a = randt(&mut rng, &[m, k]);
        let b = randt(&mut rng, &[k, n]);
        let got = a.matmul(&b).unwrap();
        let want = matmul_reference(a.data(), b.data(), m, k, n);
        assert_eq!(got.data(), want.as_slice());
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = Rng::new(5);
    let a = randt(&mut rng, &[3, 4]);
    let b = randt(&mut rng, &[4, 2]);
    let err_a = finite_diff_check(|t| Ok(t.matmul(&b)?.sum_all()), &a, FD_EPS).unwrap();
    let err_b = finite_diff_check(|t| Ok(a.matmul(t)?.sum_all()), &b, FD_EPS).unwrap();
    assert!(err_a < 1e-6, "dA rel err {err_a}");
    assert!(err_b < 1e-6, "dB rel err {err_b}");
}

#[test]
fn softmax_of_constant_row_is_uniform() {
    let x = Tensor::<f64>::constant(&[1, 3], vec![0.0, 0.0, 0.0]).unwrap();
    let y = x.softmax_lastdim(None).unwrap();
    for &v in y.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn masked_softmax_zeroes_and_renormalizes() {
    let x = Tensor::<f64>::constant(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
    let m = Tensor::constant(&[1, 3], vec![0.0, MASK_SENTINEL_F64, 0.0]).unwrap();
    let y = x.softmax_lastdim(Some(&m)).unwrap();
    assert_eq!(y.data()[1], 0.0);
    let denom = 1f64.exp() + 3f64.exp();
    assert!((y.data()[0] - 1f64.exp() / denom).abs() < 1e-12);
    assert!((y.data()[2] - 3f64.exp() / denom).abs() < 1e-12);
    assert!((y.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn softmax_all_masked_row_is_contract_violation() {
    let x = Tensor::<f64>::constant(&[1, 2], vec![1.0, 2.0]).unwrap();
    let m = Tensor::constant(&[1, 2], vec![MASK_SENTINEL_F64; 2]).unwrap();
    assert!(matches!(
        x.softmax_lastdim(Some(&m)),
        Err(Error::Contract(_))
    ));
}

#[test]
fn softmax_zero_mask_is_bit_identical_to_no_mask() {
    let mut rng = Rng::new(2);
    let x = randt(&mut rng, &[4, 7]);
    let zero_mask = Tensor::zeros(&[4, 7]);
    let a = x.softmax_lastdim(None).unwrap();
    let b = x.softmax_lastdim(Some(&zero_mask)).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    let mut rng = Rng::new(6);
    let x = randt(&mut rng, &[2, 5]);
    // A weighted sum exercises the full Jacobian (plain sum-of-softmax is
    // the constant 2.0, checked separately below).
    let wts = randt(&mut rng, &[2, 5]);
    let err = finite_diff_check(
        |t| Ok(t.softmax_lastdim(None)?.mul(&wts)?.sum_all()),
        &x,
        FD_EPS,
    )
    .unwrap();
    assert!(err < 1e-6, "weighted rel err {err}");
}

#[test]
fn softmax_then_sum_has_vanishing_gradient() {
    // sum(softmax(x)) ≡ #rows, so both the analytic gradient and the
    // difference quotient must vanish to rounding.
    let mut rng = Rng::new(61);
    let x = randt(&mut rng, &[2, 5]).as_param();
    let f = |t: &Tensor<f64>| -> crate::Result<Tensor<f64>> {
        Ok(t.softmax_lastdim(None)?.sum_all())
    };
    f(&x).unwrap().backward().unwrap();
    for &g in &x.grad().unwrap() {
        assert!(g.abs() < 1e-12, "analytic {g}");
    }
    let base = f(&x).unwrap().value().unwrap();
    for i in 0..x.len() {
        let mut plus = x.data().to_vec();
        plus[i] += FD_EPS;
        let fp = f(&Tensor::constant(x.shape(), plus).unwrap())
            .unwrap()
            .value()
            .unwrap();
        assert!((fp - base).abs() / (2.0 * FD_EPS) < 1e-8, "coord {i}");
    }
}

#[test]
fn backward_of_sum_is_ones() {
    let x = Tensor::<f64>::param(&[2, 3], vec![5.0; 6]).unwrap();
    x.sum_all().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
}

#[test]
fn backward_of_sum_of_squares() {
    let x = Tensor::<f64>::param(&[2], vec![1.0, 2.0]).unwrap();
    x.mul(&x).unwrap().sum_all().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
}

#[test]
fn backward_requires_scalar() {
    let x = Tensor::<f64>::param(&[2], vec![1.0, 2.0]).unwrap();
    assert!(x.scale(2.0).backward().is_err());
}

#[test]
fn backward_accumulates_across_calls() {
    let x = Tensor::<f64>::param(&[2], vec![1.0, 2.0]).unwrap();
    x.sum_all().backward().unwrap();
    x.sum_all().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    x.clear_grad();
    assert!(x.grad().is_none());
}

#[test]
fn diamond_graph_accumulates_both_paths() {
    // y = sum(x) + sum(x·x) at x=[1,2] ⇒ grad = 1 + 2x = [3,5]
    let x = Tensor::<f64>::param(&[2], vec![1.0, 2.0]).unwrap();
    let y = x.sum_all().add(&x.mul(&x).unwrap().sum_all()).unwrap();
    y.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![3.0, 5.0]);
}

#[test]
fn finite_diff_of_identity_sum_is_zero() {
    let mut rng = Rng::new(9);
    let x = randt(&mut rng, &[3, 3]);
    let err = finite_diff_check(|t| Ok(t.sum_all()), &x, FD_EPS).unwrap();
    assert!(err < 1e-9, "rel err {err}");
}

#[test]
fn tensors_are_send() {
    let x = Tensor::<f64>::param(&[2], vec![1.0, 2.0]).unwrap();
    let handle = std::thread::spawn(move || x.sum_all().value().unwrap());
    assert_eq!(handle.join().unwrap(), 3.0);
}

#[test]
fn value_requires_single_element() {
    assert!(Tensor::<f64>::zeros(&[2]).value().is_err());
}

// Every differentiable op against finite differences, 100 seeds each.
macro_rules! fd_sweep {
    ($name:ident, $seeds:expr, $body:expr) => {
        #[test]
        fn $name() {
            for seed in 0..$seeds {
                let mut rng = Rng::new(seed + 1000);
                #[allow(clippy::redundant_closure_call)]
                let err: f64 = ($body)(&mut rng);
                assert!(err < 1e-4, "seed {seed}: rel err {err}");
            }
        }
    };
}

fd_sweep!(fd_add, 100, |rng: &mut Rng| {
    let x = randt(rng, &[3, 4]);
    let y = randt(rng, &[3, 4]);
    finite_diff_check(|t| Ok(t.add(&y)?.sum_all()), &x, FD_EPS).unwrap()
});

fd_sweep!(fd_mul, 100, |rng: &mut Rng| {
    let x = randt(rng, &[3, 4]);
    let y = randt(rng, &[3, 4]);
    finite_diff_check(|t| Ok(t.mul(&y)?.mul(&y)?.sum_all()), &x, FD_EPS).unwrap()
});

fd_sweep!(fd_scale, 100, |rng: &mut Rng| {
    let x = randt(rng, &[4]);
    finite_diff_check(|t| Ok(t.scale(-1.7).sum_all()), &x, FD_EPS).unwrap()
});

fd_sweep!(fd_relu, 100, |rng: &mut Rng| {
    let x = randt_off_zero(rng, &[3, 4]);
    let w = randt(rng, &[3, 4]);
    finite_diff_check(|t| Ok(t.relu().mul(&w)?.sum_all()), &x, FD_EPS).unwrap()
});

fd_sweep!(fd_add_bias, 100, |rng: &mut Rng| {
    let x = randt(rng, &[3, 4]);
    let b = randt(rng, &[4]);
    let ex = finite_diff_check(|t| Ok(t.add_bias(&b)?.mul(&x)?.sum_all()), &x, FD_EPS).unwrap();
    let eb = finite_diff_check(|t| Ok(x.add_bias(t)?.mul(&x)?.sum_all()), &b, FD_EPS).unwrap();
    ex.max(eb)
});

fd_sweep!(fd_matmul, 100, |rng: &mut Rng| {
    let a = randt(rng, &[2, 3]);
    let b = randt(rng, &[3, 4]);
    let ea = finite_diff_check(|t| Ok(t.matmul(&b)?.mul(&t.matmul(&b)?)?.sum_all()), &a, FD_EPS)
        .unwrap();
    let eb = finite_diff_check(|t| Ok(a.matmul(t)?.sum_all()), &b, FD_EPS).unwrap();
    ea.max(eb)
});

fd_sweep!(fd_transpose, 100, |rng: &mut Rng| {
    let x = randt(rng, &[3, 5]);
    let w = randt(rng, &[5, 3]);
    finite_diff_check(|t| Ok(t.t()?.mul(&w)?.sum_all()), &x, FD_EPS).unwrap()
});

fd_sweep!(fd_reshape, 100, |rng: &mut Rng| {
    let x = randt(rng, &[2, 6]);
    let w = randt(rng, &[3, 4]);
    finite_diff_check(|t| Ok(t.reshape(&[3, 4])?.mul(&w)?.sum_all()), &x, FD_EPS).unwrap()
});

fd_sweep!(fd_slice_concat, 100, |rng: &mut Rng| {
    let x = randt(rng, &[3, 6]);
    let w = randt(rng, &[3, 8]);
    finite_diff_check(
        |t| {
            let left = t.slice_cols(0, 2)?;
            let right = t.slice_cols(2, 4)?;
            let cat = Tensor::concat_cols(&[right, left, t.slice_cols(4, 2)?])?;
            Ok(cat.mul(&w)?.sum_all())
        },
        &x,
        FD_EPS,
    )
    .unwrap()
});

fd_sweep!(fd_softmax_masked, 100, |rng: &mut Rng| {
    let x = randt(rng, &[3, 5]);
    let w = randt(rng, &[3, 5]);
    // Random mask; keep at least one open slot per row.
    let mut mdata = vec![0.0; 15];
    for r in 0..3 {
        let keep = rng.below(5);
        for c in 0..5 {
            if c != keep && rng.uniform() < 0.4 {
                mdata[r * 5 + c] = MASK_SENTINEL_F64;
            }
        }
    }
    let mask = Tensor::constant(&[3, 5], mdata).unwrap();
    finite_diff_check(
        |t| Ok(t.softmax_lastdim(Some(&mask))?.mul(&w)?.sum_all()),
        &x,
        FD_EPS,
    )
    .unwrap()
});

fd_sweep!(fd_layernorm, 100, |rng: &mut Rng| {
    let x = randt(rng, &[3, 6]);
    let gamma = randt(rng, &[6]);
    let beta = randt(rng, &[6]);
    let w = randt(rng, &[3, 6]);
    let ex = finite_diff_check(
        |t| Ok(t.layernorm(&gamma, &beta, 1e-5)?.mul(&w)?.sum_all()),
        &x,
        FD_EPS,
    )
    .unwrap();
    let eg = finite_diff_check(
        |t| Ok(x.layernorm(t, &beta, 1e-5)?.mul(&w)?.sum_all()),
        &gamma,
        FD_EPS,
    )
    .unwrap();
    let eb = finite_diff_check(
        |t| Ok(x.layernorm(&gamma, t, 1e-5)?.mul(&w)?.sum_all()),
        &beta,
        FD_EPS,
    )
    .unwrap();
    ex.max(eg).max(eb)
});

fd_sweep!(fd_conv2d, 25, |rng: &mut Rng| {
    let x = randt(rng, &[4, 4, 2]);
    let w = randt(rng, &[3, 3, 2, 2]);
    let b = randt(rng, &[2]);
    let ex = finite_diff_check(|t| Ok(t.conv2d(&w, &b, 1, 1)?.sum_all()), &x, FD_EPS).unwrap();
    let ew = finite_diff_check(|t| Ok(x.conv2d(t, &b, 1, 1)?.sum_all()), &w, FD_EPS).unwrap();
    let eb = finite_diff_check(|t| Ok(x.conv2d(&w, t, 1, 1)?.sum_all()), &b, FD_EPS).unwrap();
    let es = finite_diff_check(|t| Ok(t.conv2d(&w, &b, 2, 1)?.sum_all()), &x, FD_EPS).unwrap();
    ex.max(ew).max(eb).max(es)
});

fd_sweep!(fd_upsample2x, 100, |rng: &mut Rng| {
    let x = randt(rng, &[2, 3, 2]);
    let w = randt(rng, &[4, 6, 2]);
    finite_diff_check(|t| Ok(t.upsample2x()?.mul(&w)?.sum_all()), &x, FD_EPS).unwrap()
});

fd_sweep!(fd_ce_mean, 100, |rng: &mut Rng| {
    let x = randt(rng, &[4, 5]);
    let targets: Vec<usize> = (0..4).map(|_| rng.below(5)).collect();
    finite_diff_check(|t| t.ce_mean(&targets), &x, FD_EPS).unwrap()
});

#[test]
fn ce_mean_rejects_out_of_range_labels() {
    let x = Tensor::<f64>::zeros(&[2, 3]);
    assert!(matches!(x.ce_mean(&[0, 3]), Err(Error::Data(_))));
}

#[test]
fn ce_mean_uniform_logits_is_ln_c() {
    let x = Tensor::<f64>::zeros(&[4, 38]);
    let loss = x.ce_mean(&[0, 5, 11, 37]).unwrap().value().unwrap();
    assert!((loss - (38f64).ln()).abs() < 1e-12);
    assert!((loss - 3.63759).abs() < 1e-5);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..5, cols in 1usize..9, seed in 0u64..1_000_000) {
        let mut rng = Rng::new(seed);
        let n = rows * cols;
        let data: Vec<f64> = (0..n).map(|_| rng.range(-30.0, 30.0)).collect();
        let x = Tensor::constant(&[rows, cols], data).unwrap();
        let y = x.softmax_lastdim(None).unwrap();
        for r in 0..rows {
            let s: f64 = y.data()[r * cols..(r + 1) * cols].iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(y.data()[r * cols..(r + 1) * cols].iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn masked_softmax_rows_sum_to_one_with_exact_zeros(
        rows in 1usize..4, cols in 2usize..8, seed in 0u64..1_000_000
    ) {
        let mut rng = Rng::new(seed);
        let n = rows * cols;
        let data: Vec<f64> = (0..n).map(|_| rng.range(-10.0, 10.0)).collect();
        let mut mdata = vec![0.0; n];
        for r in 0..rows {
            let keep = rng.below(cols);
            for c in 0..cols {
                if c != keep && rng.uniform() < 0.5 {
                    mdata[r * cols + c] = MASK_SENTINEL_F64;
                }
            }
        }
        let x = Tensor::constant(&[rows, cols], data).unwrap();
        let mask = Tensor::constant(&[rows, cols], mdata.clone()).unwrap();
        let y = x.softmax_lastdim(Some(&mask)).unwrap();
        for r in 0..rows {
            let s: f64 = y.data()[r * cols..(r + 1) * cols].iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            for c in 0..cols {
                if mdata[r * cols + c] != 0.0 {
                    prop_assert_eq!(y.data()[r * cols + c], 0.0);
                }
            }
        }
    }
}
