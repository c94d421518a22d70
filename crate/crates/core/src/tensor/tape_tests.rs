use super::*;
use crate::error::Error;
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

fn seq(shape: &[usize], seed: u64) -> Tensor<f64> {
    // deterministic, irregular values in roughly [-1, 1]
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|i| ((i as f64 + 1.0) * 0.618_034 + seed as f64 * 0.377).sin() * 0.9).collect();
    t(shape, &data)
}

const TOL: f64 = 1e-5;

#[test]
fn matmul_identity() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    let i = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
    let y = tape.matmul(a, i).unwrap();
    assert_eq!(tape.value(y).data(), &[1., 2., 3., 4.]);
}

#[test]
fn mean_value_and_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[3], &[2., 4., 6.]));
    let m = tape.mean(x).unwrap();
    assert_eq!(tape.value(m).item(), 4.0);
    tape.backward(m).unwrap();
    for g in tape.grad(x).unwrap().data() {
        assert!((g - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn gelu_at_origin() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::scalar(0.0));
    let y = tape.gelu(x).unwrap();
    assert_eq!(tape.value(y).item(), 0.0);
    tape.backward(y).unwrap();
    assert!((tape.grad(x).unwrap().item() - 0.5).abs() < 1e-15);
}

#[test]
fn cross_entropy_reference_values() {
    let mut tape = Tape::<f64>::new();
    let uniform = tape.constant(t(&[1, 5], &[0.3; 5]));
    let l = tape.cross_entropy(uniform, &[2]).unwrap();
    assert!((tape.value(l).item() - 5f64.ln()).abs() < 1e-12);

    let sat = tape.constant(t(&[1, 3], &[0., 1e6, 0.]));
    let l = tape.cross_entropy(sat, &[1]).unwrap();
    assert!(tape.value(l).item().abs() < 1e-12);

    let x = tape.leaf(t(&[1, 3], &[1., 0., 0.]));
    let l = tape.cross_entropy(x, &[0]).unwrap();
    let e = 1f64.exp();
    assert!((tape.value(l).item() - (-(e / (e + 2.0)).ln())).abs() < 1e-12);
    assert!((tape.value(l).item() - 0.5514).abs() < 1e-4);
    tape.backward(l).unwrap();
    // (softmax - onehot) / N
    let g = tape.grad(x).unwrap();
    assert!((g.data()[0] - (e / (e + 2.0) - 1.0)).abs() < 1e-12);
    assert!((g.data()[1] - 1.0 / (e + 2.0)).abs() < 1e-12);
}

#[test]
fn cross_entropy_rejects_bad_target() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1, 3], &[0.; 3]));
    assert!(matches!(tape.cross_entropy(x, &[3]), Err(Error::Invalid { op: "cross_entropy", .. })));
}

#[test]
fn mse_reference_values() {
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(t(&[2], &[0., 0.]));
    let q = tape.constant(t(&[2], &[1., 3.]));
    let l = tape.mse(p, q).unwrap();
    assert_eq!(tape.value(l).item(), 5.0);
    let l0 = tape.mse(p, p).unwrap();
    assert_eq!(tape.value(l0).item(), 0.0);

    let mut tape = Tape::<f64>::new();
    let p = tape.leaf(t(&[1], &[2.]));
    let q = tape.constant(t(&[1], &[0.]));
    let l = tape.mse(p, q).unwrap();
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(p).unwrap().item(), 4.0);
}

#[test]
fn mse_shape_mismatch_names_op_and_shapes() {
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(t(&[2], &[0., 0.]));
    let q = tape.constant(t(&[3], &[0., 0., 0.]));
    let err = tape.mse(p, q).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("mse") && msg.contains("[2]") && msg.contains("[3]"), "{msg}");
}

#[test]
fn cosine_reference_values() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(t(&[3, 2], &[3., 4., 1., 0., 1., 1.]));
    let b = tape.constant(t(&[3, 2], &[3., 4., 0., 1., 1., 0.]));
    let c = tape.cosine_rows(a, b).unwrap();
    let v = tape.value(c).data();
    assert!((v[0] - 1.0).abs() < 1e-15);
    assert!(v[1].abs() < 1e-15);
    assert!((v[2] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
}

#[test]
fn degenerate_cosine_is_zero_with_zero_gradient() {
    let mut tape = Tape::<f64>::new();
    let a = tape.leaf(t(&[1, 2], &[0., 0.]));
    let b = tape.leaf(t(&[1, 2], &[1., 2.]));
    let c = tape.cosine_rows(a, b).unwrap();
    let s = tape.sum(c).unwrap();
    assert_eq!(tape.value(s).item(), 0.0);
    tape.backward(s).unwrap();
    assert!(tape.grad(a).unwrap().data().iter().all(|&g| g == 0.0));
    assert!(tape.grad(b).unwrap().data().iter().all(|&g| g == 0.0));
}

#[test]
fn matmul_shape_error_is_descriptive() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    match tape.matmul(a, b) {
        Err(Error::Shape { op, lhs, rhs }) => {
            assert_eq!(op, "matmul");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn second_backward_is_an_error() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::scalar(1.0));
    let y = tape.square(x).unwrap();
    tape.backward(y).unwrap();
    assert!(matches!(tape.backward(y), Err(Error::BackwardTwice)));
    tape.reset();
    let x = tape.leaf(Tensor::scalar(1.0));
    let y = tape.square(x).unwrap();
    assert!(tape.backward(y).is_ok());
}

#[test]
fn overflow_surfaces_as_error_naming_op() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::scalar(1000.0));
    assert!(matches!(tape.exp(x), Err(Error::NonFinite { op: "exp" })));
    let y = tape.constant(Tensor::scalar(-1.0));
    assert!(matches!(tape.log(y), Err(Error::Invalid { op: "log", .. })));
}

#[test]
fn fan_out_accumulates() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::scalar(3.0));
    let y = tape.mul(x, x).unwrap();
    let z = tape.add(y, x).unwrap();
    tape.backward(z).unwrap();
    assert_eq!(tape.grad(x).unwrap().item(), 7.0);
}

#[test]
fn backward_is_bit_deterministic() {
    let run = || {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(seq(&[6, 8], 1).cast());
        let w = tape.leaf(seq(&[8, 8], 2).cast());
        let h = tape.linear(x, w, None).unwrap();
        let segs = Segments::from_lengths(&[2, 4]);
        let a = tape.attention(h, h, h, &segs, 2).unwrap();
        let g = tape.gelu(a).unwrap();
        let l = tape.mean(g).unwrap();
        tape.backward(l).unwrap();
        (tape.grad(x).unwrap(), tape.grad(w).unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn sum_of_squares_gradient_check() {
    let x = seq(&[7], 3);
    let err = finite_difference_check(
        |tp, x| {
            let s = tp.square(x)?;
            tp.sum(s)
        },
        &x,
        1e-3,
    )
    .unwrap();
    assert!(err <= 1e-6, "{err}");
}

/// Reduce any output to a scalar through fixed irregular weights so that
/// every output coordinate carries a distinct gradient.
fn weighted_sum(tp: &mut Tape<f64>, y: Var) -> crate::Result<Var> {
    let shape = tp.shape(y).to_vec();
    let w = tp.constant(seq(&shape, 99));
    let p = tp.mul(y, w)?;
    tp.sum(p)
}

fn check(name: &str, x: Tensor<f64>, f: impl Fn(&mut Tape<f64>, Var) -> crate::Result<Var>) {
    let err = finite_difference_check(
        |tp, x| {
            let y = f(tp, x)?;
            weighted_sum(tp, y)
        },
        &x,
        1e-3,
    )
    .unwrap();
    assert!(err <= TOL, "{name}: relative error {err}");
}

#[test]
fn every_differentiable_op_passes_gradient_check() {
    let x = seq(&[4, 6], 0);
    let c = seq(&[4, 6], 5);
    let row = seq(&[6], 7);
    check("add", x.clone(), |tp, x| {
        let c = tp.constant(c.clone());
        tp.add(x, c)
    });
    check("sub", x.clone(), |tp, x| {
        let c = tp.constant(c.clone());
        tp.sub(c, x)
    });
    check("mul", x.clone(), |tp, x| tp.mul(x, x));
    check("add_row", x.clone(), |tp, x| {
        let r = tp.slice_rows(x, 1, 1)?;
        tp.add_row(x, r)
    });
    check("mul_row", x.clone(), |tp, x| {
        let r = tp.constant(row.clone());
        let y = tp.mul_row(x, r)?;
        let r2 = tp.slice_rows(x, 2, 1)?;
        tp.mul_row(y, r2)
    });
    check("scale", x.clone(), |tp, x| tp.scale(x, -1.7));
    check("add_scalar", x.clone(), |tp, x| tp.add_scalar(x, 0.3));
    check("mul_scalar_var", x.clone(), |tp, x| {
        let s = tp.slice_cols(x, 0, 1)?;
        let s = tp.slice_rows(s, 0, 1)?;
        let s = tp.reshape(s, &[1])?;
        tp.mul_scalar_var(x, s)
    });
    check("recip", x.clone(), |tp, x| {
        let y = tp.add_scalar(x, 2.0)?;
        tp.recip(y)
    });
    check("matmul", x.clone(), |tp, x| {
        let w = tp.constant(seq(&[6, 3], 11));
        tp.matmul(x, w)
    });
    check("matmul_t", x.clone(), |tp, x| tp.matmul_t(x, x, true));
    check("matmul_rhs", seq(&[6, 3], 12), |tp, w| {
        let x = tp.constant(seq(&[4, 6], 13));
        tp.matmul(x, w)
    });
    check("linear", seq(&[6, 5], 2), |tp, w| {
        let x = tp.constant(seq(&[4, 6], 3));
        let b = tp.slice_rows(w, 0, 1)?;
        let b = tp.reshape(b, &[5])?;
        tp.linear(x, w, Some(b))
    });
    check("linear_x", x.clone(), |tp, x| {
        let w = tp.constant(seq(&[6, 5], 2));
        tp.linear(x, w, None)
    });
    check("gelu", x.clone(), |tp, x| tp.gelu(x));
    check("silu", x.clone(), |tp, x| tp.silu(x));
    check("tanh", x.clone(), |tp, x| tp.tanh(x));
    check("exp", x.clone(), |tp, x| tp.exp(x));
    check("log", x.clone(), |tp, x| {
        let y = tp.add_scalar(x, 1.5)?;
        tp.log(y)
    });
    check("square", x.clone(), |tp, x| tp.square(x));
    check("sum", x.clone(), |tp, x| tp.sum(x));
    check("mean", x.clone(), |tp, x| tp.mean(x));
    check("segment_mean", x.clone(), |tp, x| tp.segment_mean(x, &Segments::from_lengths(&[1, 3])));
    check("concat_cols", x.clone(), |tp, x| {
        let a = tp.slice_cols(x, 0, 2)?;
        tp.concat_cols(&[x, a, x])
    });
    check("concat_rows", x.clone(), |tp, x| {
        let a = tp.slice_rows(x, 1, 2)?;
        tp.concat_rows(&[a, x])
    });
    check("transpose", x.clone(), |tp, x| tp.transpose(x));
    check("gather", x.clone(), |tp, x| tp.gather_rows(x, &[Some(3), None, Some(0), Some(3), Some(1)]));
    check("mask_rows", x.clone(), |tp, x| tp.mask_rows(x, &[true, false, true, true]));
    check("layer_norm", x.clone(), |tp, x| tp.layer_norm(x, 1e-5));
    check("l2_normalize_rows", x.clone(), |tp, x| tp.l2_normalize_rows(x));
    check("cosine", x.clone(), |tp, x| {
        let c = tp.constant(c.clone());
        tp.cosine_rows(x, c)
    });
    check("cross_entropy", x.clone(), |tp, x| tp.cross_entropy(x, &[0, 5, 2, 2]));
    check("mse_masked", x.clone(), |tp, x| {
        let c = tp.constant(c.clone());
        tp.mse_masked(x, c, Some(&[true, false, true, true]))
    });
    check("attention", seq(&[7, 8], 4), |tp, x| {
        let segs = Segments::from_lengths(&[3, 4]);
        let wq = tp.constant(seq(&[8, 8], 21));
        let wk = tp.constant(seq(&[8, 8], 22));
        let q = tp.matmul(x, wq)?;
        let k = tp.matmul(x, wk)?;
        tp.attention(q, k, x, &segs, 2)
    });
}

#[test]
fn detach_blocks_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::scalar(2.0));
    let d = tape.detach(x);
    let y = tape.mul(d, x).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap().item(), 2.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn matmul_gradients_match_differences(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in 0u64..1000) {
        let a = seq(&[m, k], seed);
        let b = seq(&[k, n], seed + 1);
        let err = finite_difference_check(|tp, a| {
            let b = tp.constant(b.clone());
            let y = tp.matmul(a, b)?;
            weighted_sum(tp, y)
        }, &a, 1e-3).unwrap();
        prop_assert!(err <= TOL);
    }
}
