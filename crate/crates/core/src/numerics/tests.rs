use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn rand64(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Reduces any output to a scalar with fixed non-uniform weights so that no
/// gradient vanishes by symmetry.
fn project(tape: &mut Tape<f64>, x: Var) -> crate::Result<Var> {
    let n = tape.value(x).numel();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect();
    tape.weighted_sum(x, &w)
}

const OP_TOL: f64 = 1e-5;
const EPS: f64 = 1e-6;

#[test]
fn matmul_identity() {
    let mut tape = Tape::<f64>::new();
    let id = tape.constant(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let x = tape.constant(t64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let y = tape.matmul(id, x).unwrap();
    assert_eq!(tape.value(y), tape.value(x));
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros(vec![3]));
    let y = tape.softmax(x).unwrap();
    for &v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn concat_token_axis_shape() {
    let mut tape = Tape::<f64>::new();
    let v = tape.constant(Tensor::zeros(vec![2, 4]));
    let t = tape.constant(Tensor::zeros(vec![3, 4]));
    let e = tape.concat_rows(&[v, t]).unwrap();
    assert_eq!(tape.shape(e), &[5, 4]);
}

#[test]
fn shape_mismatch_names_op_and_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3]));
    let b = tape.constant(Tensor::zeros(vec![2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    match &err {
        Error::Shape { op, lhs, rhs } => {
            assert_eq!(*op, "matmul");
            assert_eq!(lhs, &[2, 3]);
            assert_eq!(rhs, &[2, 3]);
        }
        other => panic!("unexpected error {other:?}"),
    }
    assert!(err.to_string().contains("matmul"));
}

#[test]
fn non_finite_results_are_rejected() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[2], &[1e308, 1e308]));
    let err = tape.add(x, x).unwrap_err();
    assert!(matches!(err, Error::NonFinite { op: "add" }));
}

#[test]
fn rms_norm_examples() {
    let mut tape = Tape::<f64>::new();
    let ones = tape.constant(Tensor::ones(vec![4]));
    let x = tape.constant(Tensor::ones(vec![1, 4]));
    let y = tape.rms_norm(x, ones, 0.0).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0; 4]);

    let g2 = tape.constant(Tensor::ones(vec![2]));
    let x = tape.constant(t64(&[1, 2], &[3.0, 4.0]));
    let y = tape.rms_norm(x, g2, 0.0).unwrap();
    let got = tape.value(y).data();
    assert!((got[0] - 0.848_528_14).abs() < 1e-8);
    assert!((got[1] - 1.131_370_85).abs() < 1e-8);

    for c in [0.5, 3.0, 1234.5] {
        let g = tape.constant(Tensor::ones(vec![5]));
        let x = tape.constant(Tensor::full(vec![1, 5], c));
        let y = tape.rms_norm(x, g, 0.0).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0).abs() < 1e-14);
        }
    }
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::<f64>::new();
    let uniform = tape.constant(Tensor::full(vec![1, 4], 0.3));
    for t in 0..4 {
        let l = tape.cross_entropy(uniform, &[t]).unwrap();
        assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-12);
    }

    let mut peaked = vec![0.0; 5];
    peaked[2] = 1e6;
    let x = tape.constant(t64(&[1, 5], &peaked));
    let l = tape.cross_entropy(x, &[2]).unwrap();
    assert!(tape.value(l).item().abs() < 1e-12);

    let x = tape.constant(t64(&[1, 3], &[1.0, 2.0, 3.0]));
    let l = tape.cross_entropy(x, &[2]).unwrap();
    assert!((tape.value(l).item() - 0.407_605_96).abs() < 1e-7);

    let err = tape.cross_entropy(x, &[3]).unwrap_err();
    assert!(matches!(err, Error::OutOfRange { index: 3, limit: 3, .. }));
}

#[test]
fn cross_entropy_is_non_negative() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(rand64(&[6, 9], 4));
    let l = tape.cross_entropy(x, &[0, 1, 2, 3, 4, 8]).unwrap();
    assert!(tape.value(l).data().iter().all(|&v| v >= 0.0));
}

#[test]
fn grad_check_sum_of_squares() {
    let x = rand64(&[3, 4], 1);
    let err = grad_check(
        |tape, v| {
            let sq = tape.mul(v, v)?;
            tape.sum(sq)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn grad_check_constant_function() {
    let x = rand64(&[5], 2);
    let err = grad_check(
        |tape, _| Ok(tape.constant(Tensor::scalar(3.0))),
        &x,
        1e-5,
    )
    .unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn grad_check_rejects_bad_step_and_non_finite() {
    let x = rand64(&[2], 3);
    assert!(grad_check(|t, v| t.sum(v), &x, 1e-2).is_err());
    let err = grad_check(
        |t, _| Ok(t.constant(Tensor::scalar(f64::NAN))),
        &x,
        1e-6,
    )
    .unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }));
}

fn check_unary(name: &str, x: Tensor<f64>, op: impl Fn(&mut Tape<f64>, Var) -> crate::Result<Var>) {
    let err = grad_check(
        |tape, v| {
            let y = op(tape, v)?;
            project(tape, y)
        },
        &x,
        EPS,
    )
    .unwrap();
    assert!(err < OP_TOL, "{name}: {err}");
}

fn check_many(
    name: &str,
    xs: Vec<Tensor<f64>>,
    op: impl Fn(&mut Tape<f64>, &[Var]) -> crate::Result<Var>,
) {
    let report = grad_check_many(
        |tape, v| {
            let y = op(tape, v)?;
            project(tape, y)
        },
        &xs,
        EPS,
    )
    .unwrap();
    assert!(report.max_relative_error < OP_TOL, "{name}: {report:?}");
}

#[test]
fn every_op_passes_grad_check() {
    check_many("matmul", vec![rand64(&[3, 4], 10), rand64(&[4, 2], 11)], |t, v| {
        t.matmul(v[0], v[1])
    });
    check_many("add", vec![rand64(&[3, 4], 12), rand64(&[3, 4], 13)], |t, v| {
        t.add(v[0], v[1])
    });
    check_many("mul", vec![rand64(&[3, 4], 14), rand64(&[3, 4], 15)], |t, v| {
        t.mul(v[0], v[1])
    });
    check_many("mul_row", vec![rand64(&[3, 4], 16), rand64(&[4], 17)], |t, v| {
        t.mul_row(v[0], v[1])
    });
    check_unary("scale", rand64(&[3, 2], 18), |t, v| t.scale(v, -1.7));
    check_unary("transpose", rand64(&[3, 5], 19), |t, v| t.transpose(v));
    check_many("concat_rows", vec![rand64(&[2, 3], 20), rand64(&[4, 3], 21)], |t, v| {
        t.concat_rows(v)
    });
    check_unary("slice_rows", rand64(&[5, 3], 22), |t, v| t.slice_rows(v, 1, 3));
    check_unary("gather_rows", rand64(&[5, 3], 23), |t, v| t.gather_rows(v, &[4, 0, 4, 2]));
    check_many("scatter_rows", vec![rand64(&[2, 3], 24), rand64(&[3, 3], 25)], |t, v| {
        t.scatter_rows(&[(v[0], &[4, 0][..]), (v[1], &[1, 3, 2][..])], 5)
    });
    check_unary("softmax", rand64(&[3, 5], 26), |t, v| t.softmax(v));
    check_unary("silu", rand64(&[4, 4], 27), |t, v| t.silu(v));
    check_unary("embedding", rand64(&[6, 3], 28), |t, v| t.embedding(v, &[5, 1, 1, 0]));
    check_unary("sum", rand64(&[3, 3], 29), |t, v| t.sum(v));
    check_unary("mean", rand64(&[3, 3], 30), |t, v| t.mean(v));
    check_many("rms_norm", vec![rand64(&[4, 6], 31), rand64(&[6], 32)], |t, v| {
        t.rms_norm(v[0], v[1], 1e-6)
    });
    check_unary("rope", rand64(&[5, 8], 33), |t, v| t.rope(v, 2, &[0, 1, 2, 7, 9], 10_000.0));
    check_many(
        "causal_attention",
        vec![rand64(&[7, 8], 34), rand64(&[7, 8], 35), rand64(&[7, 8], 36)],
        |t, v| t.causal_attention(v[0], v[1], v[2], 2, &[(0, 3), (3, 4)]),
    );
    check_unary("cross_entropy", rand64(&[4, 7], 37), |t, v| {
        t.cross_entropy(v, &[0, 6, 3, 3])
    });
}

#[test]
fn backward_reaches_only_dependencies() {
    let mut tape = Tape::<f64>::new();
    let a = tape.param(rand64(&[2, 2], 40));
    let b = tape.param(rand64(&[2, 2], 41));
    let c = tape.constant(rand64(&[2, 2], 42));
    let ac = tape.mul(a, c).unwrap();
    let loss = tape.sum(ac).unwrap();
    let _unused = tape.sum(b).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(a).unwrap(), tape.value(c));
    assert!(grads.get(b).is_none());
    assert!(grads.get(c).is_none());
}

#[test]
fn causal_attention_ignores_future_tokens() {
    let q = rand64(&[4, 4], 50);
    let k = rand64(&[4, 4], 51);
    let v = rand64(&[4, 4], 52);
    let mut tape = Tape::<f64>::new();
    let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let out = tape.causal_attention(qv, kv, vv, 2, &[(0, 4)]).unwrap();
    let before = tape.value(out).row(1).to_vec();

    let mut v2 = v.clone();
    for x in &mut v2.data_mut()[8..] {
        *x += 10.0;
    }
    let vv2 = tape.constant(v2);
    let out2 = tape.causal_attention(qv, kv, vv2, 2, &[(0, 4)]).unwrap();
    assert_eq!(tape.value(out2).row(1), &before[..]);
    // first token attends only to itself
    assert_eq!(tape.value(out).row(0), v.row(0));
}

proptest! {
    #[test]
    fn concat_split_is_identity(rows in 1usize..8, cols in 1usize..5, seed in 0u64..1000, at_frac in 0.0f64..=1.0) {
        let x = rand64(&[rows, cols], seed);
        let at = ((rows as f64) * at_frac).floor() as usize;
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(x.clone());
        let (a, b) = tape.split_rows(v, at).unwrap();
        let y = tape.concat_rows(&[a, b]).unwrap();
        prop_assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..9, seed in 0u64..1000, scale in 0.1f64..50.0) {
        let mut x = rand64(&[rows, cols], seed);
        x.data_mut().iter_mut().for_each(|v| *v *= scale);
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(x);
        let y = tape.softmax(v).unwrap();
        for r in 0..rows {
            let s: f64 = tape.value(y).row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
