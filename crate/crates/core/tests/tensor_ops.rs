mod common;

use affuse_core::autodiff::{Tape, Var};
use affuse_core::gradcheck::{check_gradients, GradCheckOptions};
use affuse_core::tensor::Tensor;
use affuse_core::Error;
use common::{normal, projection_loss, rng};
use rand::Rng;

fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (m, k) = a.dims2().unwrap();
    let n = b.dims2().unwrap().1;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for t in 0..k {
                out[i * n + j] += a.at(i, t) * b.at(t, j);
            }
        }
    }
    out
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(7);
    let a = normal(&[4, 5], 1.0, &mut r);
    let b = normal(&[5, 2], 1.0, &mut r);
    let c = a.matmul(&b).unwrap();
    assert_eq!(c.shape(), &[4, 2]);
    assert!(common::max_abs_diff(c.data(), &naive_matmul(&a, &b)) < 1e-12);

    let tape = Tape::new();
    let (va, vb) = (tape.constant(a), tape.constant(b));
    let vc = tape.matmul(va, vb).unwrap();
    assert_eq!(*tape.value(vc), c);
}

#[test]
fn matmul_is_associative() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let (m, k, l, n) = (r.random_range(1..6), r.random_range(1..6), r.random_range(1..6), r.random_range(1..6));
        let a = normal(&[m, k], 1.0, &mut r);
        let b = normal(&[k, l], 1.0, &mut r);
        let c = normal(&[l, n], 1.0, &mut r);
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        assert!(left.max_abs_diff(&right) < 1e-9);
    }
}

#[test]
fn matmul_shape_mismatch() {
    let tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(tape.matmul(a, a), Err(Error::Shape { .. })));
}

fn softmax_of(row: &[f64]) -> Vec<f64> {
    let tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, row.len()], row.to_vec()).unwrap());
    let y = tape.softmax_rows(x).unwrap();
    let out = tape.value(y).data().to_vec();
    out
}

#[test]
fn softmax_examples() {
    let uniform = softmax_of(&[0.0, 0.0, 0.0]);
    assert!(uniform.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));

    let peaked = softmax_of(&[1000.0, 0.0, 0.0]);
    assert!((peaked[0] - 1.0).abs() < 1e-15 && peaked[1] < 1e-300 && peaked[1] >= 0.0);

    let direct: Vec<f64> = {
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    };
    assert!(common::max_abs_diff(&softmax_of(&[1.0, 2.0, 3.0]), &direct) < 1e-12);
}

#[test]
fn softmax_rows_are_distributions() {
    let mut r = rng(99);
    for _ in 0..20 {
        let x = normal(&[6, 4], 5.0, &mut r);
        let tape = Tape::new();
        let y = tape.softmax_rows(tape.constant(x)).unwrap();
        let y = tape.value(y);
        for i in 0..6 {
            let row = y.row(i);
            assert!(row.iter().all(|&v| v > 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn trivial_backward_cases() {
    let tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1.0, -2.0, 3.5]).unwrap());
    let unused = tape.param(Tensor::vector(vec![4.0, 5.0]).unwrap());
    let loss = tape.sum(x).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    assert_eq!(g.get(unused).unwrap().data(), &[0.0, 0.0]);

    let tape = Tape::new();
    let x = tape.param(Tensor::scalar(3.0));
    let sq = tape.mul(x, x).unwrap();
    let g = tape.backward(sq).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[6.0]);
}

#[test]
fn backward_requires_scalar_loss() {
    let tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
    assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
}

#[test]
fn reductions_and_concat() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
    assert_eq!(tape.value(tape.mean(x).unwrap()).data(), &[2.0]);
    let v = tape.variance(x).unwrap();
    let v: f64 = tape.value(v).data()[0];
    assert!((v - 2.0 / 3.0).abs() < 1e-15);

    let leader = tape.constant(Tensor::zeros(&[128, 7]));
    let attention = tape.constant(Tensor::zeros(&[96, 7]));
    let fused = tape.concat(&[leader, attention], 0).unwrap();
    assert_eq!(tape.shape(fused), vec![224, 7]);
    let bad = tape.constant(Tensor::zeros(&[96, 6]));
    assert!(tape.concat(&[leader, bad], 0).is_err());
}

#[test]
fn non_finite_results_are_errors() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::vector(vec![1.0]).unwrap());
    let z = tape.constant(Tensor::vector(vec![0.0]).unwrap());
    assert!(matches!(tape.div(a, z), Err(Error::NonFinite { .. })));
}

type Build = fn(&Tape<f64>, &[Var]) -> affuse_core::Result<Var>;

fn primitive_cases() -> Vec<(&'static str, Vec<Vec<usize>>, Build)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| t.matmul(v[0], v[1])),
        ("transpose", vec![vec![3, 4]], |t, v| t.transpose(v[0])),
        ("add", vec![vec![3, 4], vec![3, 4]], |t, v| t.add(v[0], v[1])),
        ("sub", vec![vec![3, 4], vec![3, 4]], |t, v| t.sub(v[0], v[1])),
        ("mul", vec![vec![3, 4], vec![3, 4]], |t, v| t.mul(v[0], v[1])),
        ("div", vec![vec![3, 4], vec![3, 4]], |t, v| {
            let shifted = t.add_const(t.mul(v[1], v[1])?, 1.0)?;
            t.div(v[0], shifted)
        }),
        ("scale", vec![vec![5]], |t, v| t.scale(v[0], -1.7)),
        ("relu", vec![vec![4, 5]], |t, v| t.relu(v[0])),
        ("add_col_bias", vec![vec![3, 5], vec![3]], |t, v| t.add_col_bias(v[0], v[1])),
        ("expand", vec![vec![1]], |t, v| t.expand(v[0], &[2, 3])),
        ("mean", vec![vec![2, 3]], |t, v| t.mean(v[0])),
        ("variance", vec![vec![7]], |t, v| t.variance(v[0])),
        ("reshape", vec![vec![2, 6]], |t, v| t.reshape(v[0], &[3, 4])),
        ("concat_rows", vec![vec![2, 3], vec![4, 3]], |t, v| t.concat(&[v[0], v[1]], 0)),
        ("concat_cols", vec![vec![2, 3], vec![2, 1]], |t, v| t.concat(&[v[0], v[1]], 1)),
        ("slice", vec![vec![3, 6]], |t, v| t.slice(v[0], 1, 2, 3)),
        ("im2col", vec![vec![3, 9]], |t, v| t.im2col_causal(v[0], 3, 2)),
        ("softmax_rows", vec![vec![4, 3]], |t, v| t.softmax_rows(v[0])),
        ("layer_norm", vec![vec![6, 4], vec![6], vec![6]], |t, v| t.layer_norm_cols(v[0], v[1], v[2], 1e-5)),
        ("attention", vec![vec![6, 4], vec![6, 4], vec![6, 4]], |t, v| t.leader_follower_attention(v[0], v[1], v[2], 3)),
    ]
}

#[test]
fn primitive_gradients_match_finite_differences() {
    let opts = GradCheckOptions::default();
    for (name, shapes, build) in primitive_cases() {
        for seed in 0..20u64 {
            let mut r = rng(seed * 31 + name.len() as u64);
            let leaves: Vec<Tensor<f64>> = shapes.iter().map(|s| normal(s, 1.0, &mut r)).collect();
            let report = check_gradients(
                name,
                &leaves,
                |tape, vars| projection_loss(tape, build(tape, vars)?, seed),
                &opts,
            )
            .unwrap();
            assert!(report.passed(1e-6), "{name} seed {seed}: rel err {:.3e}", report.max_rel_error);
        }
    }
}

#[test]
fn generic_over_f32() {
    let tape = affuse_core::TapeF32::new();
    let x = tape.param(affuse_core::TensorF32::vector(vec![1.0, 2.0, 4.0]).unwrap());
    let loss = tape.variance(x).unwrap();
    let g = tape.backward(loss).unwrap();
    // d var / dx_i = 2 (x_i - mean) / n
    let expected = [-8.0 / 9.0, -2.0 / 9.0, 10.0 / 9.0];
    for (a, b) in g.get(x).unwrap().data().iter().zip(expected) {
        assert!((a - b).abs() < 1e-6);
    }
}
