//! Minimal dense-tensor computation with reverse-mode gradient accumulation.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{
    analytic_grads, finite_diff_grads, grad_check, rel_err, report_from_grads, GradCheckReport,
    GraphBuilder, ParamCheck,
};
pub use tape::{log_sigmoid_scalar, sigmoid_scalar, Tape, Var, LAYER_NORM_EPS};
pub use tensor::{strides, Tensor, TensorError};

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn t(shape: &[usize], data: Vec<f32>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], vec![0.0, 0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn sigmoid_and_log_sigmoid_at_zero() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert!((log_sigmoid_scalar(0.0) + std::f32::consts::LN_2).abs() < 1e-7);
    }

    #[test]
    fn matmul_shapes_and_values() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 3], vec![1., 2., 3., 4., 5., 6.]));
        let b = tape.leaf(t(&[3, 4], (0..12).map(|v| v as f32).collect()));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 4]);
        // row 0: [1,2,3] . columns of b
        assert_eq!(tape.value(c).data()[0], 1.0 * 0.0 + 2.0 * 4.0 + 3.0 * 8.0);
    }

    #[test]
    fn matmul_inner_dim_mismatch_names_op() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[4, 2]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[4], vec![1.0, -2.0, 3.0, 0.5]));
        let loss = tape.sum_all(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_mean_square_is_half_x() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[4], vec![1.0, -2.0, 3.0, 0.5]));
        let y = tape.mul(x, x).unwrap();
        let loss = tape.mean_all(y).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        for (gv, xv) in g.iter().zip(tape.value(x).data()) {
            assert!((gv - xv / 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], vec![1.0, 2.0]));
        let loss = tape.sum_all(x).unwrap();
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn dropout_rate_zero_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[5], vec![1.0, -2.0, 3.0, 0.5, -0.1]));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y = tape.dropout(x, 0.0, &mut rng).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn dropout_is_reproducible_under_fixed_rng() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::full(&[64], 1.0));
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let y = tape.dropout(x, 0.4, &mut rng).unwrap();
            tape.value(y).data().to_vec()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.iter().any(|&v| v == 0.0));
        assert!(a.iter().any(|&v| (v - 1.0 / 0.6).abs() < 1e-6));
    }

    #[test]
    fn masked_fill_positions_get_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[4], vec![1.0, 2.0, 3.0, 4.0]));
        let mask = Arc::new(vec![false, true, false, true]);
        let y = tape.masked_fill(x, mask, -1e9).unwrap();
        let sm = tape.softmax(y, 0).unwrap();
        let loss = tape.sum_all(sm).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        assert_eq!(g[1], 0.0);
        assert_eq!(g[3], 0.0);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let rows = rng.random_range(1..5usize);
            let cols = rng.random_range(1..7usize);
            let data: Vec<f32> = (0..rows * cols).map(|_| rng.random_range(-5.0..5.0)).collect();
            let mut tape = Tape::new();
            let x = tape.leaf(t(&[rows, cols], data));
            let y = tape.softmax(x, 1).unwrap();
            for r in 0..rows {
                let s: f32 = tape.value(y).data()[r * cols..(r + 1) * cols].iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
                assert!(tape.value(y).data()[r * cols..(r + 1) * cols]
                    .iter()
                    .all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn gather_backward_scatters_rows() {
        let mut tape = Tape::new();
        let table = tape.leaf(t(&[3, 2], vec![1., 2., 3., 4., 5., 6.]));
        let y = tape.gather(table, &[2, 0, 2], &[3]).unwrap();
        assert_eq!(tape.value(y).data(), &[5., 6., 1., 2., 5., 6.]);
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(table).unwrap(), &[1., 1., 0., 0., 2., 2.]);
    }

    /// Finite-difference sweep: every differentiable primitive on random
    /// shapes and seeds.
    #[test]
    fn primitive_gradient_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let rand_shape = |rng: &mut ChaCha8Rng, ndim: usize| -> Vec<usize> {
            (0..ndim).map(|_| rng.random_range(1..5usize)).collect()
        };
        // values kept away from relu's kink
        let rand_tensor = |rng: &mut ChaCha8Rng, shape: &[usize]| -> Tensor {
            let data = (0..shape.iter().product())
                .map(|_| {
                    let mag = rng.random_range(0.1..1.0f32);
                    if rng.random::<bool>() {
                        mag
                    } else {
                        -mag
                    }
                })
                .collect();
            Tensor::new(shape.to_vec(), data).unwrap()
        };
        let weighted_sum = |tape: &mut Tape, y: Var, rng_seed: u64| -> Result<Var, TensorError> {
            let mut wr = ChaCha8Rng::seed_from_u64(rng_seed);
            let n = tape.value(y).numel();
            let shape = tape.value(y).shape().to_vec();
            let w = tape.constant(Tensor::new(
                shape,
                (0..n).map(|_| wr.random_range(-0.5..0.5)).collect(),
            )?);
            let z = tape.mul(y, w)?;
            tape.sum_all(z)
        };

        for case in 0..20u64 {
            let ndim = rng.random_range(1..4usize);
            let shape = rand_shape(&mut rng, ndim);
            let x = rand_tensor(&mut rng, &shape);
            let b = rand_tensor(&mut rng, &shape[ndim - 1..]);
            let axis = rng.random_range(0..ndim);
            let last = shape[ndim - 1];
            // layer_norm input with guaranteed within-row spread; finite
            // differences blow up when row variance is comparable to h
            let x_ln = {
                let n: usize = shape.iter().product();
                let data = (0..n)
                    .map(|j| {
                        let base = 0.25 + 0.2 * (j % 5) as f32;
                        let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                        base * sign + rng.random_range(-0.02..0.02f32)
                    })
                    .collect();
                Tensor::new(shape.clone(), data).unwrap()
            };
            let gain = rand_tensor(&mut rng, &[last]);
            let bias = rand_tensor(&mut rng, &[last]);
            let m = rng.random_range(1..4usize);
            let k = rng.random_range(1..4usize);
            let n = rng.random_range(1..4usize);
            let ma = rand_tensor(&mut rng, &[m, k]);
            let mb = rand_tensor(&mut rng, &[k, n]);
            let mask = Arc::new(
                (0..shape.iter().product::<usize>())
                    .map(|j| j % 3 == 0)
                    .collect::<Vec<bool>>(),
            );
            let table = rand_tensor(&mut rng, &[5, 3]);
            let indices: Vec<u32> = (0..4).map(|_| rng.random_range(0..5u32)).collect();

            type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>>;
            let cases: Vec<(&str, Vec<(String, Tensor)>, Build)> = vec![
                (
                    "add",
                    vec![("x".into(), x.clone()), ("b".into(), b.clone())],
                    Box::new(|t: &mut Tape, v: &[Var]| t.add(v[0], v[1])),
                ),
                (
                    "sub",
                    vec![("x".into(), x.clone()), ("b".into(), b.clone())],
                    Box::new(|t: &mut Tape, v: &[Var]| t.sub(v[0], v[1])),
                ),
                (
                    "mul",
                    vec![("x".into(), x.clone()), ("b".into(), b.clone())],
                    Box::new(|t: &mut Tape, v: &[Var]| t.mul(v[0], v[1])),
                ),
                (
                    "scale",
                    vec![("x".into(), x.clone())],
                    Box::new(|t: &mut Tape, v: &[Var]| t.scale(v[0], -1.7)),
                ),
                (
                    "matmul",
                    vec![("a".into(), ma.clone()), ("b".into(), mb.clone())],
                    Box::new(|t: &mut Tape, v: &[Var]| t.matmul(v[0], v[1])),
                ),
                (
                    "gather",
                    vec![("table".into(), table.clone())],
                    Box::new({
                        let indices = indices.clone();
                        move |t: &mut Tape, v: &[Var]| t.gather(v[0], &indices, &[4])
                    }),
                ),
                (
                    "softmax",
                    vec![("x".into(), x.clone())],
                    Box::new(move |t: &mut Tape, v: &[Var]| t.softmax(v[0], axis)),
                ),
                (
                    "log_softmax",
                    vec![("x".into(), x.clone())],
                    Box::new(move |t: &mut Tape, v: &[Var]| t.log_softmax(v[0], axis)),
                ),
                (
                    "layer_norm",
                    vec![
                        ("x".into(), x_ln.clone()),
                        ("g".into(), gain.clone()),
                        ("b".into(), bias.clone()),
                    ],
                    Box::new(|t: &mut Tape, v: &[Var]| t.layer_norm(v[0], v[1], v[2])),
                ),
                (
                    "relu",
                    vec![("x".into(), x.clone())],
                    Box::new(|t: &mut Tape, v: &[Var]| t.relu(v[0])),
                ),
                (
                    "sigmoid",
                    vec![("x".into(), x.clone())],
                    Box::new(|t: &mut Tape, v: &[Var]| t.sigmoid(v[0])),
                ),
                (
                    "log_sigmoid",
                    vec![("x".into(), x.clone())],
                    Box::new(|t: &mut Tape, v: &[Var]| t.log_sigmoid(v[0])),
                ),
                (
                    "masked_fill",
                    vec![("x".into(), x.clone())],
                    Box::new({
                        let mask = mask.clone();
                        move |t: &mut Tape, v: &[Var]| t.masked_fill(v[0], mask.clone(), 2.0)
                    }),
                ),
                (
                    "concat",
                    vec![("x".into(), x.clone()), ("y".into(), x.clone())],
                    Box::new(move |t: &mut Tape, v: &[Var]| t.concat(&[v[0], v[1]], axis)),
                ),
                (
                    "transpose",
                    vec![("x".into(), x.clone())],
                    Box::new(move |t: &mut Tape, v: &[Var]| t.transpose(v[0], 0, ndim - 1)),
                ),
                (
                    "reshape",
                    vec![("x".into(), x.clone())],
                    Box::new({
                        let numel = x.numel();
                        move |t: &mut Tape, v: &[Var]| t.reshape(v[0], &[numel])
                    }),
                ),
                (
                    "sum_axis",
                    vec![("x".into(), x.clone())],
                    Box::new(move |t: &mut Tape, v: &[Var]| t.sum_axis(v[0], axis)),
                ),
                (
                    "mean_axis",
                    vec![("x".into(), x.clone())],
                    Box::new(move |t: &mut Tape, v: &[Var]| t.mean_axis(v[0], axis)),
                ),
            ];

            for (name, params, build) in cases {
                let report = grad_check(
                    &|tape, vars| {
                        let y = build(tape, vars)?;
                        weighted_sum(tape, y, 1000 + case)
                    },
                    &params,
                    1e-3,
                    1e-2,
                )
                .unwrap();
                assert!(
                    report.pass,
                    "{name} case {case}: max rel err {}",
                    report.max_rel_err
                );
            }
        }
    }

    /// Random three-layer graph mixing primitives.
    #[test]
    fn random_three_layer_graph_passes_fd() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 4;
            let mk = |rng: &mut ChaCha8Rng, shape: &[usize]| {
                Tensor::new(
                    shape.to_vec(),
                    (0..shape.iter().product())
                        .map(|_| rng.random_range(-0.8..0.8))
                        .collect(),
                )
                .unwrap()
            };
            let params = vec![
                ("x".to_string(), mk(&mut rng, &[3, d])),
                ("w1".to_string(), mk(&mut rng, &[d, d])),
                ("w2".to_string(), mk(&mut rng, &[d, d])),
                ("g".to_string(), mk(&mut rng, &[d])),
                ("b".to_string(), mk(&mut rng, &[d])),
            ];
            let report = grad_check(
                &|tape, v| {
                    let h1 = tape.matmul(v[0], v[1])?;
                    let h1 = tape.sigmoid(h1)?;
                    let h2 = tape.matmul(h1, v[2])?;
                    let h2 = tape.layer_norm(h2, v[3], v[4])?;
                    let h3 = tape.softmax(h2, 1)?;
                    tape.mean_all(h3)
                },
                &params,
                1e-3,
                1e-2,
            )
            .unwrap();
            assert!(report.pass, "seed {seed}: {}", report.max_rel_err);
        }
    }
}
