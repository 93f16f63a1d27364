use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::fd::{finite_diff_grad, max_rel_err, DEFAULT_EPS};

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn eval(kind: &OpKind, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = g.apply(kind.clone(), &vars)?;
    Ok(g.tensor(out).clone())
}

/// Largest relative error between backward and central differences over
/// every input, for the loss `sum(op(inputs) * proj)`.
fn grad_error(kind: &OpKind, inputs: &[Tensor<f64>], rng: &mut ChaCha8Rng) -> f64 {
    let out_shape = eval(kind, inputs).unwrap().shape().to_vec();
    let proj = randn(rng, &out_shape);
    let loss = |ins: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone())).collect();
        let p = g.leaf(proj.clone());
        let out = g.apply(kind.clone(), &vars).unwrap();
        let m = g.mul(out, p).unwrap();
        let root = g.sum(m).unwrap();
        (g, vars, root)
    };
    let (mut g, vars, root) = loss(inputs);
    g.backward(root).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).unwrap().to_vec();
        let numeric = finite_diff_grad(
            |t| {
                let mut ins = inputs.to_vec();
                ins[k] = t.clone();
                let (g, _, root) = loss(&ins);
                g.value(root)[0]
            },
            &inputs[k],
            DEFAULT_EPS,
        )
        .unwrap();
        worst = worst.max(max_rel_err(&analytic, numeric.data()));
    }
    worst
}

/// A random instance of every differentiable op kind; extents stay small so
/// the finite-difference sweep is cheap.
fn instance(rng: &mut ChaCha8Rng, which: usize) -> (OpKind, Vec<Tensor<f64>>) {
    let c = rng.gen_range(1..4);
    let h = rng.gen_range(3..7);
    let w = rng.gen_range(3..7);
    let k = rng.gen_range(1..4usize);
    let s = rng.gen_range(1..3);
    let p = rng.gen_range(0..=k / 2);
    let win = Window2d {
        kernel: [k, k.min(2)],
        stride: [s, 1],
        padding: [p, 0],
    };
    match which {
        0 => (OpKind::Add, vec![randn(rng, &[c, h, w]), randn(rng, &[c, h, w])]),
        1 => (OpKind::Mul, vec![randn(rng, &[c, h, w]), randn(rng, &[c, h, w])]),
        2 => (OpKind::Scale, vec![randn(rng, &[c, h, w]), randn(rng, &[c])]),
        3 => (OpKind::Scale, vec![randn(rng, &[c, h, w]), randn(rng, &[1])]),
        4 => (OpKind::MatMul, vec![randn(rng, &[h, c]), randn(rng, &[c, w])]),
        5 => {
            let co = rng.gen_range(1..4);
            (
                OpKind::Conv2d(win),
                vec![
                    randn(rng, &[c, h, w]),
                    randn(rng, &[co, c, win.kernel[0], win.kernel[1]]),
                    randn(rng, &[co]),
                ],
            )
        }
        6 => (
            OpKind::DepthwiseConv2d(win),
            vec![
                randn(rng, &[c, h, w]),
                randn(rng, &[c, win.kernel[0], win.kernel[1]]),
                randn(rng, &[c]),
            ],
        ),
        7 => {
            let co = rng.gen_range(1..4);
            (
                OpKind::PointwiseConv2d,
                vec![randn(rng, &[c, h, w]), randn(rng, &[co, c]), randn(rng, &[co])],
            )
        }
        8 => (OpKind::MaxPool2d(win), vec![randn(rng, &[c, h, w])]),
        9 => (OpKind::GlobalAvgPool, vec![randn(rng, &[c, h, w])]),
        10 => (OpKind::Relu, vec![randn(rng, &[c, h, w])]),
        11 => (OpKind::Sigmoid, vec![randn(rng, &[c, h, w])]),
        12 => (OpKind::SoftmaxLastAxis, vec![randn(rng, &[c, h, w])]),
        13 => (
            OpKind::Linear,
            vec![randn(rng, &[h, w]), randn(rng, &[c, w]), randn(rng, &[c])],
        ),
        14 => (
            OpKind::Concat { axis: 0 },
            vec![randn(rng, &[c, h, w]), randn(rng, &[2, h, w])],
        ),
        15 => (
            OpKind::Concat { axis: 1 },
            vec![randn(rng, &[c, h]), randn(rng, &[c, w])],
        ),
        16 => (OpKind::Reshape(vec![h * w, c]), vec![randn(rng, &[c, h, w])]),
        17 => (
            OpKind::SliceChannels { start: 1, len: c },
            vec![randn(rng, &[c + 2, h, w])],
        ),
        18 => {
            let groups = rng.gen_range(1..3);
            let ch = groups * c;
            (
                OpKind::GroupNorm { groups, eps: 1e-5 },
                vec![randn(rng, &[ch, h, w]), randn(rng, &[ch]), randn(rng, &[ch])],
            )
        }
        19 => (
            OpKind::CrissCrossAffinity,
            vec![randn(rng, &[c, h, w]), randn(rng, &[c, h, w])],
        ),
        20 => (
            OpKind::CrissCrossAggregate,
            vec![randn(rng, &[h, w, h + w - 1]), randn(rng, &[c, h, w])],
        ),
        21 => (OpKind::Sum, vec![randn(rng, &[c, h, w])]),
        22 => (
            OpKind::BceWithLogits {
                target: rng.gen_range(0.0..=1.0),
            },
            vec![randn(rng, &[1])],
        ),
        _ => unreachable!(),
    }
}

const KINDS: usize = 23;

#[test]
fn every_op_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for which in 0..KINDS {
        for trial in 0..20 {
            let (kind, inputs) = instance(&mut rng, which);
            let err = grad_error(&kind, &inputs, &mut rng);
            assert!(err <= 1e-4, "{} trial {trial}: max rel err {err:e}", kind.name());
        }
    }
}

#[test]
fn window_shape_rule() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for _ in 0..100 {
        let c = rng.gen_range(1..4);
        let h = rng.gen_range(1..30);
        let w = rng.gen_range(1..30);
        let k = rng.gen_range(1..6);
        let s = rng.gen_range(1..4);
        let p = rng.gen_range(0..=k / 2);
        let win = Window2d::square(k, s, p);
        let x = randn(&mut rng, &[c, h, w]);
        let expected = |n: usize| (n + 2 * p >= k).then(|| (n + 2 * p - k) / s + 1);
        let pooled = eval(&OpKind::MaxPool2d(win), core::slice::from_ref(&x));
        let conv = eval(&OpKind::Conv2d(win), &[x.clone(), Tensor::zeros([2, c, k, k])]);
        let dw = eval(&OpKind::DepthwiseConv2d(win), &[x, Tensor::zeros([c, k, k])]);
        match (expected(h), expected(w)) {
            (Some(oh), Some(ow)) => {
                assert_eq!(pooled.unwrap().shape(), &[c, oh, ow]);
                assert_eq!(conv.unwrap().shape(), &[2, oh, ow]);
                assert_eq!(dw.unwrap().shape(), &[c, oh, ow]);
            }
            (None, _) => assert!(matches!(pooled, Err(Error::EmptyOutput { axis: 1, .. }))),
            (_, None) => assert!(matches!(pooled, Err(Error::EmptyOutput { axis: 2, .. }))),
        }
    }
}

#[test]
fn shape_rules_for_remaining_kinds() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for _ in 0..100 {
        for which in 0..KINDS {
            let (kind, inputs) = instance(&mut rng, which);
            let s0 = inputs[0].shape().to_vec();
            let out = eval(&kind, &inputs).unwrap();
            let expected: Vec<usize> = match &kind {
                OpKind::MatMul => vec![s0[0], inputs[1].shape()[1]],
                OpKind::Conv2d(win) | OpKind::DepthwiseConv2d(win) | OpKind::MaxPool2d(win) => {
                    let co = match kind {
                        OpKind::Conv2d(_) => inputs[1].shape()[0],
                        _ => s0[0],
                    };
                    vec![co, win.output_len(0, s0[1]).unwrap(), win.output_len(1, s0[2]).unwrap()]
                }
                OpKind::PointwiseConv2d => vec![inputs[1].shape()[0], s0[1], s0[2]],
                OpKind::GlobalAvgPool => vec![s0[0]],
                OpKind::Linear => vec![s0[0], inputs[1].shape()[0]],
                OpKind::Concat { axis } => {
                    let mut s = s0.clone();
                    s[*axis] += inputs[1].shape()[*axis];
                    s
                }
                OpKind::Reshape(shape) => shape.clone(),
                OpKind::SliceChannels { len, .. } => vec![*len, s0[1], s0[2]],
                OpKind::CrissCrossAffinity => vec![s0[1], s0[2], s0[1] + s0[2] - 1],
                OpKind::CrissCrossAggregate => inputs[1].shape().to_vec(),
                OpKind::Sum | OpKind::BceWithLogits { .. } => vec![1],
                _ => s0.clone(),
            };
            assert_eq!(out.shape(), expected.as_slice(), "{}", kind.name());
        }
    }
}

#[test]
fn identity_pointwise_kernel_via_conv2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = randn(&mut rng, &[3, 5, 5]);
    let eye = Tensor::from_fn([3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
    let y = eval(&OpKind::Conv2d(Window2d::square(1, 1, 0)), &[x.clone(), eye]).unwrap();
    assert_eq!(y.data(), x.data());
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let y = eval(&OpKind::SoftmaxLastAxis, &[Tensor::<f64>::zeros([4])]).unwrap();
    assert_eq!(y.data(), &[0.25; 4]);
}

#[test]
fn softmax_rows_are_probability_vectors() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::from_fn([7, 9], |_| rng.gen_range(-20.0..20.0));
    let y = eval(&OpKind::SoftmaxLastAxis, &[x]).unwrap();
    for row in y.data().chunks(9) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|v| *v > 0.0 && *v < 1.0));
    }
}

#[test]
fn max_pool_of_two_by_two() {
    let x = Tensor::new([1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
    let y = eval(&OpKind::MaxPool2d(Window2d::square(2, 2, 0)), &[x]).unwrap();
    assert_eq!(y.shape(), &[1, 1, 1]);
    assert_eq!(y.data(), &[4.0]);
}

#[test]
fn reshape_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = randn(&mut rng, &[4, 3, 5]);
    let mut g = Graph::new();
    let v = g.leaf(x.clone());
    let r = g.reshape(v, [15, 4]).unwrap();
    let back = g.reshape(r, [4, 3, 5]).unwrap();
    assert_eq!(g.tensor(back).data(), x.data());
    assert_eq!(g.shape(back), x.shape());
}

#[test]
fn grad_of_sum_is_ones() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_fn([2, 3, 4], |i| i as f64));
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().iter().all(|v| *v == 1.0));
}

#[test]
fn sigmoid_slope_at_zero() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(0.0f64));
    let y = g.sigmoid(x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.25]);
}

#[test]
fn conv_grad_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = randn(&mut rng, &[1, 4, 4]);
    let k = randn(&mut rng, &[1, 1, 3, 3]);
    let win = Window2d::square(3, 1, 0);
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let kv = g.leaf(k.clone());
    let y = g.conv2d(xv, kv, None, win).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    let numeric = finite_diff_grad(
        |t| {
            let y = eval(&OpKind::Conv2d(win), &[t.clone(), k.clone()]).unwrap();
            y.data().iter().sum()
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(max_rel_err(g.grad(xv).unwrap(), numeric.data()) <= 1e-6);
}

#[test]
fn backward_overwrites_and_skips_unreachable() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_fn([3], |i| i as f64 + 1.0));
    let unused = g.leaf(Tensor::<f64>::zeros([2]));
    let s = g.sum(x).unwrap();
    let sq = g.mul(x, x).unwrap();
    let s2 = g.sum(sq).unwrap();
    g.backward(s).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    assert!(g.grad(unused).is_none());
    assert!(g.grad(sq).is_none(), "nodes after the root are not reachable");
    g.backward(s2).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    assert!(g.grad(s).is_none());
}

#[test]
fn non_scalar_root_is_rejected() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::<f64>::zeros([2, 2]));
    assert_eq!(g.backward(x), Err(Error::NonScalarRoot(vec![2, 2])));
}

#[test]
fn shape_mismatch_names_axis() {
    let mut g = Graph::new();
    let a = g.leaf(Tensor::<f32>::zeros([2, 3, 4]));
    let b = g.leaf(Tensor::<f32>::zeros([2, 3, 5]));
    assert_eq!(
        g.add(a, b),
        Err(Error::ShapeMismatch {
            op: "add",
            axis: 2,
            expected: 4,
            found: 5
        })
    );
    let w = g.leaf(Tensor::<f32>::zeros([4, 3]));
    assert!(matches!(
        g.pointwise_conv2d(a, w, None),
        Err(Error::ShapeMismatch {
            axis: 0,
            expected: 2,
            found: 3,
            ..
        })
    ));
}

#[test]
fn oversized_kernel_is_rejected() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::<f32>::zeros([1, 2, 8]));
    assert_eq!(
        g.max_pool2d(x, Window2d::square(3, 1, 0)),
        Err(Error::EmptyOutput {
            op: "maxpool2d",
            axis: 1
        })
    );
}
