use std::vec;
use std::vec::Vec;

use super::*;
use crate::rng::RngState;

fn t(shape: &[usize], data: &[f32]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn rand_t(rng: &mut RngState, shape: &[usize], scale: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, rng.normal_vec(n, scale)).unwrap()
}

/// Values bounded away from zero, for ops with a kink or pole there.
fn rand_away_from_zero(rng: &mut RngState, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.normal();
            if v.abs() < 0.05 {
                0.05f32.copysign(v) + v
            } else {
                v
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn rand_positive(rng: &mut RngState, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| 0.3 + 2.0 * rng.uniform()).collect()).unwrap()
}

/// `sum(op(inputs) * probe)` evaluated in f64 outside the tape.
fn probe_loss(kind: &OpKind, inputs: &[Tensor], probe: &[f32]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|x| g.constant(x.clone()).unwrap())
        .collect();
    let out = g.apply(kind, &vars).unwrap();
    g.value(out)
        .data()
        .iter()
        .zip(probe)
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum()
}

/// Relative error between analytic and central-difference gradients of a
/// random projection of the op output, over every differentiable input.
fn fd_check(kind: &OpKind, inputs: Vec<Tensor>, diff: &[bool], rng: &mut RngState) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(diff)
        .map(|(x, &d)| {
            if d {
                g.param(x.clone())
            } else {
                g.constant(x.clone())
            }
            .unwrap()
        })
        .collect();
    let out = g.apply(kind, &vars).unwrap();
    let probe = rng.normal_vec(g.value(out).numel(), 1.0);
    let pv = g
        .constant(Tensor::new(g.shape(out), probe.clone()).unwrap())
        .unwrap();
    let prod = g.mul(out, pv).unwrap();
    let loss = g.sum(prod).unwrap();
    let grads = g.backward(loss).unwrap();

    let eps = 1e-3f32;
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (i, x) in inputs.iter().enumerate() {
        if !diff[i] {
            continue;
        }
        let analytic = grads.wrt(vars[i]);
        for j in 0..x.numel() {
            let mut plus = inputs.clone();
            let mut minus = inputs.clone();
            let mut d = x.to_vec();
            d[j] += eps;
            plus[i] = Tensor::new(x.shape(), d.clone()).unwrap();
            d[j] -= 2.0 * eps;
            minus[i] = Tensor::new(x.shape(), d).unwrap();
            let fd = (probe_loss(kind, &plus, &probe) - probe_loss(kind, &minus, &probe))
                / (2.0 * eps as f64);
            let a = analytic.data()[j] as f64;
            num += (a - fd) * (a - fd);
            den += a * a + fd * fd;
        }
    }
    num.sqrt() / (den.sqrt() / 2f64.sqrt()).max(1e-3)
}

const TRIALS: usize = 20;

fn run_trials(name: &str, mut make: impl FnMut(&mut RngState) -> (OpKind, Vec<Tensor>, Vec<bool>)) {
    let mut rng = RngState::new(0xFD00 ^ name.len() as u64 ^ (name.as_bytes()[0] as u64) << 8);
    let mut worst = 0.0f64;
    for _ in 0..TRIALS {
        let (kind, inputs, diff) = make(&mut rng);
        let err = fd_check(&kind, inputs, &diff, &mut rng);
        worst = worst.max(err);
    }
    assert!(worst < 1e-3, "{name}: worst relative error {worst:e}");
}

#[test]
fn fd_matmul_family() {
    run_trials("matmul", |r| {
        (
            OpKind::MatMul,
            vec![rand_t(r, &[3, 4], 1.0), rand_t(r, &[4, 2], 1.0)],
            vec![true, true],
        )
    });
    run_trials("matmul_bt", |r| {
        (
            OpKind::MatMulBt,
            vec![rand_t(r, &[3, 4], 1.0), rand_t(r, &[5, 4], 1.0)],
            vec![true, true],
        )
    });
    run_trials("add_row", |r| {
        (
            OpKind::AddRow,
            vec![rand_t(r, &[3, 4], 1.0), rand_t(r, &[4], 1.0)],
            vec![true, true],
        )
    });
}

#[test]
fn fd_elementwise_binary() {
    for kind in [OpKind::Add, OpKind::Sub, OpKind::Mul] {
        run_trials("binary", |r| {
            (
                kind.clone(),
                vec![rand_t(r, &[2, 5], 1.0), rand_t(r, &[2, 5], 1.0)],
                vec![true, true],
            )
        });
    }
    run_trials("mul_scalar", |r| {
        (
            OpKind::MulScalar,
            vec![rand_t(r, &[2, 3], 1.0), rand_t(r, &[1], 1.0)],
            vec![true, true],
        )
    });
    run_trials("scale", |r| {
        (OpKind::Scale(-1.7), vec![rand_t(r, &[6], 1.0)], vec![true])
    });
}

#[test]
fn fd_activations() {
    for kind in [OpKind::Relu, OpKind::LeakyRelu(0.1)] {
        run_trials("relu", |r| {
            (
                kind.clone(),
                vec![rand_away_from_zero(r, &[3, 4])],
                vec![true],
            )
        });
    }
    for kind in [OpKind::Sigmoid, OpKind::Tanh, OpKind::Exp] {
        run_trials("smooth", |r| {
            (kind.clone(), vec![rand_t(r, &[3, 4], 1.0)], vec![true])
        });
    }
    run_trials("log", |r| {
        (OpKind::Log, vec![rand_positive(r, &[3, 4])], vec![true])
    });
    run_trials("softmax", |r| {
        (OpKind::Softmax, vec![rand_t(r, &[3, 5], 1.5)], vec![true])
    });
}

#[test]
fn fd_layer_norm() {
    run_trials("layer_norm", |r| {
        (
            OpKind::LayerNorm,
            vec![
                rand_t(r, &[3, 6], 1.0),
                rand_t(r, &[6], 1.0),
                rand_t(r, &[6], 1.0),
            ],
            vec![true, true, true],
        )
    });
}

#[test]
fn fd_gather_and_shape_ops() {
    run_trials("gather", |r| {
        let ids = vec![r.below(5), r.below(5), 2, 2];
        (
            OpKind::Gather(ids),
            vec![rand_t(r, &[5, 3], 1.0)],
            vec![true],
        )
    });
    run_trials("concat", |r| {
        (
            OpKind::Concat,
            vec![rand_t(r, &[2, 3], 1.0), rand_t(r, &[1, 3], 1.0)],
            vec![true, true],
        )
    });
    run_trials("slice", |r| {
        (
            OpKind::Slice {
                offset: 2,
                shape: vec![2, 2],
            },
            vec![rand_t(r, &[3, 3], 1.0)],
            vec![true],
        )
    });
    run_trials("reshape", |r| {
        (
            OpKind::Reshape(vec![6]),
            vec![rand_t(r, &[2, 3], 1.0)],
            vec![true],
        )
    });
    run_trials("sum", |r| {
        (OpKind::Sum, vec![rand_t(r, &[2, 3], 1.0)], vec![true])
    });
    run_trials("mean", |r| {
        (OpKind::Mean, vec![rand_t(r, &[2, 3], 1.0)], vec![true])
    });
}

#[test]
fn fd_causal_attention() {
    for heads in [1, 2] {
        run_trials("attention", |r| {
            (
                OpKind::CausalAttention { heads },
                vec![
                    rand_t(r, &[4, 4], 1.0),
                    rand_t(r, &[4, 4], 1.0),
                    rand_t(r, &[4, 4], 1.0),
                ],
                vec![true, true, true],
            )
        });
    }
}

#[test]
fn fd_dilated_conv() {
    for dilation in [1, 2] {
        run_trials("conv", |r| {
            (
                OpKind::DilatedConv { dilation },
                vec![
                    rand_t(r, &[5, 3], 1.0),
                    rand_t(r, &[3, 3, 2], 0.5),
                    rand_t(r, &[2], 1.0),
                ],
                vec![true, true, true],
            )
        });
    }
}

#[test]
fn fd_cross_entropy() {
    run_trials("cross_entropy", |r| {
        let targets = vec![Some(r.below(6)), None, Some(r.below(6))];
        (
            OpKind::CrossEntropy(targets),
            vec![rand_t(r, &[3, 6], 2.0)],
            vec![true],
        )
    });
}

#[test]
fn product_rule_at_three_and_four() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(3.0)).unwrap();
    let y = g.param(Tensor::scalar(4.0)).unwrap();
    let z = g.mul(x, y).unwrap();
    let grads = g.backward(z).unwrap();
    assert_eq!(grads.wrt(x).item(), 4.0);
    assert_eq!(grads.wrt(y).item(), 3.0);
}

#[test]
fn sum_of_squares_gradient_is_twice_x() {
    let mut g = Graph::new();
    let xs = [1.0, -2.0, 0.5, 3.0, -0.25];
    let x = g.param(Tensor::vector(xs.to_vec())).unwrap();
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    let grads = g.backward(s).unwrap();
    let expect: Vec<f32> = xs.iter().map(|v| 2.0 * v).collect();
    assert_eq!(grads.wrt(x).data(), &expect[..]);
}

#[test]
fn untouched_leaf_gets_zeros_and_non_scalar_is_rejected() {
    let mut g = Graph::new();
    let a = g.param(t(&[2], &[1.0, 2.0])).unwrap();
    let unused = g.param(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
    let s = g.sum(a).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.get(unused).is_none());
    assert_eq!(grads.wrt(unused).data(), &[0.0; 3]);
    assert!(matches!(g.backward(a), Err(Error::Contract(_))));
}

#[test]
fn backward_visits_every_node_once() {
    let mut g = Graph::new();
    let a = g.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
    let b = g.constant(t(&[2, 2], &[0.5, 0.0, 0.0, 0.5])).unwrap();
    let c = g.matmul(a, b).unwrap();
    let d = g.tanh(c).unwrap();
    let _dead = g.exp(a).unwrap();
    let s = g.sum(d).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.visits(), g.len());
}

#[test]
fn matmul_identity_padded() {
    let mut g = Graph::new();
    let a = g
        .constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]))
        .unwrap();
    let b = g
        .constant(t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]))
        .unwrap();
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).data(), &[1.0, 2.0, 4.0, 5.0]);
}

#[test]
fn shape_errors_name_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    let err = g.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        Error::ShapeMismatch {
            op: "matmul",
            lhs: vec![2, 3],
            rhs: vec![2, 3]
        }
    );
}

#[test]
fn non_finite_output_is_a_numeric_fault() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::vector(vec![100.0])).unwrap();
    assert_eq!(g.exp(a).unwrap_err(), Error::NumericFault { op: "exp" });
    let z = g.constant(Tensor::vector(vec![0.0])).unwrap();
    assert!(g.log(z).is_err());
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::vector(vec![0.0, 0.0])).unwrap();
    let s = g.softmax(a).unwrap();
    assert_eq!(g.value(s).data(), &[0.5, 0.5]);
}

#[test]
fn cross_entropy_of_confident_correct_logits() {
    let mut g = Graph::new();
    let a = g.constant(t(&[1, 2], &[10.0, -10.0])).unwrap();
    let l = g.cross_entropy(a, &[Some(0)]).unwrap();
    // -log(e^10 / (e^10 + e^-10)) = log(1 + x), x = e^-20; series to third order
    let x = (-20.0f64).exp();
    let oracle = x - x * x / 2.0 + x * x * x / 3.0;
    let got = g.value(l).item() as f64;
    assert!(
        (got - oracle).abs() / oracle < 1e-5,
        "{got:e} vs {oracle:e}"
    );
}

#[test]
fn straight_through_forwards_hard_and_backwards_soft() {
    let mut g = Graph::new();
    let soft = g.param(Tensor::vector(vec![0.7, 0.3])).unwrap();
    let st = g
        .straight_through(Tensor::vector(vec![1.0, 0.0]), soft)
        .unwrap();
    assert_eq!(g.value(st).data(), &[1.0, 0.0]);
    let w = g.constant(Tensor::vector(vec![2.0, -5.0])).unwrap();
    let p = g.mul(st, w).unwrap();
    let s = g.sum(p).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(soft).data(), &[2.0, -5.0]);
}

#[test]
fn backward_counter_advances() {
    let before = backward_pass_count();
    let mut g = Graph::new();
    let a = g.param(Tensor::scalar(1.0)).unwrap();
    g.backward(a).unwrap();
    assert!(backward_pass_count() > before);
}
