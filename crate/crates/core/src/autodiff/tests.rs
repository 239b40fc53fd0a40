use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    t(
        shape,
        &(0..n)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect::<Vec<_>>(),
    )
}

#[test]
fn relu_forward() {
    let mut tape = Tape::new();
    let x = tape
        .constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0]))
        .unwrap();
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn matmul_forward() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[1, 2], &[1.0, 2.0])).unwrap();
    let b = tape.constant(t(&[2, 1], &[3.0, 4.0])).unwrap();
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).shape(), &[1, 1]);
    assert_eq!(tape.value(c).data(), &[11.0]);
}

#[test]
fn spatial_mean_forward() {
    let mut tape = Tape::new();
    let m = tape.constant(t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0])).unwrap();
    let g = tape.spatial_mean(m).unwrap();
    assert_eq!(tape.value(g).data(), &[2.5]);
}

#[test]
fn matmul_shape_error_names_primitive() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[1, 2], &[1.0, 2.0])).unwrap();
    let b = tape.constant(t(&[3, 1], &[1.0, 2.0, 3.0])).unwrap();
    match tape.matmul(a, b) {
        Err(Error::ShapeMismatch { op, detail }) => {
            assert_eq!(op, "matmul");
            assert!(
                detail.contains("[1, 2]") && detail.contains("[3, 1]"),
                "{detail}"
            );
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn add_refuses_broadcast() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[2, 2], &[1.0; 4])).unwrap();
    let b = tape.constant(t(&[2], &[1.0; 2])).unwrap();
    assert!(matches!(
        tape.add(a, b),
        Err(Error::ShapeMismatch { op: "add", .. })
    ));
}

#[test]
fn non_finite_leaf_rejected() {
    let mut tape = Tape::new();
    let r = tape.leaf(Tensor::from_vec(vec![1.0, f64::NAN]));
    assert!(matches!(r, Err(Error::NonFinite { .. })));
}

#[test]
fn cross_entropy_uniform_is_ln2() {
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::from_vec(vec![0.0, 0.0])).unwrap();
    let ce = tape.softmax_cross_entropy(l, &[0]).unwrap();
    assert!((tape.value(ce).item() - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn cross_entropy_tiny_loss_is_accurate() {
    // ln(1 + e^-20) evaluated at 40 significant digits.
    let oracle = 2.061_153_620_314_381e-9;
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::from_vec(vec![10.0, -10.0])).unwrap();
    let ce = tape.softmax_cross_entropy(l, &[0]).unwrap();
    let v = tape.value(ce).item();
    assert!(((v - oracle) / oracle).abs() < 1e-12, "{v}");
}

#[test]
fn cross_entropy_shift_invariant() {
    for a in [-50.0, 0.0, 3.7, 700.0] {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::from_vec(vec![a, a, a])).unwrap();
        let ce = tape.softmax_cross_entropy(l, &[2]).unwrap();
        assert!((tape.value(ce).item() - 3f64.ln()).abs() < 1e-14);
    }
}

#[test]
fn cross_entropy_label_out_of_range() {
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::from_vec(vec![0.0, 0.0])).unwrap();
    assert!(matches!(
        tape.softmax_cross_entropy(l, &[2]),
        Err(Error::LabelOutOfRange {
            label: 2,
            classes: 2
        })
    ));
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let mut tape = Tape::new();
    let l = tape
        .leaf(Tensor::from_vec(vec![1.0, -0.5, 2.0]).with_grad())
        .unwrap();
    let ce = tape.softmax_cross_entropy(l, &[1]).unwrap();
    tape.backward(ce).unwrap();
    let z: f64 = [1.0f64, -0.5, 2.0].iter().map(|v| v.exp()).sum();
    let expect = [1f64.exp() / z, (-0.5f64).exp() / z - 1.0, 2f64.exp() / z];
    for (g, e) in tape.grad(l).unwrap().iter().zip(expect) {
        assert!((g - e).abs() < 1e-14);
    }
}

#[test]
fn backward_square_sum() {
    let mut tape = Tape::new();
    let x = tape
        .leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]).with_grad())
        .unwrap();
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
}

#[test]
fn backward_relu_subgradient() {
    let mut tape = Tape::new();
    let x = tape
        .leaf(Tensor::from_vec(vec![-1.0, 5.0, 0.0]).with_grad())
        .unwrap();
    let r = tape.relu(x).unwrap();
    let s = tape.sum(r).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0, 0.0]);
}

#[test]
fn backward_accumulates_and_zeroes_unreached() {
    let mut tape = Tape::new();
    let x = tape
        .leaf(Tensor::from_vec(vec![1.0, 2.0]).with_grad())
        .unwrap();
    let unused = tape.leaf(Tensor::from_vec(vec![7.0]).with_grad()).unwrap();
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(unused).unwrap(), &[0.0]);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    tape.zero_grad();
    assert!(tape.grad(x).is_none());
}

#[test]
fn backward_rejects_non_scalar_and_foreign() {
    let mut tape = Tape::new();
    let x = tape
        .leaf(Tensor::from_vec(vec![1.0, 2.0]).with_grad())
        .unwrap();
    assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
    let mut other = Tape::new();
    let y = other.leaf(Tensor::scalar(1.0).with_grad()).unwrap();
    assert!(matches!(tape.backward(y), Err(Error::ForeignVar)));
}

#[test]
fn grad_check_identity_is_exact() {
    // Dyadic inputs and step keep the central difference free of rounding.
    let eps = 1.0 / 65536.0;
    let err = grad_check(
        |tape, v| tape.sum(v[0]),
        &[Tensor::from_vec(vec![0.5, -1.25])],
        eps,
    )
    .unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn grad_check_linear_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = [
        random(&[4, 3], &mut rng),
        random(&[3], &mut rng),
        random(&[5, 4], &mut rng),
    ];
    let err = grad_check(
        |tape, v| {
            let y = tape.matmul(v[2], v[0])?;
            let y = tape.add_bias(y, v[1])?;
            tape.sum(y)
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn grad_check_composite_mlp() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let params = [
        random(&[6, 5], &mut rng),
        random(&[5, 4], &mut rng),
        random(&[4], &mut rng),
        random(&[4, 3], &mut rng),
        random(&[3], &mut rng),
    ];
    let err = grad_check(
        |tape, v| {
            let h = tape.matmul(v[0], v[1])?;
            let h = tape.add_bias(h, v[2])?;
            let h = tape.relu(h)?;
            let o = tape.matmul(h, v[3])?;
            let o = tape.add_bias(o, v[4])?;
            tape.softmax_cross_entropy(o, &[0, 1, 2, 1, 0, 2])
        },
        &params,
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

/// Every primitive against central differences, over 100 seeds.
#[test]
fn every_primitive_matches_finite_differences() {
    type Build = fn(&mut Tape, &[Var]) -> crate::error::Result<Var>;
    let cases: Vec<(&str, Vec<Vec<usize>>, Build)> = vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            let w = t.mul(y, y)?;
            t.sum(w)
        }),
        ("add", vec![vec![5], vec![5]], |t, v| {
            let y = t.add(v[0], v[1])?;
            let w = t.mul(y, y)?;
            t.sum(w)
        }),
        ("add_bias", vec![vec![3, 4], vec![4]], |t, v| {
            let y = t.add_bias(v[0], v[1])?;
            let w = t.mul(y, y)?;
            t.sum(w)
        }),
        ("scale", vec![vec![4]], |t, v| {
            let y = t.scale(v[0], -2.5)?;
            let w = t.mul(y, v[0])?;
            t.sum(w)
        }),
        ("relu", vec![vec![6]], |t, v| {
            let y = t.relu(v[0])?;
            let w = t.mul(y, y)?;
            t.mean(w)
        }),
        ("log_softmax", vec![vec![2, 4]], |t, v| {
            let p = t.softmax(v[0])?;
            let l = t.log(p)?;
            let s = t.select_per_row(l, &[1, 3])?;
            t.mean(s)
        }),
        ("log_clamped", vec![vec![3, 3]], |t, v| {
            let p = t.softmax(v[0])?;
            let l = t.log_clamped(p)?;
            let w = t.mul(l, p)?;
            t.sum(w)
        }),
        ("cross_entropy", vec![vec![3, 5]], |t, v| {
            t.softmax_cross_entropy(v[0], &[4, 0, 2])
        }),
        (
            "conv2d",
            vec![vec![2, 5, 5, 2], vec![3, 2, 3, 3], vec![3]],
            |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], 1, 1)?;
                let w = t.mul(y, y)?;
                t.mean(w)
            },
        ),
        (
            "conv2d_strided",
            vec![vec![1, 6, 6, 1], vec![2, 1, 3, 3], vec![2]],
            |t, v| {
                let y = t.conv2d(v[0], v[1], v[2], 2, 0)?;
                let w = t.mul(y, y)?;
                t.sum(w)
            },
        ),
        ("avg_pool2", vec![vec![2, 4, 4, 3]], |t, v| {
            let y = t.avg_pool2(v[0])?;
            let w = t.mul(y, y)?;
            t.sum(w)
        }),
        ("spatial_mean", vec![vec![2, 3, 3, 4]], |t, v| {
            let y = t.spatial_mean(v[0])?;
            let w = t.mul(y, y)?;
            t.sum(w)
        }),
        ("channel_scale", vec![vec![2, 2, 2, 3]], |t, v| {
            let y = t.channel_scale(v[0], &[1.0, 0.0, 2.0, 0.5, 1.0, 0.0])?;
            let w = t.mul(y, y)?;
            t.sum(w)
        }),
        ("grl", vec![vec![4]], |t, v| {
            let y = t.grl(v[0], 0.7)?;
            let w = t.mul(y, v[0])?;
            t.sum(w)
        }),
    ];
    for (name, shapes, build) in cases {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params: Vec<Tensor> = shapes.iter().map(|s| random(s, &mut rng)).collect();
            let err = if name == "grl" {
                // The reversal is deliberately not the derivative of the forward
                // map; check it against the closed form instead.
                let mut tape = Tape::new();
                let x = tape.leaf(params[0].clone().with_grad()).unwrap();
                let l = build(&mut tape, &[x]).unwrap();
                tape.backward(l).unwrap();
                let g = tape.grad(x).unwrap();
                g.iter()
                    .zip(params[0].data())
                    .map(|(g, x)| (g - (1.0 - 0.7) * x).abs())
                    .fold(0.0, f64::max)
            } else {
                grad_check(build, &params, DEFAULT_EPS).unwrap()
            };
            assert!(err < 1e-4, "{name} seed {seed}: {err}");
        }
    }
}

#[test]
fn forward_replay_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[2, 6, 6, 3], &mut rng);
    let k = random(&[4, 3, 3, 3], &mut rng);
    let b = random(&[4], &mut rng);
    let run = || {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone()).unwrap();
        let kv = tape.constant(k.clone()).unwrap();
        let bv = tape.constant(b.clone()).unwrap();
        let y = tape.conv2d(xv, kv, bv, 1, 1).unwrap();
        let y = tape.relu(y).unwrap();
        let y = tape.spatial_mean(y).unwrap();
        let y = tape.softmax(y).unwrap();
        tape.value(y).clone()
    };
    let (a, b2) = (run(), run());
    assert!(a
        .data()
        .iter()
        .zip(b2.data())
        .all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut tape = Tape::new();
    let x = tape.constant(random(&[20, 7], &mut rng)).unwrap();
    let p = tape.softmax(x).unwrap();
    for r in 0..20 {
        let row = tape.value(p).row(r);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn conv_output_dims() {
    assert_eq!(conv_out_dim(8, 3, 1, 0), Some(6));
    assert_eq!(conv_out_dim(8, 3, 1, 1), Some(8));
    assert_eq!(conv_out_dim(7, 3, 2, 0), Some(3));
    assert_eq!(conv_out_dim(2, 3, 1, 0), None);
}

#[test]
fn grl_negative_lambda_rejected() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_vec(vec![1.0])).unwrap();
    assert!(matches!(tape.grl(x, -0.1), Err(Error::InvalidArgument(_))));
}
