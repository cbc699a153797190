use std::cell::Cell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::entmax::EntmaxConfig;
use crate::error::MladError;

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn matmul_sum_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = [rand_tensor(&mut rng, 3, 4), rand_tensor(&mut rng, 4, 2)];
    let err = grad_check(
        |g, p| {
            let m = g.matmul(p[0], p[1])?;
            g.sum(m)
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn exp_and_log_values() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![2], vec![0.0, 1.0]).unwrap());
    let e = g.unary(UnaryOp::Exp, x).unwrap();
    assert_eq!(g.value(e).data(), &[1.0, std::f64::consts::E]);

    let xs = g.constant(Tensor::new(vec![3], vec![-2.0, 0.0, 3.0]).unwrap());
    let ex = g.unary(UnaryOp::Exp, xs).unwrap();
    let back = g.unary(UnaryOp::Log, ex).unwrap();
    for (a, b) in g.value(back).data().iter().zip([-2.0, 0.0, 3.0]) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn exp_gradient_at_one() {
    let err = grad_check(
        |g, p| {
            let e = g.unary(UnaryOp::Exp, p[0])?;
            g.sum(e)
        },
        &[Tensor::scalar(1.0).unwrap()],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-7, "{err}");
}

#[test]
fn domain_and_shape_errors() {
    let mut g = Graph::new();
    let neg = g.constant(Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
    assert!(matches!(
        g.unary(UnaryOp::Log, neg),
        Err(MladError::NumericDomain { .. })
    ));
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(g.add(a, b), Err(MladError::Dimension { .. })));
    let zero = g.constant(Tensor::scalar(0.0).unwrap());
    assert!(g.div(a, zero).is_err());
}

#[test]
fn leaf_and_product_rule() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(2.0).unwrap());
    g.backward(x).unwrap();
    assert_eq!(g.grad(x).item(), 1.0);

    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(2.0).unwrap());
    let y = g.param(Tensor::scalar(3.0).unwrap());
    let xy = g.mul(x, y).unwrap();
    g.backward(xy).unwrap();
    assert_eq!(g.grad(x).item(), 3.0);
    assert_eq!(g.grad(y).item(), 2.0);
    // a second pass accumulates until zeroed
    g.backward(xy).unwrap();
    assert_eq!(g.grad(x).item(), 6.0);
    g.zero_grad();
    assert_eq!(g.grad(x).item(), 0.0);
}

#[test]
fn non_scalar_root_is_rejected() {
    let mut g = Graph::new();
    let x = g.param(Tensor::zeros(&[2, 2]));
    assert!(matches!(g.backward(x), Err(MladError::Contract(_))));
}

#[test]
fn square_grad_check_is_tight() {
    let err = grad_check(
        |g, p| g.unary(UnaryOp::Square, p[0]),
        &[Tensor::scalar(3.0).unwrap()],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn grad_check_rejects_nondeterminism_and_bad_steps() {
    let calls = Cell::new(0.0);
    let res = grad_check(
        |g, p| {
            calls.set(calls.get() + 1.0);
            let c = g.constant(Tensor::scalar(calls.get()).unwrap());
            g.mul(p[0], c)
        },
        &[Tensor::scalar(1.0).unwrap()],
        1e-5,
    );
    assert!(matches!(res, Err(MladError::Contract(_))));
    let res = grad_check(|g, p| g.sum(p[0]), &[Tensor::scalar(1.0).unwrap()], 1e-2);
    assert!(matches!(res, Err(MladError::Contract(_))));
}

#[test]
fn attention_output_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let segments = Segment::packed([3, 4]);
    let cfg = EntmaxConfig::with_alpha(1.5).unwrap();
    let t = rand_tensor(&mut rng, 7, 4);
    let params = [
        rand_tensor(&mut rng, 4, 4),
        rand_tensor(&mut rng, 4, 4),
        rand_tensor(&mut rng, 4, 4),
    ];
    let weights_mix = rand_tensor(&mut rng, 7, 4);
    let err = grad_check(
        |g, p| {
            let x = g.constant(t.clone());
            let q = g.matmul(x, p[0])?;
            let k = g.matmul(x, p[1])?;
            let v = g.matmul(x, p[2])?;
            let a = g.attention(q, k, v, &segments, 2, &cfg, None)?;
            // weight the outputs so the gradient is not trivially constant
            let w = g.constant(weights_mix.clone());
            let aw = g.mul(a, w)?;
            g.sum(aw)
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

#[test]
fn self_attention_with_aliased_inputs_and_dropout() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let segments = Segment::packed([5]);
    let keep: Vec<f64> = (0..25).map(|i| if i % 3 == 0 { 0.0 } else { 1.5 }).collect();
    for alpha in [1.0, 1.3, 2.0] {
        let cfg = EntmaxConfig::with_alpha(alpha).unwrap();
        let mix = rand_tensor(&mut rng, 5, 2);
        let err = grad_check(
            |g, p| {
                let a = g.attention(p[0], p[0], p[0], &segments, 1, &cfg, Some(keep.clone()))?;
                let w = g.constant(mix.clone());
                let aw = g.mul(a, w)?;
                g.sum(aw)
            },
            &[rand_tensor(&mut rng, 5, 2)],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "alpha {alpha}: {err}");
    }
}

#[test]
fn zero_query_key_projection_gives_uniform_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let t = rand_tensor(&mut rng, 4, 3);
    let mut g = Graph::new();
    let zeros = g.constant(Tensor::zeros(&[4, 3]));
    let v = g.constant(t.clone());
    let cfg = EntmaxConfig::with_alpha(1.5).unwrap();
    let out = g
        .attention(zeros, zeros, v, &Segment::packed([4]), 1, &cfg, None)
        .unwrap();
    for w in g.attention_weights(out).unwrap() {
        assert!((w - 0.25).abs() < 1e-15);
    }
    for c in 0..3 {
        let mean = (0..4).map(|r| t.get(r, c)).sum::<f64>() / 4.0;
        for r in 0..4 {
            assert!((g.value(out).get(r, c) - mean).abs() < 1e-12);
        }
    }
    // a single-row window attends to itself with weight one
    let single = g.constant(t.clone());
    let out = g
        .attention(single, single, single, &Segment::packed([1, 3]), 1, &cfg, None)
        .unwrap();
    assert_eq!(g.attention_weights(out).unwrap()[0], 1.0);
    assert_eq!(g.value(out).row(0), t.row(0));
}

#[test]
fn layer_norm_logsumexp_and_segment_mean_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mixes = rand_tensor(&mut rng, 6, 5);
    let params = [
        rand_tensor(&mut rng, 6, 5),
        rand_tensor(&mut rng, 1, 5),
        rand_tensor(&mut rng, 1, 5),
    ];
    let err = grad_check(
        |g, p| {
            let y = g.layer_norm(p[0], p[1], p[2], 1e-5)?;
            let c = g.unary(UnaryOp::Celu(1.0), y)?;
            let w = g.constant(mixes.clone());
            let cw = g.mul(c, w)?;
            let lse = g.logsumexp_rows(cw)?;
            let pooled = g.segment_mean(cw, &Segment::packed([2, 4]))?;
            let sq = g.unary(UnaryOp::Square, pooled)?;
            let a = g.sum(lse)?;
            let b = g.sum(sq)?;
            g.add(a, b)
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn spd_ops_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let base = rand_tensor(&mut rng, 3, 3);
    let d = rand_tensor(&mut rng, 5, 3);
    let err = grad_check(
        |g, p| {
            // S = A Aᵀ + I is symmetric positive definite.
            let at = g.transpose(p[0])?;
            let aat = g.matmul(p[0], at)?;
            let eye = g.constant(Tensor::eye(3));
            let s = g.add(aat, eye)?;
            let m = g.mahalanobis(p[1], s)?;
            let ld = g.logdet_spd(s)?;
            let diag = g.diag(s)?;
            let r = g.unary(UnaryOp::Recip, diag)?;
            let ms = g.sum(m)?;
            let rs = g.sum(r)?;
            let t = g.add(ms, ld)?;
            g.add(t, rs)
        },
        &[base, d],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn column_ops_and_broadcast_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let params = [rand_tensor(&mut rng, 4, 3), Tensor::scalar(0.7).unwrap()];
    let err = grad_check(
        |g, p| {
            let c0 = g.select_col(p[0], 0)?;
            let c2 = g.select_col(p[0], 2)?;
            let cat = g.concat_cols(&[c2, c0, c2])?;
            let scaled = g.mul(cat, p[1])?;
            let shifted = g.sub(p[1], scaled)?;
            let ratio = g.div(shifted, p[1])?;
            let rs = g.row_sum(ratio)?;
            let sq = g.unary(UnaryOp::Square, rs)?;
            let ent = g.row_entmax(p[0], &EntmaxConfig::with_alpha(1.4)?)?;
            let e = g.unary(UnaryOp::Exp, ent)?;
            let a = g.mean(sq)?;
            let b = g.sum(e)?;
            g.add(a, b)
        },
        &params,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

/// Randomly composed graphs of depth ≤ 6 over a pool of smooth ops.
#[test]
fn random_composite_graphs_pass_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    for trial in 0..40 {
        let depth = rng.gen_range(1..=6);
        let ops: Vec<u8> = (0..depth).map(|_| rng.gen_range(0..8)).collect();
        let params = [rand_tensor(&mut rng, 3, 3), rand_tensor(&mut rng, 3, 3)];
        let err = grad_check(
            |g, p| {
                let mut x = p[0];
                for &op in &ops {
                    x = match op {
                        0 => g.matmul(x, p[1])?,
                        1 => g.add(x, p[1])?,
                        2 => g.mul(x, p[1])?,
                        3 => g.unary(UnaryOp::Celu(1.0), x)?,
                        4 => g.transpose(x)?,
                        5 => {
                            let s = g.unary(UnaryOp::Square, x)?;
                            g.scale(s, 0.5)?
                        }
                        6 => g.row_entmax(x, &EntmaxConfig::with_alpha(1.5)?)?,
                        _ => {
                            let e = g.unary(UnaryOp::Scale(0.3), x)?;
                            g.unary(UnaryOp::Exp, e)?
                        }
                    };
                }
                let w = g.sub(x, p[0])?;
                let sq = g.unary(UnaryOp::Square, w)?;
                g.sum(sq)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "trial {trial} ops {ops:?}: {err}");
    }
}

#[test]
fn gradient_shapes_match_values() {
    let mut g = Graph::new();
    let a = g.param(Tensor::zeros(&[2, 3]));
    let b = g.param(Tensor::filled(&[3, 4], 0.5).unwrap());
    let m = g.matmul(a, b).unwrap();
    let s = g.sum(m).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(a).shape(), &[2, 3]);
    assert_eq!(g.grad(b).shape(), &[3, 4]);
    assert_eq!(g.grad(m).shape(), &[2, 4]);
}
