use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::check::{check_gradients, numerical_grad, DEFAULT_EPS};
use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    t(
        shape,
        &(0..n).map(|_| rng.random_range(-1.5..1.5)).collect::<Vec<_>>(),
    )
}

/// Φ(x) by composite Simpson integration of the standard normal density.
fn normal_cdf_quadrature(x: f64) -> f64 {
    let n = 20_000;
    let h = x / n as f64;
    let pdf = |u: f64| (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut acc = pdf(0.0) + pdf(x);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * pdf(i as f64 * h);
    }
    0.5 + acc * h / 3.0
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let i2 = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let p = g.matmul(a, i2).unwrap();
    assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

    let r = g.constant(t(&[1, 2], &[1.0, 2.0]));
    let c = g.constant(t(&[2, 1], &[3.0, 4.0]));
    let p = g.matmul(r, c).unwrap();
    assert_eq!(g.value(p).data(), &[11.0]);
}

#[test]
fn matmul_shape_error_reports_both_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 2]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
}

#[test]
fn matmul_grad_of_sum_is_ones_times_bt() {
    let a = random(&[3, 4], 1);
    let b = random(&[4, 2], 2);
    let mut g = Graph::new();
    let av = g.param(a.clone());
    let bv = g.constant(b.clone());
    let p = g.matmul(av, bv).unwrap();
    let s = g.sum_all(p);
    g.backward(s).unwrap();
    let grad = g.grad(av).unwrap();
    for i in 0..3 {
        for k in 0..4 {
            let expect: f64 = (0..2).map(|j| b.get(&[k, j])).sum();
            assert!((grad.get(&[i, k]) - expect).abs() < 1e-12);
        }
    }
    let numeric = numerical_grad(&[a, b], DEFAULT_EPS, &|g: &mut Graph<f64>, v: &[Var]| {
        let p = g.matmul(v[0], v[1])?;
        Ok(g.sum_all(p))
    })
    .unwrap();
    for (x, y) in grad.data().iter().zip(numeric[0].data()) {
        assert!(check::relative_error(*x, *y) < 1e-6);
    }
}

#[test]
fn batched_matmul_matches_per_batch_products() {
    let a = random(&[2, 3, 4], 3);
    let b = random(&[2, 4, 5], 4);
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
    let p = g.matmul(av, bv).unwrap();
    for bi in 0..2 {
        for i in 0..3 {
            for j in 0..5 {
                let e: f64 = (0..4).map(|k| a.get(&[bi, i, k]) * b.get(&[bi, k, j])).sum();
                assert!((g.value(p).get(&[bi, i, j]) - e).abs() < 1e-12);
            }
        }
    }
    let r = check_gradients(&[a, b], DEFAULT_EPS, |g, v| {
        let p = g.matmul(v[0], v[1])?;
        let s = g.square(p);
        Ok(g.sum_all(s))
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{}", r.max_rel_err);
}

#[test]
fn gelu_values_and_slope() {
    let mut g = Graph::new();
    let x = g.constant(t(&[2], &[0.0, 1.0]));
    let y = g.gelu(x);
    assert_eq!(g.value(y).data()[0], 0.0);
    let oracle = normal_cdf_quadrature(1.0);
    assert!((g.value(y).data()[1] - oracle).abs() < 1e-9);
    assert!((g.value(y).data()[1] - 0.841345).abs() < 1e-6);

    let numeric = numerical_grad(
        &[t(&[1], &[0.0])],
        DEFAULT_EPS,
        &|g: &mut Graph<f64>, v: &[Var]| {
            let y = g.gelu(v[0]);
            Ok(g.sum_all(y))
        },
    )
    .unwrap();
    assert!((numeric[0].data()[0] - 0.5).abs() < 1e-9);

    let mut g = Graph::new();
    let x = g.param(t(&[1], &[0.0]));
    let y = g.gelu(x);
    let s = g.sum_all(y);
    g.backward(s).unwrap();
    assert!((g.grad(x).unwrap().data()[0] - 0.5).abs() < 1e-15);
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::new();
    let a = g.constant(t(&[2], &[1.0, 2.0]));
    let b = g.constant(t(&[2], &[3.0, 4.0]));
    let s = g.add(a, b).unwrap();
    assert_eq!(g.value(s).data(), &[4.0, 6.0]);
    let z = g.sub(a, a).unwrap();
    assert_eq!(g.value(z).data(), &[0.0, 0.0]);

    let c = g.constant(Tensor::zeros(&[3]));
    assert!(matches!(g.add(a, c), Err(Error::Shape { .. })));
}

#[test]
fn mul_gradient_is_other_factor() {
    let x = random(&[2, 3], 5);
    let y = random(&[2, 3], 6);
    let mut g = Graph::new();
    let (xv, yv) = (g.param(x.clone()), g.constant(y.clone()));
    let p = g.mul(xv, yv).unwrap();
    let s = g.sum_all(p);
    g.backward(s).unwrap();
    assert_eq!(g.grad(xv).unwrap(), &y);

    let r = check_gradients(&[x, y], DEFAULT_EPS, |g, v| {
        let p = g.mul(v[0], v[1])?;
        Ok(g.sum_all(p))
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-6);
}

#[test]
fn broadcast_gradients_reduce() {
    let a = random(&[2, 3, 4], 7);
    let bias = random(&[4], 8);
    let col = random(&[3, 1], 9);
    for op in [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div] {
        let r = check_gradients(
            &[a.clone(), bias.map(|v| v + 3.0), col.clone()],
            DEFAULT_EPS,
            |g, v| {
                let x = g.elementwise(op, v[0], v[1])?;
                let y = g.mul(x, v[2])?;
                let s = g.square(y);
                Ok(g.sum_all(s))
            },
        )
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{op:?}: {}", r.max_rel_err);
    }
}

#[test]
fn permute_examples() {
    let x = random(&[2, 3], 10);
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let p = g.permute(v, &[1, 0]).unwrap();
    let pp = g.permute(p, &[1, 0]).unwrap();
    assert_eq!(g.value(pp), &x);

    let v3 = g.constant(Tensor::zeros(&[2, 3, 4]));
    let p3 = g.permute(v3, &[2, 0, 1]).unwrap();
    assert_eq!(g.shape(p3), &[4, 2, 3]);
    assert!(matches!(
        g.permute(v3, &[0, 2, 2]),
        Err(Error::InvalidArgument(_))
    ));

    let w = random(&[4, 2, 3], 11);
    let r = check_gradients(&[random(&[2, 3, 4], 12), w], DEFAULT_EPS, |g, v| {
        let p = g.permute(v[0], &[2, 0, 1])?;
        let m = g.mul(p, v[1])?;
        Ok(g.sum_all(m))
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-6);
}

#[test]
fn permute_roundtrip_preserves_gradients() {
    let x = random(&[2, 3, 4], 13);
    let w = random(&[2, 3, 4], 14);
    let grad_of = |order: Option<&[usize]>| {
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let wv = g.constant(w.clone());
        let mut y = xv;
        if let Some(o) = order {
            let p = g.permute(xv, o).unwrap();
            let inv = crate::tensor::inverse_permutation(o);
            y = g.permute(p, &inv).unwrap();
        }
        let m = g.mul(y, wv).unwrap();
        let s = g.sum_all(m);
        g.backward(s).unwrap();
        g.grad(xv).unwrap().clone()
    };
    assert_eq!(grad_of(Some(&[1, 2, 0])), grad_of(None));
}

#[test]
fn mean_examples() {
    let mut g = Graph::new();
    let v = g.param(t(&[3], &[1.0, 2.0, 3.0]));
    let m = g.mean(v, &[0], false).unwrap();
    assert_eq!(g.value(m).data(), &[2.0]);
    g.backward(m).unwrap();
    for &d in g.grad(v).unwrap().data() {
        assert!((d - 1.0 / 3.0).abs() < 1e-15);
    }

    let w = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let m0 = g.mean(w, &[0], false).unwrap();
    assert_eq!(g.value(m0).data(), &[2.0, 3.0]);
    assert_eq!(g.shape(m0), &[2]);
    let k = g.mean(w, &[1], true).unwrap();
    assert_eq!(g.shape(k), &[2, 1]);
    assert_eq!(g.value(k).data(), &[1.5, 3.5]);
}

#[test]
fn drop_path_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random(&[4, 3], 15);
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let d = g.drop_path(v, 0.0, true, &mut rng).unwrap();
    assert_eq!(g.value(d), &x);
    let d = g.drop_path(v, 0.5, false, &mut rng).unwrap();
    assert_eq!(g.value(d), &x);
    assert!(g.drop_path(v, 1.0, true, &mut rng).is_err());

    // whole samples are dropped, never individual elements
    let d = g.drop_path(v, 0.5, true, &mut rng).unwrap();
    for (row_out, row_in) in g.value(d).data().chunks(3).zip(x.data().chunks(3)) {
        let zeroed = row_out.iter().all(|&o| o == 0.0);
        let scaled = row_out
            .iter()
            .zip(row_in)
            .all(|(&o, &i)| (o - 2.0 * i).abs() < 1e-15);
        assert!(zeroed || scaled);
    }
}

#[test]
fn drop_path_is_unbiased() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let draws = 10_000;
    let mut g = Graph::<f64>::new();
    let v = g.constant(Tensor::ones(&[draws, 1]));
    let d = g.drop_path(v, 0.5, true, &mut rng).unwrap();
    let mean = g.value(d).sum() / draws as f64;
    assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.param(t(&[1], &[3.0]));
    let unused = g.param(t(&[1], &[7.0]));
    let sq = g.square(x);
    let loss = g.sum_all(sq);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
    assert!(g.grad(unused).is_none_or(|t| t.data() == [0.0]));

    // accumulation and reset
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[12.0]);
    g.zero_grads();
    assert!(g.grad(x).is_none());

    let v = g.param(Tensor::zeros(&[2]));
    let sq2 = g.square(v);
    assert!(matches!(g.backward(sq2), Err(Error::InvalidArgument(_))));
}

#[test]
fn diamond_graph_sums_both_paths() {
    let x = random(&[3], 16);
    let r = check_gradients(std::slice::from_ref(&x), DEFAULT_EPS, |g, v| {
        let a = g.gelu(v[0]);
        let b = g.square(v[0]);
        let c = g.mul(a, b)?;
        let d = g.add(c, a)?;
        Ok(g.sum_all(d))
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-6);

    let mut g = Graph::new();
    let v = g.param(x.clone());
    let y = g.add(v, v).unwrap();
    let s = g.sum_all(y);
    g.backward(s).unwrap();
    assert!(g.grad(v).unwrap().data().iter().all(|&d| d == 2.0));
}

#[test]
fn pad_slice_pool_xent_gradients() {
    let x = random(&[2, 7], 17);
    let w = random(&[2, 9], 18);
    let r = check_gradients(&[x.clone(), w], DEFAULT_EPS, |g, v| {
        let p = g.pad_front(v[0], 2)?;
        let m = g.mul(p, v[1])?;
        let s = g.slice_last(m, 1, 6)?;
        let q = g.square(s);
        Ok(g.sum_all(q))
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-6);

    let r = check_gradients(std::slice::from_ref(&x), DEFAULT_EPS, |g, v| {
        let p = g.max_pool(v[0], 3)?;
        let q = g.square(p);
        Ok(g.sum_all(q))
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-6);

    let r = check_gradients(&[random(&[3, 4], 19)], DEFAULT_EPS, |g, v| {
        g.softmax_cross_entropy(v[0], &[0, 3, 1])
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-6);
}

#[test]
fn max_pool_front_aligned_windows() {
    let mut g = Graph::new();
    let v = g.constant(t(&[5], &[9.0, 1.0, 2.0, 3.0, 0.0]));
    let p = g.max_pool(v, 2).unwrap();
    assert_eq!(g.value(p).data(), &[9.0, 2.0, 3.0]);
}

#[test]
fn first_non_finite_names_the_node() {
    let mut g = Graph::new();
    let a = g.param_named("w", t(&[1], &[0.0]));
    let b = g.constant(t(&[1], &[0.0]));
    let _ = g.div(a, b).unwrap();
    let msg = g.first_non_finite().unwrap();
    assert!(msg.contains("div"), "{msg}");
}

fn shape_strategy() -> impl Strategy<Value = (Vec<usize>, u64)> {
    (prop::collection::vec(1usize..4, 1..4), any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(60))]

    #[test]
    fn unary_and_reduction_gradients_match_finite_differences((shape, seed) in shape_strategy()) {
        let x = random(&shape, seed);
        let w = random(&shape, seed.wrapping_add(1));
        let last = shape.len() - 1;
        let r = check_gradients(&[x, w], DEFAULT_EPS, |g, v| {
            let a = g.gelu(v[0]);
            let b = g.mul(a, v[1])?;
            let c = g.abs(b);
            let d = g.affine(c, 0.7, -0.1);
            let e = g.relu(d);
            let m = g.mean(e, &[last], true)?;
            let f = g.sub(v[0], m)?;
            let q = g.square(f);
            Ok(g.sum_all(q))
        }).unwrap();
        prop_assert!(r.max_rel_err < 1e-4, "rel err {}", r.max_rel_err);
    }

    #[test]
    fn linear_layer_gradients_match_finite_differences(
        (lead, seed) in (prop::collection::vec(1usize..4, 1..3), any::<u64>()),
        n in 1usize..5,
        q in 1usize..5,
    ) {
        let mut shape = lead.clone();
        shape.push(n);
        let x = random(&shape, seed);
        let w = random(&[n, q], seed ^ 0xabc);
        let b = random(&[q], seed ^ 0xdef);
        let order: Vec<usize> = (0..shape.len()).rev().collect();
        let r = check_gradients(&[x, w, b], DEFAULT_EPS, |g, v| {
            let y = g.matmul(v[0], v[1])?;
            let y = g.add(y, v[2])?;
            let y = g.gelu(y);
            let y = g.permute(y, &order)?;
            let y = g.square(y);
            Ok(g.mean_all(y))
        }).unwrap();
        prop_assert!(r.max_rel_err < 1e-4, "rel err {}", r.max_rel_err);
    }
}
