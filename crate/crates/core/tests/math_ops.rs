use std::rc::Rc;

use gridroad_core::gradcheck::{check_fn, op_suite};
use gridroad_core::math::{cosine, Graph, Neighbourhoods, Tensor};
use gridroad_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn triple_loop(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = Tensor::zeros(vec![m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.get(&[i, p]) * b.get(&[p, j]);
            }
            out.set(&[i, j], s);
        }
    }
    out
}

#[test]
fn matmul_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::new();
    let a = g.constant(rand_tensor(&[3, 3], &mut rng));
    let i = g.constant(Tensor::eye(3));
    let ai = g.matmul(a, i).unwrap();
    assert_eq!(g.value(ai), g.value(a));

    let two = g.constant(Tensor::new(vec![1, 1], vec![2.0]).unwrap());
    let three = g.constant(Tensor::new(vec![1, 1], vec![3.0]).unwrap());
    let six = g.matmul(two, three).unwrap();
    assert_eq!(g.value(six).data(), &[6.0]);

    let at = rand_tensor(&[5, 4], &mut rng);
    let bt = rand_tensor(&[4, 7], &mut rng);
    let expected = triple_loop(&at, &bt);
    let a = g.constant(at);
    let b = g.constant(bt);
    let c = g.matmul(a, b).unwrap();
    assert!(g.value(c).max_abs_diff(&expected) < 1e-12);
}

#[test]
fn matmul_shape_mismatch_names_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![4, 5]));
    match g.matmul(a, b) {
        Err(Error::Dimension(msg)) => {
            assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![1, 3], vec![0.7, 0.7, 0.7]).unwrap());
    let s = g.softmax_last(x, None).unwrap();
    for &v in g.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    let x = g.constant(Tensor::new(vec![1, 1], vec![-4.2]).unwrap());
    let s = g.softmax_last(x, None).unwrap();
    assert_eq!(g.value(s).data(), &[1.0]);

    let x = g.constant(Tensor::new(vec![1, 2], vec![0.0, 2f64.ln()]).unwrap());
    let s = g.softmax_last(x, None).unwrap();
    assert!((g.value(s).data()[0] - 1.0 / 3.0).abs() < 1e-15);
    assert!((g.value(s).data()[1] - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn softmax_mask_zeroes_and_rejects_empty_rows() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![2, 3], vec![1.0, 5.0, 2.0, 0.0, 0.0, 0.0]).unwrap());
    let mask = [true, false, true, true, true, false];
    let s = g.softmax_last(x, Some(&mask)).unwrap();
    let v = g.value(s).data();
    assert_eq!(v[1], 0.0);
    assert_eq!(v[5], 0.0);
    assert!((v[0] + v[2] - 1.0).abs() < 1e-15);
    assert!((v[3] - 0.5).abs() < 1e-15);

    let bad = [false, false, false, true, true, true];
    assert!(matches!(g.softmax_last(x, Some(&bad)), Err(Error::Contract(_))));
}

#[test]
fn conv_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = rand_tensor(&[4, 5, 1], &mut rng);
    let mut delta = Tensor::zeros(vec![3, 3, 1, 1]);
    delta.set(&[1, 1, 0, 0], 1.0);
    let mut g = Graph::new();
    let x = g.constant(img.clone());
    let k = g.constant(delta);
    let b = g.constant(Tensor::zeros(vec![1]));
    let y = conv(&mut g, x, k, b);
    assert_eq!(g.value(y).data(), img.data());
    assert_eq!(g.shape(y), &[4, 5, 1]);

    let zk = g.constant(Tensor::zeros(vec![3, 3, 1, 2]));
    let zb = g.constant(Tensor::zeros(vec![2]));
    let y = conv(&mut g, x, zk, zb);
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let ones = g.constant(Tensor::full(vec![4, 4, 1], 1.0));
    let ok = g.constant(Tensor::full(vec![3, 3, 1, 1], 1.0));
    let y = conv(&mut g, ones, ok, b);
    let v = g.value(y);
    assert_eq!(v.get(&[0, 0, 0]), 4.0);
    assert_eq!(v.get(&[1, 2, 0]), 9.0);
    assert_eq!(v.get(&[0, 2, 0]), 6.0);
}

fn conv(g: &mut Graph, x: gridroad_core::math::Var, k: gridroad_core::math::Var, b: gridroad_core::math::Var) -> gridroad_core::math::Var {
    gridroad_core::model::layers::conv2d_same(g, x, k, b).unwrap()
}

#[test]
fn conv_channel_mismatch() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(vec![3, 3, 2]));
    let k = g.constant(Tensor::zeros(vec![3, 3, 3, 1]));
    let b = g.constant(Tensor::zeros(vec![1]));
    assert!(matches!(
        gridroad_core::model::layers::conv2d_same(&mut g, x, k, b),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
    let r = g.relu(x);
    assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
    let z = g.constant(Tensor::scalar(0.0));
    let s = g.sin(z);
    assert_eq!(g.value(s).item(), 0.0);
    let a = g.constant(Tensor::zeros(vec![3]));
    let b = g.constant(Tensor::zeros(vec![4]));
    let c = g.concat_last(&[a, b]).unwrap();
    assert_eq!(g.shape(c), &[7]);
    let bad = g.constant(Tensor::zeros(vec![2, 4]));
    assert!(g.add(a, b).is_err());
    assert!(g.concat_last(&[a, bad]).is_err());
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    let k = 7;
    let x = g.constant(Tensor::full(vec![2, k], 0.3));
    let l = g.cross_entropy(x, &[1, 5]).unwrap();
    assert!((g.value(l).item() - (k as f64).ln()).abs() < 1e-12);

    let mut hot = Tensor::zeros(vec![1, 3]);
    hot.set(&[0, 2], 1e9);
    let x = g.constant(hot);
    let l = g.cross_entropy(x, &[2]).unwrap();
    assert!(g.value(l).item().abs() < 1e-12);

    let x = g.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
    let l = g.cross_entropy(x, &[0]).unwrap();
    let e = std::f64::consts::E;
    assert!((g.value(l).item() - (-(e / (e + 1.0)).ln())).abs() < 1e-12);
    assert!((g.value(l).item() - 0.3133).abs() < 1e-4);

    assert!(matches!(g.cross_entropy(x, &[2]), Err(Error::Index(_))));
}

#[test]
fn cosine_examples() {
    let u = [0.3, -1.2, 2.0];
    assert!((cosine(&u, &u).unwrap() - 1.0).abs() < 1e-15);
    assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Contract(_))));
}

#[test]
fn backward_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new();
    let w = g.leaf(rand_tensor(&[3, 4], &mut rng));
    let unused = g.leaf(rand_tensor(&[2], &mut rng));
    let s = g.sum(w);
    let grads = g.backward(s).unwrap();
    assert!(grads.wrt(w).unwrap().data().iter().all(|&v| v == 1.0));
    assert!(grads.wrt(unused).is_none());

    let nonscalar = g.relu(w);
    assert!(matches!(g.backward(nonscalar), Err(Error::Contract(_))));
}

#[test]
fn backward_matches_fd_on_wx_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let w = rand_tensor(&[4, 3], &mut rng);
    let x = rand_tensor(&[3, 1], &mut rng);
    let report = check_fn("||Wx||^2", &[w, x], 100, 0, |g, v| {
        let y = g.matmul(v[0], v[1])?;
        let sq = g.mul(y, y)?;
        Ok(g.sum(sq))
    })
    .unwrap();
    assert!(report.passed(), "{report}");
}

/// Every differentiable op against central differences.
#[test]
fn op_gradients_match_finite_differences() {
    let report = op_suite(11).unwrap();
    println!("{report}");
    assert!(report.passed(), "{report}");
}

#[test]
fn graph_attention_single_node() {
    let mut g = Graph::new();
    let graph = Rc::new(Neighbourhoods { nbrs: vec![vec![0]] });
    let z = g.constant(Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let a = g.constant(Tensor::full(vec![2, 2], 0.5));
    let y = g.graph_attention(z, a, a, &graph, 2, 0.2).unwrap();
    assert_eq!(g.value(y).data(), g.value(z).data());
    assert_eq!(g.attention_weights(y, 0, 1).unwrap(), vec![1.0]);

    let dangling = Rc::new(Neighbourhoods { nbrs: vec![vec![0, 3]] });
    assert!(matches!(g.graph_attention(z, a, a, &dangling, 2, 0.2), Err(Error::Graph(_))));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(
        row in prop::collection::vec(-30.0f64..30.0, 1..12),
        shift in -50.0f64..50.0,
    ) {
        let n = row.len();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, n], row.clone()).unwrap());
        let xs = g.constant(Tensor::new(vec![1, n], row.iter().map(|v| v + shift).collect()).unwrap());
        let a = g.softmax_last(x, None).unwrap();
        let b = g.softmax_last(xs, None).unwrap();
        prop_assert!((g.value(a).sum() - 1.0).abs() < 1e-9);
        prop_assert!(g.value(a).data().iter().all(|&p| p >= 0.0));
        prop_assert!(g.value(a).max_abs_diff(g.value(b)) < 1e-9);
    }

    #[test]
    fn cosine_scale_invariant(
        u in prop::collection::vec(-10.0f64..10.0, 5),
        v in prop::collection::vec(-10.0f64..10.0, 5),
        a in 0.01f64..100.0,
        b in 0.01f64..100.0,
    ) {
        prop_assume!(u.iter().any(|x| x.abs() > 1e-3) && v.iter().any(|x| x.abs() > 1e-3));
        let base = cosine(&u, &v).unwrap();
        let ua: Vec<f64> = u.iter().map(|x| x * a).collect();
        let vb: Vec<f64> = v.iter().map(|x| x * b).collect();
        prop_assert!((cosine(&ua, &vb).unwrap() - base).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&base));
    }

    #[test]
    fn delta_kernel_is_identity(h in 1usize..6, w in 1usize..6, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = rand_tensor(&[h, w, 2], &mut rng);
        let mut k = Tensor::zeros(vec![3, 3, 2, 2]);
        k.set(&[1, 1, 0, 0], 1.0);
        k.set(&[1, 1, 1, 1], 1.0);
        let mut g = Graph::new();
        let x = g.constant(img.clone());
        let kv = g.constant(k);
        let b = g.constant(Tensor::zeros(vec![2]));
        let y = conv(&mut g, x, kv, b);
        prop_assert_eq!(g.value(y).data(), img.data());
    }
}
