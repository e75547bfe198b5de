use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Central finite differences over every entry of every leaf, compared with
/// the reverse sweep. Returns the max of |a-b|/max(1,|a|,|b|).
fn gradcheck(leaves: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let h = 1e-5;
    let mut g = Graph::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone(), true).unwrap()).collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss).unwrap();
    let eval = |ls: &[Tensor]| {
        let mut g = Graph::new();
        let vs: Vec<Var> = ls.iter().map(|t| g.leaf(t.clone(), true).unwrap()).collect();
        let l = build(&mut g, &vs);
        g.value(l).item()
    };
    let mut worst: f64 = 0.0;
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = grads.wrt(&g, vars[li]);
        for k in 0..leaf.len() {
            let mut plus = leaves.to_vec();
            plus[li].data_mut()[k] += h;
            let mut minus = leaves.to_vec();
            minus[li].data_mut()[k] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[k];
            worst = worst.max((a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs()));
        }
    }
    worst
}

#[test]
fn linear_zero_input_gives_bias() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[3, 2])).unwrap();
    let w = g.constant(Tensor::full(&[2, 4], 0.7)).unwrap();
    let b = g.constant(Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
    let y = g.linear(x, w, Some(b)).unwrap();
    for r in 0..3 {
        assert_eq!(g.value(y).row(r), &[1.0, 2.0, 3.0, 4.0]);
    }
}

#[test]
fn linear_identity_weight() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xt = rand_tensor(&mut rng, &[4, 3]);
    let mut g = Graph::new();
    let x = g.constant(xt.clone()).unwrap();
    let eye = Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
    let w = g.constant(eye).unwrap();
    let b = g.constant(Tensor::zeros(&[3])).unwrap();
    let y = g.linear(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y), &xt);
}

#[test]
fn linear_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (xt, wt, bt) = (
        rand_tensor(&mut rng, &[2, 3]),
        rand_tensor(&mut rng, &[3, 2]),
        rand_tensor(&mut rng, &[2]),
    );
    let mut g = Graph::new();
    let x = g.constant(xt.clone()).unwrap();
    let w = g.constant(wt.clone()).unwrap();
    let b = g.constant(bt.clone()).unwrap();
    let y = g.linear(x, w, Some(b)).unwrap();
    for i in 0..2 {
        for j in 0..2 {
            let mut s = bt.data()[j];
            for k in 0..3 {
                s += xt.data()[i * 3 + k] * wt.data()[k * 2 + j];
            }
            assert!((g.value(y).data()[i * 2 + j] - s).abs() < 1e-12);
        }
    }
}

#[test]
fn linear_shape_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    let w = g.constant(Tensor::zeros(&[4, 2])).unwrap();
    match g.linear(x, w, None) {
        Err(TensorError::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 2]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 5], 0.3)).unwrap();
    let y = g.softmax(x).unwrap();
    assert!(g.value(y).data().iter().all(|v| (v - 0.2).abs() < 1e-15));

    let x = g
        .constant(Tensor::new(vec![2], vec![0.0, 3f64.ln()]).unwrap())
        .unwrap();
    let y = g.softmax(x).unwrap();
    assert!((g.value(y).data()[0] - 0.25).abs() < 1e-12);
    assert!((g.value(y).data()[1] - 0.75).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let base = rand_tensor(&mut rng, &[3, 6]);
    let shifted = Tensor::new(vec![3, 6], base.data().iter().map(|v| v + 123.4).collect()).unwrap();
    let a = g.constant(base).unwrap();
    let b = g.constant(shifted).unwrap();
    let (sa, sb) = (g.softmax(a).unwrap(), g.softmax(b).unwrap());
    for (p, q) in g.value(sa).data().iter().zip(g.value(sb).data()) {
        assert!((p - q).abs() < 1e-12);
    }
    for r in 0..3 {
        let row = g.value(sa).row(r);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(row.iter().all(|&v| v > 0.0));
    }
}

#[test]
fn softmax_rejects_nan() {
    let mut g = Graph::new().with_finite_checks(false);
    let x = g
        .constant(Tensor::new(vec![2], vec![f64::NAN, 0.0]).unwrap())
        .unwrap();
    assert!(matches!(g.softmax(x), Err(TensorError::NonFinite { .. })));
}

#[test]
fn layer_norm_cases() {
    let mut g = Graph::new();
    let gamma = g.constant(Tensor::full(&[4], 1.0)).unwrap();
    let beta = g.constant(Tensor::zeros(&[4])).unwrap();
    let x = g.constant(Tensor::full(&[1, 4], 2.5)).unwrap();
    let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|v| *v == 0.0));

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let xt = rand_tensor(&mut rng, &[3, 4]);
    let gt = rand_tensor(&mut rng, &[4]);
    let bt = rand_tensor(&mut rng, &[4]);
    let x = g.constant(xt.clone()).unwrap();
    let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
    for r in 0..3 {
        let row = g.value(y).row(r);
        let mean = row.iter().sum::<f64>() / 4.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6);
    }

    let gv = g.constant(gt.clone()).unwrap();
    let bv = g.constant(bt.clone()).unwrap();
    let y = g.layer_norm(x, gv, bv, 1e-5).unwrap();
    for r in 0..3 {
        let row = xt.row(r);
        let mean = row.iter().sum::<f64>() / 4.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        for j in 0..4 {
            let want = (row[j] - mean) / (var + 1e-5).sqrt() * gt.data()[j] + bt.data()[j];
            assert!((g.value(y).row(r)[j] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn conv2d_delta_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xt = rand_tensor(&mut rng, &[1, 6, 7]);
    let mut kt = Tensor::zeros(&[1, 1, 3, 3]);
    kt.data_mut()[4] = 1.0;
    let mut g = Graph::new();
    let x = g.constant(xt.clone()).unwrap();
    let k = g.constant(kt).unwrap();
    let y = g.conv2d(x, k, None, 1, 1).unwrap();
    assert_eq!(g.value(y), &xt);
}

#[test]
fn conv2d_stride_two_shapes() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 98, 40])).unwrap();
    let k1 = g.constant(Tensor::zeros(&[2, 1, 3, 3])).unwrap();
    let k2 = g.constant(Tensor::zeros(&[2, 2, 3, 3])).unwrap();
    let y1 = g.conv2d(x, k1, None, 2, 1).unwrap();
    assert_eq!(g.shape(y1), &[2, 49, 20]);
    let y2 = g.conv2d(y1, k2, None, 2, 1).unwrap();
    assert_eq!(g.shape(y2), &[2, 25, 10]);
}

#[test]
fn conv2d_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let xt = rand_tensor(&mut rng, &[1, 5, 5]);
    let kt = rand_tensor(&mut rng, &[1, 1, 3, 3]);
    let mut g = Graph::new();
    let x = g.constant(xt.clone()).unwrap();
    let k = g.constant(kt.clone()).unwrap();
    let y = g.conv2d(x, k, None, 1, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 3, 3]);
    for i in 0..3 {
        for j in 0..3 {
            let mut s = 0.0;
            for a in 0..3 {
                for b in 0..3 {
                    s += xt.data()[(i + a) * 5 + j + b] * kt.data()[a * 3 + b];
                }
            }
            assert!((g.value(y).data()[i * 3 + j] - s).abs() < 1e-12);
        }
    }
}

#[test]
fn conv2d_kernel_larger_than_input() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 2])).unwrap();
    let k = g.constant(Tensor::zeros(&[1, 1, 5, 5])).unwrap();
    assert!(matches!(
        g.conv2d(x, k, None, 1, 0),
        Err(TensorError::Shape { .. })
    ));
}

#[test]
fn backward_trivial_cases() {
    let mut g = Graph::new();
    let w = g
        .leaf(Tensor::new(vec![1, 3], vec![0.5, -1.0, 2.0]).unwrap(), true)
        .unwrap();
    let p = g.leaf(Tensor::full(&[2], 3.0), true).unwrap();
    let x = g
        .constant(Tensor::new(vec![3, 1], vec![1.5, 2.5, -0.5]).unwrap())
        .unwrap();
    let y = g.matmul(w, x).unwrap();
    let loss = g.sum(y).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.wrt(&g, w).data(), &[1.5, 2.5, -0.5]);
    assert_eq!(grads.wrt(&g, p).data(), &[0.0, 0.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[2]), true).unwrap();
    assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn backward_accumulates_into_store() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::full(&[2], 1.0)).unwrap();
    for _ in 0..2 {
        let mut g = Graph::new();
        let w = g.param(&store, id).unwrap();
        let l = g.sum(w).unwrap();
        let grads = g.backward(l).unwrap();
        store.accumulate(&grads, 1.0);
    }
    assert_eq!(store.get(id).grad.data(), &[2.0, 2.0]);
    store.zero_grad();
    assert_eq!(store.get(id).grad.data(), &[0.0, 0.0]);
}

#[test]
fn frozen_param_gets_no_gradient() {
    let mut store = ParamStore::new();
    let id = store.add("enc.w", Tensor::full(&[2], 1.0)).unwrap();
    store.set_trainable("enc.", false);
    let mut g = Graph::new();
    let w = g.param(&store, id).unwrap();
    let l = g.sum(w).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.params().count(), 0);
}

#[test]
fn nan_detection() {
    let mut g = Graph::new().with_finite_checks(true);
    let x = g.constant(Tensor::full(&[1], -1.0)).unwrap();
    let big = g.affine(x, 1e308, 0.0).unwrap();
    assert!(matches!(
        g.affine(big, 10.0, 0.0),
        Err(TensorError::NonFinite { op: "affine" })
    ));
}

#[test]
fn gradcheck_elementwise_and_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let leaves = vec![rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[3, 4])];
    let err = gradcheck(&leaves, |g, v| {
        let a = g.mul(v[0], v[1]).unwrap();
        let b = g.sub(a, v[1]).unwrap();
        let c = g.sigmoid(b).unwrap();
        let d = g.add(c, v[0]).unwrap();
        let e = g.relu(d).unwrap();
        let f = g.affine(e, 1.7, 0.2).unwrap();
        let f = g.mul(f, f).unwrap();
        g.mean(f).unwrap()
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn gradcheck_attention_block() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let leaves = vec![
        rand_tensor(&mut rng, &[4, 6]),
        rand_tensor(&mut rng, &[6, 6]),
        rand_tensor(&mut rng, &[6]),
        rand_tensor(&mut rng, &[6]),
        rand_tensor(&mut rng, &[6]),
    ];
    let bias = rand_tensor(&mut rng, &[4, 4]);
    let err = gradcheck(&leaves, move |g, v| {
        let n = g.layer_norm(v[0], v[3], v[4], 1e-5).unwrap();
        let q = g.linear(n, v[1], Some(v[2])).unwrap();
        let h0 = g.slice_cols(q, 0, 3).unwrap();
        let h1 = g.slice_cols(q, 3, 3).unwrap();
        let s = g.matmul_bt(h0, h1).unwrap();
        let s = g.add_const(s, &bias).unwrap();
        let p = g.softmax(s).unwrap();
        let o = g.matmul(p, h1).unwrap();
        let cat = g.concat_cols(&[o, h0]).unwrap();
        let r = g.reshape(cat, &[2, 12]).unwrap();
        let r = g.mul(r, r).unwrap();
        g.sum(r).unwrap()
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn gradcheck_conv_embedding_ce() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let leaves = vec![
        rand_tensor(&mut rng, &[1, 7, 6]),
        rand_tensor(&mut rng, &[2, 1, 3, 3]),
        rand_tensor(&mut rng, &[2]),
        rand_tensor(&mut rng, &[5, 6]),
        rand_tensor(&mut rng, &[6, 5]),
    ];
    let err = gradcheck(&leaves, |g, v| {
        let c = g.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap();
        let c = g.relu(c).unwrap();
        let c = g.permute3(c, [1, 0, 2]).unwrap();
        let c = g.reshape(c, &[4, 6]).unwrap();
        let e = g.embedding(v[3], &[1, 4, 1, 0]).unwrap();
        let x = g.add(c, e).unwrap();
        let logits = g.matmul(x, v[4]).unwrap();
        g.smoothed_cross_entropy(logits, &[0, 3, 2, 4], 0.1).unwrap()
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut g = Graph::new();
        let a = g.leaf(rand_tensor(&mut rng, &[5, 5]), true).unwrap();
        let b = g.leaf(rand_tensor(&mut rng, &[5, 5]), true).unwrap();
        let c = g.matmul(a, b).unwrap();
        let c = g.softmax(c).unwrap();
        let c = g.mul(c, a).unwrap();
        let l = g.sum(c).unwrap();
        let gr = g.backward(l).unwrap();
        (gr.wrt(&g, a), gr.wrt(&g, b))
    };
    let (x, y) = run();
    let (x2, y2) = run();
    assert_eq!(x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
               x2.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(y, y2);
}

#[test]
fn smoothed_ce_values() {
    let mut g = Graph::new();
    let l = g.constant(Tensor::zeros(&[2, 7])).unwrap();
    let ce = g.smoothed_cross_entropy(l, &[3, 5], 0.3).unwrap();
    assert!((g.value(ce).item() - 2.0 * 7f64.ln()).abs() < 1e-12);

    let l = g
        .constant(Tensor::new(vec![1, 2], vec![3f64.ln(), 0.0]).unwrap())
        .unwrap();
    let ce = g.smoothed_cross_entropy(l, &[0], 0.1).unwrap();
    let want = 0.9 * (4.0f64 / 3.0).ln() + 0.1 * (((4.0f64 / 3.0).ln() + 4f64.ln()) / 2.0);
    assert!((g.value(ce).item() - want).abs() < 1e-12);
}
