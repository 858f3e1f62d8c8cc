use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

#[test]
fn tensor_rejects_inconsistent_shape() {
    assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
    assert!(Tensor::new(&[0], vec![]).is_err());
}

#[test]
fn concat_along_last_axis() {
    let mut g = Graph::new();
    let a = g.input(t(&[2], &[1.0, 2.0]));
    let b = g.input(t(&[1], &[3.0]));
    let c = g.concat(&[a, b]).unwrap();
    assert_eq!(g.value(c), &[1.0, 2.0, 3.0]);
    assert_eq!(g.shape(c), &[3]);
}

#[test]
fn concat_rejects_mismatched_rows() {
    let mut g = Graph::new();
    let a = g.input(t(&[2, 1], &[1.0, 2.0]));
    let b = g.input(t(&[3, 1], &[1.0, 2.0, 3.0]));
    let err = g.concat(&[a, b]).unwrap_err();
    assert!(matches!(err, Error::Shape { op: "concat", .. }));
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut g = Graph::new();
    let a = g.input(t(&[3], &[0.0, 0.0, 0.0]));
    let s = g.softmax(a);
    for &p in g.value(s) {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn identity_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = Tensor::uniform(&[3, 3], 1.0, &mut rng);
    let mut g = Graph::new();
    let i3 = g.input(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
    let av = g.input(a.clone());
    let out = g.matmul(i3, av).unwrap();
    assert_eq!(g.value(out), a.data());
}

#[test]
fn matmul_shape_error_names_op() {
    let mut g = Graph::new();
    let a = g.input(Tensor::zeros(&[2, 3]));
    let b = g.input(Tensor::zeros(&[2, 3]));
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("matmul") && msg.contains("[3, n]") && msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn square_gradient() {
    let mut g = Graph::new();
    let x = g.input(Tensor::scalar(3.0).with_requires_grad(true));
    let y = g.mul(x, x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[6.0]);
}

#[test]
fn reused_input_accumulates() {
    let mut g = Graph::new();
    let x = g.input(Tensor::scalar(1.5).with_requires_grad(true));
    let y = g.add(x, x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[2.0]);
}

#[test]
fn softmax_cross_entropy_gradient_is_p_minus_y() {
    let logits = [0.3, -1.2, 2.0, 0.1];
    let mut g = Graph::new();
    let x = g.input(t(&[1, 4], &logits).with_requires_grad(true));
    let loss = g.cross_entropy(x, &[Some(2)]).unwrap();
    let grads = g.backward(loss).unwrap();
    let mut p = [0.0; 4];
    kernels::softmax_row(&logits, &mut p);
    for (j, (&gj, pj)) in grads.get(x).unwrap().iter().zip(p).enumerate() {
        let y = if j == 2 { 1.0 } else { 0.0 };
        assert!((gj - (pj - y)).abs() < 1e-15);
    }
}

#[test]
fn backward_rejects_non_scalar_and_detached() {
    let mut g = Graph::new();
    let x = g.input(t(&[2], &[1.0, 2.0]).with_requires_grad(true));
    let y = g.tanh(x);
    assert!(matches!(g.backward(y), Err(Error::Autodiff(_))));

    let c = g.input(Tensor::scalar(2.0));
    let d = g.mul(c, c).unwrap();
    assert!(matches!(g.backward(d), Err(Error::Autodiff(_))));
}

#[test]
fn cross_entropy_rejects_all_padding() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[2, 3]).with_requires_grad(true));
    assert!(matches!(g.cross_entropy(x, &[None, None]), Err(Error::Data(_))));
}

#[test]
fn param_gradients_reach_store() {
    let mut store = ParamStore::new();
    let w = store.add("w", t(&[2], &[1.0, -2.0])).unwrap();
    for _ in 0..2 {
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let sq = g.mul(wv, wv).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        g.accumulate_param_grads(&grads, &mut store);
    }
    // two accumulated steps of d(sum w²)/dw = 2w
    assert_eq!(store.get(w).grad().unwrap(), &[4.0, -8.0]);
    store.zero_grad();
    assert!(store.get(w).grad().is_none());
}

#[test]
fn reachable_nodes_get_gradients() {
    let mut g = Graph::new();
    let x = g.input(t(&[2], &[0.5, -0.5]).with_requires_grad(true));
    let h = g.tanh(x);
    let s = g.sigmoid(h);
    let loss = g.sum(s);
    let grads = g.backward(loss).unwrap();
    for v in [x, h, s, loss] {
        assert_eq!(grads.get(v).unwrap().len(), g.value(v).len());
    }
}

#[test]
fn graph_records_are_topological() {
    let mut g = Graph::new();
    let x = g.input(t(&[2], &[0.5, -0.5]).with_requires_grad(true));
    let a = g.relu(x);
    let b = g.add(a, x).unwrap();
    g.sum(b);
    for rec in g.records() {
        for input in &rec.inputs {
            assert!(input.index() < rec.output.index());
        }
    }
    assert_eq!(g.records()[2].kind, OpKind::Add);
}

#[test]
fn gradcheck_sum_of_squares() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::uniform(&[8], 1.0, &mut rng);
    let err = grad_check(
        |g, x| {
            let sq = g.mul(x, x)?;
            Ok(g.sum(sq))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn gradcheck_layer_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::uniform(&[4, 8], 1.0, &mut rng);
    let gamma = Tensor::uniform(&[8], 1.0, &mut rng);
    let beta = Tensor::uniform(&[8], 1.0, &mut rng);
    let w = Tensor::uniform(&[4, 8], 1.0, &mut rng);
    let err = grad_check(
        |g, x| {
            let gm = g.input(gamma.clone());
            let bt = g.input(beta.clone());
            let wv = g.input(w.clone());
            let y = g.layer_norm(x, gm, bt, 1e-5)?;
            let y = g.mul(y, wv)?;
            Ok(g.sum(y))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn gradcheck_constant_is_zero() {
    let x = Tensor::from_vec(vec![0.1, 0.2]);
    let err = grad_check(|g, _| g.constant(&[1], vec![4.0]), &x, 1e-5).unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn gradcheck_rejects_non_finite_and_bad_eps() {
    let x = Tensor::from_vec(vec![1.0]);
    assert!(grad_check(|g, x| Ok(g.sum(x)), &x, 0.1).is_err());
    let nan = Tensor::from_vec(vec![f64::NAN]);
    assert!(grad_check(|g, x| Ok(g.sum(x)), &nan, 1e-5).is_err());
}

#[test]
fn causal_attention_ignores_future_keys() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let q = Tensor::uniform(&[3, 4], 1.0, &mut rng);
    let k = Tensor::uniform(&[3, 4], 1.0, &mut rng);
    let v = Tensor::uniform(&[3, 4], 1.0, &mut rng);
    let spec = AttentionSpec {
        batch: 1,
        q_len: 3,
        k_len: 3,
        heads: 2,
        causal: true,
        q_offset: 0,
        key_lens: None,
    };
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.input(q.clone()), g.input(k.clone()), g.input(v.clone()));
    let out = g.attention(qv, kv, vv, spec.clone()).unwrap();
    // first query sees only the first value row
    assert_eq!(&g.value(out)[..4], &v.data()[..4]);

    let mut k2 = k.clone();
    let mut v2 = v.clone();
    for x in &mut k2.data_mut()[8..] {
        *x += 5.0;
    }
    for x in &mut v2.data_mut()[8..] {
        *x -= 3.0;
    }
    let (qv, kv, vv) = (g.input(q), g.input(k2), g.input(v2));
    let out2 = g.attention(qv, kv, vv, spec).unwrap();
    assert_eq!(&g.value(out)[..8], &g.value(out2)[..8]);
}

#[test]
fn dropout_zero_rate_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::new();
    let x = g.input(t(&[2], &[1.0, 2.0]));
    let y = g.dropout(x, 0.0, &mut rng).unwrap();
    assert_eq!(x, y);
    let z = g.dropout(x, 0.5, &mut rng).unwrap();
    for (&a, &b) in g.value(x).iter().zip(g.value(z)) {
        assert!(b == 0.0 || b == 2.0 * a);
    }
}

#[test]
fn forward_replay_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = Tensor::uniform(&[6, 5], 0.5, &mut rng);
        let x = Tensor::uniform(&[4, 6], 0.5, &mut rng);
        let mut g = Graph::new();
        let (wv, xv) = (g.input(w), g.input(x));
        let h = g.matmul(xv, wv).unwrap();
        let h = g.tanh(h);
        let s = g.log_softmax(h);
        g.value(s).to_vec()
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(row in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let n = row.len();
        let mut g = Graph::new();
        let x = g.input(Tensor::new(&[1, n], row).unwrap());
        let s = g.softmax(x);
        let total: f64 = g.value(s).iter().sum();
        prop_assert!(g.value(s).iter().all(|&p| p >= 0.0));
        prop_assert!((total - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn cross_entropy_is_nonnegative(row in prop::collection::vec(-20.0f64..20.0, 2..10), pick in 0usize..10) {
        let n = row.len();
        let target = pick % n;
        let mut g = Graph::new();
        let x = g.input(Tensor::new(&[1, n], row).unwrap());
        let ce = g.cross_entropy(x, &[Some(target)]).unwrap();
        prop_assert!(g.scalar(ce) >= 0.0);
    }
}

#[test]
fn cross_entropy_zero_iff_certain() {
    let mut g = Graph::new();
    let x = g.input(t(&[1, 3], &[0.0, 800.0, 0.0]));
    let ce = g.cross_entropy(x, &[Some(1)]).unwrap();
    assert_eq!(g.scalar(ce), 0.0);
    let ce = g.cross_entropy(x, &[Some(0)]).unwrap();
    assert!(g.scalar(ce) > 0.0);
}

#[test]
fn random_inputs_gradcheck_for_every_op() {
    // Smaller sibling of the acceptance sweep; catches regressions fast.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in op_cases(&mut rng) {
        let err = grad_check(|g, v| (case.f)(g, v), &case.x, 1e-5).unwrap();
        assert!(err <= 1e-4, "{}: {err}", case.name);
    }
}
