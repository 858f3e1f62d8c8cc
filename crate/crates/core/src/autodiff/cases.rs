//! Randomized gradient-check cases, one or more per differentiable op.
//! Each case reduces the op output to a scalar through a random weighting
//! so that every output coordinate contributes to the checked gradient.

use rand::Rng;

use super::graph::{AttentionSpec, Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

type CaseFn = Box<dyn Fn(&mut Graph, Var) -> Result<Var>>;

pub struct GradCase {
    pub name: &'static str,
    pub x: Tensor,
    pub f: CaseFn,
}

fn weighted_sum(g: &mut Graph, y: Var, w: &Tensor) -> Result<Var> {
    let wv = g.input(w.clone());
    let y = g.reshape(y, w.shape())?;
    let p = g.mul(y, wv)?;
    Ok(g.sum(p))
}

fn case(name: &'static str, x: Tensor, out_shape: &[usize], rng: &mut impl Rng, body: impl Fn(&mut Graph, Var) -> Result<Var> + 'static) -> GradCase {
    let w = Tensor::uniform(out_shape, 1.0, rng);
    GradCase {
        name,
        x,
        f: Box::new(move |g, x| {
            let y = body(g, x)?;
            weighted_sum(g, y, &w)
        }),
    }
}

fn u(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

fn away_from_zero(mut t: Tensor) -> Tensor {
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v = if *v < 0.0 { -0.05 } else { 0.05 };
        }
    }
    t
}

/// Draws a fresh set of cases covering every differentiable op.
pub fn op_cases(rng: &mut impl Rng) -> Vec<GradCase> {
    let mut cases = Vec::new();

    let b = u(&[4, 5], rng);
    cases.push(case("matmul_left", u(&[3, 4], rng), &[3, 5], rng, move |g, x| {
        let bv = g.input(b.clone());
        g.matmul(x, bv)
    }));
    let a = u(&[3, 4], rng);
    cases.push(case("matmul_right", u(&[4, 5], rng), &[3, 5], rng, move |g, x| {
        let av = g.input(a.clone());
        g.matmul(av, x)
    }));
    let o = u(&[3, 4], rng);
    cases.push(case("add", u(&[3, 4], rng), &[3, 4], rng, move |g, x| {
        let ov = g.input(o.clone());
        let s = g.add(x, ov)?;
        g.add(s, x)
    }));
    let o = u(&[3, 4], rng);
    cases.push(case("sub", u(&[3, 4], rng), &[3, 4], rng, move |g, x| {
        let ov = g.input(o.clone());
        g.sub(ov, x)
    }));
    let o = u(&[3, 4], rng);
    cases.push(case("mul", u(&[3, 4], rng), &[3, 4], rng, move |g, x| {
        let ov = g.input(o.clone());
        let m = g.mul(x, ov)?;
        g.mul(m, x)
    }));
    let s = rng.gen_range(-2.0..2.0);
    cases.push(case("scale", u(&[6], rng), &[6], rng, move |g, x| Ok(g.scale(x, s))));
    let m = u(&[3, 4], rng);
    cases.push(case("add_bias", u(&[4], rng), &[3, 4], rng, move |g, x| {
        let mv = g.input(m.clone());
        g.add_bias(mv, x)
    }));
    let o = u(&[3, 2], rng);
    cases.push(case("concat", u(&[3, 4], rng), &[3, 10], rng, move |g, x| {
        let ov = g.input(o.clone());
        g.concat(&[x, ov, x])
    }));
    let o = u(&[2, 4], rng);
    cases.push(case("concat_rows", u(&[3, 4], rng), &[8, 4], rng, move |g, x| {
        let ov = g.input(o.clone());
        g.concat_rows(&[x, ov, x])
    }));
    cases.push(case("slice", u(&[3, 6], rng), &[3, 3], rng, |g, x| g.slice(x, 2, 5)));
    cases.push(case("slice_rows", u(&[5, 3], rng), &[2, 3], rng, |g, x| g.slice_rows(x, 1, 3)));
    let o = u(&[4, 3], rng);
    cases.push(case("select_rows", u(&[4, 3], rng), &[4, 3], rng, move |g, x| {
        let ov = g.input(o.clone());
        g.select_rows(&[true, false, false, true], x, ov)
    }));
    cases.push(case("reshape", u(&[2, 6], rng), &[3, 4], rng, |g, x| g.reshape(x, &[3, 4])));
    cases.push(case("tile_rows", u(&[1, 4], rng), &[3, 4], rng, |g, x| g.tile_rows(x, 3)));
    cases.push(case("sigmoid", u(&[3, 4], rng), &[3, 4], rng, |g, x| Ok(g.sigmoid(x))));
    cases.push(case("tanh", u(&[3, 4], rng), &[3, 4], rng, |g, x| Ok(g.tanh(x))));
    cases.push(case("relu", away_from_zero(u(&[3, 4], rng)), &[3, 4], rng, |g, x| Ok(g.relu(x))));
    cases.push(case("softmax", u(&[3, 5], rng), &[3, 5], rng, |g, x| Ok(g.softmax(x))));
    cases.push(case("log_softmax", u(&[3, 5], rng), &[3, 5], rng, |g, x| Ok(g.log_softmax(x))));
    let targets = vec![Some(rng.gen_range(0..5)), None, Some(rng.gen_range(0..5))];
    cases.push(case("cross_entropy", u(&[3, 5], rng), &[1], rng, move |g, x| g.cross_entropy(x, &targets)));
    let (gm, bt) = (u(&[6], rng), u(&[6], rng));
    cases.push(case("layer_norm", u(&[3, 6], rng), &[3, 6], rng, move |g, x| {
        let (gv, bv) = (g.input(gm.clone()), g.input(bt.clone()));
        g.layer_norm(x, gv, bv, 1e-5)
    }));
    let xin = u(&[3, 6], rng);
    let bt = u(&[6], rng);
    cases.push(case("layer_norm_gain", u(&[6], rng), &[3, 6], rng, move |g, gm| {
        let (xv, bv) = (g.input(xin.clone()), g.input(bt.clone()));
        g.layer_norm(xv, gm, bv, 1e-5)
    }));
    cases.push(case("embedding", u(&[5, 3], rng), &[4, 3], rng, |g, x| g.embedding(x, &[4, 0, 4, 2])));

    let spec = AttentionSpec {
        batch: 2,
        q_len: 3,
        k_len: 3,
        heads: 2,
        causal: true,
        q_offset: 0,
        key_lens: Some(vec![3, 2]),
    };
    for (name, slot) in [("attention_q", 0usize), ("attention_k", 1), ("attention_v", 2)] {
        let others = [u(&[6, 4], rng), u(&[6, 4], rng)];
        let spec = spec.clone();
        cases.push(case(name, u(&[6, 4], rng), &[6, 4], rng, move |g, x| {
            let o0 = g.input(others[0].clone());
            let o1 = g.input(others[1].clone());
            let (q, k, v) = match slot {
                0 => (x, o0, o1),
                1 => (o0, x, o1),
                _ => (o0, o1, x),
            };
            g.attention(q, k, v, spec.clone())
        }));
    }
    let mask: Vec<f64> = (0..12).map(|i| if i % 3 == 0 { 0.0 } else { 1.5 }).collect();
    cases.push(case("dropout", u(&[3, 4], rng), &[3, 4], rng, move |g, x| g.dropout_mask(x, mask.clone())));
    cases.push(case("sum", u(&[3, 4], rng), &[1], rng, |g, x| Ok(g.sum(x))));
    cases.push(case("mean", u(&[3, 4], rng), &[1], rng, |g, x| Ok(g.mean(x))));
    cases
}
