use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::kernels::log_sum_exp;
use crate::autodiff::Tensor;
use crate::data::vocab::{BOS, EOS, PAD};

const V: usize = 9;

fn range(lo: i64, hi: i64) -> ValueRange {
    ValueRange::new(lo, hi).unwrap()
}

fn config(family: Family, kind: ControlKind, strategy: Option<StrategyKind>, encoder: bool) -> ModelConfig {
    let control = match strategy {
        Some(s) => ControlSpec::with_strategy(kind, s, 2, range(0, 12), range(0, 12)),
        None => ControlSpec::none(kind),
    };
    ModelConfig {
        family,
        vocab_size: V,
        token_dim: 6,
        hidden_dim: 8,
        n_layers: 2,
        n_heads: 2,
        control,
        has_encoder: encoder,
        max_seq_len: 12,
    }
}

/// Two rows, the second padded after two steps.
fn batch(cfg: &ModelConfig) -> Batch {
    let inputs = vec![vec![BOS, 4, 5, 6], vec![BOS, 7, PAD, PAD]];
    let targets = vec![
        vec![Some(4), Some(5), Some(6), Some(EOS)],
        vec![Some(7), Some(EOS), None, None],
    ];
    let trackers = if cfg.control.tracker.is_some() {
        vec![vec![0, 1, 2, 3], vec![0, 1, 1, 1]]
    } else {
        Vec::new()
    };
    Batch {
        inputs,
        targets,
        desired: vec![3, 1],
        trackers,
        sources: cfg.has_encoder.then(|| vec![vec![4, 5, 8], vec![6, 7]]),
    }
}

fn all_variants() -> Vec<ModelConfig> {
    let mut out = Vec::new();
    for family in [Family::Lstm, Family::Transformer] {
        out.push(config(family, ControlKind::Length, Some(StrategyKind::Scalar), false));
        out.push(config(family, ControlKind::Length, Some(StrategyKind::Learnable), false));
        out.push(config(family, ControlKind::Edit, Some(StrategyKind::Sinusoidal), true));
        out.push(config(family, ControlKind::Sentiment, Some(StrategyKind::ScalarRepeat), false));
        out.push(config(family, ControlKind::Length, None, false));
    }
    out
}

#[test]
fn step_input_widths() {
    let mut cfg = config(Family::Lstm, ControlKind::Length, Some(StrategyKind::Scalar), false);
    cfg.token_dim = 4;
    let mut g = Graph::new();
    let tok = g.constant(&[1, 4], vec![0.5; 4]).unwrap();
    let d = g.constant(&[1, 1], vec![7.0]).unwrap();
    let t = g.constant(&[1, 1], vec![2.0]).unwrap();
    let full = build_step_input(&mut g, &cfg, tok, Some(d), Some(t)).unwrap();
    assert_eq!(g.shape(full), &[1, 6]);
    assert_eq!(g.value(full), &[0.5, 0.5, 0.5, 0.5, 7.0, 2.0]);

    cfg.control.tracker = None;
    let no_tracker = build_step_input(&mut g, &cfg, tok, Some(d), None).unwrap();
    assert_eq!(g.shape(no_tracker), &[1, 5]);

    cfg.control = ControlSpec::none(ControlKind::Length);
    let bare = build_step_input(&mut g, &cfg, tok, None, None).unwrap();
    assert_eq!(g.shape(bare), &[1, 4]);
}

#[test]
fn step_input_rejects_width_mismatch() {
    let mut cfg = config(Family::Lstm, ControlKind::Length, Some(StrategyKind::Scalar), false);
    cfg.token_dim = 4;
    let mut g = Graph::new();
    let tok = g.constant(&[1, 4], vec![0.0; 4]).unwrap();
    let wide = g.constant(&[1, 2], vec![0.0; 2]).unwrap();
    let err = build_step_input(&mut g, &cfg, tok, Some(wide), Some(wide)).unwrap_err();
    assert!(err.to_string().contains("desired"), "{err}");
    assert!(build_step_input(&mut g, &cfg, tok, None, None).is_err());
}

#[test]
fn divisibility_guard_names_width_and_heads() {
    let mut cfg = config(Family::Transformer, ControlKind::Sentiment, None, false);
    cfg.token_dim = 256;
    cfg.n_heads = 3;
    cfg.control.desired = Some(EmbedSpec::new(StrategyKind::Scalar, 1, range(1, 5)));
    let err = DecoderModel::new(cfg.clone(), 0).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("257") && msg.contains('3'), "{msg}");
    assert_eq!(err.exit_code(), 2);

    cfg.control.desired = Some(EmbedSpec::new(StrategyKind::ScalarRepeat, 2, range(1, 5)));
    cfg.vocab_size = 5;
    cfg.hidden_dim = 4;
    cfg.n_layers = 1;
    assert_eq!(cfg.step_width(), 258);
    assert!(DecoderModel::new(cfg, 0).is_ok());
}

#[test]
fn other_config_errors() {
    let mut cfg = config(Family::Lstm, ControlKind::Edit, Some(StrategyKind::Scalar), false);
    assert!(cfg.validate().is_err(), "edit without encoder");
    cfg.has_encoder = true;
    cfg.hidden_dim = 7;
    assert!(cfg.validate().is_err(), "odd bi-encoder width");
    let mut cfg = config(Family::Lstm, ControlKind::Sentiment, None, false);
    cfg.control.tracker = Some(EmbedSpec::new(StrategyKind::Scalar, 1, range(0, 5)));
    assert!(cfg.validate().is_err(), "sentiment tracker");
}

#[test]
fn zero_weights_give_uniform_distribution() {
    for cfg in all_variants() {
        let mut m = DecoderModel::new(cfg.clone(), 3).unwrap();
        for t in m.store.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let src = [vec![4, 5], vec![6]];
        let mut st = m.start(2, cfg.has_encoder.then_some(&src[..])).unwrap();
        let logits = m.step(&mut st, &[BOS, BOS], &[2, 5], &[0, 0]).unwrap();
        assert!(logits.iter().all(|&x| x == 0.0), "{:?}", cfg.family);
    }
}

#[test]
fn decoding_is_deterministic() {
    for cfg in all_variants() {
        let m = DecoderModel::new(cfg.clone(), 4).unwrap();
        let src = [vec![4, 5, 6]];
        let run = || {
            let mut st = m.start(1, cfg.has_encoder.then_some(&src[..])).unwrap();
            let a = m.step(&mut st, &[BOS], &[3], &[0]).unwrap();
            let b = m.step(&mut st, &[5], &[3], &[1]).unwrap();
            (a, b)
        };
        assert_eq!(run(), run());
    }
}

/// Max relative error of analytic vs central-difference gradients over a
/// random sample of coordinates of every parameter.
fn model_grad_error(m: &mut DecoderModel, b: &Batch, per_param: usize, seed: u64) -> f64 {
    let mut g = Graph::new();
    let loss = m.loss(&mut g, b).unwrap();
    let grads = g.backward(loss).unwrap();
    m.store.zero_grad();
    g.accumulate_param_grads(&grads, &mut m.store);
    let ids: Vec<ParamId> = m.store.iter().map(|(id, _, _)| id).collect();
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            let t = m.store.get(id);
            t.grad().map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)
        })
        .collect();
    let eval = |m: &DecoderModel| {
        let mut g = Graph::inference();
        let l = m.loss(&mut g, b).unwrap();
        g.scalar(l)
    };
    let eps = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for (k, &id) in ids.iter().enumerate() {
        let n = m.store.get(id).numel();
        for _ in 0..per_param.min(n) {
            let i = rng.gen_range(0..n);
            let orig = m.store.get(id).data()[i];
            m.store.get_mut(id).data_mut()[i] = orig + eps;
            let up = eval(m);
            m.store.get_mut(id).data_mut()[i] = orig - eps;
            let down = eval(m);
            m.store.get_mut(id).data_mut()[i] = orig;
            let num = (up - down) / (2.0 * eps);
            let a = analytic[k][i];
            worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-3));
        }
    }
    worst
}

#[test]
fn gradients_through_decoder_match_finite_differences() {
    for family in [Family::Lstm, Family::Transformer] {
        for strategy in [StrategyKind::Scalar, StrategyKind::Learnable] {
            let cfg = config(family, ControlKind::Length, Some(strategy), false);
            let mut m = DecoderModel::new(cfg.clone(), 5).unwrap();
            let err = model_grad_error(&mut m, &batch(&cfg), 6, 1);
            assert!(err <= 1e-4, "{family:?} {strategy:?}: {err:e}");
        }
    }
}

#[test]
fn gradients_through_encoder_match_finite_differences() {
    for family in [Family::Lstm, Family::Transformer] {
        let cfg = config(family, ControlKind::Edit, Some(StrategyKind::ScalarRepeat), true);
        let mut m = DecoderModel::new(cfg.clone(), 6).unwrap();
        let err = model_grad_error(&mut m, &batch(&cfg), 6, 2);
        assert!(err <= 1e-4, "{family:?}: {err:e}");
        let enc: Vec<_> = m
            .store
            .iter()
            .filter(|(_, name, t)| name.starts_with("enc.") && t.grad().is_some_and(|g| g.iter().any(|&x| x != 0.0)))
            .collect();
        assert!(!enc.is_empty(), "{family:?}: encoder receives no gradient");
    }
}

#[test]
fn encoder_output_tracks_input_length_and_order() {
    for family in [Family::Lstm, Family::Transformer] {
        let cfg = config(family, ControlKind::Edit, Some(StrategyKind::Scalar), true);
        let m = DecoderModel::new(cfg, 7).unwrap();
        let mut g = Graph::inference();
        let out = m.encode(&mut g, &[vec![4, 5, 6, 7], vec![8, 4]]).unwrap();
        assert_eq!(out.lens, vec![4, 2]);
        assert_eq!(out.max_len, 4);
        assert_eq!(g.shape(out.memory)[0], 2 * 4);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let mut src: Vec<usize> = (0..5).map(|_| rng.gen_range(4..V)).collect();
            let a = m.encode(&mut g, &[src.clone()]).unwrap();
            let a = g.value(a.memory).to_vec();
            src.reverse();
            if src.iter().eq(src.iter().rev()) {
                continue;
            }
            let b = m.encode(&mut g, &[src]).unwrap();
            assert_ne!(a, g.value(b.memory), "{family:?}");
        }
        assert!(m.encode(&mut g, &[vec![]]).is_err());
    }
}

#[test]
fn padding_does_not_leak_into_encoder_states() {
    for family in [Family::Lstm, Family::Transformer] {
        let cfg = config(family, ControlKind::Edit, Some(StrategyKind::Scalar), true);
        let m = DecoderModel::new(cfg.clone(), 8).unwrap();
        let alone = {
            let mut st = m.start(1, Some(&[vec![6, 7]])).unwrap();
            m.step(&mut st, &[BOS], &[2], &[10]).unwrap()
        };
        let padded = {
            let mut st = m.start(2, Some(&[vec![4, 5, 8, 8, 4], vec![6, 7]])).unwrap();
            m.step(&mut st, &[BOS, BOS], &[2, 2], &[10, 10]).unwrap()
        };
        for (x, y) in alone.iter().zip(&padded[V..]) {
            assert!((x - y).abs() < 1e-12, "{family:?}");
        }
    }
}

#[test]
fn causal_masking_hides_future_tokens() {
    let cfg = config(Family::Transformer, ControlKind::Length, Some(StrategyKind::Scalar), false);
    let m = DecoderModel::new(cfg.clone(), 9).unwrap();
    let b = batch(&cfg);
    let logits = |b: &Batch| {
        let mut g = Graph::inference();
        let l = m.forward(&mut g, b).unwrap();
        g.value(l).to_vec()
    };
    let base = logits(&b);
    let rows = b.len();
    for t in 0..3 {
        let mut p = b.clone();
        for s in t + 1..4 {
            p.inputs[0][s] = 8;
            p.trackers[0][s] = 9;
        }
        let out = logits(&p);
        for s in 0..=t {
            let r = (s * rows) * V;
            assert_eq!(&base[r..r + V], &out[r..r + V], "position {s} saw the future of {t}");
        }
        let r = ((t + 1) * rows) * V;
        assert_ne!(&base[r..r + V], &out[r..r + V]);
    }
}

/// Runs each row through `step` and returns logits in forward's
/// time-major order.
fn incremental_logits(m: &DecoderModel, b: &Batch) -> Vec<f64> {
    let (rows, steps) = (b.len(), b.steps());
    let mut st = m.start(rows, b.sources.as_deref()).unwrap();
    let mut out = Vec::new();
    for t in 0..steps {
        let toks: Vec<usize> = b.inputs.iter().map(|r| r[t]).collect();
        let tr: Vec<i64> = if m.has_tracker() {
            b.trackers.iter().map(|r| r[t]).collect()
        } else {
            Vec::new()
        };
        out.extend(m.step(&mut st, &toks, &b.desired, &tr).unwrap());
    }
    out
}

#[test]
fn step_decoding_matches_full_forward() {
    for cfg in all_variants() {
        let m = DecoderModel::new(cfg.clone(), 10).unwrap();
        let b = batch(&cfg);
        let mut g = Graph::inference();
        let full = m.forward(&mut g, &b).unwrap();
        let full = g.value(full);
        let inc = incremental_logits(&m, &b);
        assert_eq!(full.len(), inc.len());
        let worst = full.iter().zip(&inc).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst <= 1e-6, "{:?} {:?}: {worst:e}", cfg.family, cfg.control.strategy_name());
    }
}

#[test]
fn sequence_log_likelihood_factorizes() {
    for cfg in all_variants() {
        let m = DecoderModel::new(cfg.clone(), 12).unwrap();
        let b = batch(&cfg);
        let mut g = Graph::inference();
        let loss = m.loss(&mut g, &b).unwrap();
        let targets = b.targets_time_major();
        let count = targets.iter().flatten().count() as f64;
        let total = g.scalar(loss) * count;

        let logits = incremental_logits(&m, &b);
        let mut oracle = 0.0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = t {
                let row = &logits[r * V..(r + 1) * V];
                oracle -= row[*t] - log_sum_exp(row);
            }
        }
        assert!((total - oracle).abs() <= 1e-9, "{total} vs {oracle}");
    }
}

#[test]
fn desired_value_reaches_first_step_logits() {
    for cfg in all_variants() {
        let m = DecoderModel::new(cfg.clone(), 13).unwrap();
        let src = [vec![4, 5, 6]];
        let first = |c: i64| {
            let mut st = m.start(1, cfg.has_encoder.then_some(&src[..])).unwrap();
            m.step(&mut st, &[BOS], &[c], &[0]).unwrap()
        };
        let (lo, hi) = if cfg.control.kind == ControlKind::Sentiment { (1, 5) } else { (2, 9) };
        let diff: f64 = first(lo).iter().zip(first(hi)).map(|(a, b)| (a - b).abs()).sum();
        if cfg.control.desired.is_some() {
            assert!(diff > 0.0, "{:?}", cfg.control.strategy_name());
        } else {
            assert_eq!(diff, 0.0);
        }
    }
}

#[test]
fn out_of_range_desired_value_is_rejected() {
    let cfg = config(Family::Lstm, ControlKind::Length, Some(StrategyKind::Learnable), false);
    let m = DecoderModel::new(cfg, 14).unwrap();
    let mut st = m.start(1, None).unwrap();
    assert!(m.step(&mut st, &[BOS], &[13], &[0]).is_err());
}

#[test]
fn step_stops_at_max_seq_len() {
    let cfg = config(Family::Transformer, ControlKind::Length, None, false);
    let m = DecoderModel::new(cfg.clone(), 15).unwrap();
    let mut st = m.start(1, None).unwrap();
    for _ in 0..cfg.max_seq_len {
        m.step(&mut st, &[4], &[0], &[]).unwrap();
    }
    assert!(m.step(&mut st, &[4], &[0], &[]).is_err());
}

#[test]
fn initialization_follows_fan_in_bounds() {
    let cfg = config(Family::Lstm, ControlKind::Length, Some(StrategyKind::Learnable), false);
    let m = DecoderModel::new(cfg.clone(), 16).unwrap();
    let w = m.store.get(m.store.id("lstm.l0.w").unwrap());
    let bound = 1.0 / (w.shape()[0] as f64).sqrt();
    assert!(w.data().iter().all(|x| x.abs() <= bound));
    assert!(w.data().iter().any(|x| x.abs() > bound / 2.0));
    let b = m.store.get(m.store.id("lstm.l0.b").unwrap());
    assert!(b.data().iter().all(|&x| x == 0.0));
    assert_eq!(m.store.get(m.store.id("ctrl.desired").unwrap()).shape(), &[13, 2]);
    assert_eq!(DecoderModel::new(cfg, 16).unwrap().store.checksum(), m.store.checksum());
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let words: Vec<String> = (0..5).map(|i| format!("w{i}")).collect();
    let vocab = crate::data::Vocabulary::build([words.as_slice()], 1);
    assert_eq!(vocab.len(), V);
    for cfg in all_variants() {
        let mut m = DecoderModel::new(cfg.clone(), 17).unwrap();
        // the file stores f32, so compare against the rounded model
        for t in m.store.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
        let path = dir.path().join("m.ckpt");
        m.save(&path, &vocab).unwrap();
        let (back, v2) = DecoderModel::load(&path).unwrap();
        assert_eq!(v2, vocab);
        assert_eq!(back.config, cfg);
        assert_eq!(back.store.checksum(), m.store.checksum());
        let b = batch(&cfg);
        assert_eq!(incremental_logits(&m, &b), incremental_logits(&back, &b));
    }
}

#[test]
fn restore_rejects_wrong_shapes() {
    let cfg = config(Family::Lstm, ControlKind::Length, Some(StrategyKind::Scalar), false);
    let m = DecoderModel::new(cfg.clone(), 18).unwrap();
    let mut other = cfg;
    other.hidden_dim = 10;
    assert!(DecoderModel::restore(other, m.store.clone()).is_err());
    let mut store = m.store.clone();
    let id = store.id("out.b").unwrap();
    *store.get_mut(id) = Tensor::zeros(&[3]);
    assert!(DecoderModel::restore(m.config.clone(), store).is_err());
}
