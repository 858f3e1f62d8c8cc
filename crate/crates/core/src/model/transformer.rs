//! Pre-norm Transformer decoder with optional encoder and cross-attention.

use super::{Batch, Builder, Ctx, DecoderModel, DecoderState, EncoderOut, LayerNormIds, ModelConfig};
use crate::autodiff::{AttentionSpec, ParamId, Var};
use crate::data::vocab::PAD;
use crate::embedding::SINUSOID_BASE;
use crate::error::Result;

/// Sinusoidal position rows of width `d` (odd `d` drops the last cosine).
pub fn positions(pos: &[usize], d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(pos.len() * d);
    for &p in pos {
        for j in 0..d {
            let i = (j / 2) as f64;
            let angle = p as f64 / SINUSOID_BASE.powf(2.0 * i / d as f64);
            out.push(if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    out
}

#[derive(Clone, Debug)]
struct Attn {
    ln: LayerNormIds,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

impl Attn {
    fn build(b: &mut Builder<'_>, name: &str, width: usize, kv_width: usize) -> Result<Self> {
        Ok(Self {
            ln: b.layer_norm(&format!("{name}.ln"), width)?,
            wq: b.weight(&format!("{name}.wq"), width, width)?,
            wk: b.weight(&format!("{name}.wk"), kv_width, width)?,
            wv: b.weight(&format!("{name}.wv"), kv_width, width)?,
            wo: b.weight(&format!("{name}.wo"), width, width)?,
        })
    }
}

#[derive(Clone, Debug)]
struct Block {
    attn: Attn,
    cross: Option<Attn>,
    ln_ff: LayerNormIds,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Keys and values the queries of one block attend to.
enum Memory<'m> {
    /// Self-attention over the block input itself.
    SelfAttn { causal: bool, key_lens: Option<Vec<usize>> },
    /// Already-projected cached rows: `(keys, values, k_len, key_lens)`.
    Cached(&'m [f64], &'m [f64], usize, Option<&'m [usize]>),
}

impl Block {
    fn build(b: &mut Builder<'_>, name: &str, width: usize, ff: usize, mem_width: Option<usize>) -> Result<Self> {
        Ok(Self {
            attn: Attn::build(b, &format!("{name}.attn"), width, width)?,
            cross: mem_width.map(|m| Attn::build(b, &format!("{name}.cross"), width, m)).transpose()?,
            ln_ff: b.layer_norm(&format!("{name}.ln_ff"), width)?,
            w1: b.weight(&format!("{name}.ff1.w"), width, ff)?,
            b1: b.zeros(&format!("{name}.ff1.b"), ff)?,
            w2: b.weight(&format!("{name}.ff2.w"), ff, width)?,
            b2: b.zeros(&format!("{name}.ff2.b"), width)?,
        })
    }

    /// `x + attention(n)` where `n = LN(x)` under `a.ln`.
    #[allow(clippy::too_many_arguments)]
    fn attend(ctx: &mut Ctx<'_>, a: &Attn, x: Var, n: Var, batch: usize, q_len: usize, heads: usize, mem: Memory<'_>) -> Result<Var> {
        let width = *ctx.g.shape(x).last().unwrap();
        let q = ctx.linear(n, a.wq, None)?;
        let (k, v, k_len, key_lens, causal) = match mem {
            Memory::SelfAttn { causal, key_lens } => (ctx.linear(n, a.wk, None)?, ctx.linear(n, a.wv, None)?, q_len, key_lens, causal),
            Memory::Cached(kd, vd, k_len, lens) => (
                ctx.g.constant(&[batch * k_len, width], kd.to_vec())?,
                ctx.g.constant(&[batch * k_len, width], vd.to_vec())?,
                k_len,
                lens.map(<[usize]>::to_vec),
                false,
            ),
        };
        let spec = AttentionSpec {
            batch,
            q_len,
            k_len,
            heads,
            causal,
            q_offset: 0,
            key_lens,
        };
        let o = ctx.g.attention(q, k, v, spec)?;
        let o = ctx.linear(o, a.wo, None)?;
        ctx.g.add(x, o)
    }

    /// `x + W2 relu(W1 LN(x) + b1) + b2`.
    fn feed_forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let n = ctx.layer_norm(x, &self.ln_ff)?;
        let h = ctx.linear(n, self.w1, Some(self.b1))?;
        let h = ctx.g.relu(h);
        let o = ctx.linear(h, self.w2, Some(self.b2))?;
        ctx.g.add(x, o)
    }
}

#[derive(Clone, Debug)]
struct Encoder {
    blocks: Vec<Block>,
    ln_f: LayerNormIds,
    heads: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct TransformerNet {
    blocks: Vec<Block>,
    encoder: Option<Encoder>,
    ln_f: LayerNormIds,
    out_w: ParamId,
    out_b: ParamId,
    width: usize,
    heads: usize,
}

impl TransformerNet {
    pub fn build(cfg: &ModelConfig, b: &mut Builder<'_>) -> Result<Self> {
        let width = cfg.step_width();
        let e = cfg.token_dim;
        let encoder = if cfg.has_encoder {
            // the encoder sees token embeddings only; fall back to one head
            // when the token width is not divisible by n_heads
            let heads = if e.is_multiple_of(cfg.n_heads) { cfg.n_heads } else { 1 };
            Some(Encoder {
                blocks: (0..cfg.n_layers)
                    .map(|l| Block::build(b, &format!("enc.l{l}"), e, cfg.hidden_dim, None))
                    .collect::<Result<_>>()?,
                ln_f: b.layer_norm("enc.ln_f", e)?,
                heads,
            })
        } else {
            None
        };
        let mem = cfg.has_encoder.then_some(e);
        Ok(Self {
            blocks: (0..cfg.n_layers)
                .map(|l| Block::build(b, &format!("dec.l{l}"), width, cfg.hidden_dim, mem))
                .collect::<Result<_>>()?,
            encoder,
            ln_f: b.layer_norm("dec.ln_f", width)?,
            out_w: b.weight("out.w", width, cfg.vocab_size)?,
            out_b: b.zeros("out.b", cfg.vocab_size)?,
            width,
            heads: cfg.n_heads,
        })
    }

    pub fn encode(&self, model: &DecoderModel, ctx: &mut Ctx<'_>, sources: &[Vec<usize>]) -> Result<EncoderOut> {
        let enc = self.encoder.as_ref().expect("encode called without an encoder");
        let n = sources.len();
        let lens: Vec<usize> = sources.iter().map(Vec::len).collect();
        let s_max = *lens.iter().max().unwrap_or(&0);
        let e = model.config.token_dim;
        let mut ids = Vec::with_capacity(n * s_max);
        let mut pos = Vec::with_capacity(n * s_max);
        for src in sources {
            for s in 0..s_max {
                ids.push(src.get(s).copied().unwrap_or(PAD));
                pos.push(s);
            }
        }
        let table = ctx.p(model.token_table());
        let tok = ctx.g.embedding(table, &ids)?;
        let pe = ctx.g.constant(&[n * s_max, e], positions(&pos, e))?;
        let mut x = ctx.g.add(tok, pe)?;
        for blk in &enc.blocks {
            let mem = Memory::SelfAttn {
                causal: false,
                key_lens: Some(lens.clone()),
            };
            let normed = ctx.layer_norm(x, &blk.attn.ln)?;
            x = Block::attend(ctx, &blk.attn, x, normed, n, s_max, enc.heads, mem)?;
            x = blk.feed_forward(ctx, x)?;
        }
        let memory = ctx.layer_norm(x, &enc.ln_f)?;
        Ok(EncoderOut {
            memory,
            lens,
            max_len: s_max,
            summary: None,
        })
    }

    /// Cross-attention over encoder memory inside the same graph.
    fn cross_full(&self, ctx: &mut Ctx<'_>, a: &Attn, x: Var, batch: usize, q_len: usize, enc: &EncoderOut) -> Result<Var> {
        let n = ctx.layer_norm(x, &a.ln)?;
        let q = ctx.linear(n, a.wq, None)?;
        let k = ctx.linear(enc.memory, a.wk, None)?;
        let v = ctx.linear(enc.memory, a.wv, None)?;
        let spec = AttentionSpec {
            batch,
            q_len,
            k_len: enc.max_len,
            heads: self.heads,
            causal: false,
            q_offset: 0,
            key_lens: Some(enc.lens.clone()),
        };
        let o = ctx.g.attention(q, k, v, spec)?;
        let o = ctx.linear(o, a.wo, None)?;
        ctx.g.add(x, o)
    }

    pub fn forward(&self, model: &DecoderModel, ctx: &mut Ctx<'_>, batch: &Batch) -> Result<Var> {
        let (n, t_len) = (batch.len(), batch.steps());
        let enc = batch.sources.as_ref().map(|s| self.encode(model, ctx, s)).transpose()?;
        let mut ids = Vec::with_capacity(n * t_len);
        let mut desired = Vec::with_capacity(n * t_len);
        let mut trackers = Vec::with_capacity(n * t_len);
        let mut pos = Vec::with_capacity(n * t_len);
        for b in 0..n {
            for t in 0..t_len {
                ids.push(batch.inputs[b][t]);
                desired.push(batch.desired[b]);
                if model.has_tracker() {
                    trackers.push(batch.trackers[b][t]);
                }
                pos.push(t);
            }
        }
        let mut x = model.step_inputs(ctx, &ids, &desired, &trackers, Some(&pos))?;
        for blk in &self.blocks {
            let mem = Memory::SelfAttn {
                causal: true,
                key_lens: None,
            };
            let normed = ctx.layer_norm(x, &blk.attn.ln)?;
            x = Block::attend(ctx, &blk.attn, x, normed, n, t_len, self.heads, mem)?;
            if let (Some(cross), Some(enc)) = (&blk.cross, &enc) {
                x = self.cross_full(ctx, cross, x, n, t_len, enc)?;
            }
            x = blk.feed_forward(ctx, x)?;
        }
        let x = ctx.layer_norm(x, &self.ln_f)?;
        let perm: Vec<usize> = (0..n * t_len).map(|r| (r % n) * t_len + r / n).collect();
        let x = ctx.g.embedding(x, &perm)?;
        ctx.linear(x, self.out_w, Some(self.out_b))
    }

    pub fn init_state(&self, _cfg: &ModelConfig, ctx: &mut Ctx<'_>, enc: Option<&EncoderOut>, state: &mut DecoderState) -> Result<()> {
        state.kv = vec![vec![(Vec::new(), Vec::new()); state.streams]; self.blocks.len()];
        state.cross.clear();
        if let Some(enc) = enc {
            for blk in &self.blocks {
                let a = blk.cross.as_ref().expect("cross-attention with an encoder");
                let k = ctx.linear(enc.memory, a.wk, None)?;
                let v = ctx.linear(enc.memory, a.wv, None)?;
                state.cross.push((ctx.g.value(k).to_vec(), ctx.g.value(v).to_vec()));
            }
            state.src_lens = enc.lens.clone();
            state.src_max = enc.max_len;
        }
        Ok(())
    }

    pub fn step(
        &self,
        model: &DecoderModel,
        ctx: &mut Ctx<'_>,
        state: &mut DecoderState,
        tokens: &[usize],
        desired: &[i64],
        trackers: &[i64],
    ) -> Result<Var> {
        let n = state.streams;
        let d = self.width;
        let pos = vec![state.pos; n];
        let mut x = model.step_inputs(ctx, tokens, desired, trackers, Some(&pos))?;
        for (l, blk) in self.blocks.iter().enumerate() {
            let a = &blk.attn;
            let normed = ctx.layer_norm(x, &a.ln)?;
            let k_new = ctx.linear(normed, a.wk, None)?;
            let v_new = ctx.linear(normed, a.wv, None)?;
            let (kv, vv) = (ctx.g.value(k_new).to_vec(), ctx.g.value(v_new).to_vec());
            for (i, (kc, vc)) in state.kv[l].iter_mut().enumerate() {
                kc.extend_from_slice(&kv[i * d..(i + 1) * d]);
                vc.extend_from_slice(&vv[i * d..(i + 1) * d]);
            }
            let keys: Vec<f64> = state.kv[l].iter().flat_map(|(k, _)| k.iter().copied()).collect();
            let vals: Vec<f64> = state.kv[l].iter().flat_map(|(_, v)| v.iter().copied()).collect();
            let k_len = state.pos + 1;
            x = Block::attend(ctx, a, x, normed, n, 1, self.heads, Memory::Cached(&keys, &vals, k_len, None))?;
            if let Some(cross) = &blk.cross {
                let (ck, cv) = &state.cross[l];
                let mem = Memory::Cached(ck, cv, state.src_max, Some(&state.src_lens));
                let normed = ctx.layer_norm(x, &cross.ln)?;
                x = Block::attend(ctx, cross, x, normed, n, 1, self.heads, mem)?;
            }
            x = blk.feed_forward(ctx, x)?;
        }
        let x = ctx.layer_norm(x, &self.ln_f)?;
        ctx.linear(x, self.out_w, Some(self.out_b))
    }
}
