//! Stacked LSTM decoder and bidirectional LSTM encoder.

use super::{Batch, Builder, Ctx, DecoderModel, DecoderState, EncoderOut, ModelConfig};
use crate::autodiff::{ParamId, Var};
use crate::data::vocab::PAD;
use crate::error::Result;

/// One LSTM layer; gate blocks are laid out `[i | f | g | o]`.
#[derive(Clone, Debug)]
pub(crate) struct Cell {
    w: ParamId,
    b: ParamId,
    hidden: usize,
}

impl Cell {
    fn build(b: &mut Builder<'_>, name: &str, input: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            w: b.weight(&format!("{name}.w"), input + hidden, 4 * hidden)?,
            b: b.zeros(&format!("{name}.b"), 4 * hidden)?,
            hidden,
        })
    }

    /// One update of `(h, c)` from input rows `x`.
    pub fn step(&self, ctx: &mut Ctx<'_>, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let n = self.hidden;
        let xh = ctx.g.concat(&[x, h])?;
        let z = ctx.linear(xh, self.w, Some(self.b))?;
        let zi = ctx.g.slice(z, 0, n)?;
        let zf = ctx.g.slice(z, n, 2 * n)?;
        let zg = ctx.g.slice(z, 2 * n, 3 * n)?;
        let zo = ctx.g.slice(z, 3 * n, 4 * n)?;
        let (i, f, gg, o) = (ctx.g.sigmoid(zi), ctx.g.sigmoid(zf), ctx.g.tanh(zg), ctx.g.sigmoid(zo));
        let keep = ctx.g.mul(f, c)?;
        let write = ctx.g.mul(i, gg)?;
        let c2 = ctx.g.add(keep, write)?;
        let tc = ctx.g.tanh(c2);
        let h2 = ctx.g.mul(o, tc)?;
        Ok((h2, c2))
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LstmNet {
    layers: Vec<Cell>,
    encoder: Option<(Cell, Cell)>,
    out_w: ParamId,
    out_b: ParamId,
    hidden: usize,
}

impl LstmNet {
    pub fn build(cfg: &ModelConfig, b: &mut Builder<'_>) -> Result<Self> {
        let h = cfg.hidden_dim;
        let encoder = if cfg.has_encoder {
            Some((
                Cell::build(b, "enc.fwd", cfg.token_dim, h / 2)?,
                Cell::build(b, "enc.bwd", cfg.token_dim, h / 2)?,
            ))
        } else {
            None
        };
        let layers = (0..cfg.n_layers)
            .map(|l| Cell::build(b, &format!("lstm.l{l}"), if l == 0 { cfg.step_width() } else { h }, h))
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            encoder,
            out_w: b.weight("out.w", h, cfg.vocab_size)?,
            out_b: b.zeros("out.b", cfg.vocab_size)?,
            hidden: h,
        })
    }

    /// Runs both directions over padded sources. States stop updating past
    /// each source's end, so the summary is `[h_fwd(last) ‖ h_bwd(first)]`.
    pub fn encode(&self, model: &DecoderModel, ctx: &mut Ctx<'_>, sources: &[Vec<usize>]) -> Result<EncoderOut> {
        let (fwd, bwd) = self.encoder.as_ref().expect("encode called without an encoder");
        let n = sources.len();
        let lens: Vec<usize> = sources.iter().map(Vec::len).collect();
        let s_max = *lens.iter().max().unwrap_or(&0);
        let half = self.hidden / 2;
        let table = ctx.p(model.token_table());
        let mut xs = Vec::with_capacity(s_max);
        for s in 0..s_max {
            let ids: Vec<usize> = sources.iter().map(|src| src.get(s).copied().unwrap_or(PAD)).collect();
            xs.push(ctx.g.embedding(table, &ids)?);
        }
        let zeros = ctx.g.constant(&[n, half], vec![0.0; n * half])?;
        let run = |ctx: &mut Ctx<'_>, cell: &Cell, order: &mut dyn Iterator<Item = usize>| -> Result<(Vec<Option<Var>>, Var, Var)> {
            let (mut h, mut c) = (zeros, zeros);
            let mut outs = vec![None; s_max];
            for s in order {
                let mask: Vec<bool> = lens.iter().map(|&l| s < l).collect();
                let (h2, c2) = cell.step(ctx, xs[s], h, c)?;
                h = ctx.g.select_rows(&mask, h2, h)?;
                c = ctx.g.select_rows(&mask, c2, c)?;
                outs[s] = Some(h);
            }
            Ok((outs, h, c))
        };
        let (hf, hf_last, cf_last) = run(ctx, fwd, &mut (0..s_max))?;
        let (hb, hb_first, cb_first) = run(ctx, bwd, &mut (0..s_max).rev())?;
        let mut steps = Vec::with_capacity(s_max);
        for s in 0..s_max {
            steps.push(ctx.g.concat(&[hf[s].unwrap(), hb[s].unwrap()])?);
        }
        let time_major = ctx.g.concat_rows(&steps)?;
        let perm: Vec<usize> = (0..n * s_max).map(|r| (r % s_max) * n + r / s_max).collect();
        let memory = ctx.g.embedding(time_major, &perm)?;
        let h = ctx.g.concat(&[hf_last, hb_first])?;
        let c = ctx.g.concat(&[cf_last, cb_first])?;
        Ok(EncoderOut {
            memory,
            lens,
            max_len: s_max,
            summary: Some((h, c)),
        })
    }

    pub fn forward(&self, model: &DecoderModel, ctx: &mut Ctx<'_>, batch: &Batch) -> Result<Var> {
        let (n, t_len) = (batch.len(), batch.steps());
        let mut ids = Vec::with_capacity(n * t_len);
        let mut desired = Vec::with_capacity(n * t_len);
        let mut trackers = Vec::with_capacity(n * t_len);
        for t in 0..t_len {
            for b in 0..n {
                ids.push(batch.inputs[b][t]);
                desired.push(batch.desired[b]);
                if model.has_tracker() {
                    trackers.push(batch.trackers[b][t]);
                }
            }
        }
        let x_all = model.step_inputs(ctx, &ids, &desired, &trackers, None)?;
        let (h0, c0) = match &batch.sources {
            Some(src) => self.encode(model, ctx, src)?.summary.expect("lstm summary"),
            None => {
                let z = ctx.g.constant(&[n, self.hidden], vec![0.0; n * self.hidden])?;
                (z, z)
            }
        };
        let mut hs = vec![h0; self.layers.len()];
        let mut cs = vec![c0; self.layers.len()];
        let mut tops = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let mut x = ctx.g.slice_rows(x_all, t * n, (t + 1) * n)?;
            for (l, cell) in self.layers.iter().enumerate() {
                let (h, c) = cell.step(ctx, x, hs[l], cs[l])?;
                hs[l] = h;
                cs[l] = c;
                x = h;
            }
            tops.push(x);
        }
        let top = ctx.g.concat_rows(&tops)?;
        ctx.linear(top, self.out_w, Some(self.out_b))
    }

    pub fn init_state(&self, cfg: &ModelConfig, ctx: &mut Ctx<'_>, enc: Option<&EncoderOut>, state: &mut DecoderState) {
        let n = state.streams;
        let (h, c) = match enc.and_then(|e| e.summary) {
            Some((h, c)) => (ctx.g.value(h).to_vec(), ctx.g.value(c).to_vec()),
            None => (vec![0.0; n * cfg.hidden_dim], vec![0.0; n * cfg.hidden_dim]),
        };
        state.lstm = vec![(h, c); self.layers.len()];
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
        let mut x = model.step_inputs(ctx, tokens, desired, trackers, None)?;
        for (l, cell) in self.layers.iter().enumerate() {
            let (hv, cv) = &state.lstm[l];
            let h = ctx.g.constant(&[n, self.hidden], hv.clone())?;
            let c = ctx.g.constant(&[n, self.hidden], cv.clone())?;
            let (h2, c2) = cell.step(ctx, x, h, c)?;
            state.lstm[l] = (ctx.g.value(h2).to_vec(), ctx.g.value(c2).to_vec());
            x = h2;
        }
        ctx.linear(x, self.out_w, Some(self.out_b))
    }
}
