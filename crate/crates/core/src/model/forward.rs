use std::sync::Arc;

use super::{Linear, Model, UnitKind, UnitRef};
use crate::error::{Error, Result};
use crate::kernels::{self, AttnShape, RopeTable};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Which parameters become differentiable leaves.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ParamMode {
    #[default]
    Frozen,
    All,
    LoraOnly,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'s> {
    /// Units bypassed at runtime; weights stay untouched.
    pub skip: &'s [UnitRef],
    pub params: ParamMode,
}

/// Tape handles of the bound parameters, in the canonical orders of
/// [`Model::named_params`] and [`Model::named_lora_params`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    pub base: Vec<Var>,
    pub lora: Vec<Var>,
}

struct LinVars<T> {
    w: Var,
    lora: Option<(Var, Var, T)>,
}

impl<T: Scalar> Model<T> {
    fn skipped(skip: &[UnitRef], index: usize, kind: UnitKind) -> bool {
        skip.iter().any(|u| u.block_index == index && u.covers(kind))
    }

    fn seq_len_of(&self, n_tokens: usize, batch: usize) -> Result<usize> {
        if batch == 0 || n_tokens == 0 || n_tokens % batch != 0 {
            return Err(Error::Dimension {
                op: "forward",
                lhs: vec![n_tokens],
                rhs: vec![batch],
            });
        }
        let seq = n_tokens / batch;
        if seq > self.config.max_seq_len {
            return Err(Error::Length {
                len: seq,
                max: self.config.max_seq_len,
            });
        }
        Ok(seq)
    }

    /// Records a forward pass over `tokens` (`batch` equal-length rows,
    /// flattened) and returns the `[batch*seq, vocab]` logits node.
    pub fn forward_on<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        tokens: &[u32],
        batch: usize,
        opts: ForwardOptions<'_>,
    ) -> Result<(Var, Bound)> {
        let seq = self.seq_len_of(tokens.len(), batch)?;
        let train_base = opts.params == ParamMode::All;
        let train_lora = opts.params == ParamMode::LoraOnly;
        let mut bound = Bound::default();

        let emb = bind(tape, &self.tok_embedding, train_base, &mut bound);
        let mut block_vars = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let attn = b.attn.as_ref().map(|a| {
                let norm = bind(tape, &a.norm, train_base, &mut bound);
                let lins = [&a.wq, &a.wk, &a.wv, &a.wo].map(|l| bind_lin(tape, l, train_base, &mut bound));
                (norm, lins)
            });
            let ffn = b.ffn.as_ref().map(|f| {
                let norm = bind(tape, &f.norm, train_base, &mut bound);
                let lins = [&f.w_gate, &f.w_up, &f.w_down].map(|l| bind_lin(tape, l, train_base, &mut bound));
                (norm, lins)
            });
            block_vars.push((attn, ffn));
        }
        let final_norm = bind(tape, &self.final_norm, train_base, &mut bound);
        let head = bind(tape, &self.lm_head, train_base, &mut bound);

        // Adapters bind after the base weights so `bound.lora` follows
        // block order then projection order.
        for (b, (attn, ffn)) in self.blocks.iter().zip(block_vars.iter_mut()) {
            let mut slots: Vec<(&'a Linear<T>, &mut LinVars<T>)> = Vec::new();
            if let (Some(a), Some((_, lins))) = (&b.attn, attn.as_mut()) {
                let [q, k, v, o] = lins;
                slots.extend([(&a.wq, q), (&a.wk, k), (&a.wv, v), (&a.wo, o)]);
            }
            if let (Some(f), Some((_, lins))) = (&b.ffn, ffn.as_mut()) {
                let [g, u, d] = lins;
                slots.extend([(&f.w_gate, g), (&f.w_up, u), (&f.w_down, d)]);
            }
            for (lin, vars) in slots {
                if let Some(ad) = &lin.lora {
                    let a = tape.param(&ad.a, train_lora);
                    let bb = tape.param(&ad.b, train_lora);
                    bound.lora.push(a);
                    bound.lora.push(bb);
                    vars.lora = Some((a, bb, T::from_f64(ad.scale)));
                }
            }
        }

        let cfg = &self.config;
        let eps = T::from_f64(cfg.rms_eps);
        let shape = AttnShape {
            batch,
            seq,
            n_heads: cfg.n_heads,
            head_dim: cfg.head_dim(),
        };
        let table = Arc::new(RopeTable::new(cfg.head_dim(), seq, cfg.rope_base));
        let positions: Vec<usize> = (0..batch * seq).map(|r| r % seq).collect();

        let mut x = tape.embedding(emb, tokens)?;
        for (b, (attn, ffn)) in self.blocks.iter().zip(&block_vars) {
            if let Some((norm, [q, k, v, o])) = attn {
                if !Self::skipped(opts.skip, b.index, UnitKind::MhaModule) {
                    let h = tape.rmsnorm(x, *norm, eps)?;
                    let qv = project(tape, h, q)?;
                    let kv = project(tape, h, k)?;
                    let vv = project(tape, h, v)?;
                    let qv = tape.rope(qv, positions.clone(), cfg.n_heads, table.clone())?;
                    let kv = tape.rope(kv, positions.clone(), cfg.n_heads, table.clone())?;
                    let att = tape.causal_attention(qv, kv, vv, shape)?;
                    let out = project(tape, att, o)?;
                    x = tape.add(x, out)?;
                }
            }
            if let Some((norm, [g, u, d])) = ffn {
                if !Self::skipped(opts.skip, b.index, UnitKind::FfnModule) {
                    let h = tape.rmsnorm(x, *norm, eps)?;
                    let gate = project(tape, h, g)?;
                    let gate = tape.silu(gate);
                    let up = project(tape, h, u)?;
                    let m = tape.mul(gate, up)?;
                    let out = project(tape, m, d)?;
                    x = tape.add(x, out)?;
                }
            }
        }
        let x = tape.rmsnorm(x, final_norm, eps)?;
        let logits = tape.linear(x, head)?;
        Ok((logits, bound))
    }

    /// Mean next-token cross-entropy of `targets` given `inputs`.
    pub fn loss_on<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        inputs: &[u32],
        targets: &[u32],
        batch: usize,
        opts: ForwardOptions<'_>,
    ) -> Result<(Var, Bound)> {
        let (logits, bound) = self.forward_on(tape, inputs, batch, opts)?;
        let loss = tape.cross_entropy(logits, targets)?;
        Ok((loss, bound))
    }

    /// Logits `[batch, seq, vocab]`.
    pub fn forward(&self, tokens: &[u32], batch: usize) -> Result<Tensor<T>> {
        self.forward_masked(tokens, batch, &[])
    }

    /// Logits with the given units bypassed.
    pub fn forward_masked(&self, tokens: &[u32], batch: usize, skip: &[UnitRef]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let opts = ForwardOptions {
            skip,
            params: ParamMode::Frozen,
        };
        let (logits, _) = self.forward_on(&mut tape, tokens, batch, opts)?;
        let seq = tokens.len() / batch;
        let data = tape.value(logits).to_vec();
        Tensor::new(vec![batch, seq, self.config.vocab_size], data)
    }

    /// Summed next-token NLL per row (accumulated in f64).
    pub fn nll_per_row(&self, inputs: &[u32], targets: &[u32], batch: usize, skip: &[UnitRef]) -> Result<Vec<f64>> {
        if inputs.len() != targets.len() {
            return Err(Error::Dimension {
                op: "nll",
                lhs: vec![inputs.len()],
                rhs: vec![targets.len()],
            });
        }
        let logits = self.forward_masked(inputs, batch, skip)?;
        let vocab = self.config.vocab_size;
        let seq = inputs.len() / batch;
        let mut out = Vec::with_capacity(batch);
        for (b, rows) in logits.data().chunks_exact(seq * vocab).enumerate() {
            let mut sum = 0.0f64;
            for (row, &t) in rows.chunks_exact(vocab).zip(&targets[b * seq..(b + 1) * seq]) {
                let t = t as usize;
                if t >= vocab {
                    return Err(Error::Index(format!("target id {t} >= vocab_size {vocab}")));
                }
                sum += (kernels::log_sum_exp(row) - row[t]).as_f64();
            }
            out.push(sum);
        }
        Ok(out)
    }
}

fn bind<'a, T: Scalar>(tape: &mut Tape<'a, T>, t: &'a Tensor<T>, trainable: bool, bound: &mut Bound) -> Var {
    let v = tape.param(t, trainable);
    bound.base.push(v);
    v
}

fn bind_lin<'a, T: Scalar>(tape: &mut Tape<'a, T>, l: &'a Linear<T>, trainable: bool, bound: &mut Bound) -> LinVars<T> {
    LinVars {
        w: bind(tape, &l.weight, trainable, bound),
        lora: None,
    }
}

fn project<T: Scalar>(tape: &mut Tape<'_, T>, h: Var, lin: &LinVars<T>) -> Result<Var> {
    let y = tape.linear(h, lin.w)?;
    match lin.lora {
        None => Ok(y),
        Some((a, b, scale)) => {
            let low = tape.linear(h, a)?;
            let up = tape.linear(low, b)?;
            let up = tape.scale(up, scale);
            tape.add(y, up)
        }
    }
}
