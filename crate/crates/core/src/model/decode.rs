//! KV-cached incremental decoding.

use super::{Linear, Model};
use crate::error::{Error, Result};
use crate::kernels::{self, RopeTable};
use crate::tensor::{Scalar, Tensor};

struct LayerCache<T> {
    /// `[batch, n_heads, capacity, head_dim]`
    k: Vec<T>,
    v: Vec<T>,
}

/// Per-block key/value buffers for `batch` parallel sequences.
pub struct KvCache<T = f32> {
    /// One slot per live block; `None` for blocks whose attention was pruned.
    layers: Vec<Option<LayerCache<T>>>,
    batch: usize,
    capacity: usize,
    n_heads: usize,
    head_dim: usize,
    len: usize,
    rope: RopeTable<T>,
}

impl<T: Scalar> KvCache<T> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Number of block slots, equal to the model's live depth.
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }
}

impl<T: Scalar> Model<T> {
    pub fn new_cache(&self, batch: usize, capacity: usize) -> Result<KvCache<T>> {
        if batch == 0 {
            return Err(Error::Config("cache batch must be >= 1".into()));
        }
        if capacity > self.config.max_seq_len {
            return Err(Error::Capacity(format!(
                "cache capacity {capacity} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        let n_heads = self.config.n_heads;
        let head_dim = self.config.head_dim();
        let size = batch * n_heads * capacity * head_dim;
        let layers = self
            .blocks
            .iter()
            .map(|b| {
                b.attn.as_ref().map(|_| LayerCache {
                    k: vec![T::zero(); size],
                    v: vec![T::zero(); size],
                })
            })
            .collect();
        Ok(KvCache {
            layers,
            batch,
            capacity,
            n_heads,
            head_dim,
            len: 0,
            rope: RopeTable::new(head_dim, capacity, self.config.rope_base),
        })
    }

    /// Feeds one token per sequence and returns next-token logits
    /// `[batch, vocab]`.
    pub fn decode_step(&self, cache: &mut KvCache<T>, tokens: &[u32]) -> Result<Tensor<T>> {
        let m = cache.batch;
        if tokens.len() != m {
            return Err(Error::Dimension {
                op: "decode_step",
                lhs: vec![tokens.len()],
                rhs: vec![m],
            });
        }
        if cache.layers.len() != self.blocks.len() {
            return Err(Error::Contract("cache was built for a different depth".into()));
        }
        if cache.len >= cache.capacity {
            return Err(Error::Capacity(format!("KV cache full at {} positions", cache.capacity)));
        }
        let cfg = &self.config;
        let d = cfg.d_model;
        let vocab = cfg.vocab_size;
        let eps = T::from_f64(cfg.rms_eps);
        let pos = cache.len;
        let inner = cfg.attn_inner();
        let (n_heads, hd) = (cache.n_heads, cache.head_dim);

        let mut x = Vec::with_capacity(m * d);
        for &t in tokens {
            let t = t as usize;
            if t >= vocab {
                return Err(Error::Index(format!("token id {t} >= vocab_size {vocab}")));
            }
            x.extend_from_slice(&self.tok_embedding.data()[t * d..(t + 1) * d]);
        }
        let mut h = vec![T::zero(); m * d];
        let mut inv = vec![T::zero(); m];
        let scale = T::one() / T::from_f64(hd as f64).sqrt();
        let mut scores = vec![T::zero(); pos + 1];

        for (block, layer) in self.blocks.iter().zip(cache.layers.iter_mut()) {
            if let (Some(attn), Some(layer)) = (&block.attn, layer.as_mut()) {
                kernels::rmsnorm_rows(&x, d, attn.norm.data(), eps, &mut h, &mut inv);
                let mut q = apply(&attn.wq, &h, m);
                let mut k = apply(&attn.wk, &h, m);
                let v = apply(&attn.wv, &h, m);
                for b in 0..m {
                    cache.rope.rotate_row(&mut q[b * inner..(b + 1) * inner], n_heads, pos, false);
                    cache.rope.rotate_row(&mut k[b * inner..(b + 1) * inner], n_heads, pos, false);
                }
                let mut att = vec![T::zero(); m * inner];
                for b in 0..m {
                    for hh in 0..n_heads {
                        let at = ((b * n_heads + hh) * cache.capacity + pos) * hd;
                        let src = b * inner + hh * hd;
                        layer.k[at..at + hd].copy_from_slice(&k[src..src + hd]);
                        layer.v[at..at + hd].copy_from_slice(&v[src..src + hd]);
                        let base = ((b * n_heads + hh) * cache.capacity) * hd;
                        let qh = &q[src..src + hd];
                        for (j, s) in scores.iter_mut().enumerate() {
                            let kj = &layer.k[base + j * hd..base + (j + 1) * hd];
                            let mut dot = T::zero();
                            for (a, c) in qh.iter().zip(kj) {
                                dot += *a * *c;
                            }
                            *s = dot * scale;
                        }
                        kernels::softmax_inplace(&mut scores);
                        let out = &mut att[src..src + hd];
                        for (j, &p) in scores.iter().enumerate() {
                            let vj = &layer.v[base + j * hd..base + (j + 1) * hd];
                            for (o, vv) in out.iter_mut().zip(vj) {
                                *o += p * *vv;
                            }
                        }
                    }
                }
                let o = apply(&attn.wo, &att, m);
                x.iter_mut().zip(&o).for_each(|(x, o)| *x += *o);
            }
            if let Some(ffn) = &block.ffn {
                kernels::rmsnorm_rows(&x, d, ffn.norm.data(), eps, &mut h, &mut inv);
                let gate = apply(&ffn.w_gate, &h, m);
                let up = apply(&ffn.w_up, &h, m);
                let act: Vec<T> = gate.iter().zip(&up).map(|(g, u)| kernels::silu(*g) * *u).collect();
                let o = apply(&ffn.w_down, &act, m);
                x.iter_mut().zip(&o).for_each(|(x, o)| *x += *o);
            }
        }
        kernels::rmsnorm_rows(&x, d, self.final_norm.data(), eps, &mut h, &mut inv);
        let mut logits = vec![T::zero(); m * vocab];
        kernels::linear(&h, m, d, self.lm_head.data(), vocab, T::zero(), &mut logits);
        cache.len += 1;
        Tensor::new(vec![m, vocab], logits)
    }
}

fn apply<T: Scalar>(lin: &Linear<T>, x: &[T], m: usize) -> Vec<T> {
    let (n, k) = (lin.d_out(), lin.d_in());
    let mut out = vec![T::zero(); m * n];
    kernels::linear(x, m, k, lin.weight.data(), n, T::zero(), &mut out);
    if let Some(ad) = &lin.lora {
        let r = ad.a.shape()[0];
        let mut low = vec![T::zero(); m * r];
        kernels::linear(x, m, k, ad.a.data(), r, T::zero(), &mut low);
        let mut up = vec![T::zero(); m * n];
        kernels::linear(&low, m, r, ad.b.data(), n, T::zero(), &mut up);
        let s = T::from_f64(ad.scale);
        out.iter_mut().zip(&up).for_each(|(o, u)| *o += *u * s);
    }
    out
}

pub(crate) fn argmax<T: Scalar>(row: &[T]) -> u32 {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy decoding of `n_new` tokens for each prompt (all prompts must have
/// the same nonzero length). Returns only the generated tokens.
pub fn greedy_generate<T: Scalar>(model: &Model<T>, prompts: &[Vec<u32>], n_new: usize) -> Result<Vec<Vec<u32>>> {
    let m = prompts.len();
    let plen = prompts.first().map(Vec::len).unwrap_or(0);
    if m == 0 || plen == 0 || prompts.iter().any(|p| p.len() != plen) {
        return Err(Error::Config("prompts must be nonempty and equally long".into()));
    }
    if n_new == 0 {
        return Ok(vec![Vec::new(); m]);
    }
    let mut cache = model.new_cache(m, plen + n_new - 1)?;
    let vocab = model.config.vocab_size;
    let mut logits = None;
    for p in 0..plen {
        let col: Vec<u32> = prompts.iter().map(|s| s[p]).collect();
        logits = Some(model.decode_step(&mut cache, &col)?);
    }
    let mut out = vec![Vec::with_capacity(n_new); m];
    let mut logits = logits.expect("prompt is nonempty");
    for step in 0..n_new {
        let next: Vec<u32> = logits.data().chunks_exact(vocab).map(argmax).collect();
        for (o, t) in out.iter_mut().zip(&next) {
            o.push(*t);
        }
        if step + 1 < n_new {
            logits = model.decode_step(&mut cache, &next)?;
        }
    }
    Ok(out)
}
