//! LLaMA-style decoder: pre-norm blocks of attention and a SwiGLU
//! feed-forward, rotary positions, no biases, untied LM head.

mod checkpoint;
mod config;
mod decode;
mod forward;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{load_checkpoint, read_header, save_checkpoint, CheckpointHeader, TensorEntry, MAGIC};
pub use config::ModelConfig;
pub use decode::{greedy_generate, KvCache};
pub use forward::{Bound, ForwardOptions, ParamMode};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::trainer::LoraConfig;

/// Granularity of a prunable unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitKind {
    Block,
    MhaModule,
    FfnModule,
}

/// A prunable unit, addressed by its ORIGINAL block index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct UnitRef {
    pub kind: UnitKind,
    pub block_index: usize,
}

impl UnitRef {
    pub fn block(block_index: usize) -> Self {
        UnitRef {
            kind: UnitKind::Block,
            block_index,
        }
    }

    pub fn mha(block_index: usize) -> Self {
        UnitRef {
            kind: UnitKind::MhaModule,
            block_index,
        }
    }

    pub fn ffn(block_index: usize) -> Self {
        UnitRef {
            kind: UnitKind::FfnModule,
            block_index,
        }
    }

    /// Whether removing `self` disables the attention / FFN of its block.
    pub fn covers(&self, kind: UnitKind) -> bool {
        self.kind == UnitKind::Block || self.kind == kind
    }
}

impl fmt::Display for UnitRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let k = match self.kind {
            UnitKind::Block => "block",
            UnitKind::MhaModule => "mha",
            UnitKind::FfnModule => "ffn",
        };
        write!(f, "{k}{}", self.block_index)
    }
}

/// The seven projection matrices of a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Proj {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl Proj {
    pub const ALL: [Proj; 7] = [Proj::Q, Proj::K, Proj::V, Proj::O, Proj::Gate, Proj::Up, Proj::Down];

    pub fn name(self) -> &'static str {
        match self {
            Proj::Q => "wq",
            Proj::K => "wk",
            Proj::V => "wv",
            Proj::O => "wo",
            Proj::Gate => "w_gate",
            Proj::Up => "w_up",
            Proj::Down => "w_down",
        }
    }

    pub fn kind(self) -> UnitKind {
        match self {
            Proj::Q | Proj::K | Proj::V | Proj::O => UnitKind::MhaModule,
            _ => UnitKind::FfnModule,
        }
    }
}

/// Low-rank update `scale * B·A` on top of a frozen weight.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<T = f32> {
    /// `[rank, d_in]`
    pub a: Tensor<T>,
    /// `[d_out, rank]`
    pub b: Tensor<T>,
    pub scale: f64,
}

/// Projection weight `[d_out, d_in]` with an optional adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T = f32> {
    pub weight: Tensor<T>,
    pub lora: Option<LoraAdapter<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(weight: Tensor<T>) -> Self {
        Linear { weight, lora: None }
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attention<T = f32> {
    pub norm: Tensor<T>,
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
    pub wo: Linear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward<T = f32> {
    pub norm: Tensor<T>,
    pub w_gate: Linear<T>,
    pub w_up: Linear<T>,
    pub w_down: Linear<T>,
}

/// One Transformer block. A module is `None` once pruned away at module
/// granularity.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T = f32> {
    pub index: usize,
    pub attn: Option<Attention<T>>,
    pub ffn: Option<FeedForward<T>>,
}

impl<T: Scalar> Block<T> {
    pub fn proj(&self, p: Proj) -> Option<&Linear<T>> {
        match p {
            Proj::Q => self.attn.as_ref().map(|a| &a.wq),
            Proj::K => self.attn.as_ref().map(|a| &a.wk),
            Proj::V => self.attn.as_ref().map(|a| &a.wv),
            Proj::O => self.attn.as_ref().map(|a| &a.wo),
            Proj::Gate => self.ffn.as_ref().map(|f| &f.w_gate),
            Proj::Up => self.ffn.as_ref().map(|f| &f.w_up),
            Proj::Down => self.ffn.as_ref().map(|f| &f.w_down),
        }
    }

    pub fn proj_mut(&mut self, p: Proj) -> Option<&mut Linear<T>> {
        match p {
            Proj::Q => self.attn.as_mut().map(|a| &mut a.wq),
            Proj::K => self.attn.as_mut().map(|a| &mut a.wk),
            Proj::V => self.attn.as_mut().map(|a| &mut a.wv),
            Proj::O => self.attn.as_mut().map(|a| &mut a.wo),
            Proj::Gate => self.ffn.as_mut().map(|f| &mut f.w_gate),
            Proj::Up => self.ffn.as_mut().map(|f| &mut f.w_up),
            Proj::Down => self.ffn.as_mut().map(|f| &mut f.w_down),
        }
    }

    /// Present projections, in canonical order.
    pub fn projections(&self) -> impl Iterator<Item = (Proj, &Linear<T>)> {
        Proj::ALL.into_iter().filter_map(move |p| self.proj(p).map(|l| (p, l)))
    }

    pub fn param_count(&self) -> u64 {
        let mut n = 0;
        if let Some(a) = &self.attn {
            n += a.norm.numel() + a.wq.weight.numel() + a.wk.weight.numel() + a.wv.weight.numel() + a.wo.weight.numel();
        }
        if let Some(f) = &self.ffn {
            n += f.norm.numel() + f.w_gate.weight.numel() + f.w_up.weight.numel() + f.w_down.weight.numel();
        }
        n as u64
    }

    pub fn is_empty(&self) -> bool {
        self.attn.is_none() && self.ffn.is_none()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T = f32> {
    pub config: ModelConfig,
    /// Depth before any pruning; protection and reports use it.
    pub original_n_blocks: usize,
    pub tok_embedding: Tensor<T>,
    pub blocks: Vec<Block<T>>,
    pub final_norm: Tensor<T>,
    pub lm_head: Tensor<T>,
    pub lora: Option<LoraConfig>,
}

impl<T: Scalar> Model<T> {
    /// Random initialization: fan-in scaled normals, residual-output
    /// projections further scaled by `1/sqrt(2 * n_blocks)`, unit norms.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let inner = config.attn_inner();
        let f = config.d_ffn;
        let depth_scale = 1.0 / (2.0 * config.n_blocks as f64).sqrt();
        let mut mat = |rows: usize, cols: usize, std: f64| -> Tensor<T> {
            let dist = Normal::new(0.0, std).expect("finite std");
            Tensor::from_fn(&[rows, cols], |_| T::from_f64(dist.sample(&mut rng)))
        };
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let tok_embedding = mat(config.vocab_size, d, 1.0);
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for index in 0..config.n_blocks {
            let attn = Attention {
                norm: Tensor::full(&[d], T::one()),
                wq: Linear::new(mat(inner, d, fan(d))),
                wk: Linear::new(mat(inner, d, fan(d))),
                wv: Linear::new(mat(inner, d, fan(d))),
                wo: Linear::new(mat(d, inner, fan(inner) * depth_scale)),
            };
            let ffn = FeedForward {
                norm: Tensor::full(&[d], T::one()),
                w_gate: Linear::new(mat(f, d, fan(d))),
                w_up: Linear::new(mat(f, d, fan(d))),
                w_down: Linear::new(mat(d, f, fan(f) * depth_scale)),
            };
            blocks.push(Block {
                index,
                attn: Some(attn),
                ffn: Some(ffn),
            });
        }
        let lm_head = mat(config.vocab_size, d, fan(d));
        Ok(Model {
            original_n_blocks: config.n_blocks,
            tok_embedding,
            blocks,
            final_norm: Tensor::full(&[d], T::one()),
            lm_head,
            lora: None,
            config,
        })
    }

    /// Live depth.
    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_indices(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.index).collect()
    }

    pub fn block(&self, original_index: usize) -> Option<&Block<T>> {
        self.blocks.iter().find(|b| b.index == original_index)
    }

    pub fn block_mut(&mut self, original_index: usize) -> Option<&mut Block<T>> {
        self.blocks.iter_mut().find(|b| b.index == original_index)
    }

    /// Units currently present at the requested granularity.
    pub fn live_units(&self, module_level: bool) -> Vec<UnitRef> {
        let mut out = Vec::new();
        for b in &self.blocks {
            if module_level {
                if b.attn.is_some() {
                    out.push(UnitRef::mha(b.index));
                }
                if b.ffn.is_some() {
                    out.push(UnitRef::ffn(b.index));
                }
            } else {
                out.push(UnitRef::block(b.index));
            }
        }
        out
    }

    /// Base (non-adapter) parameter count.
    pub fn param_count(&self) -> u64 {
        let non_block = (self.tok_embedding.numel() + self.final_norm.numel() + self.lm_head.numel()) as u64;
        non_block + self.blocks.iter().map(Block::param_count).sum::<u64>()
    }

    /// Parameters of one unit as currently present.
    pub fn unit_param_count(&self, unit: UnitRef) -> Option<u64> {
        let b = self.block(unit.block_index)?;
        let attn = b.attn.as_ref().map(|a| {
            (a.norm.numel() + a.wq.weight.numel() + a.wk.weight.numel() + a.wv.weight.numel() + a.wo.weight.numel())
                as u64
        });
        let ffn = b.ffn.as_ref().map(|f| {
            (f.norm.numel() + f.w_gate.weight.numel() + f.w_up.weight.numel() + f.w_down.weight.numel()) as u64
        });
        match unit.kind {
            UnitKind::Block => Some(b.param_count()),
            UnitKind::MhaModule => attn,
            UnitKind::FfnModule => ffn,
        }
    }

    /// Base parameters with stable names, in canonical order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("tok_embedding".to_string(), &self.tok_embedding)];
        for b in &self.blocks {
            let i = b.index;
            if let Some(a) = &b.attn {
                out.push((format!("blocks.{i}.mha.norm"), &a.norm));
                for (p, l) in [(Proj::Q, &a.wq), (Proj::K, &a.wk), (Proj::V, &a.wv), (Proj::O, &a.wo)] {
                    out.push((format!("blocks.{i}.mha.{}", p.name()), &l.weight));
                }
            }
            if let Some(f) = &b.ffn {
                out.push((format!("blocks.{i}.ffn.norm"), &f.norm));
                for (p, l) in [(Proj::Gate, &f.w_gate), (Proj::Up, &f.w_up), (Proj::Down, &f.w_down)] {
                    out.push((format!("blocks.{i}.ffn.{}", p.name()), &l.weight));
                }
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("lm_head".to_string(), &self.lm_head));
        out
    }

    /// Same order as [`named_params`](Self::named_params).
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.tok_embedding];
        for b in &mut self.blocks {
            if let Some(a) = &mut b.attn {
                out.push(&mut a.norm);
                out.push(&mut a.wq.weight);
                out.push(&mut a.wk.weight);
                out.push(&mut a.wv.weight);
                out.push(&mut a.wo.weight);
            }
            if let Some(f) = &mut b.ffn {
                out.push(&mut f.norm);
                out.push(&mut f.w_gate.weight);
                out.push(&mut f.w_up.weight);
                out.push(&mut f.w_down.weight);
            }
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.lm_head);
        out
    }

    /// Adapter tensors `(A, B)` with names, block order then projection order.
    pub fn named_lora_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for b in &self.blocks {
            for (p, l) in b.projections() {
                if let Some(ad) = &l.lora {
                    let unit = if p.kind() == UnitKind::MhaModule { "mha" } else { "ffn" };
                    out.push((format!("blocks.{}.{unit}.{}.lora_a", b.index, p.name()), &ad.a));
                    out.push((format!("blocks.{}.{unit}.{}.lora_b", b.index, p.name()), &ad.b));
                }
            }
        }
        out
    }

    pub fn lora_params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            let mut lins: Vec<&mut Linear<T>> = Vec::with_capacity(7);
            if let Some(a) = &mut b.attn {
                lins.extend([&mut a.wq, &mut a.wk, &mut a.wv, &mut a.wo]);
            }
            if let Some(f) = &mut b.ffn {
                lins.extend([&mut f.w_gate, &mut f.w_up, &mut f.w_down]);
            }
            for ad in lins.into_iter().filter_map(|l| l.lora.as_mut()) {
                out.push(&mut ad.a);
                out.push(&mut ad.b);
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let lin = |l: &Linear<T>| Linear {
            weight: l.weight.cast(),
            lora: l.lora.as_ref().map(|a| LoraAdapter {
                a: a.a.cast(),
                b: a.b.cast(),
                scale: a.scale,
            }),
        };
        Model {
            config: self.config.clone(),
            original_n_blocks: self.original_n_blocks,
            tok_embedding: self.tok_embedding.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    index: b.index,
                    attn: b.attn.as_ref().map(|a| Attention {
                        norm: a.norm.cast(),
                        wq: lin(&a.wq),
                        wk: lin(&a.wk),
                        wv: lin(&a.wv),
                        wo: lin(&a.wo),
                    }),
                    ffn: b.ffn.as_ref().map(|f| FeedForward {
                        norm: f.norm.cast(),
                        w_gate: lin(&f.w_gate),
                        w_up: lin(&f.w_up),
                        w_down: lin(&f.w_down),
                    }),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
            lm_head: self.lm_head.cast(),
            lora: self.lora.clone(),
        }
    }

    /// SHA-256 over every base weight (names, shapes and bytes as f64).
    pub fn weights_digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named_params() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Checks internal consistency after surgery or loading.
    pub fn check_invariants(&self) -> Result<()> {
        self.config.validate_dims()?;
        if self.config.n_blocks != self.blocks.len() {
            return Err(Error::Contract(format!(
                "config.n_blocks {} != live blocks {}",
                self.config.n_blocks,
                self.blocks.len()
            )));
        }
        for w in self.blocks.windows(2) {
            if w[0].index >= w[1].index {
                return Err(Error::Contract("block indices must be strictly increasing".into()));
            }
        }
        if let Some(b) = self.blocks.last() {
            if b.index >= self.original_n_blocks {
                return Err(Error::Contract(format!(
                    "block index {} >= original depth {}",
                    b.index, self.original_n_blocks
                )));
            }
        }
        Ok(())
    }
}
