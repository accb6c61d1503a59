//! Binary checkpoint format.
//!
//! ```text
//! "BPRUNE01"                 8-byte magic
//! header_len                 u64 little-endian
//! header                     UTF-8 JSON, `header_len` bytes
//! zero padding               up to the next multiple of 64
//! tensor blobs               little-endian f32, each 64-byte aligned
//! ```
//!
//! Tensor offsets in the header are relative to the first aligned byte after
//! the header, so `data_start = align64(16 + header_len)`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Attention, Block, FeedForward, Linear, LoraAdapter, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trainer::LoraConfig;

pub const MAGIC: &[u8; 8] = b"BPRUNE01";
const ALIGN: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub index: usize,
    pub mha: bool,
    pub ffn: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub original_n_blocks: usize,
    pub blocks: Vec<BlockEntry>,
    pub lora: Option<LoraConfig>,
    pub tensors: Vec<TensorEntry>,
}

fn align(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

fn with_path(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

pub fn save_checkpoint(model: &Model<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(model)?).map_err(|e| with_path(path, e))
}

pub(crate) fn encode(model: &Model<f32>) -> Result<Vec<u8>> {
    model.check_invariants()?;
    let mut named = model.named_params();
    named.extend(model.named_lora_params());
    let mut tensors = Vec::with_capacity(named.len());
    let mut offset = 0usize;
    for (name, t) in &named {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: offset as u64,
        });
        offset = align(offset + 4 * t.numel());
    }
    let header = CheckpointHeader {
        config: model.config.clone(),
        original_n_blocks: model.original_n_blocks,
        blocks: model
            .blocks
            .iter()
            .map(|b| BlockEntry {
                index: b.index,
                mha: b.attn.is_some(),
                ffn: b.ffn.is_some(),
            })
            .collect(),
        lora: model.lora.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let data_start = align(16 + json.len());
    let mut out = Vec::with_capacity(data_start + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.resize(data_start, 0);
    for ((_, t), entry) in named.iter().zip(&header.tensors) {
        out.resize(data_start + entry.offset as usize, 0);
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.resize(data_start + offset, 0);
    Ok(out)
}

/// Parses magic and header only; returns the header and the data offset.
pub fn read_header(bytes: &[u8]) -> Result<(CheckpointHeader, usize)> {
    if bytes.len() < 16 {
        return Err(Error::format("<file>", "shorter than the fixed preamble"));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::format("<magic>", format!("expected {:?}", std::str::from_utf8(MAGIC).unwrap())));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let end = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::format("<header>", "truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[16..end]).map_err(|e| Error::format("<header>", e.to_string()))?;
    Ok((header, align(end)))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model<f32>> {
    let path = path.as_ref();
    decode(&fs::read(path).map_err(|e| with_path(path, e))?)
}

pub(crate) fn decode(bytes: &[u8]) -> Result<Model<f32>> {
    let (header, data_start) = read_header(bytes)?;
    let cfg = &header.config;
    cfg.validate_dims().map_err(|e| Error::format("<config>", e.to_string()))?;
    if cfg.n_blocks != header.blocks.len() {
        return Err(Error::format("<config>", "n_blocks disagrees with block list"));
    }
    let expected = expected_tensors(&header);
    if expected.len() != header.tensors.len() {
        return Err(Error::format(
            "<index>",
            format!("expected {} tensors, header lists {}", expected.len(), header.tensors.len()),
        ));
    }
    let mut loaded = Vec::with_capacity(expected.len());
    for ((name, shape), entry) in expected.iter().zip(&header.tensors) {
        if &entry.name != name {
            return Err(Error::format(entry.name.clone(), format!("expected tensor {name} here")));
        }
        if &entry.shape != shape {
            return Err(Error::format(
                name.clone(),
                format!("shape {:?} disagrees with config {:?}", entry.shape, shape),
            ));
        }
        let off = entry.offset as usize;
        if off % ALIGN != 0 {
            return Err(Error::format(name.clone(), "offset not 64-byte aligned"));
        }
        let numel: usize = shape.iter().product();
        let start = data_start + off;
        let end = start + 4 * numel;
        if end > bytes.len() {
            return Err(Error::format(name.clone(), "truncated tensor blob"));
        }
        let data = bytes[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        loaded.push(Tensor::new(shape.clone(), data)?);
    }

    let mut it = loaded.into_iter();
    let mut next = || it.next().expect("count checked above");
    let tok_embedding = next();
    let mut blocks = Vec::with_capacity(header.blocks.len());
    for be in &header.blocks {
        let attn = be.mha.then(|| {
            let norm = next();
            let [wq, wk, wv, wo] = [(); 4].map(|_| Linear::new(next()));
            Attention { norm, wq, wk, wv, wo }
        });
        let ffn = be.ffn.then(|| {
            let norm = next();
            let [w_gate, w_up, w_down] = [(); 3].map(|_| Linear::new(next()));
            FeedForward { norm, w_gate, w_up, w_down }
        });
        blocks.push(Block {
            index: be.index,
            attn,
            ffn,
        });
    }
    let final_norm = next();
    let lm_head = next();
    if let Some(lc) = &header.lora {
        let scale = lc.scale();
        for b in &mut blocks {
            for p in super::Proj::ALL {
                if let Some(lin) = b.proj_mut(p) {
                    lin.lora = Some(LoraAdapter {
                        a: next(),
                        b: next(),
                        scale,
                    });
                }
            }
        }
    }
    let model = Model {
        config: header.config.clone(),
        original_n_blocks: header.original_n_blocks,
        tok_embedding,
        blocks,
        final_norm,
        lm_head,
        lora: header.lora.clone(),
    };
    model.check_invariants().map_err(|e| Error::format("<blocks>", e.to_string()))?;
    Ok(model)
}

/// Names and shapes implied by the header's config and block list.
fn expected_tensors(h: &CheckpointHeader) -> Vec<(String, Vec<usize>)> {
    let c = &h.config;
    let (d, inner, f, v) = (c.d_model, c.attn_inner(), c.d_ffn, c.vocab_size);
    let mut out = vec![("tok_embedding".to_string(), vec![v, d])];
    let mut lora = Vec::new();
    for b in &h.blocks {
        let i = b.index;
        if b.mha {
            out.push((format!("blocks.{i}.mha.norm"), vec![d]));
            for (n, s) in [("wq", [inner, d]), ("wk", [inner, d]), ("wv", [inner, d]), ("wo", [d, inner])] {
                out.push((format!("blocks.{i}.mha.{n}"), s.to_vec()));
                lora.push((format!("blocks.{i}.mha.{n}"), s));
            }
        }
        if b.ffn {
            out.push((format!("blocks.{i}.ffn.norm"), vec![d]));
            for (n, s) in [("w_gate", [f, d]), ("w_up", [f, d]), ("w_down", [d, f])] {
                out.push((format!("blocks.{i}.ffn.{n}"), s.to_vec()));
                lora.push((format!("blocks.{i}.ffn.{n}"), s));
            }
        }
    }
    out.push(("final_norm".to_string(), vec![d]));
    out.push(("lm_head".to_string(), vec![v, d]));
    if let Some(lc) = &h.lora {
        for (name, [d_out, d_in]) in lora {
            out.push((format!("{name}.lora_a"), vec![lc.rank, d_in]));
            out.push((format!("{name}.lora_b"), vec![d_out, lc.rank]));
        }
    }
    out
}
