use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LoraAdapter, Model, Proj};
use crate::tensor::{gemm, Scalar, Tensor, View, ViewMut};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 8,
            alpha: 16.0,
            seed: 0,
        }
    }
}

impl LoraConfig {
    /// Rank with alpha pinned at `2 * rank`.
    pub fn with_rank(rank: usize) -> Self {
        LoraConfig {
            rank,
            alpha: 2.0 * rank as f64,
            seed: 0,
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Attaches an adapter to every projection matrix of every live block.
/// `A` is uniform in `±1/sqrt(d_in)`, `B` is zero, so the model output is
/// unchanged until training moves `B`.
pub fn attach_lora<T: Scalar>(model: &mut Model<T>, cfg: &LoraConfig) -> Result<()> {
    if model.lora.is_some() {
        return Err(Error::Contract("a LoRA adapter is already attached".into()));
    }
    if cfg.rank == 0 {
        return Err(Error::Config("LoRA rank must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scale = cfg.scale();
    for b in &mut model.blocks {
        for p in Proj::ALL {
            if let Some(lin) = b.proj_mut(p) {
                let (d_out, d_in) = (lin.d_out(), lin.d_in());
                let bound = 1.0 / (d_in as f64).sqrt();
                let a = Tensor::from_fn(&[cfg.rank, d_in], |_| T::from_f64(rng.gen_range(-bound..bound)));
                lin.lora = Some(LoraAdapter {
                    a,
                    b: Tensor::zeros(&[d_out, cfg.rank]),
                    scale,
                });
            }
        }
    }
    model.lora = Some(cfg.clone());
    Ok(())
}

/// Folds `scale * B·A` into each weight and removes the adapters.
pub fn merge_lora<T: Scalar>(model: &mut Model<T>) -> Result<()> {
    if model.lora.is_none() {
        return Err(Error::Contract("no LoRA adapter attached".into()));
    }
    for b in &mut model.blocks {
        for p in Proj::ALL {
            if let Some(lin) = b.proj_mut(p) {
                if let Some(ad) = lin.lora.take() {
                    let (d_out, d_in) = (lin.d_out(), lin.d_in());
                    let r = ad.a.shape()[0];
                    gemm(
                        T::from_f64(ad.scale),
                        View::rm(ad.b.data(), d_out, r),
                        View::rm(ad.a.data(), r, d_in),
                        T::one(),
                        ViewMut::rm(lin.weight.data_mut(), d_out, d_in),
                    );
                }
            }
        }
    }
    model.lora = None;
    Ok(())
}

/// Adapter parameter count, `sum r * (d_out + d_in)` over adapted matrices.
pub fn lora_trainable_params<T: Scalar>(model: &Model<T>) -> u64 {
    model.named_lora_params().iter().map(|(_, t)| t.numel() as u64).sum()
}
