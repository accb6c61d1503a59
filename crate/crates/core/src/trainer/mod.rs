//! Pretraining and retraining loops.

mod lora;
mod optim;

use std::io::Write;

use serde::{Deserialize, Serialize};

pub use lora::{attach_lora, lora_trainable_params, merge_lora, LoraConfig};
pub use optim::{clip_grad_norm, global_norm, AdamW};

use crate::data::{batch_iter, Corpus};
use crate::error::{Error, Result};
use crate::eval::eval_ppl;
use crate::model::{ForwardOptions, Model, ModelConfig, ParamMode};
use crate::tape::Tape;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Pretrain,
    Lora,
    FullFt,
    CptThenLora,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(TrainMode::Pretrain),
            "lora" => Ok(TrainMode::Lora),
            "full_ft" | "full-ft" | "cpt" => Ok(TrainMode::FullFt),
            "cpt_then_lora" | "cpt-then-lora" => Ok(TrainMode::CptThenLora),
            _ => Err(Error::Config(format!("unknown train mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    pub batch: usize,
    pub seq_len: usize,
    pub max_steps: usize,
    /// Second-phase budget for `cpt_then_lora`; defaults to `max_steps`.
    pub lora_steps: Option<usize>,
    pub seed: u64,
    /// Validation cadence in steps; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Validation tokens used per evaluation (prefix of the split).
    pub eval_tokens: usize,
    pub lora: LoraConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Lora,
            lr: 1e-4,
            betas: (0.9, 0.95),
            eps: 1e-8,
            weight_decay: 0.1,
            grad_clip_norm: 1.0,
            batch: 16,
            seq_len: 128,
            max_steps: 1000,
            lora_steps: None,
            seed: 0,
            eval_every: 100,
            eval_tokens: 16_384,
            lora: LoraConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Defaults for training from scratch.
    pub fn pretrain() -> Self {
        TrainConfig {
            mode: TrainMode::Pretrain,
            lr: 1e-3,
            max_steps: 5000,
            eval_every: 500,
            ..Self::default()
        }
    }

    pub fn retrain(mode: TrainMode) -> Self {
        TrainConfig { mode, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::Config(format!("betas must lie in [0, 1), got {:?}", self.betas)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be > 0".into()));
        }
        if !(self.grad_clip_norm > 0.0) {
            return Err(Error::Config("grad_clip_norm must be > 0".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if self.batch == 0 || self.seq_len == 0 {
            return Err(Error::Config("batch and seq_len must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub phase: TrainMode,
    pub train_loss: f64,
    /// Global gradient norm before and after clipping.
    pub grad_norm: f64,
    pub clipped_norm: f64,
    pub val_ppl: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub steps: usize,
    pub tokens_seen: u64,
    pub trainable_params: u64,
    pub initial_val_ppl: Option<f64>,
    pub final_val_ppl: Option<f64>,
    pub curve: Vec<CurvePoint>,
}

impl TrainReport {
    /// `step,train_loss,val_ppl` rows; missing validation values are empty.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "step,train_loss,val_ppl")?;
        for p in &self.curve {
            match p.val_ppl {
                Some(v) => writeln!(w, "{},{},{}", p.step, p.train_loss, v)?,
                None => writeln!(w, "{},{},", p.step, p.train_loss)?,
            }
        }
        Ok(())
    }
}

/// Called with `(step, model)` at every validation point.
pub type StepHook<'h, T> = &'h mut dyn FnMut(usize, &Model<T>) -> Result<()>;

fn val_ppl<T: Scalar>(model: &Model<T>, corpus: &Corpus, cfg: &TrainConfig) -> Result<Option<f64>> {
    let val = corpus.val();
    let val = &val[..val.len().min(cfg.eval_tokens)];
    if val.len() <= cfg.seq_len {
        return Ok(None);
    }
    eval_ppl(model, val, cfg.seq_len).map(Some)
}

struct Phase {
    mode: TrainMode,
    params: ParamMode,
    steps: usize,
}

fn run_phase<T: Scalar>(
    model: &mut Model<T>,
    corpus: &Corpus,
    cfg: &TrainConfig,
    phase: &Phase,
    step0: usize,
    curve: &mut Vec<CurvePoint>,
    hook: &mut Option<StepHook<'_, T>>,
) -> Result<()> {
    let mut batches = batch_iter(corpus, cfg.batch, cfg.seq_len, cfg.seed.wrapping_add(step0 as u64))?;
    let mut opt = AdamW::<T>::new(cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay);
    for i in 1..=phase.steps {
        let step = step0 + i;
        let batch = batches.next().expect("batch iterator is endless");
        let (loss, mut grads) = {
            let mut tape = Tape::new();
            let opts = ForwardOptions {
                skip: &[],
                params: phase.params,
            };
            let (loss, bound) = model.loss_on(&mut tape, &batch.inputs, &batch.targets, batch.batch, opts)?;
            let value = tape.value(loss)[0].as_f64();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("training loss is {value} at step {step}")));
            }
            tape.backward(loss)?;
            let vars = if phase.params == ParamMode::LoraOnly {
                &bound.lora
            } else {
                &bound.base
            };
            let grads: Vec<Vec<T>> = vars
                .iter()
                .map(|&v| {
                    let n: usize = tape.shape(v).iter().product();
                    tape.take_grad(v).unwrap_or_else(|| vec![T::zero(); n])
                })
                .collect();
            (value, grads)
        };
        let (grad_norm, clipped_norm) = clip_grad_norm(&mut grads, cfg.grad_clip_norm);
        if !grad_norm.is_finite() {
            return Err(Error::Numeric(format!("gradient norm is {grad_norm} at step {step}")));
        }
        {
            let mut params = if phase.params == ParamMode::LoraOnly {
                model.lora_params_mut()
            } else {
                model.params_mut()
            };
            opt.step(&mut params, &grads)?;
        }
        let at_eval = i == phase.steps || (cfg.eval_every > 0 && step % cfg.eval_every == 0);
        let val = if at_eval { val_ppl(model, corpus, cfg)? } else { None };
        curve.push(CurvePoint {
            step,
            phase: phase.mode,
            train_loss: loss,
            grad_norm,
            clipped_norm,
            val_ppl: val,
        });
        if at_eval {
            if let Some(h) = hook.as_mut() {
                h(step, model)?;
            }
        }
    }
    Ok(())
}

fn trainable<T: Scalar>(model: &Model<T>, params: ParamMode) -> u64 {
    match params {
        ParamMode::LoraOnly => lora_trainable_params(model),
        _ => model.named_params().iter().map(|(_, t)| t.numel() as u64).sum(),
    }
}

/// Trains `model` in place according to `cfg.mode`. `lora` mode attaches an
/// adapter when none is present and leaves it attached.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    corpus: &Corpus,
    cfg: &TrainConfig,
    mut hook: Option<StepHook<'_, T>>,
) -> Result<TrainReport> {
    cfg.validate()?;
    let initial_val_ppl = val_ppl(model, corpus, cfg)?;
    let lora_phase = Phase {
        mode: TrainMode::Lora,
        params: ParamMode::LoraOnly,
        steps: cfg.max_steps,
    };
    let phases = match cfg.mode {
        TrainMode::Pretrain | TrainMode::FullFt => {
            if model.lora.is_some() {
                return Err(Error::Contract(format!(
                    "{:?} updates base weights; merge the attached LoRA adapter first",
                    cfg.mode
                )));
            }
            vec![Phase {
                mode: cfg.mode,
                params: ParamMode::All,
                steps: cfg.max_steps,
            }]
        }
        TrainMode::Lora => vec![lora_phase],
        TrainMode::CptThenLora => {
            if model.lora.is_some() {
                return Err(Error::Contract("cpt_then_lora needs a model without an adapter".into()));
            }
            vec![
                Phase {
                    mode: TrainMode::FullFt,
                    params: ParamMode::All,
                    steps: cfg.max_steps,
                },
                Phase {
                    steps: cfg.lora_steps.unwrap_or(cfg.max_steps),
                    ..lora_phase
                },
            ]
        }
    };
    let mut curve = Vec::new();
    let mut step0 = 0;
    let mut trainable_params = 0;
    for phase in &phases {
        if phase.params == ParamMode::LoraOnly && model.lora.is_none() {
            attach_lora(model, &cfg.lora)?;
        }
        trainable_params = trainable_params.max(trainable(model, phase.params));
        run_phase(model, corpus, cfg, phase, step0, &mut curve, &mut hook)?;
        step0 += phase.steps;
    }
    let final_val_ppl = match curve.last() {
        Some(p) => p.val_ppl,
        None => initial_val_ppl,
    };
    Ok(TrainReport {
        config: cfg.clone(),
        steps: step0,
        tokens_seen: (step0 * cfg.batch * cfg.seq_len) as u64,
        trainable_params,
        initial_val_ppl,
        final_val_ppl,
        curve,
    })
}

/// Initializes a model from `config` with `init_seed` and trains it from
/// scratch.
pub fn pretrain(
    config: ModelConfig,
    init_seed: u64,
    corpus: &Corpus,
    cfg: &TrainConfig,
    hook: Option<StepHook<'_, f32>>,
) -> Result<(Model<f32>, TrainReport)> {
    if cfg.mode != TrainMode::Pretrain {
        return Err(Error::Config(format!("pretrain called with mode {:?}", cfg.mode)));
    }
    let mut model = Model::init(config, init_seed)?;
    let report = train(&mut model, corpus, cfg, hook)?;
    Ok((model, report))
}

/// Retrains a (pruned) model with `lora`, `full_ft` or `cpt_then_lora`.
pub fn retrain(
    model: &mut Model<f32>,
    corpus: &Corpus,
    cfg: &TrainConfig,
    hook: Option<StepHook<'_, f32>>,
) -> Result<TrainReport> {
    if cfg.mode == TrainMode::Pretrain {
        return Err(Error::Config("retrain needs mode lora, full_ft or cpt_then_lora".into()));
    }
    train(model, corpus, cfg, hook)
}
