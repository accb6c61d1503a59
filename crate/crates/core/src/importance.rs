//! Unit importance scores: weight magnitude, first-order Taylor, and
//! ablation perplexity, over whole blocks or single attention/FFN modules.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::CalibrationSet;
use crate::error::{Error, Result};
use crate::eval::nll_sum;
use crate::model::{Block, ForwardOptions, Model, ParamMode, Proj, UnitKind, UnitRef};
use crate::tape::Tape;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Mag,
    MagPlus,
    Taylor,
    TaylorPlus,
    Ppl,
}

impl Criterion {
    pub const ALL: [Criterion; 5] = [
        Criterion::Mag,
        Criterion::MagPlus,
        Criterion::Taylor,
        Criterion::TaylorPlus,
        Criterion::Ppl,
    ];

    /// Plus-variants keep the first and last blocks out of selection.
    pub fn is_plus(self) -> bool {
        matches!(self, Criterion::MagPlus | Criterion::TaylorPlus)
    }

    pub fn needs_calibration(self) -> bool {
        !matches!(self, Criterion::Mag | Criterion::MagPlus)
    }

    pub fn name(self) -> &'static str {
        match self {
            Criterion::Mag => "mag",
            Criterion::MagPlus => "mag_plus",
            Criterion::Taylor => "taylor",
            Criterion::TaylorPlus => "taylor_plus",
            Criterion::Ppl => "ppl",
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut name = s.to_ascii_lowercase().replace('-', "_");
        if let Some(base) = name.strip_suffix('+') {
            name = format!("{base}_plus");
        }
        match name.as_str() {
            "mag" | "magnitude" => Ok(Criterion::Mag),
            "mag_plus" | "magnitude_plus" => Ok(Criterion::MagPlus),
            "taylor" => Ok(Criterion::Taylor),
            "taylor_plus" => Ok(Criterion::TaylorPlus),
            "ppl" | "perplexity" => Ok(Criterion::Ppl),
            _ => Err(Error::Config(format!("unknown criterion {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    Block,
    Module,
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "block" => Ok(Granularity::Block),
            "module" => Ok(Granularity::Module),
            _ => Err(Error::Config(format!("unknown granularity {s:?}"))),
        }
    }
}

/// How output-neuron scores combine into one unit score. `Product` is
/// reported in log space (sum of logs).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Sum,
    Mean,
    Product,
    Max,
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Aggregation::Sum),
            "mean" => Ok(Aggregation::Mean),
            "product" | "prod" => Ok(Aggregation::Product),
            "max" => Ok(Aggregation::Max),
            _ => Err(Error::Config(format!("unknown aggregation {s:?}"))),
        }
    }
}

impl Aggregation {
    fn combine(self, rows: &[f64]) -> f64 {
        match self {
            Aggregation::Sum => rows.iter().sum(),
            Aggregation::Mean if rows.is_empty() => 0.0,
            Aggregation::Mean => rows.iter().sum::<f64>() / rows.len() as f64,
            Aggregation::Product => rows.iter().map(|r| r.max(f64::MIN_POSITIVE).ln()).sum(),
            Aggregation::Max => rows.iter().copied().fold(0.0, f64::max),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreConfig {
    pub criterion: Criterion,
    pub granularity: Granularity,
    pub aggregation: Aggregation,
    pub protect_prefix: usize,
    pub protect_suffix: usize,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            criterion: Criterion::Ppl,
            granularity: Granularity::Block,
            aggregation: Aggregation::Sum,
            protect_prefix: 4,
            protect_suffix: 2,
        }
    }
}

impl ScoreConfig {
    pub fn new(criterion: Criterion) -> Self {
        ScoreConfig {
            criterion,
            ..Self::default()
        }
    }

    fn module_level(&self) -> bool {
        self.granularity == Granularity::Module
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitScore {
    #[serde(flatten)]
    pub unit: UnitRef,
    pub criterion: Criterion,
    pub value: f64,
    pub protected: bool,
}

fn projections_of(unit: UnitRef) -> &'static [Proj] {
    match unit.kind {
        UnitKind::Block => &Proj::ALL,
        UnitKind::MhaModule => &Proj::ALL[..4],
        UnitKind::FfnModule => &Proj::ALL[4..],
    }
}

/// Per-output-neuron scores of one unit, via `entry(proj, row, col) -> f64`.
fn row_scores<T: Scalar>(block: &Block<T>, unit: UnitRef, mut entry: impl FnMut(Proj, usize, usize) -> f64) -> Vec<f64> {
    let mut rows = Vec::new();
    for &p in projections_of(unit) {
        if let Some(lin) = block.proj(p) {
            for r in 0..lin.d_out() {
                rows.push((0..lin.d_in()).map(|c| entry(p, r, c)).sum());
            }
        }
    }
    rows
}

fn candidates<T: Scalar>(model: &Model<T>, cfg: &ScoreConfig) -> Result<Vec<UnitRef>> {
    let units = model.live_units(cfg.module_level());
    if units.is_empty() {
        return Err(Error::Config("model has no prunable units".into()));
    }
    Ok(units)
}

fn finish(units: &[UnitRef], values: Vec<f64>, n_original: usize, cfg: &ScoreConfig) -> Result<Vec<UnitScore>> {
    let mut scores = Vec::with_capacity(units.len());
    for (&unit, value) in units.iter().zip(values) {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("score of {unit} is {value}")));
        }
        scores.push(UnitScore {
            unit,
            criterion: cfg.criterion,
            value,
            protected: false,
        });
    }
    apply_protection(&mut scores, cfg, n_original)?;
    Ok(scores)
}

/// Sum of absolute projection weights per unit. Norm vectors and embeddings
/// are not counted.
pub fn score_magnitude<T: Scalar>(model: &Model<T>, cfg: &ScoreConfig) -> Result<Vec<UnitScore>> {
    let units = candidates(model, cfg)?;
    let values = units
        .iter()
        .map(|&u| {
            let b = model.block(u.block_index).expect("live unit");
            let rows = row_scores(b, u, |p, r, c| {
                let lin = b.proj(p).expect("present projection");
                lin.weight.data()[r * lin.d_in() + c].as_f64().abs()
            });
            cfg.aggregation.combine(&rows)
        })
        .collect();
    finish(&units, values, model.original_n_blocks, cfg)
}

/// Sequences per forward/backward chunk when accumulating Taylor gradients.
const TAYLOR_CHUNK: usize = 16;

/// First-order Taylor scores `sum |dL/dW * W|` with `L` the mean next-token
/// cross-entropy over the whole calibration set.
pub fn score_taylor<T: Scalar>(model: &Model<T>, calib: &CalibrationSet, cfg: &ScoreConfig) -> Result<Vec<UnitScore>> {
    let units = candidates(model, cfg)?;
    let l = calib.seq_len;
    if calib.sequences.is_empty() || l < 2 {
        return Err(Error::Config("Taylor scoring needs a nonempty calibration set with L >= 2".into()));
    }
    let s = calib.sequences.len();
    // Gradient of each projection matrix, keyed by live block position.
    let mut grads: Vec<[Option<Vec<f64>>; 7]> = model.blocks.iter().map(|_| Default::default()).collect();
    for (c, chunk) in calib.sequences.chunks(TAYLOR_CHUNK).enumerate() {
        let mut inputs = Vec::with_capacity(chunk.len() * (l - 1));
        let mut targets = Vec::with_capacity(chunk.len() * (l - 1));
        for seq in chunk {
            inputs.extend_from_slice(&seq[..l - 1]);
            targets.extend_from_slice(&seq[1..]);
        }
        let mut tape = Tape::new();
        let opts = ForwardOptions {
            skip: &[],
            params: ParamMode::All,
        };
        let (loss, bound) = model.loss_on(&mut tape, &inputs, &targets, chunk.len(), opts)?;
        if !tape.value(loss)[0].as_f64().is_finite() {
            let nll = model.nll_per_row(&inputs, &targets, chunk.len(), &[])?;
            let bad = nll.iter().position(|v| !v.is_finite()).unwrap_or(0);
            return Err(Error::Numeric(format!(
                "calibration loss is not finite at sequence {}",
                c * TAYLOR_CHUNK + bad
            )));
        }
        tape.backward(loss)?;
        let weight = chunk.len() as f64 / s as f64;
        // Walk `bound.base` in canonical order: embedding, per block
        // (norm, q, k, v, o) then (norm, gate, up, down), final norm, head.
        let mut vars = bound.base[1..].iter().copied();
        for (b, slots) in model.blocks.iter().zip(grads.iter_mut()) {
            let mut present = Vec::with_capacity(2);
            if b.attn.is_some() {
                present.push(0..4);
            }
            if b.ffn.is_some() {
                present.push(4..7);
            }
            for range in present {
                vars.next();
                for slot in range {
                    let v = vars.next().expect("bound order");
                    let g = tape.take_grad(v).expect("trainable leaf");
                    let acc = slots[slot].get_or_insert_with(|| vec![0.0; g.len()]);
                    acc.iter_mut().zip(&g).for_each(|(a, g)| *a += weight * g.as_f64());
                }
            }
        }
    }
    let values = units
        .iter()
        .map(|&u| {
            let pos = model.blocks.iter().position(|b| b.index == u.block_index).expect("live unit");
            let b = &model.blocks[pos];
            let rows = row_scores(b, u, |p, r, c| {
                let lin = b.proj(p).expect("present projection");
                let slot = Proj::ALL.iter().position(|&q| q == p).expect("known projection");
                let g = grads[pos][slot].as_ref().expect("gradient accumulated");
                let i = r * lin.d_in() + c;
                (g[i] * lin.weight.data()[i].as_f64()).abs()
            });
            cfg.aggregation.combine(&rows)
        })
        .collect();
    finish(&units, values, model.original_n_blocks, cfg)
}

/// Perplexity on the calibration set with `skip` bypassed. Each sequence
/// predicts its tokens `2..=L`.
pub fn calibration_ppl<T: Scalar>(model: &Model<T>, calib: &CalibrationSet, skip: &[UnitRef]) -> Result<f64> {
    if calib.sequences.is_empty() || calib.seq_len < 2 {
        return Err(Error::Config("calibration set needs S >= 1 and L >= 2".into()));
    }
    let (nll, count) = nll_sum(model, &calib.flat_tokens(), calib.seq_len - 1, skip)?;
    Ok((nll / count as f64).exp())
}

/// Ablation perplexity per unit: lower means less important. Weights are
/// never modified; ablations run in parallel.
pub fn score_ppl<T: Scalar>(model: &Model<T>, calib: &CalibrationSet, cfg: &ScoreConfig) -> Result<Vec<UnitScore>> {
    let units = candidates(model, cfg)?;
    let values = units
        .par_iter()
        .map(|&u| calibration_ppl(model, calib, &[u]))
        .collect::<Result<Vec<f64>>>()?;
    finish(&units, values, model.original_n_blocks, cfg)
}

/// Dispatches on `cfg.criterion`.
pub fn score_units<T: Scalar>(
    model: &Model<T>,
    calib: Option<&CalibrationSet>,
    cfg: &ScoreConfig,
) -> Result<Vec<UnitScore>> {
    let need = || {
        calib.ok_or_else(|| Error::Config(format!("criterion {} needs a calibration set", cfg.criterion)))
    };
    match cfg.criterion {
        Criterion::Mag | Criterion::MagPlus => score_magnitude(model, cfg),
        Criterion::Taylor | Criterion::TaylorPlus => score_taylor(model, need()?, cfg),
        Criterion::Ppl => score_ppl(model, need()?, cfg),
    }
}

/// Flags the first `protect_prefix` and last `protect_suffix` original
/// block indices for plus-variants; clears all flags otherwise.
pub fn apply_protection(scores: &mut [UnitScore], cfg: &ScoreConfig, original_n_blocks: usize) -> Result<()> {
    if !cfg.criterion.is_plus() {
        scores.iter_mut().for_each(|s| s.protected = false);
        return Ok(());
    }
    if cfg.protect_prefix + cfg.protect_suffix >= original_n_blocks {
        return Err(Error::Config(format!(
            "protect_prefix {} + protect_suffix {} leaves none of {original_n_blocks} blocks prunable",
            cfg.protect_prefix, cfg.protect_suffix
        )));
    }
    let hi = original_n_blocks - cfg.protect_suffix;
    for s in scores {
        let i = s.unit.block_index;
        s.protected = i < cfg.protect_prefix || i >= hi;
    }
    Ok(())
}
