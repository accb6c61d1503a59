//! Unit selection and pruning surgery, plus a uniform width-pruning
//! baseline.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::CalibrationSet;
use crate::error::{Error, Result};
use crate::importance::{score_units, Criterion, Granularity, ScoreConfig, UnitScore};
use crate::model::{Linear, Model, ModelConfig, UnitKind, UnitRef};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneTarget {
    RemoveCount(usize),
    TargetParams(u64),
    /// Fraction of all parameters to remove.
    TargetRatio(f64),
}

impl PruneTarget {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PruneTarget::TargetRatio(r) if !(r > 0.0 && r < 1.0) => {
                Err(Error::Config(format!("target_ratio must lie in (0, 1), got {r}")))
            }
            _ => Ok(()),
        }
    }

    /// Parameter budget implied for a model of `total` parameters.
    pub fn budget(&self, total: u64) -> Option<u64> {
        match *self {
            PruneTarget::RemoveCount(_) => None,
            PruneTarget::TargetParams(p) => Some(p),
            PruneTarget::TargetRatio(r) => Some((total as f64 * (1.0 - r)).round() as u64),
        }
    }
}

/// How a parameter budget turns into a removal count.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeRounding {
    /// Land as close to the budget as possible; ties keep more units.
    #[default]
    Nearest,
    /// Never exceed the budget.
    AtMost,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneSpec {
    pub target: PruneTarget,
    #[serde(default)]
    pub score: ScoreConfig,
    #[serde(default)]
    pub iterative: bool,
    #[serde(default)]
    pub rounding: SizeRounding,
}

impl PruneSpec {
    pub fn new(target: PruneTarget, criterion: Criterion) -> Self {
        PruneSpec {
            target,
            score: ScoreConfig::new(criterion),
            iterative: false,
            rounding: SizeRounding::Nearest,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    /// Removed units, in removal order.
    pub removed: Vec<UnitRef>,
    pub surviving: Vec<UnitRef>,
    pub params_before: u64,
    pub params_after: u64,
    pub n_blocks_before: usize,
    pub n_blocks_after: usize,
    pub criterion: Option<Criterion>,
    pub iterative: bool,
    /// Scores used for the (first) selection.
    pub scores: Vec<UnitScore>,
}

/// Block-removal arithmetic without weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizingPlan {
    pub target: PruneTarget,
    pub rounding: SizeRounding,
    pub total_params: u64,
    pub block_params: u64,
    pub n_blocks: usize,
    pub remove: usize,
    pub surviving: usize,
    pub params_after: u64,
}

/// Number of units to drop, given their sizes in removal order, so that the
/// remaining count meets `budget` under `rounding`.
fn count_for_budget(total: u64, sizes: impl IntoIterator<Item = u64>, budget: u64, rounding: SizeRounding) -> usize {
    let mut after = total;
    let mut k = 0;
    for size in sizes {
        if after <= budget {
            break;
        }
        let next = after.saturating_sub(size);
        let take = match rounding {
            SizeRounding::AtMost => true,
            SizeRounding::Nearest => next.abs_diff(budget) < after.abs_diff(budget),
        };
        if !take {
            break;
        }
        after = next;
        k += 1;
    }
    k
}

fn fixed_count(target: PruneTarget) -> usize {
    match target {
        PruneTarget::RemoveCount(k) => k,
        _ => 0,
    }
}

/// Whole blocks to remove from a full model of shape `config`.
pub fn blocks_to_remove(config: &ModelConfig, target: PruneTarget, rounding: SizeRounding) -> Result<usize> {
    target.validate()?;
    let n = config.n_blocks;
    let k = match target.budget(config.total_params()) {
        None => fixed_count(target),
        Some(budget) => count_for_budget(
            config.total_params(),
            std::iter::repeat(config.block_params()).take(n),
            budget,
            rounding,
        ),
    };
    if k >= n {
        return Err(Error::Infeasible(format!("target needs {k} of {n} blocks removed")));
    }
    Ok(k)
}

/// Dry-run sizing of whole-block removal.
pub fn plan_blocks(config: &ModelConfig, target: PruneTarget, rounding: SizeRounding) -> Result<SizingPlan> {
    config.validate()?;
    let remove = blocks_to_remove(config, target, rounding)?;
    Ok(SizingPlan {
        target,
        rounding,
        total_params: config.total_params(),
        block_params: config.block_params(),
        n_blocks: config.n_blocks,
        remove,
        surviving: config.n_blocks - remove,
        params_after: config.total_params() - remove as u64 * config.block_params(),
    })
}

/// Removal order: ascending score, ties toward the higher original index
/// (and FFN before attention within a block).
fn removal_order(a: &UnitScore, b: &UnitScore) -> Ordering {
    a.value
        .total_cmp(&b.value)
        .then(b.unit.block_index.cmp(&a.unit.block_index))
        .then(b.unit.kind.cmp(&a.unit.kind))
}

fn ranked(scores: &[UnitScore]) -> Vec<&UnitScore> {
    let mut open: Vec<&UnitScore> = scores.iter().filter(|s| !s.protected).collect();
    open.sort_by(|a, b| removal_order(a, b));
    open
}

/// The `k` lowest-scoring unprotected units.
pub fn select_units(scores: &[UnitScore], k: usize) -> Result<Vec<UnitRef>> {
    let open = ranked(scores);
    if k > open.len() {
        return Err(Error::Infeasible(format!("{k} units requested, {} unprotected", open.len())));
    }
    Ok(open[..k].iter().map(|s| s.unit).collect())
}

/// Removal count for `target` given scores on `model`.
pub fn units_to_remove<T: Scalar>(
    model: &Model<T>,
    scores: &[UnitScore],
    target: PruneTarget,
    rounding: SizeRounding,
) -> Result<usize> {
    target.validate()?;
    let total = model.param_count();
    let k = match target.budget(total) {
        None => fixed_count(target),
        Some(budget) => {
            let sizes = ranked(scores)
                .into_iter()
                .map(|s| model.unit_param_count(s.unit).unwrap_or(0));
            count_for_budget(total, sizes, budget, rounding)
        }
    };
    if k >= scores.len() {
        return Err(Error::Infeasible(format!("target needs {k} of {} units removed", scores.len())));
    }
    Ok(k)
}

/// Physically removes `selection` from a copy of `model`. Removing a module
/// also removes its norm; a block left with neither module is dropped.
pub fn prune<T: Scalar>(model: &Model<T>, selection: &[UnitRef]) -> Result<(Model<T>, PruneReport)> {
    let mut seen = BTreeSet::new();
    for u in selection {
        if !seen.insert(*u) {
            return Err(Error::Contract(format!("{u} selected twice")));
        }
    }
    let module_level = selection.iter().any(|u| u.kind != UnitKind::Block);
    let mut out = model.clone();
    for &u in selection {
        let b = out
            .block_mut(u.block_index)
            .ok_or_else(|| Error::Index(format!("block {} is not present", u.block_index)))?;
        let missing = match u.kind {
            UnitKind::Block => false,
            UnitKind::MhaModule => b.attn.take().is_none(),
            UnitKind::FfnModule => b.ffn.take().is_none(),
        };
        if missing {
            return Err(Error::Index(format!("{u} is not present")));
        }
        if u.kind == UnitKind::Block {
            b.attn = None;
            b.ffn = None;
        }
    }
    out.blocks.retain(|b| !b.is_empty());
    out.config.n_blocks = out.blocks.len();
    out.check_invariants()?;
    let report = PruneReport {
        removed: selection.to_vec(),
        surviving: out.live_units(module_level),
        params_before: model.param_count(),
        params_after: out.param_count(),
        n_blocks_before: model.n_blocks(),
        n_blocks_after: out.n_blocks(),
        criterion: None,
        iterative: false,
        scores: Vec::new(),
    };
    Ok((out, report))
}

/// Scores once, removes the bottom units in a single step.
pub fn prune_one_shot<T: Scalar>(
    model: &Model<T>,
    calib: Option<&CalibrationSet>,
    spec: &PruneSpec,
) -> Result<(Model<T>, PruneReport)> {
    let scores = score_units(model, calib, &spec.score)?;
    prune_scored(model, scores, spec)
}

/// One-shot selection and surgery from precomputed scores.
pub fn prune_scored<T: Scalar>(
    model: &Model<T>,
    scores: Vec<UnitScore>,
    spec: &PruneSpec,
) -> Result<(Model<T>, PruneReport)> {
    let k = units_to_remove(model, &scores, spec.target, spec.rounding)?;
    let selection = select_units(&scores, k)?;
    let (pruned, mut report) = prune(model, &selection)?;
    report.criterion = Some(spec.score.criterion);
    report.scores = scores;
    Ok((pruned, report))
}

/// Removes one unit at a time, re-scoring the survivors on the same
/// calibration set after each removal.
pub fn prune_iterative<T: Scalar>(
    model: &Model<T>,
    calib: Option<&CalibrationSet>,
    spec: &PruneSpec,
) -> Result<(Model<T>, PruneReport)> {
    let first = score_units(model, calib, &spec.score)?;
    let k = units_to_remove(model, &first, spec.target, spec.rounding)?;
    let mut current = model.clone();
    let mut order = Vec::with_capacity(k);
    for round in 0..k {
        let scores = if round == 0 {
            first.clone()
        } else {
            score_units(&current, calib, &spec.score)?
        };
        let pick = select_units(&scores, 1)?;
        current = prune(&current, &pick)?.0;
        order.extend(pick);
    }
    let module_level = spec.score.granularity == Granularity::Module;
    let report = PruneReport {
        removed: order,
        surviving: current.live_units(module_level),
        params_before: model.param_count(),
        params_after: current.param_count(),
        n_blocks_before: model.n_blocks(),
        n_blocks_after: current.n_blocks(),
        criterion: Some(spec.score.criterion),
        iterative: true,
        scores: first,
    };
    Ok((current, report))
}

/// One-shot or iterative according to `spec.iterative`.
pub fn prune_with_spec<T: Scalar>(
    model: &Model<T>,
    calib: Option<&CalibrationSet>,
    spec: &PruneSpec,
) -> Result<(Model<T>, PruneReport)> {
    if spec.iterative {
        prune_iterative(model, calib, spec)
    } else {
        prune_one_shot(model, calib, spec)
    }
}

fn row_norm<T: Scalar>(w: &Tensor<T>, row: usize) -> f64 {
    let c = w.shape()[1];
    w.data()[row * c..(row + 1) * c]
        .iter()
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Indices of the `keep` largest scores, returned ascending. Ties keep the
/// lower index.
fn top_k(scores: &[f64], keep: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(keep);
    idx.sort_unstable();
    idx
}

fn keep_rows<T: Scalar>(w: &Tensor<T>, rows: &[usize]) -> Tensor<T> {
    let c = w.shape()[1];
    let mut data = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        data.extend_from_slice(&w.data()[r * c..(r + 1) * c]);
    }
    Tensor::new(vec![rows.len(), c], data).expect("row count matches")
}

fn keep_cols<T: Scalar>(w: &Tensor<T>, cols: &[usize]) -> Tensor<T> {
    let (r, c) = (w.shape()[0], w.shape()[1]);
    let mut data = Vec::with_capacity(r * cols.len());
    for i in 0..r {
        data.extend(cols.iter().map(|&j| w.data()[i * c + j]));
    }
    Tensor::new(vec![r, cols.len()], data).expect("column count matches")
}

/// Shrinks every block by removing `round(ratio * n_heads)` attention heads
/// and `round(ratio * d_ffn)` FFN channels, keeping in each block the heads
/// and channels whose output-neuron L2 norms are largest. Depth is
/// unchanged.
pub fn prune_width_baseline<T: Scalar>(model: &Model<T>, ratio: f64) -> Result<Model<T>> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("width ratio must lie in [0, 1), got {ratio}")));
    }
    if model.lora.is_some() {
        return Err(Error::Contract("merge the LoRA adapter before width pruning".into()));
    }
    let cfg = &model.config;
    let hd = cfg.head_dim();
    let heads_keep = cfg.n_heads - (ratio * cfg.n_heads as f64).round() as usize;
    let ffn_keep = cfg.d_ffn - (ratio * cfg.d_ffn as f64).round() as usize;
    if heads_keep == 0 || ffn_keep == 0 {
        return Err(Error::Infeasible(format!(
            "ratio {ratio} leaves {heads_keep} heads and {ffn_keep} FFN channels"
        )));
    }
    let mut out = model.clone();
    for b in &mut out.blocks {
        if let Some(a) = &mut b.attn {
            let scores: Vec<f64> = (0..cfg.n_heads)
                .map(|h| {
                    (h * hd..(h + 1) * hd)
                        .map(|r| row_norm(&a.wq.weight, r) + row_norm(&a.wk.weight, r) + row_norm(&a.wv.weight, r))
                        .sum()
                })
                .collect();
            let rows: Vec<usize> = top_k(&scores, heads_keep)
                .into_iter()
                .flat_map(|h| h * hd..(h + 1) * hd)
                .collect();
            a.wq = Linear::new(keep_rows(&a.wq.weight, &rows));
            a.wk = Linear::new(keep_rows(&a.wk.weight, &rows));
            a.wv = Linear::new(keep_rows(&a.wv.weight, &rows));
            a.wo = Linear::new(keep_cols(&a.wo.weight, &rows));
        }
        if let Some(f) = &mut b.ffn {
            let scores: Vec<f64> = (0..cfg.d_ffn)
                .map(|c| row_norm(&f.w_gate.weight, c) + row_norm(&f.w_up.weight, c))
                .collect();
            let chans = top_k(&scores, ffn_keep);
            f.w_gate = Linear::new(keep_rows(&f.w_gate.weight, &chans));
            f.w_up = Linear::new(keep_rows(&f.w_up.weight, &chans));
            f.w_down = Linear::new(keep_cols(&f.w_down.weight, &chans));
        }
    }
    out.config.n_heads = heads_keep;
    out.config.d_ffn = ffn_keep;
    if heads_keep != cfg.n_heads {
        out.config.head_dim = Some(hd);
    }
    out.check_invariants()?;
    Ok(out)
}
