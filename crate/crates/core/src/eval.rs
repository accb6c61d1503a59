//! Perplexity evaluation.

use crate::error::{Error, Result};
use crate::model::{Model, UnitRef};
use crate::tensor::Scalar;

/// Windows evaluated per forward pass.
const EVAL_BATCH: usize = 8;

/// Summed NLL and predicted-token count over non-overlapping windows of
/// `seq_len + 1` tokens. A trailing partial window is dropped.
pub fn nll_sum<T: Scalar>(model: &Model<T>, tokens: &[u32], seq_len: usize, skip: &[UnitRef]) -> Result<(f64, usize)> {
    if tokens.is_empty() {
        return Err(Error::Data("empty token stream".into()));
    }
    if seq_len == 0 {
        return Err(Error::Config("eval seq_len must be >= 1".into()));
    }
    let w = seq_len + 1;
    let n = tokens.len() / w;
    if n == 0 {
        return Err(Error::Data(format!(
            "stream of {} tokens is shorter than one window of {w}",
            tokens.len()
        )));
    }
    let mut total = 0.0f64;
    let mut inputs = Vec::with_capacity(EVAL_BATCH * seq_len);
    let mut targets = Vec::with_capacity(EVAL_BATCH * seq_len);
    for chunk in tokens[..n * w].chunks(EVAL_BATCH * w) {
        inputs.clear();
        targets.clear();
        for win in chunk.chunks_exact(w) {
            inputs.extend_from_slice(&win[..seq_len]);
            targets.extend_from_slice(&win[1..]);
        }
        let rows = chunk.len() / w;
        total += model.nll_per_row(&inputs, &targets, rows, skip)?.iter().sum::<f64>();
    }
    Ok((total, n * seq_len))
}

/// `exp` of the mean next-token NLL over non-overlapping windows.
pub fn eval_ppl<T: Scalar>(model: &Model<T>, tokens: &[u32], seq_len: usize) -> Result<f64> {
    eval_ppl_masked(model, tokens, seq_len, &[])
}

/// [`eval_ppl`] with the given units bypassed.
pub fn eval_ppl_masked<T: Scalar>(model: &Model<T>, tokens: &[u32], seq_len: usize, skip: &[UnitRef]) -> Result<f64> {
    let (nll, count) = nll_sum(model, tokens, seq_len, skip)?;
    let ppl = (nll / count as f64).exp();
    if !ppl.is_finite() {
        return Err(Error::Numeric(format!("perplexity is {ppl}")));
    }
    Ok(ppl)
}
