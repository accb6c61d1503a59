//! Helpers shared by integration test targets.
#![allow(dead_code)]

use blockprune::model::{ForwardOptions, ParamMode};
use blockprune::tape::Tape;
use blockprune::{Model, UnitRef};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;

pub fn tokens(n: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(0..257)).collect()
}

fn loss(m: &Model<f64>, x: &[u32], y: &[u32], batch: usize, skip: &[UnitRef]) -> f64 {
    let mut tape = Tape::new();
    let opts = ForwardOptions {
        skip,
        params: ParamMode::Frozen,
    };
    let (l, _) = m.loss_on(&mut tape, x, y, batch, opts).unwrap();
    tape.value(l)[0]
}

fn grads(m: &Model<f64>, x: &[u32], y: &[u32], batch: usize, skip: &[UnitRef], mode: ParamMode) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let opts = ForwardOptions { skip, params: mode };
    let (l, bound) = m.loss_on(&mut tape, x, y, batch, opts).unwrap();
    tape.backward(l).unwrap();
    let vars = if mode == ParamMode::LoraOnly { bound.lora } else { bound.base };
    vars.iter().map(|&v| tape.take_grad(v).unwrap()).collect()
}

/// Reads entry `i` of parameter `t`, optionally overwriting it.
fn set(m: &mut Model<f64>, lora: bool, t: usize, i: usize, value: Option<f64>) -> f64 {
    let mut ps = if lora { m.lora_params_mut() } else { m.params_mut() };
    let slot = &mut ps[t].data_mut()[i];
    let old = *slot;
    if let Some(v) = value {
        *slot = v;
    }
    old
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares sampled autodiff gradients against central differences and
/// returns the worst relative error.
pub fn check(mut m: Model<f64>, batch: usize, seq: usize, skip: &[UnitRef], mode: ParamMode, samples: usize) -> f64 {
    let x = tokens(batch * seq, 1);
    let y = tokens(batch * seq, 2);
    let g = grads(&m, &x, &y, batch, skip, mode);
    let sizes: Vec<usize> = g.iter().map(Vec::len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for s in 0..samples {
        let t = s % sizes.len();
        let i = rng.gen_range(0..sizes[t]);
        let lora = mode == ParamMode::LoraOnly;
        let orig = set(&mut m, lora, t, i, None);
        set(&mut m, lora, t, i, Some(orig + EPS));
        let up = loss(&m, &x, &y, batch, skip);
        set(&mut m, lora, t, i, Some(orig - EPS));
        let down = loss(&m, &x, &y, batch, skip);
        set(&mut m, lora, t, i, Some(orig));
        let num = (up - down) / (2.0 * EPS);
        worst = worst.max(rel_err(g[t][i], num));
    }
    worst
}
