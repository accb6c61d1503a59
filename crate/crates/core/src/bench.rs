//! Generation latency and throughput measurement.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{greedy_generate, Model};
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSpec {
    /// Sequences generated in parallel (`M`).
    pub batch: usize,
    pub input_len: usize,
    /// Generated tokens per sequence (`L`).
    pub output_len: usize,
    pub warmups: usize,
    pub runs: usize,
    pub greedy: bool,
    /// Seed for the synthetic prompts.
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            batch: 1,
            input_len: 12,
            output_len: 128,
            warmups: 10,
            runs: 20,
            greedy: true,
            seed: 0,
        }
    }
}

impl BenchSpec {
    pub fn validate<T: Scalar>(&self, model: &Model<T>) -> Result<()> {
        if self.batch == 0 || self.input_len == 0 || self.output_len == 0 || self.runs == 0 {
            return Err(Error::Config("batch, input_len, output_len and runs must be >= 1".into()));
        }
        if !self.greedy {
            return Err(Error::Config("only greedy decoding is benchmarked".into()));
        }
        let need = self.input_len + self.output_len;
        if need > model.config.max_seq_len {
            return Err(Error::Capacity(format!(
                "input_len + output_len = {need} exceeds max_seq_len {}",
                model.config.max_seq_len
            )));
        }
        Ok(())
    }

    /// Printable-ASCII prompts, one per sequence.
    pub fn prompts(&self) -> Vec<Vec<u32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.batch)
            .map(|_| (0..self.input_len).map(|_| rng.gen_range(32..127)).collect())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFingerprint {
    pub n_blocks: usize,
    pub original_n_blocks: usize,
    pub params: u64,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub digest: String,
}

impl ModelFingerprint {
    pub fn of<T: Scalar>(model: &Model<T>) -> Self {
        ModelFingerprint {
            n_blocks: model.n_blocks(),
            original_n_blocks: model.original_n_blocks,
            params: model.param_count(),
            d_model: model.config.d_model,
            n_heads: model.config.n_heads,
            d_ffn: model.config.d_ffn,
            digest: model.weights_digest(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub spec: BenchSpec,
    pub mean_latency_s: f64,
    /// Sample standard deviation over the timed runs.
    pub latency_std_s: f64,
    /// Generated tokens per second, `M * L / mean_latency_s`.
    pub throughput: f64,
    pub latencies_s: Vec<f64>,
    pub threads: usize,
    pub fingerprint: ModelFingerprint,
    /// Tokens produced by the last timed run.
    pub output_tokens: Vec<Vec<u32>>,
}

impl BenchReport {
    /// `run,latency_s` rows.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "run,latency_s")?;
        for (i, t) in self.latencies_s.iter().enumerate() {
            writeln!(w, "{i},{t}")?;
        }
        Ok(())
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Times `spec.runs` greedy generations of `output_len` tokens per
/// sequence after `spec.warmups` discarded ones. Each timing covers cache
/// allocation, prompt processing and decoding.
pub fn bench_generate<T: Scalar>(model: &Model<T>, spec: &BenchSpec) -> Result<BenchReport> {
    spec.validate(model)?;
    let prompts = spec.prompts();
    for _ in 0..spec.warmups {
        greedy_generate(model, &prompts, spec.output_len)?;
    }
    let mut latencies = Vec::with_capacity(spec.runs);
    let mut output = Vec::new();
    for _ in 0..spec.runs {
        let t0 = Instant::now();
        output = greedy_generate(model, &prompts, spec.output_len)?;
        latencies.push(t0.elapsed().as_secs_f64());
    }
    let (mean, std) = mean_std(&latencies);
    Ok(BenchReport {
        spec: spec.clone(),
        mean_latency_s: mean,
        latency_std_s: std,
        throughput: (spec.batch * spec.output_len) as f64 / mean,
        latencies_s: latencies,
        threads: rayon::current_num_threads(),
        fingerprint: ModelFingerprint::of(model),
        output_tokens: output,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyComparison {
    pub base: BenchReport,
    pub depth_pruned: BenchReport,
    pub width_pruned: Option<BenchReport>,
    /// Pruned mean latency over base mean latency.
    pub depth_latency_ratio: f64,
    pub width_latency_ratio: Option<f64>,
    /// Pruned throughput over base throughput.
    pub depth_throughput_ratio: f64,
    pub width_throughput_ratio: Option<f64>,
}

/// Benchmarks each model with the same spec and reports measured ratios.
pub fn compare_pruning_latency<T: Scalar>(
    base: &Model<T>,
    depth_pruned: &Model<T>,
    width_pruned: Option<&Model<T>>,
    spec: &BenchSpec,
) -> Result<LatencyComparison> {
    let b = bench_generate(base, spec)?;
    let d = bench_generate(depth_pruned, spec)?;
    let w = width_pruned.map(|m| bench_generate(m, spec)).transpose()?;
    Ok(LatencyComparison {
        depth_latency_ratio: d.mean_latency_s / b.mean_latency_s,
        depth_throughput_ratio: d.throughput / b.throughput,
        width_latency_ratio: w.as_ref().map(|w| w.mean_latency_s / b.mean_latency_s),
        width_throughput_ratio: w.as_ref().map(|w| w.throughput / b.throughput),
        base: b,
        depth_pruned: d,
        width_pruned: w,
    })
}
