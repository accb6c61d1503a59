use std::path::PathBuf;

use blockprune::importance::{Aggregation, Criterion, Granularity};
use blockprune::pruner::{PruneTarget, SizeRounding};
use blockprune::run::RunConfig;
use blockprune::trainer::TrainMode;
use blockprune::ModelConfig;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "blockprune", version, about = "Depth pruning of small decoder-only language models")]
pub struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Worker threads for parallel scoring.
    #[arg(long, global = true, env = "BLOCKPRUNE_THREADS")]
    pub threads: Option<usize>,

    /// Model initialization seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Text corpus (bytes are tokens).
    #[arg(long, global = true)]
    pub corpus: Option<PathBuf>,

    /// Where to write the JSON report; stdout when absent.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from random initialization.
    Pretrain(PretrainArgs),
    /// Compute unit importance scores.
    Score(ScoreArgs),
    /// Remove the least important units.
    Prune(PruneArgs),
    /// Recover a pruned model with LoRA or full fine-tuning.
    Retrain(RetrainArgs),
    /// Validation perplexity.
    Eval(EvalArgs),
    /// Generation latency and throughput.
    Bench(BenchArgs),
    /// Greedy text generation.
    Gen(GenArgs),
    /// Pretrain, score, prune, retrain, evaluate and benchmark in one go.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub n_blocks: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub d_ffn: Option<usize>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
}

impl ModelArgs {
    fn apply(&self, m: &mut ModelConfig) {
        set(&mut m.n_blocks, self.n_blocks);
        set(&mut m.d_model, self.d_model);
        set(&mut m.n_heads, self.n_heads);
        set(&mut m.d_ffn, self.d_ffn);
        set(&mut m.max_seq_len, self.max_seq_len);
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub grad_clip_norm: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Seed for batch order.
    #[arg(long)]
    pub train_seed: Option<u64>,
    /// Write the loss curve here as CSV.
    #[arg(long)]
    pub curve_csv: Option<PathBuf>,
}

impl TrainArgs {
    fn apply(&self, t: &mut blockprune::trainer::TrainConfig) {
        set(&mut t.max_steps, self.steps);
        set(&mut t.lr, self.lr);
        set(&mut t.batch, self.batch);
        set(&mut t.seq_len, self.seq_len);
        set(&mut t.weight_decay, self.weight_decay);
        set(&mut t.grad_clip_norm, self.grad_clip_norm);
        set(&mut t.eval_every, self.eval_every);
        set(&mut t.seed, self.train_seed);
    }
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Checkpoint to write.
    #[arg(long)]
    pub checkpoint_out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum CriterionArg {
    Mag,
    MagPlus,
    Taylor,
    TaylorPlus,
    Ppl,
}

impl From<CriterionArg> for Criterion {
    fn from(c: CriterionArg) -> Self {
        match c {
            CriterionArg::Mag => Criterion::Mag,
            CriterionArg::MagPlus => Criterion::MagPlus,
            CriterionArg::Taylor => Criterion::Taylor,
            CriterionArg::TaylorPlus => Criterion::TaylorPlus,
            CriterionArg::Ppl => Criterion::Ppl,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GranularityArg {
    Block,
    Module,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AggregationArg {
    Sum,
    Mean,
    Product,
    Max,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum)]
    pub criterion: Option<CriterionArg>,
    #[arg(long, value_enum)]
    pub granularity: Option<GranularityArg>,
    #[arg(long, value_enum)]
    pub aggregation: Option<AggregationArg>,
    #[arg(long)]
    pub protect_prefix: Option<usize>,
    #[arg(long)]
    pub protect_suffix: Option<usize>,
    /// Calibration sequences (S).
    #[arg(long)]
    pub calib_samples: Option<usize>,
    /// Calibration sequence length (L).
    #[arg(long)]
    pub calib_seq_len: Option<usize>,
    #[arg(long)]
    pub calib_seed: Option<u64>,
    /// Also write the per-unit score list as JSON.
    #[arg(long)]
    pub emit_profile: Option<PathBuf>,
}

impl ScoreArgs {
    pub fn apply(&self, c: &mut RunConfig) {
        if let Some(v) = self.criterion {
            c.score.criterion = v.into();
        }
        if let Some(v) = self.granularity {
            c.score.granularity = match v {
                GranularityArg::Block => Granularity::Block,
                GranularityArg::Module => Granularity::Module,
            };
        }
        if let Some(v) = self.aggregation {
            c.score.aggregation = match v {
                AggregationArg::Sum => Aggregation::Sum,
                AggregationArg::Mean => Aggregation::Mean,
                AggregationArg::Product => Aggregation::Product,
                AggregationArg::Max => Aggregation::Max,
            };
        }
        set(&mut c.score.protect_prefix, self.protect_prefix);
        set(&mut c.score.protect_suffix, self.protect_suffix);
        set(&mut c.calibration.samples, self.calib_samples);
        set(&mut c.calibration.seq_len, self.calib_seq_len);
        set(&mut c.calibration.seed, self.calib_seed);
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PresetArg {
    #[value(name = "llama-7b")]
    Llama7b,
    #[value(name = "llama-13b")]
    Llama13b,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RoundingArg {
    Nearest,
    AtMost,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    /// Checkpoint to prune; not needed with --dry-run.
    #[arg(long, required_unless_present = "dry_run")]
    pub checkpoint: Option<PathBuf>,
    /// Compute the sizing plan from the model config only.
    #[arg(long)]
    pub dry_run: bool,
    /// Model shape for --dry-run instead of the config's model section.
    #[arg(long, value_enum)]
    pub preset: Option<PresetArg>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub score: ScoreArgs2,
    /// Fraction of parameters to remove.
    #[arg(long, group = "target")]
    pub target_ratio: Option<f64>,
    /// Parameter budget after pruning.
    #[arg(long, group = "target")]
    pub target_params: Option<u64>,
    /// Exact number of units to remove.
    #[arg(long, group = "target")]
    pub remove_count: Option<usize>,
    #[arg(long, value_enum)]
    pub rounding: Option<RoundingArg>,
    /// Re-score after each removal.
    #[arg(long)]
    pub iterative: bool,
    /// Pruned checkpoint to write.
    #[arg(long)]
    pub checkpoint_out: Option<PathBuf>,
}

/// Score flags shared by `prune`, without the checkpoint argument.
#[derive(Debug, Args)]
pub struct ScoreArgs2 {
    #[arg(long, value_enum)]
    pub criterion: Option<CriterionArg>,
    #[arg(long, value_enum)]
    pub granularity: Option<GranularityArg>,
    #[arg(long, value_enum)]
    pub aggregation: Option<AggregationArg>,
    #[arg(long)]
    pub protect_prefix: Option<usize>,
    #[arg(long)]
    pub protect_suffix: Option<usize>,
    #[arg(long)]
    pub calib_samples: Option<usize>,
    #[arg(long)]
    pub calib_seq_len: Option<usize>,
    #[arg(long)]
    pub calib_seed: Option<u64>,
}

impl ScoreArgs2 {
    fn as_score_args(&self) -> ScoreArgs {
        ScoreArgs {
            checkpoint: PathBuf::new(),
            criterion: self.criterion,
            granularity: self.granularity,
            aggregation: self.aggregation,
            protect_prefix: self.protect_prefix,
            protect_suffix: self.protect_suffix,
            calib_samples: self.calib_samples,
            calib_seq_len: self.calib_seq_len,
            calib_seed: self.calib_seed,
            emit_profile: None,
        }
    }
}

impl PruneArgs {
    pub fn apply(&self, c: &mut RunConfig) {
        match self.preset {
            Some(PresetArg::Llama7b) => c.model = ModelConfig::llama_7b(),
            Some(PresetArg::Llama13b) => c.model = ModelConfig::llama_13b(),
            None => {}
        }
        self.model.apply(&mut c.model);
        self.score.as_score_args().apply(c);
        if let Some(r) = self.target_ratio {
            c.prune.target = PruneTarget::TargetRatio(r);
        }
        if let Some(p) = self.target_params {
            c.prune.target = PruneTarget::TargetParams(p);
        }
        if let Some(k) = self.remove_count {
            c.prune.target = PruneTarget::RemoveCount(k);
        }
        if let Some(r) = self.rounding {
            c.prune.rounding = match r {
                RoundingArg::Nearest => SizeRounding::Nearest,
                RoundingArg::AtMost => SizeRounding::AtMost,
            };
        }
        if self.iterative {
            c.prune.iterative = true;
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Lora,
    FullFt,
    CptThenLora,
}

#[derive(Debug, Args)]
pub struct RetrainArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub lora_rank: Option<usize>,
    /// Fold the adapter into the base weights before saving.
    #[arg(long)]
    pub merge: bool,
    #[arg(long)]
    pub checkpoint_out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub max_tokens: Option<usize>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Sequences per generate call (M).
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub input_len: Option<usize>,
    /// Generated tokens per sequence (L).
    #[arg(long)]
    pub output_len: Option<usize>,
    #[arg(long)]
    pub warmups: Option<usize>,
    #[arg(long)]
    pub runs: Option<usize>,
    /// Write per-run latencies as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub prompt: String,
    #[arg(long, default_value_t = 64)]
    pub max_new: usize,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Skip pretraining and start from this checkpoint.
    #[arg(long)]
    pub init_checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub pretrain_steps: Option<usize>,
    #[arg(long)]
    pub retrain_steps: Option<usize>,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl Cli {
    /// Loads the config file (or defaults) and applies every flag.
    pub fn resolve(&self) -> blockprune::Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        set(&mut c.seed, self.seed);
        if self.threads.is_some() {
            c.threads = self.threads;
        }
        set(&mut c.paths.corpus, self.corpus.clone());
        match &self.command {
            Command::Pretrain(a) => {
                a.model.apply(&mut c.model);
                a.train.apply(&mut c.pretrain);
            }
            Command::Score(a) => a.apply(&mut c),
            Command::Prune(a) => a.apply(&mut c),
            Command::Retrain(a) => {
                if let Some(m) = a.mode {
                    c.retrain.mode = match m {
                        ModeArg::Lora => TrainMode::Lora,
                        ModeArg::FullFt => TrainMode::FullFt,
                        ModeArg::CptThenLora => TrainMode::CptThenLora,
                    };
                }
                a.train.apply(&mut c.retrain);
                if let Some(r) = a.lora_rank {
                    c.retrain.lora = blockprune::trainer::LoraConfig::with_rank(r);
                }
            }
            Command::Eval(a) => {
                set(&mut c.eval.seq_len, a.seq_len);
                set(&mut c.eval.max_tokens, a.max_tokens);
            }
            Command::Bench(a) => {
                set(&mut c.bench.batch, a.batch);
                set(&mut c.bench.input_len, a.input_len);
                set(&mut c.bench.output_len, a.output_len);
                set(&mut c.bench.warmups, a.warmups);
                set(&mut c.bench.runs, a.runs);
            }
            Command::Gen(_) => {}
            Command::Pipeline(a) => {
                set(&mut c.paths.out_dir, a.out_dir.clone());
                if a.init_checkpoint.is_some() {
                    c.paths.init_checkpoint = a.init_checkpoint.clone();
                }
                a.model.apply(&mut c.model);
                set(&mut c.pretrain.max_steps, a.pretrain_steps);
                set(&mut c.retrain.max_steps, a.retrain_steps);
            }
        }
        Ok(c)
    }
}
