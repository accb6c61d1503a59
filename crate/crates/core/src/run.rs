//! Run configuration and the end-to-end pipeline: pretrain, score, prune,
//! retrain, evaluate and benchmark.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::{compare_pruning_latency, BenchSpec, LatencyComparison};
use crate::data::{sample_calibration, CalibrationSet, Corpus};
use crate::error::{Error, Result};
use crate::eval::eval_ppl;
use crate::importance::{score_units, ScoreConfig, UnitScore};
use crate::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use crate::pruner::{prune_iterative, prune_scored, PruneReport, PruneSpec, PruneTarget, SizeRounding};
use crate::trainer::{merge_lora, pretrain, retrain, TrainConfig, TrainMode, TrainReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: PathBuf,
    pub out_dir: PathBuf,
    /// Start from this checkpoint instead of pretraining.
    pub init_checkpoint: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            corpus: PathBuf::from("data/sample_corpus.txt"),
            out_dir: PathBuf::from("runs"),
            init_checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub val_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { val_fraction: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub samples: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            samples: 10,
            seq_len: 128,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneOptions {
    pub target: PruneTarget,
    pub iterative: bool,
    pub rounding: SizeRounding,
}

impl Default for PruneOptions {
    fn default() -> Self {
        PruneOptions {
            target: PruneTarget::TargetRatio(0.34),
            iterative: false,
            rounding: SizeRounding::Nearest,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub seq_len: usize,
    /// Validation tokens evaluated (prefix of the split).
    pub max_tokens: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            seq_len: 128,
            max_tokens: 65_536,
        }
    }
}

/// Every knob of a run. Missing keys take defaults; unknown keys are
/// rejected by name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Model initialization seed.
    pub seed: u64,
    pub threads: Option<usize>,
    pub paths: Paths,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub calibration: CalibrationConfig,
    pub score: ScoreConfig,
    pub prune: PruneOptions,
    pub pretrain: TrainConfig,
    pub retrain: TrainConfig,
    pub eval: EvalConfig,
    pub bench: BenchSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            threads: None,
            paths: Paths::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            calibration: CalibrationConfig::default(),
            score: ScoreConfig::default(),
            prune: PruneOptions::default(),
            pretrain: TrainConfig::pretrain(),
            retrain: TrainConfig::retrain(TrainMode::Lora),
            eval: EvalConfig::default(),
            bench: BenchSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn prune_spec(&self) -> PruneSpec {
        PruneSpec {
            target: self.prune.target,
            score: self.score.clone(),
            iterative: self.prune.iterative,
            rounding: self.prune.rounding,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.retrain.validate()?;
        self.prune.target.validate()?;
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be >= 1".into()));
        }
        Ok(())
    }

    pub fn load_corpus(&self) -> Result<Corpus> {
        Corpus::from_file(&self.paths.corpus, self.data.val_fraction).map_err(|e| match e {
            Error::Io(io) => Error::Data(format!("cannot read corpus {}: {io}", self.paths.corpus.display())),
            other => other,
        })
    }

    pub fn calibration_set(&self, corpus: &Corpus) -> Result<CalibrationSet> {
        let c = &self.calibration;
        sample_calibration(corpus, c.samples, c.seq_len, c.seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ppl: f64,
    pub seq_len: usize,
    pub tokens: usize,
    pub n_blocks: usize,
    pub params: u64,
}

/// Validation perplexity on the first `cfg.max_tokens` validation tokens.
pub fn evaluate(model: &Model<f32>, corpus: &Corpus, cfg: &EvalConfig) -> Result<EvalReport> {
    let val = corpus.val();
    let val = &val[..val.len().min(cfg.max_tokens)];
    Ok(EvalReport {
        ppl: eval_ppl(model, val, cfg.seq_len)?,
        seq_len: cfg.seq_len,
        tokens: val.len(),
        n_blocks: model.n_blocks(),
        params: model.param_count(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub base_checkpoint: PathBuf,
    pub pruned_checkpoint: PathBuf,
    pub retrained_checkpoint: PathBuf,
    pub scores: PathBuf,
    pub report: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub config: RunConfig,
    pub pretrain: Option<TrainReport>,
    pub base_eval: EvalReport,
    pub calibration: CalibrationSet,
    pub scores: Vec<UnitScore>,
    pub prune: PruneReport,
    pub pruned_eval: EvalReport,
    pub retrain: TrainReport,
    pub retrained_eval: EvalReport,
    pub bench: LatencyComparison,
    pub artifacts: Artifacts,
}

pub fn write_json<S: Serialize>(path: impl AsRef<Path>, value: &S) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Runs every stage and writes checkpoints, curves, scores and the final
/// report under `cfg.paths.out_dir`.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineReport> {
    cfg.validate()?;
    let out = &cfg.paths.out_dir;
    fs::create_dir_all(out)?;
    let corpus = cfg.load_corpus()?;

    let (base, pretrain_report) = match &cfg.paths.init_checkpoint {
        Some(p) => (load_checkpoint(p)?, None),
        None => {
            let pcfg = TrainConfig {
                mode: TrainMode::Pretrain,
                ..cfg.pretrain.clone()
            };
            let (m, r) = pretrain(cfg.model.clone(), cfg.seed, &corpus, &pcfg, None)?;
            r.write_csv(fs::File::create(out.join("pretrain_curve.csv"))?)?;
            (m, Some(r))
        }
    };
    let base_ckpt = out.join("base.ckpt");
    save_checkpoint(&base, &base_ckpt)?;
    let base_eval = evaluate(&base, &corpus, &cfg.eval)?;

    let calib = cfg.calibration_set(&corpus)?;
    let scores = score_units(&base, Some(&calib), &cfg.score)?;
    let scores_path = out.join("scores.json");
    write_json(&scores_path, &scores)?;
    let spec = cfg.prune_spec();
    let (mut pruned, prune_report) = if spec.iterative {
        prune_iterative(&base, Some(&calib), &spec)?
    } else {
        prune_scored(&base, scores.clone(), &spec)?
    };
    let pruned_ckpt = out.join("pruned.ckpt");
    save_checkpoint(&pruned, &pruned_ckpt)?;
    let pruned_eval = evaluate(&pruned, &corpus, &cfg.eval)?;

    let depth_pruned = pruned.clone();
    let retrain_report = retrain(&mut pruned, &corpus, &cfg.retrain, None)?;
    retrain_report.write_csv(fs::File::create(out.join("retrain_curve.csv"))?)?;
    if pruned.lora.is_some() {
        merge_lora(&mut pruned)?;
    }
    let retrained_ckpt = out.join("retrained.ckpt");
    save_checkpoint(&pruned, &retrained_ckpt)?;
    let retrained_eval = evaluate(&pruned, &corpus, &cfg.eval)?;

    let bench = compare_pruning_latency(&base, &depth_pruned, None, &cfg.bench)?;
    bench.depth_pruned.write_csv(fs::File::create(out.join("bench_latencies.csv"))?)?;

    let report_path = out.join("pipeline_report.json");
    let report = PipelineReport {
        config: cfg.clone(),
        pretrain: pretrain_report,
        base_eval,
        calibration: calib,
        scores,
        prune: prune_report,
        pruned_eval,
        retrain: retrain_report,
        retrained_eval,
        bench,
        artifacts: Artifacts {
            base_checkpoint: base_ckpt,
            pruned_checkpoint: pruned_ckpt,
            retrained_checkpoint: retrained_ckpt,
            scores: scores_path,
            report: report_path.clone(),
        },
    };
    write_json(&report_path, &report)?;
    Ok(report)
}
