use std::fs::File;
use std::io::Write;
use std::path::Path;

use blockprune::bench::bench_generate;
use blockprune::data::{detokenize, tokenize};
use blockprune::importance::score_units;
use blockprune::model::{greedy_generate, load_checkpoint, save_checkpoint};
use blockprune::pruner::{plan_blocks, prune_with_spec};
use blockprune::run::{evaluate, run_pipeline, RunConfig};
use blockprune::trainer::{merge_lora, pretrain, retrain, TrainMode, TrainReport};
use blockprune::{Error, Result};
use serde::Serialize;
use serde_json::{json, Value};

use crate::args::{Cli, Command};

#[derive(Serialize)]
struct Envelope<'a> {
    command: &'a str,
    threads: usize,
    config: &'a RunConfig,
    result: Value,
}

fn init_threads(n: Option<usize>) -> Result<()> {
    if let Some(n) = n {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn emit(cli: &Cli, command: &str, cfg: &RunConfig, result: Value) -> Result<()> {
    let env = Envelope {
        command,
        threads: rayon::current_num_threads(),
        config: cfg,
        result,
    };
    match &cli.out {
        Some(p) => blockprune::run::write_json(p, &env),
        None => {
            let mut out = std::io::stdout().lock();
            serde_json::to_writer_pretty(&mut out, &env)?;
            writeln!(out)?;
            Ok(())
        }
    }
}

fn write_curve(report: &TrainReport, path: Option<&Path>) -> Result<()> {
    if let Some(p) = path {
        report.write_csv(File::create(p)?)?;
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = cli.resolve()?;
    cfg.validate()?;
    init_threads(cfg.threads)?;

    let (name, result) = match &cli.command {
        Command::Pretrain(a) => {
            let corpus = cfg.load_corpus()?;
            let tcfg = blockprune::trainer::TrainConfig {
                mode: TrainMode::Pretrain,
                ..cfg.pretrain.clone()
            };
            let (model, report) = pretrain(cfg.model.clone(), cfg.seed, &corpus, &tcfg, None)?;
            save_checkpoint(&model, &a.checkpoint_out)?;
            write_curve(&report, a.train.curve_csv.as_deref())?;
            let eval = evaluate(&model, &corpus, &cfg.eval)?;
            ("pretrain", json!({ "train": report, "eval": eval, "checkpoint": a.checkpoint_out }))
        }
        Command::Score(a) => {
            let model = load_checkpoint(&a.checkpoint)?;
            let calib = if cfg.score.criterion.needs_calibration() {
                Some(cfg.calibration_set(&cfg.load_corpus()?)?)
            } else {
                None
            };
            let scores = score_units(&model, calib.as_ref(), &cfg.score)?;
            if let Some(p) = &a.emit_profile {
                blockprune::run::write_json(p, &scores)?;
            }
            ("score", json!({ "scores": scores, "calibration": calib }))
        }
        Command::Prune(a) => {
            if a.dry_run {
                let plan = plan_blocks(&cfg.model, cfg.prune.target, cfg.prune.rounding)?;
                ("prune", json!({ "dry_run": true, "plan": plan }))
            } else {
                let ckpt = a.checkpoint.as_ref().ok_or_else(|| Error::Config("--checkpoint is required".into()))?;
                let model = load_checkpoint(ckpt)?;
                let calib = if cfg.score.criterion.needs_calibration() {
                    Some(cfg.calibration_set(&cfg.load_corpus()?)?)
                } else {
                    None
                };
                let (pruned, report) = prune_with_spec(&model, calib.as_ref(), &cfg.prune_spec())?;
                if let Some(p) = &a.checkpoint_out {
                    save_checkpoint(&pruned, p)?;
                }
                ("prune", json!({ "dry_run": false, "report": report, "checkpoint": a.checkpoint_out }))
            }
        }
        Command::Retrain(a) => {
            let corpus = cfg.load_corpus()?;
            let mut model = load_checkpoint(&a.checkpoint)?;
            let report = retrain(&mut model, &corpus, &cfg.retrain, None)?;
            write_curve(&report, a.train.curve_csv.as_deref())?;
            let merged = a.merge && model.lora.is_some();
            if merged {
                merge_lora(&mut model)?;
            }
            save_checkpoint(&model, &a.checkpoint_out)?;
            let eval = evaluate(&model, &corpus, &cfg.eval)?;
            (
                "retrain",
                json!({ "train": report, "eval": eval, "merged": merged, "checkpoint": a.checkpoint_out }),
            )
        }
        Command::Eval(a) => {
            let model = load_checkpoint(&a.checkpoint)?;
            let eval = evaluate(&model, &cfg.load_corpus()?, &cfg.eval)?;
            ("eval", serde_json::to_value(eval)?)
        }
        Command::Bench(a) => {
            let model = load_checkpoint(&a.checkpoint)?;
            let report = bench_generate(&model, &cfg.bench)?;
            if let Some(p) = &a.csv {
                report.write_csv(File::create(p)?)?;
            }
            ("bench", serde_json::to_value(report)?)
        }
        Command::Gen(a) => {
            let model = load_checkpoint(&a.checkpoint)?;
            let prompt = tokenize(a.prompt.as_bytes());
            let out = greedy_generate(&model, &[prompt], a.max_new)?;
            let text = String::from_utf8_lossy(&detokenize(&out[0])?).into_owned();
            ("gen", json!({ "prompt": a.prompt, "completion": text, "tokens": out[0] }))
        }
        Command::Pipeline(_) => {
            let report = run_pipeline(&cfg)?;
            ("pipeline", serde_json::to_value(report)?)
        }
    };
    emit(cli, name, &cfg, result)
}
