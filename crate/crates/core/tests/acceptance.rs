//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits nonzero if any fails. Pass criterion numbers as arguments to
//! run a subset, e.g. `cargo test --test acceptance -- 2 4`.

mod common;

use std::process::ExitCode;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use blockprune::bench::{bench_generate, BenchReport, BenchSpec};
use blockprune::data::{sample_calibration, CalibrationSet, Corpus};
use blockprune::eval::eval_ppl;
use blockprune::importance::{
    apply_protection, calibration_ppl, score_ppl, score_taylor, Criterion, ScoreConfig, UnitScore,
};
use blockprune::model::{load_checkpoint, save_checkpoint, ParamMode};
use blockprune::pruner::{plan_blocks, prune, prune_one_shot, select_units, PruneSpec, PruneTarget, SizeRounding};
use blockprune::run::{evaluate, run_pipeline, EvalConfig, RunConfig};
use blockprune::trainer::{attach_lora, pretrain, retrain, LoraConfig, TrainConfig, TrainMode};
use blockprune::{Model, ModelConfig, UnitRef};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CORPUS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/sample_corpus.txt");

struct Outcome {
    pass: bool,
    detail: String,
}

fn corpus() -> &'static Corpus {
    static C: OnceLock<Corpus> = OnceLock::new();
    C.get_or_init(|| Corpus::from_file(CORPUS, 0.05).expect("sample corpus"))
}

/// Every bench report produced during the run, for the format check.
fn bench_log() -> &'static Mutex<Vec<BenchReport>> {
    static L: OnceLock<Mutex<Vec<BenchReport>>> = OnceLock::new();
    L.get_or_init(|| Mutex::new(Vec::new()))
}

fn bench(model: &Model<f32>, spec: &BenchSpec) -> BenchReport {
    let r = bench_generate(model, spec).expect("bench");
    bench_log().lock().unwrap().push(r.clone());
    r
}

/// The 8-block pretrained toy shared by the retraining, sanity and
/// stability checks.
fn toy8() -> &'static Model<f32> {
    static M: OnceLock<Model<f32>> = OnceLock::new();
    M.get_or_init(|| {
        let t = Instant::now();
        let cfg = TrainConfig {
            lr: 2e-3,
            batch: 16,
            seq_len: 128,
            max_steps: 800,
            eval_every: 0,
            ..TrainConfig::pretrain()
        };
        let (m, r) = pretrain(ModelConfig::toy(8, 64, 4, 192), 0, corpus(), &cfg, None).expect("pretrain");
        println!(
            "      (pretrained 8-block toy: val ppl {:.3} -> {:.3} in {:.0} s)",
            r.initial_val_ppl.unwrap_or(f64::NAN),
            r.final_val_ppl.unwrap_or(f64::NAN),
            t.elapsed().as_secs_f64()
        );
        m
    })
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

fn within(elapsed: Duration, limit_s: f64) -> bool {
    elapsed.as_secs_f64() < limit_s
}

fn gradient_check() -> Outcome {
    let t = Instant::now();
    let m = Model::<f64>::init(ModelConfig::toy(2, 16, 2, 48), 7).unwrap();
    let worst = common::check(m, 2, 6, &[], ParamMode::All, 240);
    let el = t.elapsed();
    Outcome {
        pass: worst <= 1e-6 && within(el, 30.0),
        detail: format!("240 samples, worst rel err {worst:.2e} (<= 1e-6), {:.1} s (< 30 s)", el.as_secs_f64()),
    }
}

fn ppl_oracle() -> Outcome {
    let t = Instant::now();
    let cfg = TrainConfig {
        batch: 8,
        seq_len: 64,
        max_steps: 20,
        eval_every: 0,
        ..TrainConfig::pretrain()
    };
    let (m, _) = pretrain(ModelConfig::toy(6, 64, 4, 192), 1, corpus(), &cfg, None).unwrap();
    let calib = sample_calibration(corpus(), 10, 128, 0).unwrap();
    let scores = score_ppl(&m, &calib, &ScoreConfig::new(Criterion::Ppl)).unwrap();
    let mut worst = 0.0f64;
    let mut physical = Vec::new();
    for s in &scores {
        let (p, _) = prune(&m, &[s.unit]).unwrap();
        let v = eval_ppl(&p, &calib.flat_tokens(), calib.seq_len - 1).unwrap();
        worst = worst.max(rel(s.value, v));
        physical.push((v, s.unit));
    }
    let argmin = physical.iter().min_by(|a, b| a.0.total_cmp(&b.0)).unwrap().1;
    let spec = PruneSpec::new(PruneTarget::RemoveCount(1), Criterion::Ppl);
    let (_, report) = prune_one_shot(&m, Some(&calib), &spec).unwrap();
    let el = t.elapsed();
    Outcome {
        pass: worst <= 1e-6 && report.removed == [argmin] && within(el, 30.0),
        detail: format!(
            "worst rel diff {worst:.2e} (<= 1e-6), one-shot removed {} vs exhaustive {argmin}, {:.1} s (< 30 s)",
            report.removed[0],
            el.as_secs_f64()
        ),
    }
}

fn taylor_first_order() -> Outcome {
    let mut m = Model::<f64>::init(ModelConfig::toy(1, 2, 1, 4), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let names: Vec<String> = m.named_params().into_iter().map(|(n, _)| n).collect();
    for (name, t) in names.iter().zip(m.params_mut()) {
        if !name.contains("norm") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1e-3..=1e-3));
        }
    }
    let calib = sample_calibration(corpus(), 4, 32, 0).unwrap();
    let cfg = ScoreConfig::new(Criterion::Taylor);
    let taylor = score_taylor(&m, &calib, &cfg).unwrap()[0].value;
    let loss = |m: &Model<f64>| calibration_ppl(m, &calib, &[]).unwrap().ln();
    let base = loss(&m);
    let mut ablation = 0.0;
    let mut entries = 0;
    for p in blockprune::model::Proj::ALL {
        let n = m.block(0).unwrap().proj(p).unwrap().weight.numel();
        for i in 0..n {
            let w = &mut m.block_mut(0).unwrap().proj_mut(p).unwrap().weight;
            let orig = w.data()[i];
            w.data_mut()[i] = 0.0;
            ablation += (loss(&m) - base).abs();
            m.block_mut(0).unwrap().proj_mut(p).unwrap().weight.data_mut()[i] = orig;
            entries += 1;
        }
    }
    let r = rel(taylor, ablation);
    Outcome {
        pass: r <= 0.05,
        detail: format!("{entries} entries, Taylor {taylor:.4e} vs ablation sum {ablation:.4e}, rel {r:.2e} (<= 0.05)"),
    }
}

fn table1_sizing() -> Outcome {
    let t = Instant::now();
    let seven = plan_blocks(&ModelConfig::llama_7b(), PruneTarget::TargetParams(4_500_000_000), SizeRounding::Nearest)
        .unwrap()
        .surviving;
    let thirteen = plan_blocks(&ModelConfig::llama_13b(), PruneTarget::TargetParams(8_300_000_000), SizeRounding::Nearest)
        .unwrap()
        .surviving;
    let el = t.elapsed();
    Outcome {
        pass: seven == 21 && thirteen == 25 && within(el, 1.0),
        detail: format!("7B @ 4.5e9 keeps {seven} (21), 13B @ 8.3e9 keeps {thirteen} (25)"),
    }
}

fn depth_speedup() -> Outcome {
    let t = Instant::now();
    let cfg = TrainConfig {
        batch: 8,
        seq_len: 64,
        max_steps: 40,
        eval_every: 0,
        ..TrainConfig::pretrain()
    };
    let (base, _) = pretrain(ModelConfig::toy(16, 64, 4, 192), 2, corpus(), &cfg, None).unwrap();
    let calib = sample_calibration(corpus(), 10, 128, 0).unwrap();
    let spec = PruneSpec::new(PruneTarget::RemoveCount(8), Criterion::Ppl);
    let (pruned, _) = prune_one_shot(&base, Some(&calib), &spec).unwrap();
    let bspec = BenchSpec::default();
    let b = bench(&base, &bspec);
    let p = bench(&pruned, &bspec);
    let ratio = p.mean_latency_s / b.mean_latency_s;
    let el = t.elapsed();
    Outcome {
        pass: (0.40..=0.65).contains(&ratio) && within(el, 300.0),
        detail: format!(
            "16 -> {} blocks, M=1, {} runs after {} warm-ups: {:.2} ms vs {:.2} ms, ratio {ratio:.3} (in [0.40, 0.65]), {:.0} s (< 300 s)",
            pruned.n_blocks(),
            bspec.runs,
            bspec.warmups,
            p.mean_latency_s * 1e3,
            b.mean_latency_s * 1e3,
            el.as_secs_f64()
        ),
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn retraining_order() -> Outcome {
    let base = toy8();
    let t = Instant::now();
    let calib = sample_calibration(corpus(), 10, 128, 0).unwrap();
    let spec = PruneSpec::new(PruneTarget::RemoveCount(4), Criterion::Ppl);
    let (pruned, _) = prune_one_shot(base, Some(&calib), &spec).unwrap();
    let eval = EvalConfig::default();
    let none = evaluate(&pruned, corpus(), &eval).unwrap().ppl;
    let (mut full, mut lora) = (Vec::new(), Vec::new());
    for seed in 0..3 {
        for mode in [TrainMode::FullFt, TrainMode::Lora] {
            let cfg = TrainConfig {
                lr: 1e-3,
                max_steps: 200,
                eval_every: 0,
                seed,
                lora: LoraConfig { seed, ..LoraConfig::default() },
                ..TrainConfig::retrain(mode)
            };
            let mut m = pruned.clone();
            retrain(&mut m, corpus(), &cfg, None).unwrap();
            let ppl = evaluate(&m, corpus(), &eval).unwrap().ppl;
            if mode == TrainMode::FullFt { full.push(ppl) } else { lora.push(ppl) }
        }
    }
    let (f, l) = (median(full), median(lora));
    let el = t.elapsed();
    let ok = f <= 0.98 * l && l <= 0.98 * none && f <= 0.98 * none;
    Outcome {
        pass: ok && within(el, 1200.0),
        detail: format!(
            "8 -> 4 blocks, 200 steps x 16 x 128 tokens each, median of 3: full_ft {f:.3}, lora {l:.3}, none {none:.3} (2% margins), {:.0} s (< 1200 s)",
            el.as_secs_f64()
        ),
    }
}

fn protection_and_sanity() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut violations = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(7..48);
        let crit = if rng.gen_bool(0.5) { Criterion::MagPlus } else { Criterion::TaylorPlus };
        let cfg = ScoreConfig::new(crit);
        let mut scores: Vec<UnitScore> = (0..n)
            .map(|i| UnitScore {
                unit: UnitRef::block(i),
                criterion: crit,
                value: rng.gen_range(-1.0..1.0),
                protected: false,
            })
            .collect();
        apply_protection(&mut scores, &cfg, n).unwrap();
        let open = n - cfg.protect_prefix - cfg.protect_suffix;
        let picked = select_units(&scores, rng.gen_range(0..=open)).unwrap();
        violations += picked
            .iter()
            .filter(|u| u.block_index < cfg.protect_prefix || u.block_index >= n - cfg.protect_suffix)
            .count();
    }

    let base = toy8();
    let mut wins = 0;
    let mut lines = Vec::new();
    let spec = PruneSpec::new(PruneTarget::RemoveCount(2), Criterion::Ppl);
    let candidates: Vec<usize> = (1..7).collect();
    for seed in 0..5u64 {
        let calib: CalibrationSet = sample_calibration(corpus(), 10, 128, seed).unwrap();
        let (pruned, _) = prune_one_shot(base, Some(&calib), &spec).unwrap();
        let chosen = calibration_ppl(&pruned, &calib, &[]).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(100 + seed);
        let random: Vec<f64> = (0..5)
            .map(|_| {
                let pair: Vec<UnitRef> = candidates.choose_multiple(&mut r, 2).map(|&i| UnitRef::block(i)).collect();
                calibration_ppl(base, &calib, &pair).unwrap()
            })
            .collect();
        let mean = random.iter().sum::<f64>() / 5.0;
        wins += usize::from(chosen <= mean);
        lines.push(format!("{chosen:.3}<={mean:.3}"));
    }
    let el = t.elapsed();
    Outcome {
        pass: violations == 0 && wins == 5 && within(el, 600.0),
        detail: format!(
            "1000 vectors, {violations} protected picks; k=2 ppl vs random mean per seed [{}]: {wins}/5, {:.0} s (< 600 s)",
            lines.join(", "),
            el.as_secs_f64()
        ),
    }
}

fn tiny_run(out_dir: std::path::PathBuf) -> RunConfig {
    let mut c = RunConfig::default();
    c.seed = 5;
    c.paths.corpus = CORPUS.into();
    c.paths.out_dir = out_dir;
    c.model = ModelConfig::toy(4, 16, 2, 32);
    c.calibration.samples = 3;
    c.calibration.seq_len = 32;
    c.prune.target = PruneTarget::RemoveCount(2);
    for t in [&mut c.pretrain, &mut c.retrain] {
        t.batch = 4;
        t.seq_len = 32;
        t.max_steps = 5;
        t.eval_every = 0;
        t.eval_tokens = 512;
    }
    c.eval.seq_len = 32;
    c.eval.max_tokens = 2048;
    c.bench.input_len = 4;
    c.bench.output_len = 16;
    c.bench.warmups = 1;
    c.bench.runs = 3;
    c
}

fn determinism_and_formats() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut m = Model::<f32>::init(ModelConfig::toy(4, 16, 2, 32), 9).unwrap();
    m = prune(&m, &[UnitRef::block(2), UnitRef::mha(0)]).unwrap().0;
    attach_lora(&mut m, &LoraConfig::with_rank(2)).unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    save_checkpoint(&m, &a).unwrap();
    save_checkpoint(&load_checkpoint(&a).unwrap(), &b).unwrap();
    let ckpt_same = std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap();

    let r1 = run_pipeline(&tiny_run(dir.path().join("r1"))).unwrap();
    let r2 = run_pipeline(&tiny_run(dir.path().join("r2"))).unwrap();
    let s1 = std::fs::read(dir.path().join("r1/scores.json")).unwrap();
    let s2 = std::fs::read(dir.path().join("r2/scores.json")).unwrap();
    let scores_same = s1 == s2 && r1.scores == r2.scores;

    {
        let mut log = bench_log().lock().unwrap();
        for r in [r1, r2] {
            log.extend([r.bench.base, r.bench.depth_pruned]);
        }
    }
    bench(&m, &BenchSpec { input_len: 3, output_len: 8, warmups: 0, runs: 4, ..BenchSpec::default() });
    let log = bench_log().lock().unwrap();
    let worst = log
        .iter()
        .map(|r| {
            let want = (r.spec.batch * r.spec.output_len) as f64 / r.mean_latency_s;
            rel(r.throughput, want)
        })
        .fold(0.0, f64::max);
    Outcome {
        pass: ckpt_same && scores_same && worst <= 1e-9,
        detail: format!(
            "checkpoint re-save identical: {ckpt_same}; pipeline score JSON identical: {scores_same}; throughput vs M*L/latency worst rel {worst:.1e} over {} reports",
            log.len()
        ),
    }
}

fn bottom_two(scores: &[UnitScore]) -> Vec<usize> {
    let mut s = select_units(scores, 2).unwrap().iter().map(|u| u.block_index).collect::<Vec<_>>();
    s.sort();
    s
}

fn calibration_stability() -> Outcome {
    let base = toy8();
    let cfg = ScoreConfig::new(Criterion::Ppl);
    let mut agree = 0;
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let small = score_ppl(base, &sample_calibration(corpus(), 10, 128, seed).unwrap(), &cfg).unwrap();
        let large = score_ppl(base, &sample_calibration(corpus(), 50, 128, seed).unwrap(), &cfg).unwrap();
        let (a, b) = (bottom_two(&small), bottom_two(&large));
        agree += usize::from(a == b);
        lines.push(format!("{a:?}/{b:?}"));
    }
    Outcome {
        pass: agree >= 4,
        detail: format!("bottom-2 with S=10 vs S=50 per seed: {}; agree {agree}/5 (>= 4)", lines.join(" ")),
    }
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient correctness", gradient_check),
        ("ppl criterion equals physical ablation", ppl_oracle),
        ("taylor first-order check", taylor_first_order),
        ("llama block sizing", table1_sizing),
        ("depth pruning speedup", depth_speedup),
        ("retraining recovery ordering", retraining_order),
        ("protection and criterion sanity", protection_and_sanity),
        ("determinism and formats", determinism_and_formats),
        ("calibration volume stability", calibration_stability),
    ];
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let o = run();
        ran += 1;
        failed += usize::from(!o.pass);
        println!("[{}] {n}. {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("acceptance: {}/{ran} passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
