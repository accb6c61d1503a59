//! Library results checked against slow, independent reimplementations.

mod common;

use blockprune::data::{sample_calibration, tokenize, CalibrationSet, Corpus};
use blockprune::eval::eval_ppl;
use blockprune::importance::{score_magnitude, score_ppl, score_units, Aggregation, Criterion, Granularity, ScoreConfig};
use blockprune::model::{load_checkpoint, save_checkpoint, Linear};
use blockprune::pruner::{prune, prune_iterative, prune_one_shot, prune_width_baseline, PruneSpec, PruneTarget};
use blockprune::trainer::{attach_lora, merge_lora, pretrain, LoraConfig, TrainConfig};
use blockprune::{Model, ModelConfig, Tensor, UnitKind, UnitRef};
use serde_json::Value;
use std::time::Instant;

fn matvec(lin: &Linear<f64>, x: &[f64]) -> Vec<f64> {
    let (rows, cols) = (lin.d_out(), lin.d_in());
    let w = lin.weight.data();
    let mut y: Vec<f64> = (0..rows).map(|r| (0..cols).map(|c| w[r * cols + c] * x[c]).sum()).collect();
    if let Some(ad) = &lin.lora {
        let rank = ad.a.shape()[0];
        let ax: Vec<f64> = (0..rank).map(|k| (0..cols).map(|c| ad.a.data()[k * cols + c] * x[c]).sum()).collect();
        for (r, yr) in y.iter_mut().enumerate() {
            *yr += ad.scale * (0..rank).map(|k| ad.b.data()[r * rank + k] * ax[k]).sum::<f64>();
        }
    }
    y
}

fn rms(x: &[f64], w: &Tensor<f64>, eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + eps).sqrt();
    x.iter().zip(w.data()).map(|(v, g)| v * inv * g).collect()
}

fn rotate(v: &mut [f64], heads: usize, hd: usize, pos: usize, base: f64) {
    let half = hd / 2;
    for h in 0..heads {
        for i in 0..half {
            let theta = pos as f64 * base.powf(-2.0 * i as f64 / hd as f64);
            let (a, b) = (v[h * hd + i], v[h * hd + i + half]);
            v[h * hd + i] = a * theta.cos() - b * theta.sin();
            v[h * hd + i + half] = b * theta.cos() + a * theta.sin();
        }
    }
}

/// Position-by-position forward of one sequence with explicit loops.
fn naive_logits(m: &Model<f64>, seq: &[u32], skip: &[UnitRef]) -> Vec<Vec<f64>> {
    let cfg = &m.config;
    let (d, hd, heads) = (cfg.d_model, cfg.head_dim(), cfg.n_heads);
    let mut h: Vec<Vec<f64>> = seq
        .iter()
        .map(|&t| m.tok_embedding.data()[t as usize * d..(t as usize + 1) * d].to_vec())
        .collect();
    let skipped = |b: usize, k: UnitKind| skip.iter().any(|u| u.block_index == b && u.covers(k));
    for block in &m.blocks {
        if let Some(a) = block.attn.as_ref().filter(|_| !skipped(block.index, UnitKind::MhaModule)) {
            let mut q = Vec::new();
            let mut k = Vec::new();
            let mut v = Vec::new();
            for (pos, x) in h.iter().enumerate() {
                let xn = rms(x, &a.norm, cfg.rms_eps);
                let mut qi = matvec(&a.wq, &xn);
                let mut ki = matvec(&a.wk, &xn);
                rotate(&mut qi, heads, hd, pos, cfg.rope_base);
                rotate(&mut ki, heads, hd, pos, cfg.rope_base);
                q.push(qi);
                k.push(ki);
                v.push(matvec(&a.wv, &xn));
            }
            for t in 0..h.len() {
                let mut ctx = vec![0.0; heads * hd];
                for head in 0..heads {
                    let r = head * hd..(head + 1) * hd;
                    let logits: Vec<f64> = (0..=t)
                        .map(|s| q[t][r.clone()].iter().zip(&k[s][r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (hd as f64).sqrt())
                        .collect();
                    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
                    for s in 0..=t {
                        let p = (logits[s] - mx).exp() / z;
                        for j in r.clone() {
                            ctx[j] += p * v[s][j];
                        }
                    }
                }
                let o = matvec(&a.wo, &ctx);
                h[t].iter_mut().zip(o).for_each(|(x, o)| *x += o);
            }
        }
        if let Some(f) = block.ffn.as_ref().filter(|_| !skipped(block.index, UnitKind::FfnModule)) {
            for x in h.iter_mut() {
                let xn = rms(x, &f.norm, cfg.rms_eps);
                let g = matvec(&f.w_gate, &xn);
                let u = matvec(&f.w_up, &xn);
                let act: Vec<f64> = g.iter().zip(&u).map(|(g, u)| g / (1.0 + (-g).exp()) * u).collect();
                let o = matvec(&f.w_down, &act);
                x.iter_mut().zip(o).for_each(|(x, o)| *x += o);
            }
        }
    }
    h.iter()
        .map(|x| {
            let xn = rms(x, &m.final_norm, cfg.rms_eps);
            (0..cfg.vocab_size)
                .map(|v| (0..d).map(|c| m.lm_head.data()[v * d + c] * xn[c]).sum())
                .collect()
        })
        .collect()
}

fn assert_logits_match(m: &Model<f64>, tokens: &[u32], batch: usize, skip: &[UnitRef], tol: f64) {
    let got = m.forward_masked(tokens, batch, skip).unwrap();
    let seq = tokens.len() / batch;
    let vocab = m.config.vocab_size;
    for b in 0..batch {
        let want = naive_logits(m, &tokens[b * seq..(b + 1) * seq], skip);
        for (t, row) in want.iter().enumerate() {
            let off = (b * seq + t) * vocab;
            for (j, w) in row.iter().enumerate() {
                let g = got.data()[off + j];
                assert!((g - w).abs() <= tol * (1.0 + w.abs()), "b{b} t{t} v{j}: {g} vs {w}");
            }
        }
    }
}

fn model(cfg: ModelConfig, seed: u64) -> Model<f64> {
    Model::init(cfg, seed).unwrap()
}

#[test]
fn forward_matches_naive_loops() {
    let m = model(ModelConfig::toy(3, 16, 2, 40), 1);
    assert_logits_match(&m, &common::tokens(14, 4), 2, &[], 1e-10);
}

#[test]
fn masked_forward_matches_naive_loops() {
    let m = model(ModelConfig::toy(3, 16, 4, 24), 2);
    let skip = [UnitRef::block(0), UnitRef::ffn(2)];
    assert_logits_match(&m, &common::tokens(9, 5), 1, &skip, 1e-10);
}

#[test]
fn module_pruned_model_matches_naive_loops() {
    let m = model(ModelConfig::toy(3, 16, 2, 24), 3);
    let (p, _) = prune(&m, &[UnitRef::mha(1), UnitRef::ffn(0)]).unwrap();
    assert!(p.block(1).unwrap().attn.is_none());
    assert_logits_match(&p, &common::tokens(8, 6), 1, &[], 1e-10);
    // Physical removal and bypass agree.
    let tokens = common::tokens(8, 6);
    let a = p.forward(&tokens, 1).unwrap();
    let b = m.forward_masked(&tokens, 1, &[UnitRef::mha(1), UnitRef::ffn(0)]).unwrap();
    assert_eq!(a.data(), b.data());
}

fn nonzero_adapter(m: &mut Model<f64>) {
    attach_lora(m, &LoraConfig::with_rank(2)).unwrap();
    for (k, t) in m.lora_params_mut().into_iter().enumerate() {
        if k % 2 == 1 {
            let n = t.data().len();
            t.data_mut().iter_mut().enumerate().for_each(|(j, v)| *v = 0.02 * ((j * 7 + k) % 11) as f64 / n as f64 - 0.01);
        }
    }
}

#[test]
fn adapter_forward_matches_naive_loops() {
    let mut m = model(ModelConfig::toy(2, 16, 2, 24), 4);
    nonzero_adapter(&mut m);
    assert_logits_match(&m, &common::tokens(10, 7), 2, &[], 1e-10);
}

#[test]
fn fresh_adapter_leaves_logits_unchanged() {
    let base = model(ModelConfig::toy(2, 16, 2, 24), 5);
    let mut m = base.clone();
    attach_lora(&mut m, &LoraConfig::default()).unwrap();
    let tokens = common::tokens(12, 8);
    assert_eq!(m.forward(&tokens, 2).unwrap().data(), base.forward(&tokens, 2).unwrap().data());
}

#[test]
fn merged_adapter_matches_unmerged_logits() {
    let mut m = model(ModelConfig::toy(2, 16, 2, 24), 6);
    nonzero_adapter(&mut m);
    let tokens = common::tokens(12, 9);
    let before = m.forward(&tokens, 2).unwrap();
    merge_lora(&mut m).unwrap();
    assert!(m.lora.is_none());
    let after = m.forward(&tokens, 2).unwrap();
    for (a, b) in before.data().iter().zip(after.data()) {
        assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()));
    }
}

#[test]
fn incremental_decode_matches_full_forward() {
    let m = model(ModelConfig::toy(3, 16, 2, 32), 7);
    let tokens = common::tokens(2 * 11, 10);
    let full = m.forward(&tokens, 2).unwrap();
    let vocab = m.config.vocab_size;
    let mut cache = m.new_cache(2, 11).unwrap();
    for t in 0..11 {
        let step = m.decode_step(&mut cache, &[tokens[t], tokens[11 + t]]).unwrap();
        for b in 0..2 {
            let want = &full.data()[(b * 11 + t) * vocab..(b * 11 + t + 1) * vocab];
            let got = &step.data()[b * vocab..(b + 1) * vocab];
            for (g, w) in got.iter().zip(want) {
                assert!((g - w).abs() <= 1e-10 * (1.0 + w.abs()), "pos {t}");
            }
        }
    }
}

#[test]
fn checkpoint_bytes_walk_to_the_same_tensors() {
    let mut m = Model::<f32>::init(ModelConfig::toy(3, 16, 2, 24), 11).unwrap();
    m = prune(&m, &[UnitRef::ffn(1)]).unwrap().0;
    attach_lora(&mut m, &LoraConfig::with_rank(2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&m, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    assert_eq!(&bytes[..8], b"BPRUNE01");
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header: Value = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
    let data_start = (16 + hlen).div_ceil(64) * 64;
    assert!(bytes[16 + hlen..data_start].iter().all(|&b| b == 0));

    let mut expected = m.named_params();
    expected.extend(m.named_lora_params());
    let entries = header["tensors"].as_array().unwrap();
    assert_eq!(entries.len(), expected.len());
    for (e, (name, t)) in entries.iter().zip(&expected) {
        assert_eq!(e["name"], name.as_str());
        let off = data_start + e["offset"].as_u64().unwrap() as usize;
        assert_eq!(off % 64, 0, "{name} is not aligned");
        let shape: Vec<usize> = e["shape"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap() as usize).collect();
        assert_eq!(shape, t.shape());
        for (i, v) in t.data().iter().enumerate() {
            let raw = f32::from_le_bytes(bytes[off + 4 * i..off + 4 * i + 4].try_into().unwrap());
            assert_eq!(raw.to_bits(), v.to_bits(), "{name}[{i}]");
        }
    }
    assert_eq!(header["blocks"][1]["ffn"], false);

    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, m);
}

#[test]
fn magnitude_matches_naive_sums() {
    let m = Model::<f32>::init(ModelConfig::toy(3, 16, 2, 24), 12).unwrap();
    for (agg, module) in [(Aggregation::Sum, false), (Aggregation::Max, false), (Aggregation::Mean, true)] {
        let cfg = ScoreConfig {
            aggregation: agg,
            granularity: if module { Granularity::Module } else { Granularity::Block },
            ..ScoreConfig::new(Criterion::Mag)
        };
        for s in score_magnitude(&m, &cfg).unwrap() {
            let b = m.block(s.unit.block_index).unwrap();
            let mut rows = Vec::new();
            for (p, lin) in b.projections() {
                if !s.unit.covers(p.kind()) {
                    continue;
                }
                let w = lin.weight.data();
                for r in 0..lin.d_out() {
                    let mut acc = 0.0f64;
                    for c in 0..lin.d_in() {
                        acc += (w[r * lin.d_in() + c] as f64).abs();
                    }
                    rows.push(acc);
                }
            }
            let want = match agg {
                Aggregation::Sum => rows.iter().sum::<f64>(),
                Aggregation::Mean => rows.iter().sum::<f64>() / rows.len() as f64,
                Aggregation::Max => rows.iter().cloned().fold(0.0, f64::max),
                Aggregation::Product => unreachable!(),
            };
            assert!((s.value - want).abs() <= 1e-9 * want, "{:?} {}: {} vs {want}", agg, s.unit, s.value);
        }
    }
}

fn trained_toy(n_blocks: usize) -> (Model<f32>, Corpus) {
    let corpus = Corpus::from_file(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/sample_corpus.txt"), 0.05).unwrap();
    let cfg = TrainConfig {
        batch: 8,
        seq_len: 32,
        max_steps: 20,
        eval_every: 0,
        eval_tokens: 512,
        ..TrainConfig::pretrain()
    };
    let (m, _) = pretrain(ModelConfig::toy(n_blocks, 32, 2, 64), 0, &corpus, &cfg, None).unwrap();
    (m, corpus)
}

fn calib(corpus: &Corpus) -> CalibrationSet {
    sample_calibration(corpus, 3, 24, 0).unwrap()
}

#[test]
fn module_ppl_scores_equal_physical_ablation() {
    let (m, corpus) = trained_toy(3);
    let c = calib(&corpus);
    let cfg = ScoreConfig {
        granularity: Granularity::Module,
        ..ScoreConfig::new(Criterion::Ppl)
    };
    let scores = score_ppl(&m, &c, &cfg).unwrap();
    assert_eq!(scores.len(), 6);
    for s in scores {
        let (p, _) = prune(&m, &[s.unit]).unwrap();
        let want = eval_ppl(&p, &c.flat_tokens(), c.seq_len - 1).unwrap();
        assert!((s.value - want).abs() <= 1e-6 * want, "{}: {} vs {want}", s.unit, s.value);
    }
}

#[test]
fn iterative_pruning_equals_greedy_rescoring() {
    let (m, corpus) = trained_toy(6);
    let c = calib(&corpus);
    let spec = PruneSpec {
        iterative: true,
        ..PruneSpec::new(PruneTarget::RemoveCount(3), Criterion::Ppl)
    };
    let (got, report) = prune_iterative(&m, Some(&c), &spec).unwrap();

    let mut current = m.clone();
    let mut order = Vec::new();
    for _ in 0..3 {
        let mut best: Option<(f64, UnitRef)> = None;
        for idx in current.block_indices() {
            let u = UnitRef::block(idx);
            let (p, _) = prune(&current, &[u]).unwrap();
            let v = eval_ppl(&p, &c.flat_tokens(), c.seq_len - 1).unwrap();
            // Ties go to the later block.
            if best.map_or(true, |(bv, _)| v <= bv) {
                best = Some((v, u));
            }
        }
        let u = best.unwrap().1;
        current = prune(&current, &[u]).unwrap().0;
        order.push(u);
    }
    assert_eq!(report.removed, order);
    assert_eq!(got, current);
}

#[test]
fn replaying_a_report_reproduces_it() {
    let (m, corpus) = trained_toy(5);
    let c = calib(&corpus);
    let spec = PruneSpec {
        score: ScoreConfig {
            granularity: Granularity::Module,
            ..ScoreConfig::new(Criterion::Ppl)
        },
        ..PruneSpec::new(PruneTarget::RemoveCount(3), Criterion::Ppl)
    };
    let (pruned, report) = prune_one_shot(&m, Some(&c), &spec).unwrap();
    let (again, replay) = prune(&m.clone(), &report.removed).unwrap();
    assert_eq!(replay.params_after, report.params_after);
    assert_eq!(replay.surviving, report.surviving);
    assert_eq!(again, pruned);
    // Surviving blocks keep their original shapes.
    for b in &again.blocks {
        let orig = m.block(b.index).unwrap();
        for (p, lin) in b.projections() {
            assert_eq!(lin.weight.shape(), orig.proj(p).unwrap().weight.shape());
        }
    }
}

#[test]
fn iterative_cost_scales_with_removals() {
    let (m, corpus) = trained_toy(6);
    let c = sample_calibration(&corpus, 4, 64, 0).unwrap();
    let cfg = ScoreConfig::new(Criterion::Ppl);
    let best = |f: &dyn Fn()| {
        (0..3)
            .map(|_| {
                let t = Instant::now();
                f();
                t.elapsed().as_secs_f64()
            })
            .fold(f64::INFINITY, f64::min)
    };
    let once = best(&|| {
        score_units(&m, Some(&c), &cfg).unwrap();
    });
    let k = 3;
    let spec = PruneSpec {
        iterative: true,
        ..PruneSpec::new(PruneTarget::RemoveCount(k), Criterion::Ppl)
    };
    let iter = best(&|| {
        prune_iterative(&m, Some(&c), &spec).unwrap();
    });
    let factor = iter / once;
    assert!((0.5 * k as f64..=2.0 * k as f64).contains(&factor), "factor {factor}");
}

#[test]
fn width_baseline_keeps_largest_norm_heads_and_channels() {
    let m = Model::<f32>::init(ModelConfig::toy(2, 16, 4, 24), 13).unwrap();
    let w = prune_width_baseline(&m, 0.5).unwrap();
    assert_eq!((w.config.n_heads, w.config.d_ffn, w.config.head_dim()), (2, 12, 4));
    let norm = |t: &Tensor<f32>, r: usize| {
        let c = t.shape()[1];
        t.data()[r * c..(r + 1) * c].iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt()
    };
    for (orig, pruned) in m.blocks.iter().zip(&w.blocks) {
        let a = orig.attn.as_ref().unwrap();
        let mut heads: Vec<(f64, usize)> = (0..4)
            .map(|h| ((h * 4..h * 4 + 4).map(|r| norm(&a.wq.weight, r) + norm(&a.wk.weight, r) + norm(&a.wv.weight, r)).sum(), h))
            .collect();
        heads.sort_by(|x, y| y.0.total_cmp(&x.0));
        let mut keep: Vec<usize> = heads[..2].iter().map(|h| h.1).collect();
        keep.sort();
        let pa = pruned.attn.as_ref().unwrap();
        for (slot, h) in keep.iter().enumerate() {
            assert_eq!(&pa.wq.weight.data()[slot * 64..(slot + 1) * 64], &a.wq.weight.data()[h * 64..(h + 1) * 64]);
            for r in 0..16 {
                let got = &pa.wo.weight.data()[r * 8 + slot * 4..r * 8 + slot * 4 + 4];
                let want = &a.wo.weight.data()[r * 16 + h * 4..r * 16 + h * 4 + 4];
                assert_eq!(got, want);
            }
        }
        let f = orig.ffn.as_ref().unwrap();
        let mut chans: Vec<(f64, usize)> =
            (0..24).map(|c| (norm(&f.w_gate.weight, c) + norm(&f.w_up.weight, c), c)).collect();
        chans.sort_by(|x, y| y.0.total_cmp(&x.0));
        let mut keep: Vec<usize> = chans[..12].iter().map(|c| c.1).collect();
        keep.sort();
        let pf = pruned.ffn.as_ref().unwrap();
        for (slot, c) in keep.iter().enumerate() {
            assert_eq!(&pf.w_up.weight.data()[slot * 16..(slot + 1) * 16], &f.w_up.weight.data()[c * 16..(c + 1) * 16]);
        }
    }
    // Forward still runs on the narrower model.
    w.forward(&common::tokens(6, 1), 1).unwrap();
}

#[test]
fn memorizes_a_short_repeated_text() {
    let text = "abcdefghij".repeat(300);
    let corpus = Corpus::from_tokens("rep", tokenize(text.as_bytes()), 0.1).unwrap();
    let cfg = TrainConfig {
        batch: 4,
        seq_len: 24,
        max_steps: 150,
        lr: 1e-2,
        eval_every: 0,
        eval_tokens: 256,
        ..TrainConfig::pretrain()
    };
    let (m, report) = pretrain(ModelConfig::toy(1, 32, 2, 64), 0, &corpus, &cfg, None).unwrap();
    let ppl = eval_ppl(&m, corpus.val(), 24).unwrap();
    assert!(ppl < 1.2, "ppl {ppl}");
    assert!(report.final_val_ppl.unwrap() < report.initial_val_ppl.unwrap());
}

#[test]
fn criteria_without_calibration_need_none() {
    let m = Model::<f32>::init(ModelConfig::toy(2, 8, 2, 12), 0).unwrap();
    assert!(score_units(&m, None, &ScoreConfig::new(Criterion::Mag)).is_ok());
    assert!(score_units(&m, None, &ScoreConfig::new(Criterion::Ppl)).is_err());
}
