//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use medrek_autodiff::{Graph, Tensor};
use medrek_core::dataset::{clean_overlaps, parse_jsonl, split_records, to_jsonl, EditRecord, Split};
use medrek_core::diagnostics::{
    classify_retrievals, high_sim_stats, kind_rate, outcome_counts, OutcomeKind, QueryMetric,
};
use medrek_core::editor::{EditorConfig, EditorModel};
use medrek_core::encoder::{EncoderConfig, RepVector, Role};
use medrek_core::evaluation::{average_score, run_protocol, EvalConfig, MetricReport};
use medrek_core::kb::KnowledgeBase;
use medrek_core::lm::{LmConfig, ToyLm};
use medrek_core::prompt_encoder::{PromptEncoderConfig, PromptMatrix};
use medrek_core::synthetic::{build_vocab, generate_synthetic, SyntheticConfig};
use medrek_core::training::{batch_loss, infonce, prepare, train, TrainConfig};
use medrek_core::dataset::KnowledgeTriple;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Check {
    id: &'static str,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn check(id: &'static str, name: &'static str, f: impl FnOnce() -> Result<String, String>) -> Check {
    let start = Instant::now();
    let (pass, detail) = match f() {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    let c = Check {
        id,
        name,
        pass,
        detail: format!("{detail} [{:.1}s]", start.elapsed().as_secs_f64()),
    };
    println!(
        "{} {} {}: {}",
        if c.pass { "PASS" } else { "FAIL" },
        c.id,
        c.name,
        c.detail
    );
    c
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

// ---------------------------------------------------------------------------
// 1. Gradient integrity

fn grad_integrity() -> Result<String, String> {
    let start = Instant::now();
    let bench = generate_synthetic(&SyntheticConfig {
        n_records: 4,
        n_entities: 4,
        n_relations: 3,
        n_objects: 4,
        ..Default::default()
    })
    .map_err(e)?;
    let vocab = build_vocab(&bench.records, &bench.corpus);
    let mut lm = ToyLm::new(
        LmConfig {
            d_lm: 8,
            heads: 2,
            layers: 1,
            mlp_ratio: 2,
            max_len: 32,
            ..Default::default()
        },
        vocab.clone(),
    )
    .map_err(e)?;
    lm.freeze();
    let config = EditorConfig {
        encoder: EncoderConfig {
            d_enc: 6,
            d_rep: 5,
            prototype_tokens: 3,
            shared_qk: false,
        },
        prompt: PromptEncoderConfig {
            prompt_tokens: 2,
            d_lm: 8,
            heads: 2,
            ..Default::default()
        },
    };
    let mut editor = EditorModel::new(config, vocab, 3).map_err(e)?;
    let data = prepare(&bench.records[..2], &lm).map_err(e)?;
    let batch: Vec<_> = data.iter().collect();
    let cfg = TrainConfig {
        clip_norm: None,
        temperature: 0.7,
        ..Default::default()
    };
    editor.params.zero_grads();
    batch_loss(&mut editor, &lm, &batch, &cfg, true).map_err(e)?;
    let ids: Vec<_> = editor.params.ids().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for id in ids {
        let name = editor.params.name(id).to_string();
        let analytic = editor.params.get(id).grad.clone().ok_or_else(|| format!("{name}: no gradient"))?;
        let n = analytic.len();
        // Largest coordinates plus a random sample.
        let mut coords: Vec<usize> = (0..n).collect();
        coords.sort_by(|&a, &b| analytic[b].abs().total_cmp(&analytic[a].abs()));
        coords.truncate(4);
        for _ in 0..4 {
            coords.push(rng.gen_range(0..n));
        }
        let mut group_worst: f64 = 0.0;
        for k in coords {
            let orig = editor.params.get(id).data()[k];
            editor.params.get_mut(id).data_mut()[k] = orig + h;
            let up = batch_loss(&mut editor, &lm, &batch, &cfg, false).map_err(e)?.total;
            editor.params.get_mut(id).data_mut()[k] = orig - h;
            let down = batch_loss(&mut editor, &lm, &batch, &cfg, false).map_err(e)?.total;
            editor.params.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            group_worst = group_worst.max(rel);
            checked += 1;
        }
        ensure(group_worst <= 1e-3, || format!("{name}: relative error {group_worst:.2e}"))?;
        worst = worst.max(group_worst);
    }
    let primitive = primitive_gradcheck()?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{checked} coordinates, worst composed rel err {worst:.2e}; primitives {primitive:.2e}"
    ))
}

/// Softmax, layer norm, KL and cross-entropy in isolation.
fn primitive_gradcheck() -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x0: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w0: Vec<f64> = (0..4).map(|_| rng.gen_range(0.5..1.5)).collect();
    let f = |x: &[f64], grad: bool| -> Result<(f64, Vec<f64>), String> {
        let mut g = Graph::new();
        let xv = g.variable(Tensor::new(&[3, 4], x.to_vec()).map_err(e)?);
        let w = g.constant(Tensor::new(&[4], w0.clone()).map_err(e)?);
        let ln = g.layer_norm(xv, w).map_err(e)?;
        let sm = g.softmax(ln, 1).map_err(e)?;
        let target = g.constant(Tensor::new(&[3, 4], vec![0.25; 12]).map_err(e)?);
        let kl = g.kl_divergence(target, xv).map_err(e)?;
        let ce = g.cross_entropy(xv, &[0, 3, 1]).map_err(e)?;
        let s = g.sum_all(sm).map_err(e)?;
        let sq = g.mul(sm, sm).map_err(e)?;
        let sq = g.sum_all(sq).map_err(e)?;
        let out = g.add(kl, ce).map_err(e)?;
        let out = g.add(out, sq).map_err(e)?;
        let out = g.add(out, s).map_err(e)?;
        let v = g.value(out).data()[0];
        let grads = if grad {
            let gr = g.backward(out).map_err(e)?;
            gr.get(xv).map(<[f64]>::to_vec).unwrap_or_default()
        } else {
            Vec::new()
        };
        Ok((v, grads))
    };
    let (_, analytic) = f(&x0, true)?;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for k in 0..x0.len() {
        let mut x = x0.clone();
        x[k] += h;
        let up = f(&x, false)?.0;
        x[k] -= 2.0 * h;
        let down = f(&x, false)?.0;
        let numeric = (up - down) / (2.0 * h);
        let rel = (analytic[k] - numeric).abs() / analytic[k].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    ensure(worst <= 1e-4, || format!("primitive relative error {worst:.2e}"))?;
    Ok(worst)
}

// ---------------------------------------------------------------------------
// 2. Retrieval oracle

fn retrieval_oracle() -> Result<String, String> {
    let (d, t, d_lm) = (8, 1, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut cases = 0;
    let mut agree = 0;
    let mut gated = 0;
    for _ in 0..20 {
        let mut kb = KnowledgeBase::new(d, t, d_lm);
        for i in 0..200 {
            // Coarse values make exact ties between entries likely.
            let z: Vec<f64> = (0..d).map(|_| f64::from(rng.gen_range(-2i32..=2))).collect();
            kb.insert(
                RepVector { z, role: Role::Key },
                PromptMatrix {
                    tokens: Tensor::zeros(&[t, d_lm]),
                },
                KnowledgeTriple::new(format!("s{i}"), "r", "o"),
            )
            .map_err(e)?;
        }
        let z_pt: Vec<f64> = (0..d).map(|_| f64::from(rng.gen_range(-2i32..=2))).collect();
        for _ in 0..100 {
            let z_q: Vec<f64> = (0..d).map(|_| f64::from(rng.gen_range(-2i32..=2))).collect();
            // Brute force: first maximum, then strict comparison with the prototype.
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            let mut best_id = 0;
            let mut best = f64::NEG_INFINITY;
            for (i, entry) in kb.entries().iter().enumerate() {
                let s = dot(&z_q, &entry.key.z);
                if s > best {
                    best = s;
                    best_id = i;
                }
            }
            let expected = (best > dot(&z_q, &z_pt)).then_some(best_id);
            let got = kb.retrieve_rep(&z_q, &z_pt).map(|entry| entry.id);
            cases += 1;
            gated += usize::from(expected.is_some());
            agree += usize::from(expected == got);
        }
    }
    ensure(agree == cases, || format!("{agree}/{cases} agree"))?;
    Ok(format!("{agree}/{cases} agree ({gated} retrieved)"))
}

// ---------------------------------------------------------------------------
// 3. Average-score arithmetic

fn average_arithmetic() -> Result<String, String> {
    let a = average_score(78.50, 80.61, &[99.42, 98.96, 99.34, 98.67]).map_err(e)?;
    let b = average_score(74.49, 70.46, &[100.00]).map_err(e)?;
    ensure((a - 89.33).abs() <= 0.005, || format!("first row {a:.4}"))?;
    ensure((b - 86.24).abs() <= 0.005, || format!("second row {b:.4}"))?;
    Ok(format!("{a:.4} and {b:.4}"))
}

// ---------------------------------------------------------------------------
// 4. Closed-form losses

fn closed_form_losses() -> Result<String, String> {
    let rep = |z: Vec<f64>, role| RepVector { z, role };
    let q = rep(vec![0.3, -1.2, 0.8], Role::Query);
    let pos = rep(vec![1.0, 0.5, -0.4], Role::Key);
    let single = infonce(&q, &pos, std::slice::from_ref(&pos), 1.0).map_err(e)?;
    ensure(single.abs() <= 1e-9, || format!("singleton {single:e}"))?;
    let mut worst: f64 = 0.0;
    for n in [2usize, 5, 17] {
        // Candidates orthogonal to the query all score zero.
        let q = rep(vec![1.0, 0.0, 0.0], Role::Query);
        let cands: Vec<RepVector> = (0..n).map(|i| rep(vec![0.0, i as f64, 1.0], Role::Key)).collect();
        let l = infonce(&q, &cands[n / 2], &cands, 0.5).map_err(e)?;
        worst = worst.max((l - (n as f64).ln()).abs());
    }
    ensure(worst <= 1e-9, || format!("uniform deviation {worst:e}"))?;

    let bench = generate_synthetic(&SyntheticConfig {
        n_records: 3,
        n_entities: 3,
        n_relations: 3,
        n_objects: 4,
        ..Default::default()
    })
    .map_err(e)?;
    let vocab = build_vocab(&bench.records, &bench.corpus);
    let mut lm = ToyLm::new(
        LmConfig {
            d_lm: 8,
            heads: 2,
            layers: 1,
            ..Default::default()
        },
        vocab,
    )
    .map_err(e)?;
    lm.freeze();
    let data = prepare(&bench.records, &lm).map_err(e)?;
    for s in &data {
        let mut g = Graph::new();
        let logits = lm.forward_graph(&mut g, None, s.loc.input()).map_err(e)?;
        let rows = g.slice(logits, 0, s.loc.answer_start - 1, s.loc.answer_len).map_err(e)?;
        let plain = g.constant_shared(s.plain_loc.clone());
        let kl = g.kl_divergence(plain, rows).map_err(e)?;
        let v = g.value(kl).data()[0];
        ensure(v == 0.0, || format!("KL without prompt is {v:e}"))?;
    }
    Ok(format!("singleton {single:e}, max |L - ln n| {worst:.1e}, KL = 0"))
}

// ---------------------------------------------------------------------------
// 5. Singleton attention

fn singleton_attention() -> Result<String, String> {
    let vocab = medrek_core::vocab::Vocab::build(["alpha beta gamma"]);
    let mut worst_rows: f64 = 0.0;
    let mut worst_wq: f64 = 0.0;
    for (t, heads) in [(1usize, 1usize), (3, 4), (7, 2)] {
        let config = EditorConfig {
            encoder: EncoderConfig {
                d_enc: 4,
                d_rep: 6,
                prototype_tokens: 2,
                shared_qk: true,
            },
            prompt: PromptEncoderConfig {
                prompt_tokens: t,
                d_lm: 8,
                heads,
                ..Default::default()
            },
        };
        let mut editor = EditorModel::new(config, vocab.clone(), t as u64).map_err(e)?;
        let triple = KnowledgeTriple::new("alpha", "beta", "gamma");
        let p = editor.prompt(&triple).map_err(e)?;
        let row0 = p.tokens.row(0).to_vec();
        for i in 1..t {
            for (a, b) in p.tokens.row(i).iter().zip(&row0) {
                worst_rows = worst_rows.max((a - b).abs());
            }
        }
        let [w_q, _, _] = editor.prompt_encoder.weights();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        editor
            .params
            .get_mut(w_q)
            .data_mut()
            .iter_mut()
            .for_each(|w| *w += rng.gen_range(-3.0..3.0));
        let q = editor.prompt(&triple).map_err(e)?;
        for (a, b) in q.tokens.data().iter().zip(p.tokens.data()) {
            worst_wq = worst_wq.max((a - b).abs());
        }
    }
    ensure(worst_rows <= 1e-9, || format!("rows differ by {worst_rows:e}"))?;
    ensure(worst_wq <= 1e-9, || format!("W_q perturbation moved prompt by {worst_wq:e}"))?;
    Ok(format!("row spread {worst_rows:e}, W_q sensitivity {worst_wq:e}"))
}

// ---------------------------------------------------------------------------
// 6 and 7. End-to-end synthetic editing and the shared-MLP ablation

struct EndToEnd {
    full: Vec<MetricReport>,
    ablation: Option<MetricReport>,
    elapsed: Duration,
    lm_epochs: usize,
    best_epoch: usize,
}

fn synthetic_train_config() -> TrainConfig {
    TrainConfig {
        seed: 0,
        epochs: 200,
        lr: 3e-3,
        ..Default::default()
    }
}

fn end_to_end() -> Result<EndToEnd, String> {
    let start = Instant::now();
    let bench = generate_synthetic(&SyntheticConfig::default()).map_err(e)?;
    let vocab = build_vocab(&bench.records, &bench.corpus);
    let (lm, lm_report) = ToyLm::pretrain(LmConfig::default(), vocab.clone(), &bench.corpus).map_err(e)?;
    let records = split_records(&bench.records, Split::Train);
    let mut editor = EditorModel::new(EditorConfig::default(), vocab.clone(), 0).map_err(e)?;
    let outcome = train(&mut editor, &lm, &records, &[], &synthetic_train_config()).map_err(e)?;
    editor.freeze();
    let eval = EvalConfig::default();
    let full = [1, 10, 50]
        .into_iter()
        .map(|b| run_protocol(&records, b, &editor, &lm, &eval).map_err(e))
        .collect::<Result<Vec<_>, _>>()?;
    let elapsed = start.elapsed();

    let mut ablation_config = EditorConfig::default();
    ablation_config.encoder.shared_qk = false;
    let mut ablated = EditorModel::new(ablation_config, vocab, 0).map_err(e)?;
    train(&mut ablated, &lm, &records, &[], &synthetic_train_config()).map_err(e)?;
    ablated.freeze();
    let ablation = run_protocol(
        &records,
        50,
        &ablated,
        &lm,
        &EvalConfig {
            skip_fluency: true,
            ..Default::default()
        },
    )
    .map_err(e)?;
    Ok(EndToEnd {
        full,
        ablation: Some(ablation),
        elapsed,
        lm_epochs: lm_report.epochs,
        best_epoch: outcome.best_epoch,
    })
}

fn synthetic_editing(run: &Result<EndToEnd, String>) -> Result<String, String> {
    let run = run.as_ref().map_err(Clone::clone)?;
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for r in &run.full {
        lines.push(format!(
            "b={} eff {:.1} gen {:.1} loc {:.1} flu {:.2}",
            r.batch_size, r.eff, r.gen, r.loc, r.flu
        ));
        let loc_min = if r.batch_size >= 50 { 85.0 } else { 90.0 };
        if r.eff < 90.0 || r.gen < 80.0 || r.loc < loc_min {
            failures.push(format!("b={} below threshold", r.batch_size));
        }
    }
    let drop = run.full[0].eff - run.full[2].eff;
    if drop > 5.0 {
        failures.push(format!("efficacy drop {drop:.1}"));
    }
    if run.elapsed >= Duration::from_secs(600) {
        failures.push(format!("took {:?}", run.elapsed));
    }
    let detail = format!(
        "{}; drop {drop:.1}; lm epochs {}, best editor epoch {}, pipeline {:.0}s",
        lines.join("; "),
        run.lm_epochs,
        run.best_epoch,
        run.elapsed.as_secs_f64()
    );
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{}: {detail}", failures.join(", ")))
    }
}

fn ablation_direction(run: &Result<EndToEnd, String>) -> Result<String, String> {
    let run = run.as_ref().map_err(Clone::clone)?;
    let full = run.full.iter().find(|r| r.batch_size == 50).ok_or("no b=50 report")?;
    let abl = run.ablation.as_ref().ok_or("no ablation report")?;
    let detail = format!(
        "b=50 full eff {:.1} loc {:.1} vs w/o shared MLP eff {:.1} loc {:.1}",
        full.eff, full.loc, abl.eff, abl.loc
    );
    ensure(abl.eff < full.eff && abl.loc < full.loc, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 8. Diagnostics oracle

fn diagnostics_oracle(run: &Result<EndToEnd, String>) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for trial in 0..3 {
        let vectors: Vec<Vec<f64>> = (0..500)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let report = high_sim_stats(&vectors, 0.6).map_err(e)?;
        let mut involved = vec![false; vectors.len()];
        let mut pairs = 0;
        for i in 0..vectors.len() {
            for j in 0..vectors.len() {
                if i == j {
                    continue;
                }
                let (a, b) = (&vectors[i], &vectors[j]);
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                if dot / (na * nb) > 0.6 {
                    involved[i] = true;
                    if i < j {
                        pairs += 1;
                    }
                }
            }
        }
        let pct = 100.0 * involved.iter().filter(|&&b| b).count() as f64 / vectors.len() as f64;
        ensure(report.pair_count == pairs && report.high_sim_percent == pct, || {
            format!(
                "trial {trial}: {} pairs / {:.2}% vs oracle {pairs} / {pct:.2}%",
                report.pair_count, report.high_sim_percent
            )
        })?;
    }
    let run = run.as_ref().map_err(Clone::clone)?;
    let mut parts = Vec::new();
    for r in &run.full {
        let outcomes = classify_retrievals(r);
        let counts = outcome_counts(&outcomes);
        for metric in QueryMetric::ALL {
            let total: usize = counts.iter().filter(|((m, _), _)| *m == metric).map(|(_, c)| c).sum();
            ensure(total == r.n, || format!("b={} {}: {total} of {}", r.batch_size, metric.name(), r.n))?;
        }
        let fp = kind_rate(&outcomes, QueryMetric::Loc, OutcomeKind::FalsePositive);
        ensure((fp - (100.0 - r.loc_abstention_rate())).abs() < 1e-9, || {
            format!("b={} false positives {fp} vs abstention {}", r.batch_size, r.loc_abstention_rate())
        })?;
        parts.push(format!(
            "b={} eff correct {:.0}% loc fp {fp:.0}%",
            r.batch_size,
            kind_rate(&outcomes, QueryMetric::Eff, OutcomeKind::Correct)
        ));
    }
    Ok(format!("3x500 vectors exact; partitions hold; {}", parts.join(", ")))
}

// ---------------------------------------------------------------------------
// 9. Data pipeline

fn fixture(eff: &str, loc: &str, split: Split) -> EditRecord {
    EditRecord {
        efficacy_q: eff.into(),
        generality_q: format!("{eff} again"),
        locality_q: loc.into(),
        ground_truth: "a".into(),
        edit_target: "b".into(),
        locality_gt: "c".into(),
        subject_tag: "x".into(),
        split,
        subject: None,
        relation: None,
        extra_locality: Vec::new(),
    }
}

fn small_pipeline(seed: u64) -> Result<String, String> {
    let bench = generate_synthetic(&SyntheticConfig {
        seed,
        n_records: 10,
        n_entities: 6,
        n_relations: 3,
        n_objects: 5,
        ..Default::default()
    })
    .map_err(e)?;
    let vocab = build_vocab(&bench.records, &bench.corpus);
    let (lm, _) = ToyLm::pretrain(
        LmConfig {
            d_lm: 16,
            heads: 2,
            layers: 1,
            seed,
            max_epochs: 5,
            loss_threshold: f64::INFINITY,
            ..Default::default()
        },
        vocab.clone(),
        &bench.corpus,
    )
    .map_err(e)?;
    let config = EditorConfig {
        encoder: EncoderConfig {
            d_enc: 8,
            d_rep: 16,
            ..Default::default()
        },
        prompt: PromptEncoderConfig {
            d_lm: 16,
            heads: 2,
            ..Default::default()
        },
    };
    let mut editor = EditorModel::new(config, vocab, seed).map_err(e)?;
    let cfg = TrainConfig {
        seed,
        epochs: 3,
        lr: 3e-3,
        ..Default::default()
    };
    train(&mut editor, &lm, &bench.records, &[], &cfg).map_err(e)?;
    editor.freeze();
    let report = run_protocol(&bench.records, 5, &editor, &lm, &EvalConfig::default()).map_err(e)?;
    Ok(serde_json::to_string(&report).map_err(e)? + &report.outcomes_jsonl())
}

fn data_pipeline() -> Result<String, String> {
    let records = vec![
        fixture("who leads a ?", "who leads a ?", Split::Train),
        fixture("where is b ?", "what is c ?", Split::Train),
        fixture("what is c ?", "where is d ?", Split::Test),
        fixture("when was e ?", "who made f ?", Split::Valid),
        fixture("  WHO MADE F ? ", "why g ?", Split::Test),
        fixture("how big is h ?", "how old is i ?", Split::Train),
    ];
    let cleaned = clean_overlaps(&records);
    let removed: Vec<usize> = cleaned.removed.iter().map(|r| r.index).collect();
    ensure(removed == [0, 2, 4], || format!("removed {removed:?}"))?;
    let again = clean_overlaps(&cleaned.kept);
    ensure(again.removed.is_empty() && again.kept == cleaned.kept, || "not idempotent".into())?;
    let round = parse_jsonl(&to_jsonl(&cleaned.kept)).map_err(e)?;
    ensure(round == cleaned.kept, || "jsonl round trip changed records".into())?;

    let mut kb = KnowledgeBase::new(3, 2, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..5 {
        kb.insert(
            RepVector {
                z: (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                role: Role::Key,
            },
            PromptMatrix {
                tokens: Tensor::new(&[2, 4], (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).map_err(e)?,
            },
            KnowledgeTriple::new(format!("s{i}"), "r", format!("o{i}")),
        )
        .map_err(e)?;
    }
    let bytes = kb.to_bytes();
    let back = KnowledgeBase::from_bytes(&bytes).map_err(e)?;
    ensure(back.to_bytes() == bytes, || "snapshot bytes differ after reload".into())?;
    ensure(back.entries() == kb.entries(), || "snapshot entries differ".into())?;

    let a = small_pipeline(7)?;
    let b = small_pipeline(7)?;
    ensure(a == b, || "same-seed metric JSON differs".into())?;
    let c = small_pipeline(8)?;
    Ok(format!(
        "removed {removed:?}, idempotent, snapshot bitwise, metric JSON identical ({} bytes; other seed {})",
        a.len(),
        if c == a { "identical" } else { "differs" }
    ))
}

fn main() -> ExitCode {
    let mut checks = vec![
        check("AC1", "gradient integrity", grad_integrity),
        check("AC2", "retrieval oracle", retrieval_oracle),
        check("AC3", "average-score arithmetic", average_arithmetic),
        check("AC4", "closed-form losses", closed_form_losses),
        check("AC5", "singleton-attention invariance", singleton_attention),
    ];
    let run = end_to_end();
    checks.push(check("AC6", "end-to-end synthetic editing", || synthetic_editing(&run)));
    checks.push(check("AC7", "ablation direction", || ablation_direction(&run)));
    checks.push(check("AC8", "diagnostics oracle", || diagnostics_oracle(&run)));
    checks.push(check("AC9", "data pipeline", data_pipeline));
    let failed: Vec<&str> = checks.iter().filter(|c| !c.pass).map(|c| c.id).collect();
    println!(
        "acceptance: {}/{} passed{}",
        checks.len() - failed.len(),
        checks.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!(", failed {}", failed.join(" "))
        }
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
