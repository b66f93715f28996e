use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use medrek_core::dataset::{clean_overlaps, load_jsonl, subject_stats, to_jsonl, EditRecord};
use medrek_core::diagnostics::{
    classify_retrievals, high_sim_stats, outcome_counts, outcomes_to_csv, overlaps_to_csv, OverlapReport,
};
use medrek_core::editor::EditorModel;
use medrek_core::evaluation::{default_batch_sizes, run_protocol, MetricReport};
use medrek_core::kb::KnowledgeBase;
use medrek_core::lm::ToyLm;
use medrek_core::synthetic::{build_vocab, corpus_to_tsv, generate_synthetic, load_corpus};
use medrek_core::training::{curve_to_csv, train_with};
use serde::Serialize;
use serde_json::json;

use crate::config::{Config, SplitSel};
use crate::exit::{io, validation, CliResult};
use crate::manifest::{hash_entry, now, FileHash, RunManifest};
use crate::{Cli, Command};

/// Collects a run's inputs and outputs; nothing touches the output
/// directory until [`Run::finish`].
struct Run {
    command: &'static str,
    args: BTreeMap<String, String>,
    inputs: Vec<FileHash>,
    outputs: Vec<(String, Vec<u8>)>,
    started_at: String,
}

impl Run {
    fn new(command: &'static str) -> Self {
        Self {
            command,
            args: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_at: now(),
        }
    }

    /// Registers an input file, failing if it cannot be read.
    fn input(&mut self, flag: &str, path: &Path) -> CliResult<PathBuf> {
        if !path.is_file() {
            return Err(io(format!("--{flag}: {} does not exist", path.display())));
        }
        self.inputs.push(hash_entry(path)?);
        self.args.insert(flag.to_string(), path.display().to_string());
        Ok(path.to_path_buf())
    }

    fn arg(&mut self, key: &str, value: impl ToString) {
        self.args.insert(key.to_string(), value.to_string());
    }

    fn output(&mut self, name: impl Into<String>, bytes: impl Into<Vec<u8>>) {
        self.outputs.push((name.into(), bytes.into()));
    }

    fn json(&mut self, name: impl Into<String>, value: &impl Serialize) {
        let mut text = serde_json::to_string_pretty(value).expect("report serializes");
        text.push('\n');
        self.output(name, text);
    }

    fn finish(self, cfg: &Config, reference: Option<&RunManifest>) -> CliResult<()> {
        std::fs::create_dir_all(&cfg.out).map_err(|e| io(format!("{}: {e}", cfg.out.display())))?;
        let mut outputs = Vec::with_capacity(self.outputs.len());
        for (name, bytes) in &self.outputs {
            let path = cfg.out.join(name);
            std::fs::write(&path, bytes).map_err(|e| io(format!("{}: {e}", path.display())))?;
            outputs.push(hash_entry(&path)?);
            info!("wrote {}", path.display());
        }
        let manifest = RunManifest {
            command: self.command.to_string(),
            args: self.args,
            seed: cfg.seed,
            config: cfg.clone(),
            inputs: self.inputs,
            outputs,
            started_at: self.started_at,
            finished_at: now(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        };
        let path = cfg.out.join(RunManifest::file_name(self.command));
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        std::fs::write(&path, text).map_err(|e| io(format!("{}: {e}", path.display())))?;
        if let Some(reference) = reference {
            let problems = manifest.diff(reference);
            if !problems.is_empty() {
                return Err(validation(format!("verification failed: {}", problems.join("; "))));
            }
            info!("verified {} files against the reference manifest", manifest.outputs.len() + manifest.inputs.len());
        }
        Ok(())
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenData(_) => "gen-data",
        Command::CleanData(_) => "clean-data",
        Command::Stats(_) => "stats",
        Command::PretrainLm(_) => "pretrain-lm",
        Command::Train(_) => "train",
        Command::Edit(_) => "edit",
        Command::Eval(_) => "eval",
        Command::Diagnose(_) => "diagnose",
        Command::KbInspect(_) => "kb-inspect",
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    let reference = cli.verify.as_deref().map(RunManifest::load).transpose()?;
    let mut run = Run::new(command_name(&cli.command));
    if let Some(p) = &cli.config {
        run.input("config", p)?;
    }
    match cli.command {
        Command::GenData(a) => {
            if let Some(n) = a.n_records {
                cfg.data.n_records = n;
            }
            if let Some(n) = a.n_valid {
                cfg.data.n_valid = n;
            }
            if let Some(n) = a.n_test {
                cfg.data.n_test = n;
            }
            prepare(&mut cfg)?;
            let bench = generate_synthetic(&cfg.data)?;
            info!("{} records, {} corpus pairs", bench.records.len(), bench.corpus.len());
            run.output("dataset.jsonl", to_jsonl(&bench.records));
            run.output("corpus.tsv", corpus_to_tsv(&bench.corpus));
        }
        Command::CleanData(a) => {
            prepare(&mut cfg)?;
            let records = load_records(&mut run, &a.data)?;
            let report = clean_overlaps(&records);
            info!("kept {}, removed {}", report.kept.len(), report.removed.len());
            run.output("cleaned.jsonl", to_jsonl(&report.kept));
            run.json(
                "clean_report.json",
                &json!({
                    "kept": report.kept.len(),
                    "removed": report.removed,
                    "removed_per_split": report.removed_per_split(),
                }),
            );
        }
        Command::Stats(a) => {
            prepare(&mut cfg)?;
            let records = load_records(&mut run, &a.data)?;
            let stats = subject_stats(&records);
            print!("{}", stats.to_csv());
            run.output("subject_stats.csv", stats.to_csv());
        }
        Command::PretrainLm(a) => {
            if let Some(n) = a.max_epochs {
                cfg.lm.max_epochs = n;
            }
            prepare(&mut cfg)?;
            let records = load_records(&mut run, &a.data)?;
            let corpus_path = run.input("corpus", &a.corpus)?;
            let corpus = load_corpus(&corpus_path)?;
            let vocab = build_vocab(&records, &corpus);
            info!("vocabulary of {} tokens, {} corpus pairs", vocab.len(), corpus.len());
            let (lm, report) = ToyLm::pretrain(cfg.lm.clone(), vocab, &corpus)?;
            info!(
                "converged after {} epochs: answer loss {:.4}, accuracy {:.3}",
                report.epochs, report.answer_loss, report.answer_accuracy
            );
            run.output("lm.bin", lm.to_bytes());
            run.json("pretrain_report.json", &report);
        }
        Command::Train(a) => {
            if let Some(v) = a.epochs {
                cfg.train.epochs = v;
            }
            if let Some(v) = a.lr {
                cfg.train.lr = v;
            }
            if let Some(v) = a.batch_size {
                cfg.train.batch_size = v;
            }
            if let Some(v) = a.shared_qk {
                cfg.editor.encoder.shared_qk = v;
            }
            prepare(&mut cfg)?;
            let records = load_records(&mut run, &a.data)?;
            let lm = load_lm(&mut run, &a.lm, &cfg)?;
            let train_set = SplitSel::Train.select(&records);
            let valid = SplitSel::Valid.select(&records);
            if train_set.is_empty() {
                return Err(validation("the dataset has no train records"));
            }
            let mut editor = EditorModel::new(cfg.editor.clone(), lm.vocab.clone(), cfg.seed)?;
            check_vocab(&editor, &records)?;
            info!(
                "training on {} records ({} for selection), {} epochs",
                train_set.len(),
                valid.len(),
                cfg.train.epochs
            );
            let outcome = train_with(&mut editor, &lm, &train_set, &valid, &cfg.train, |epoch, l| {
                if epoch % 10 == 0 {
                    info!("epoch {epoch}: total {:.4} contra {:.4} edit {:.4}", l.total, l.contra, l.edit);
                }
            })?;
            editor.freeze();
            info!("best epoch {} (loss {:.4})", outcome.best_epoch, outcome.best_loss);
            run.output("editor.bin", editor.to_bytes());
            run.output("loss_curve.csv", curve_to_csv(&outcome.curve));
            run.output("valid_curve.csv", curve_to_csv(&outcome.valid_curve));
            run.json(
                "train_report.json",
                &json!({
                    "best_epoch": outcome.best_epoch,
                    "best_loss": outcome.best_loss,
                    "steps": outcome.steps,
                    "train_records": train_set.len(),
                    "valid_records": valid.len(),
                }),
            );
        }
        Command::Edit(a) => {
            if let Some(s) = a.split {
                cfg.eval.split = s;
            }
            prepare(&mut cfg)?;
            let records = load_split(&mut run, &a.data, cfg.eval.split)?;
            let editor = load_editor(&mut run, &a.editor)?;
            check_vocab(&editor, &records)?;
            let mut kb = KnowledgeBase::for_editor(&editor);
            for r in &records {
                kb.insert_edit(&r.triple(), &editor)?;
            }
            info!("knowledge base with {} entries", kb.len());
            run.output("kb.bin", kb.to_bytes());
        }
        Command::Eval(a) => {
            if let Some(s) = a.split {
                cfg.eval.split = s;
            }
            if !a.batch_sizes.is_empty() {
                cfg.eval.batch_sizes = Some(a.batch_sizes.clone());
            }
            if let Some(m) = a.mode {
                cfg.eval.mode = m;
            }
            if a.skip_fluency {
                cfg.eval.skip_fluency = true;
            }
            prepare(&mut cfg)?;
            let records = load_split(&mut run, &a.data, cfg.eval.split)?;
            let sizes = batch_sizes(cfg.eval.batch_sizes.as_deref(), records.len())?;
            let lm = load_lm(&mut run, &a.lm, &cfg)?;
            let editor = load_editor(&mut run, &a.editor)?;
            check_compatible(&editor, &lm)?;
            check_vocab(&editor, &records)?;
            let eval = cfg.eval.eval_config();
            let mut csv = format!("{}\n", MetricReport::CSV_HEADER);
            for b in sizes {
                let report = run_protocol(&records, b, &editor, &lm, &eval)?;
                info!(
                    "b={b}: eff {:.2} gen {:.2} loc {:.2} flu {:.3} avg {:.2}",
                    report.eff, report.gen, report.loc, report.flu, report.avg
                );
                let _ = writeln!(csv, "{}", report.csv_row());
                run.json(format!("metrics_b{b}.json"), &report);
                run.output(format!("outcomes_b{b}.jsonl"), report.outcomes_jsonl());
            }
            run.output("metrics.csv", csv);
        }
        Command::Diagnose(a) => {
            if let Some(s) = a.split {
                cfg.eval.split = s;
            }
            if let Some(t) = a.threshold {
                cfg.diagnose.threshold = t;
            }
            if !a.batch_sizes.is_empty() {
                cfg.diagnose.batch_sizes = Some(a.batch_sizes.clone());
            }
            prepare(&mut cfg)?;
            let records = load_split(&mut run, &a.data, cfg.eval.split)?;
            let sizes = batch_sizes(cfg.diagnose.batch_sizes.as_deref(), records.len())?;
            let lm = load_lm(&mut run, &a.lm, &cfg)?;
            let editor = load_editor(&mut run, &a.editor)?;
            check_compatible(&editor, &lm)?;
            check_vocab(&editor, &records)?;
            diagnose(&mut run, &cfg, &records, &sizes, &editor, &lm)?;
        }
        Command::KbInspect(a) => {
            prepare(&mut cfg)?;
            let path = run.input("kb", &a.kb)?;
            let kb = KnowledgeBase::load(&path)?;
            let mut lines = serde_json::to_string(&kb.header()).expect("header serializes") + "\n";
            for e in kb.entries() {
                let mut v = json!({
                    "id": e.id,
                    "subject": e.triple.subject,
                    "relation": e.triple.relation,
                    "object": e.triple.object,
                    "key_norm": e.key.z.iter().map(|x| x * x).sum::<f64>().sqrt(),
                });
                if a.vectors {
                    v["key"] = json!(e.key.z);
                    v["prompt"] = json!(e.prompt.tokens.data());
                }
                lines.push_str(&v.to_string());
                lines.push('\n');
            }
            print!("{lines}");
            run.output("kb_inspect.jsonl", lines);
        }
    }
    run.finish(&cfg, reference.as_ref())
}

fn prepare(cfg: &mut Config) -> CliResult<()> {
    cfg.propagate_seed();
    cfg.validate()
}

fn load_records(run: &mut Run, path: &Path) -> CliResult<Vec<EditRecord>> {
    let path = run.input("data", path)?;
    let records = load_jsonl(&path)?;
    if records.is_empty() {
        return Err(validation(format!("{} contains no records", path.display())));
    }
    Ok(records)
}

fn load_split(run: &mut Run, path: &Path, split: SplitSel) -> CliResult<Vec<EditRecord>> {
    run.arg("split", format!("{split:?}").to_lowercase());
    let records = split.select(&load_records(run, path)?);
    if records.is_empty() {
        return Err(validation(format!("split {split:?} of {} is empty", path.display())));
    }
    Ok(records)
}

fn load_lm(run: &mut Run, path: &Path, cfg: &Config) -> CliResult<ToyLm> {
    let path = run.input("lm", path)?;
    let lm = ToyLm::load(&path)?;
    if lm.d_lm() != cfg.editor.prompt.d_lm {
        return Err(validation(format!(
            "LM width {} differs from editor.prompt.d_lm {}",
            lm.d_lm(),
            cfg.editor.prompt.d_lm
        )));
    }
    Ok(lm)
}

fn load_editor(run: &mut Run, path: &Path) -> CliResult<EditorModel> {
    let path = run.input("editor", path)?;
    Ok(EditorModel::load(&path)?)
}

fn check_compatible(editor: &EditorModel, lm: &ToyLm) -> CliResult<()> {
    if editor.d_lm() != lm.d_lm() || editor.vocab != lm.vocab {
        return Err(validation("editor and LM checkpoints do not share width and vocabulary"));
    }
    Ok(())
}

/// Every record must be expressible in the shared vocabulary.
fn check_vocab(editor: &EditorModel, records: &[EditRecord]) -> CliResult<()> {
    for r in records {
        for text in [&r.efficacy_q, &r.generality_q, &r.locality_q, &r.edit_target, &r.locality_gt] {
            editor.tokens(text)?;
        }
        editor.tokens(&r.triple().full_text())?;
    }
    Ok(())
}

/// Explicit sizes must fit the split; the standard list is filtered to it.
fn batch_sizes(explicit: Option<&[usize]>, n: usize) -> CliResult<Vec<usize>> {
    match explicit {
        Some(sizes) => {
            if let Some(&b) = sizes.iter().find(|&&b| b == 0 || b > n) {
                return Err(validation(format!("batch size {b} does not fit a split of {n} records")));
            }
            Ok(sizes.to_vec())
        }
        None => Ok(default_batch_sizes(n)),
    }
}

fn diagnose(
    run: &mut Run,
    cfg: &Config,
    records: &[EditRecord],
    sizes: &[usize],
    editor: &EditorModel,
    lm: &ToyLm,
) -> CliResult<()> {
    let keys: Vec<Vec<f64>> = records
        .iter()
        .map(|r| editor.key_rep(&r.triple()).map(|k| k.z))
        .collect::<Result<_, _>>()?;
    let mut overlaps: Vec<OverlapReport> = Vec::new();
    for &b in sizes.iter().filter(|&&b| b >= 2) {
        let report = high_sim_stats(&keys[..b], cfg.diagnose.threshold)?;
        info!("b={b}: {:.2}% of keys in a high-similarity pair", report.high_sim_percent);
        overlaps.push(report);
    }
    run.output("overlap.csv", overlaps_to_csv(&overlaps));
    run.json("overlap.json", &overlaps);

    let mut eval = cfg.eval.eval_config();
    eval.skip_fluency = true;
    let mut summary = Vec::new();
    for &b in sizes {
        let report = run_protocol(records, b, editor, lm, &eval)?;
        let outcomes = classify_retrievals(&report);
        let counts: BTreeMap<String, usize> = outcome_counts(&outcomes)
            .into_iter()
            .map(|((m, k), c)| (format!("{}.{}", m.name(), k.name()), c))
            .collect();
        summary.push(json!({
            "batch_size": b,
            "n": report.n,
            "counts": counts,
            "loc_abstention_rate": report.loc_abstention_rate(),
        }));
        run.output(format!("retrieval_outcomes_b{b}.csv"), outcomes_to_csv(&outcomes));
    }
    run.json("retrieval_summary.json", &summary);

    let mut vectors = String::new();
    for (r, z) in records.iter().zip(&keys) {
        let _ = writeln!(
            vectors,
            "{}",
            json!({"split": r.split.to_string(), "subject_tag": r.subject_tag, "key": z})
        );
    }
    run.output("key_vectors.jsonl", vectors);
    Ok(())
}
