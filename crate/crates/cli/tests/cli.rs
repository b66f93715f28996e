use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 5

[data]
n_records = 12
n_entities = 8

[lm]
d_lm = 16
heads = 2
layers = 1
max_epochs = 5
loss_threshold = 1e3

[editor.encoder]
d_enc = 8
d_rep = 16

[editor.prompt]
d_lm = 16
heads = 2

[train]
epochs = 3
lr = 0.003
"#;

fn medrek(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_medrek"));
    cmd.args(args).env("RUST_LOG", "warn");
    for (k, _) in std::env::vars() {
        if k.starts_with("MEDREK_") {
            cmd.env_remove(k);
        }
    }
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    config: PathBuf,
    out: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("tiny.toml");
        std::fs::write(&config, TINY).unwrap();
        let out = dir.path().join("run");
        Self { _dir: dir, config, out }
    }

    fn run(&self, args: &[&str]) -> Output {
        let mut full = vec!["--config", s(&self.config), "--out", s(&self.out)];
        full.extend_from_slice(args);
        medrek(&full, &[])
    }

    fn file(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// gen-data, pretrain-lm and train.
    fn trained(self) -> Self {
        ok(&self.run(&["gen-data"]));
        let data = self.file("dataset.jsonl");
        ok(&self.run(&["pretrain-lm", "--data", s(&data), "--corpus", s(&self.file("corpus.tsv"))]));
        ok(&self.run(&["train", "--data", s(&data), "--lm", s(&self.file("lm.bin"))]));
        self
    }
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(medrek(&["--bogus"], &[]).status.code(), Some(2));
    assert_eq!(medrek(&["eval"], &[]).status.code(), Some(2));
    assert_eq!(medrek(&["nonsense"], &[]).status.code(), Some(2));
    assert_eq!(medrek(&["--help"], &[]).status.code(), Some(0));
}

#[test]
fn missing_input_exits_3_without_side_effects() {
    let f = Fixture::new();
    let out = f.run(&["stats", "--data", "/definitely/not/here.jsonl"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!f.out.exists());
}

#[test]
fn invalid_config_exits_4_without_side_effects() {
    let f = Fixture::new();
    std::fs::write(&f.config, "seed = 1\n[train]\nlearning_rate = 3\n").unwrap();
    assert_eq!(f.run(&["gen-data"]).status.code(), Some(4));
    std::fs::write(&f.config, TINY).unwrap();
    assert_eq!(f.run(&["gen-data", "--n-records", "1"]).status.code(), Some(4));
    std::fs::write(&f.config, TINY.replace("loss_threshold = 1e3", "loss_threshold = inf")).unwrap();
    assert_eq!(f.run(&["gen-data"]).status.code(), Some(4));
    assert!(!f.out.exists());
}

#[test]
fn non_convergence_exits_5() {
    let f = Fixture::new();
    ok(&f.run(&["gen-data"]));
    std::fs::write(&f.config, TINY.replace("loss_threshold = 1e3", "loss_threshold = 1e-9")).unwrap();
    let out = f.run(&[
        "pretrain-lm",
        "--data",
        s(&f.file("dataset.jsonl")),
        "--corpus",
        s(&f.file("corpus.tsv")),
    ]);
    assert_eq!(out.status.code(), Some(5), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!f.file("lm.bin").exists());
}

#[test]
fn flags_beat_environment_beat_config() {
    let f = Fixture::new();
    let lines = |f: &Fixture| std::fs::read_to_string(f.file("dataset.jsonl")).unwrap().lines().count();
    ok(&f.run(&["gen-data"]));
    assert_eq!(lines(&f), 12);
    let base = ["--config", s(&f.config), "--out", s(&f.out), "gen-data"];
    ok(&medrek(&base, &[("MEDREK_N_RECORDS", "14")]));
    assert_eq!(lines(&f), 14);
    let mut with_flag = base.to_vec();
    with_flag.extend(["--n-records", "16"]);
    ok(&medrek(&with_flag, &[("MEDREK_N_RECORDS", "14")]));
    assert_eq!(lines(&f), 16);
}

#[test]
fn pipeline_is_reproducible_and_verifiable() {
    let f = Fixture::new().trained();
    let data = f.file("dataset.jsonl");
    let (lm, editor) = (f.file("lm.bin"), f.file("editor.bin"));
    let eval = |out: &Path, extra: &[&str]| {
        let mut args = vec![
            "--config",
            s(&f.config),
            "--out",
            s(out),
            "eval",
            "--data",
            s(&data),
            "--lm",
            s(&lm),
            "--editor",
            s(&editor),
        ];
        args.extend_from_slice(extra);
        medrek(&args, &[])
    };
    ok(&eval(&f.out, &[]));
    for b in [1, 10] {
        assert!(f.file(&format!("metrics_b{b}.json")).exists());
    }
    assert!(!f.file("metrics_b50.json").exists(), "default sizes are filtered to the split");

    let again = f.out.with_file_name("again");
    let manifest = f.file("eval.manifest.json");
    ok(&eval(&again, &["--verify", s(&manifest)]));
    for b in [1, 10] {
        let name = format!("metrics_b{b}.json");
        assert_eq!(std::fs::read(f.file(&name)).unwrap(), std::fs::read(again.join(&name)).unwrap());
    }
    let changed = eval(&again, &["--verify", s(&manifest), "--mode", "never"]);
    assert_eq!(changed.status.code(), Some(4));

    let too_big = eval(&again, &["--batch-size", "13"]);
    assert_eq!(too_big.status.code(), Some(4), "{}", String::from_utf8_lossy(&too_big.stderr));
}

#[test]
fn oracle_retrieval_matches_across_batch_sizes() {
    let f = Fixture::new().trained();
    let out = f.run(&[
        "eval",
        "--data",
        s(&f.file("dataset.jsonl")),
        "--lm",
        s(&f.file("lm.bin")),
        "--editor",
        s(&f.file("editor.bin")),
        "--mode",
        "oracle",
        "--skip-fluency",
        "--batch-size",
        "1,10",
    ]);
    ok(&out);
    let read = |b: usize| -> serde_json::Value {
        serde_json::from_str(&std::fs::read_to_string(f.file(&format!("metrics_b{b}.json"))).unwrap()).unwrap()
    };
    let (one, ten) = (read(1), read(10));
    assert_eq!(one["eff"], ten["eff"]);
    assert_eq!(one["gen"], ten["gen"]);
    assert_eq!(one["loc"], 100.0);
}

#[test]
fn edit_inspect_and_diagnose() {
    let f = Fixture::new().trained();
    let data = f.file("dataset.jsonl");
    ok(&f.run(&["edit", "--data", s(&data), "--editor", s(&f.file("editor.bin"))]));
    let out = f.run(&["kb-inspect", "--kb", s(&f.file("kb.bin"))]);
    ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 13);
    let header: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(header["count"], 12);

    ok(&f.run(&[
        "diagnose",
        "--data",
        s(&data),
        "--lm",
        s(&f.file("lm.bin")),
        "--editor",
        s(&f.file("editor.bin")),
        "--batch-sizes",
        "1,4,12",
        "--threshold",
        "0.6",
    ]));
    let overlap = std::fs::read_to_string(f.file("overlap.csv")).unwrap();
    assert_eq!(overlap.lines().count(), 3, "header plus b=4 and b=12");
    let outcomes = std::fs::read_to_string(f.file("retrieval_outcomes_b4.csv")).unwrap();
    assert_eq!(outcomes.lines().count(), 1 + 3 * 12);

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(f.file("diagnose.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 5);
    let outputs = manifest["outputs"].as_array().unwrap();
    assert!(outputs.iter().all(|o| o["sha256"].as_str().unwrap().len() == 64));
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 4);
}
