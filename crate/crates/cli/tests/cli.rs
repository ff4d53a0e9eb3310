use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use graphtext::checkpoint::Checkpoint;
use graphtext::corpus::{CorpusConfig, GraphTextCorpus};

const SMALL: &str = r#"
[corpus]
max_len = 24

[corpus.word_embeddings]
dim = 16
epochs = 1

[model.text]
layers = 1
width = 16
heads = 2
output_dim = 16

[model.graph]
hidden = 16
output_dim = 16

[pretrain]
epochs = 1
batch_size = 32
learning_rate = 0.001

[prompt]
epochs = 5

[evaluation]
tasks = 3
ways = 3
"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_graphtext"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small synthetic corpus, a tiny-model config and a checkpoint trained on it.
struct Fixture {
    _dir: tempfile::TempDir,
    corpus: PathBuf,
    config: PathBuf,
    checkpoint: PathBuf,
}

fn fixture(extra: &[&str]) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let config = dir.path().join("run.toml");
    let checkpoint = dir.path().join("model.ckpt");
    fs::write(&config, SMALL).unwrap();
    let o = run(&["synth", "--out", p(&corpus), "--classes", "4", "--docs-per-class", "12", "--p-in", "0.3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut args = vec!["pretrain", "--config", p(&config), "--corpus", p(&corpus), "--out", p(&checkpoint)];
    args.extend_from_slice(extra);
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    Fixture {
        _dir: dir,
        corpus,
        config,
        checkpoint,
    }
}

#[test]
fn synth_is_deterministic_and_loadable() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(&["synth", "--out", p(out), "--seed", "7", "--docs-per-class", "20"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for name in ["documents.tsv", "edges.tsv", "labels.tsv", "classes.tsv"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let corpus = GraphTextCorpus::load(&a, &CorpusConfig::default()).unwrap();
    assert_eq!(corpus.len(), 200);
    assert_eq!(corpus.num_classes(), 10);
}

#[test]
fn synth_rejects_p_in_not_above_p_out() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["synth", "--out", p(&dir.path().join("c")), "--p-in", "0.01", "--p-out", "0.01"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("p_in"), "{}", stderr(&o));
}

#[test]
fn pretrain_missing_edges_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c");
    fs::create_dir(&corpus).unwrap();
    fs::write(corpus.join("documents.tsv"), "a\thello world\nb\thello there\n").unwrap();
    fs::write(corpus.join("classes.tsv"), "x\tgreeting\n").unwrap();
    let o = run(&["pretrain", "--corpus", p(&corpus), "--out", p(&dir.path().join("m"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("edges.tsv"), "{}", stderr(&o));
}

#[test]
fn bad_arguments_and_unknown_config_keys_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(&config, "[pretrain]\nlearning_rat = 0.1\n").unwrap();
    let o = run(&["synth", "--out", p(&dir.path().join("c")), "--config", p(&config)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rat"));
    let o = run(&["pretrain", "--corpus", "x", "--out", "y", "--loss-mask", "L4"]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["fewshot", "--checkpoint", "x", "--corpus", "y", "--init", "warm"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn pretrain_writes_checkpoint_and_log() {
    let f = fixture(&["--loss-mask", "L1", "--seed", "3"]);
    let ck = Checkpoint::load(&f.checkpoint).unwrap();
    assert_eq!(ck.seed, 3);
    assert_eq!(ck.config.pretrain.loss_mask.to_string(), "L1");
    let log = fs::read_to_string(format!("{}.log", f.checkpoint.display())).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "epoch batch L1 L2 L3 total expTau seconds");
    // 48 documents in batches of 32.
    assert_eq!(lines.len(), 3);
    for line in &lines[1..] {
        let fields: Vec<f64> = line.split(' ').map(|s| s.parse().unwrap()).collect();
        assert_eq!(fields.len(), 8);
        // Only the text-node term contributes under this mask.
        assert_eq!(fields[2], fields[5]);
    }
}

#[test]
fn numeric_failure_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c");
    let config = dir.path().join("run.toml");
    fs::write(&config, SMALL).unwrap();
    assert!(run(&["synth", "--out", p(&corpus), "--classes", "3", "--docs-per-class", "10"]).status.success());
    // A weight that overflows single precision makes the total infinite.
    let o = run(&[
        "pretrain",
        "--config",
        p(&config),
        "--corpus",
        p(&corpus),
        "--out",
        p(&dir.path().join("m")),
        "--lambda",
        "1e39",
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"));
}

#[test]
fn zeroshot_is_deterministic_and_checks_templates() {
    let f = fixture(&[]);
    let args = ["zeroshot", "--checkpoint", p(&f.checkpoint), "--corpus", p(&f.corpus), "--seed", "5"];
    let a = run(&args);
    let b = run(&args);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(a.stdout, b.stdout);
    let table = String::from_utf8(a.stdout).unwrap();
    assert!(table.starts_with("zero-shot (label text)"));
    assert_eq!(table.lines().filter(|l| l.trim_start().starts_with(char::is_numeric)).count(), 3);

    let mut with_template = args.to_vec();
    with_template.extend(["--template", "a paper about [CLASS]"]);
    let o = run(&with_template);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8(o.stdout).unwrap().starts_with("zero-shot (template)"));

    let mut bad = args.to_vec();
    bad.extend(["--template", "a paper about"]);
    let o = run(&bad);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("[CLASS]"));
}

#[test]
fn fewshot_reports_and_validation() {
    let f = fixture(&[]);
    let base = ["fewshot", "--checkpoint", p(&f.checkpoint), "--corpus", p(&f.corpus)];
    let mut zero = base.to_vec();
    zero.extend(["--shots", "0"]);
    let o = run(&zero);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("zeroshot"));

    let out = f.checkpoint.with_extension("jsonl");
    let mut args = base.to_vec();
    args.extend(["--config", p(&f.config), "--shots", "2", "--prompt-len", "2", "--out", p(&out)]);
    for init in ["context", "random", "label-only"] {
        let mut a = args.clone();
        a.extend(["--init", init]);
        let o = run(&a);
        assert!(o.status.success(), "{init}: {}", stderr(&o));
        let text = String::from_utf8(o.stdout).unwrap();
        assert!(text.contains("2-shot"), "{text}");
        assert!(text.contains("zero-shot (label text) on the same queries"));
        let json = fs::read_to_string(&out).unwrap();
        // Three tasks plus a summary, for each of the two reports.
        assert_eq!(json.lines().count(), 8);
    }
}

#[test]
fn corrupted_checkpoint_exits_one() {
    let f = fixture(&[]);
    let mut bytes = fs::read(&f.checkpoint).unwrap();
    bytes[8] = 99;
    fs::write(&f.checkpoint, bytes).unwrap();
    let o = run(&["zeroshot", "--checkpoint", p(&f.checkpoint), "--corpus", p(&f.corpus)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("version 99"), "{}", stderr(&o));
}
