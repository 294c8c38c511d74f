//! Runs the `mbt` binary end to end on a miniature config.

use std::path::Path;
use std::process::{Command, Output};

const MINI: &str = "\
[experiment]
name = mini
seed = 5
selection = last

[task]
kind = cipher
languages = xa, xb, xc
base_vocab_size = 24
sentence_len = 3-5
dev_size = 6
devtest_size = 6

[task.parallel]
xa-xb = 60
xb-xc = 30

[task.mono]
xa = 20
xb = 20
xc = 20

[tokenizer]
vocab_sizes = 60, 90
use = 90
compare_steps = 3

[model]
preset = tiny
d_model = 8
d_ff = 16
n_layers_enc = 1
n_layers_dec = 1
n_heads = 2

[pretrain]
max_steps = 6
validate_every = 3
tokens_per_batch = 200
valid_max_sentences = 3

[finetune]
max_steps = 3
validate_every = 3
tokens_per_batch = 200
valid_max_sentences = 3

[round.1]
strategy = topk:10
mono = xa:10, xc:10

[round.2]
strategy = beam:2
mono = xb:10

[sweep]
strategies = beam:2, unconstrained
volumes = 5, 10

[eval]
strategy = beam:2
dev_max_sentences = 4
devtest_max_sentences = 4
";

fn mbt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mbt"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn mbt")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("mini.conf"), MINI).unwrap();
    dir
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn dry_run_validates_without_side_effects() {
    let dir = setup();
    let o = mbt(dir.path(), &["pipeline", "--config", "mini.conf", "--dry-run"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let entries: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(entries.len(), 1, "dry run wrote files");
}

#[test]
fn config_errors_exit_2_with_line_numbers() {
    let dir = setup();
    let bad = MINI.replace("strategy = topk:10", "strategy = topk:0");
    std::fs::write(dir.path().join("bad.conf"), bad).unwrap();
    let o = mbt(dir.path(), &["pipeline", "--config", "bad.conf", "--dry-run"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 49"), "{}", stderr(&o));

    let o = mbt(dir.path(), &["prepare", "--config", "missing.conf"]);
    assert_eq!(o.status.code(), Some(2));
    let o = mbt(dir.path(), &["prepare"]);
    assert_eq!(o.status.code(), Some(2));
    let o = mbt(dir.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn prepare_writes_corpora_and_vocabularies() {
    let dir = setup();
    let o = mbt(dir.path(), &["prepare", "--config", "mini.conf", "--out", "run"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let run = dir.path().join("run");
    for f in [
        "data/manifest.txt",
        "data/train.xa-xb.xa",
        "data/train.xa-xb.xb",
        "data/train.xc",
        "data/dev.xa",
        "data/devtest.xc",
        "vocab/bpe60.txt",
        "vocab/bpe90.txt",
        "stages/prepare.done",
        "stages/bpe.done",
        "manifest.txt",
    ] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    assert!(!run.join("models").exists());
    // Without --out the run directory is named by config hash and time.
    let o = mbt(dir.path(), &["prepare", "--config", "mini.conf"]);
    assert_eq!(o.status.code(), Some(0));
    let runs: Vec<_> = std::fs::read_dir(dir.path().join("runs")).unwrap().collect();
    assert_eq!(runs.len(), 1);
}

#[test]
fn pipeline_resume_translate_and_average() {
    let dir = setup();
    let o = mbt(dir.path(), &["pipeline", "--config", "mini.conf", "--out", "run"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let run = dir.path().join("run");
    for f in [
        "vocab/comparison.tsv",
        "models/teacher/model.ckpt",
        "models/baseline/dev.tsv",
        "models/round-2/summary.txt",
        "rounds/round1/report.txt",
        "rounds/round2/report.txt",
        "sweep.tsv",
        "sweep/unconstrained-v10/report.txt",
        "matrix_grid.tsv",
        "matrix_flat.tsv",
    ] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let sweep = std::fs::read_to_string(run.join("sweep.tsv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 1 + 4);
    // Six ordered directions in the devtest matrix.
    let flat = std::fs::read_to_string(run.join("matrix_flat.tsv")).unwrap();
    assert_eq!(flat.lines().count(), 7);

    let manifest = std::fs::read_to_string(run.join("manifest.txt")).unwrap();
    let ckpt = run.join("models/teacher/model.ckpt");
    let before = std::fs::metadata(&ckpt).unwrap().modified().unwrap();
    let o = mbt(dir.path(), &["pipeline", "--config", "mini.conf", "--out", "run", "--resume"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(std::fs::metadata(&ckpt).unwrap().modified().unwrap(), before);
    assert_eq!(std::fs::read_to_string(run.join("manifest.txt")).unwrap(), manifest);

    // A resumed run that lost a stage redoes only that stage, identically.
    std::fs::remove_file(run.join("stages/matrix.done")).unwrap();
    std::fs::remove_file(run.join("matrix_flat.tsv")).unwrap();
    let o = mbt(dir.path(), &["evaluate", "--config", "mini.conf", "--out", "run", "--resume"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(run.join("matrix_flat.tsv")).unwrap(), flat);

    std::fs::write(dir.path().join("in.txt"), std::fs::read_to_string(run.join("data/dev.xa")).unwrap()).unwrap();
    let model = run.join("models/round-2/model.ckpt");
    let vocab = run.join("vocab/bpe90.txt");
    let args = [
        "translate",
        "--model",
        model.to_str().unwrap(),
        "--vocab",
        vocab.to_str().unwrap(),
        "--input",
        "in.txt",
        "--output",
        "out.txt",
        "--src",
        "xa",
        "--tgt",
        "xb",
        "--strategy",
        "topk:5",
        "--seed",
        "3",
    ];
    let o = mbt(dir.path(), &args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = std::fs::read_to_string(dir.path().join("out.txt")).unwrap();
    let scores = std::fs::read_to_string(dir.path().join("out.txt.scores")).unwrap();
    assert_eq!(out.lines().count(), 6);
    assert_eq!(scores.lines().count(), 6);
    for l in scores.lines() {
        let (lp, len) = l.split_once('\t').unwrap();
        assert!(lp.parse::<f64>().unwrap() <= 0.0);
        len.parse::<usize>().unwrap();
    }
    // Sampling is reproducible for a fixed seed.
    let o = mbt(dir.path(), &args);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(std::fs::read_to_string(dir.path().join("out.txt")).unwrap(), out);

    let ckpts: Vec<String> = std::fs::read_dir(run.join("models/teacher/checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().path().to_string_lossy().into_owned())
        .collect();
    assert!(!ckpts.is_empty());
    let mut args = vec!["average-ckpt", "--output", "avg.ckpt"];
    args.extend(ckpts.iter().map(String::as_str));
    let o = mbt(dir.path(), &args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(dir.path().join("avg.ckpt").is_file());

    // A corrupt checkpoint is a runtime failure.
    std::fs::write(dir.path().join("bad.ckpt"), b"not a checkpoint").unwrap();
    let o = mbt(
        dir.path(),
        &[
            "translate",
            "--model",
            "bad.ckpt",
            "--vocab",
            vocab.to_str().unwrap(),
            "--input",
            "in.txt",
            "--output",
            "out2.txt",
            "--src",
            "xa",
            "--tgt",
            "xb",
        ],
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}
