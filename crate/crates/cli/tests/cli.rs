//! Runs the `qembed` binary against the shipped fixture.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qembed::encoder::{EncoderConfig, ModelParams};
use qembed::retrieval::{write_corpus, Document};
use qembed::textproc::build_vocab;
use qembed::training::save_checkpoint;

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/synthetic")
}

fn qembed(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qembed")).args(args).output().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn eval_reproduces_committed_metrics() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::copy(fixture().join("filters.json"), dir.path().join("filters.json")).unwrap();
    let config = fixture().join("config.toml");
    let checkpoint = fixture().join("checkpoint.qemb");
    ok(&qembed(&[
        "eval",
        "--config",
        path(&config),
        "--checkpoint",
        path(&checkpoint),
        "--out",
        path(dir.path()),
    ]));
    let got = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    let want = std::fs::read_to_string(fixture().join("expected_metrics.jsonl")).unwrap();
    assert_eq!(got, want);
    let roc = std::fs::read_to_string(dir.path().join("roc_dup.tsv")).unwrap();
    assert!(roc.starts_with("0\t0\n"));
    assert!(roc.trim_end().ends_with("1\t1"));
}

#[test]
fn full_pipeline_reproduces_committed_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture().join("config.toml");
    let out = path(dir.path());
    ok(&qembed(&["train", "--config", path(&config), "--out", out]));
    ok(&qembed(&["calibrate", "--config", path(&config), "--out", out]));
    ok(&qembed(&["eval", "--config", path(&config), "--out", out]));
    for (ours, theirs) in [
        ("checkpoint.qemb", "checkpoint.qemb"),
        ("filters.json", "filters.json"),
        ("metrics.jsonl", "expected_metrics.jsonl"),
    ] {
        let a = std::fs::read(dir.path().join(ours)).unwrap();
        let b = std::fs::read(fixture().join(theirs)).unwrap();
        assert!(a == b, "{ours} differs from the committed {theirs}");
    }
    let log = std::fs::read_to_string(dir.path().join("train.log")).unwrap();
    // 240/16 + 160/16 batches per round, three rounds
    assert_eq!(log.lines().count(), 75);
    assert!(log.lines().all(|l| l.split('\t').count() == 5));
    let vocab = std::fs::read_to_string(dir.path().join("vocab.txt")).unwrap();
    assert!(vocab.starts_with("<pad>\n<unk>\n"));
}

#[test]
fn seed_flag_changes_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture().join("config.toml");
    let out = path(dir.path());
    ok(&qembed(&[
        "train",
        "--config",
        path(&config),
        "--out",
        out,
        "--seed",
        "8",
    ]));
    let a = std::fs::read(dir.path().join("checkpoint.qemb")).unwrap();
    let b = std::fs::read(fixture().join("checkpoint.qemb")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn search_with_large_k_ranks_everything() {
    let checkpoint = fixture().join("checkpoint.qemb");
    let corpus = fixture().join("distractors.jsonl");
    let stdout = ok(&qembed(&[
        "search",
        "w01 w03 w05",
        "--checkpoint",
        path(&checkpoint),
        "--corpus",
        path(&corpus),
        "--k",
        "100000",
    ]));
    let rows: Vec<Vec<&str>> = stdout.lines().map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 200);
    let sims: Vec<f64> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    assert!(sims.windows(2).all(|w| w[0] >= w[1]));
    assert_eq!(rows[0][0], "1");
}

#[test]
fn search_threshold_above_everything_means_no_answer() {
    let checkpoint = fixture().join("checkpoint.qemb");
    let corpus = fixture().join("distractors.jsonl");
    let args = [
        "search",
        "w01 w03",
        "--checkpoint",
        path(&checkpoint),
        "--corpus",
        path(&corpus),
    ];
    let high = ok(&qembed(&[&args[..], &["--k", "3", "--threshold", "1.5"]].concat()));
    assert_eq!(high.trim(), "no answer");
    let low = ok(&qembed(&[&args[..], &["--k", "3", "--threshold", "-1.5"]].concat()));
    assert_eq!(low.lines().count(), 3);
}

#[test]
fn ingest_writes_canonical_records() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw.tsv");
    let rows: String = (0..10)
        .map(|i| format!("question {i}\tother {i}\t{}\n", i % 2))
        .collect();
    std::fs::write(&raw, rows).unwrap();
    let out = dir.path().join("clean");
    let stdout = ok(&qembed(&[
        "ingest",
        path(&raw),
        "--format",
        "pairs_labeled",
        "--out",
        path(&out),
    ]));
    assert!(
        stdout.starts_with("read 10, written 10, malformed 0, dropped 0"),
        "{stdout}"
    );
    let text = std::fs::read_to_string(out.join("raw.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 10);
    assert_eq!(
        text.lines().nth(1).unwrap(),
        r#"{"text_a":"question 1","text_b":"other 1","label":1}"#
    );
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    // config errors: missing file, bad value, unknown format, clap usage
    let missing = qembed(&["train", "--config", path(&d.join("nope.toml"))]);
    assert_eq!(missing.status.code(), Some(2));
    let bad_cfg = d.join("bad.toml");
    let text = std::fs::read_to_string(fixture().join("config.toml")).unwrap();
    std::fs::write(&bad_cfg, text.replace("epochs = 3", "epochs = 0")).unwrap();
    assert_eq!(qembed(&["train", "--config", path(&bad_cfg)]).status.code(), Some(2));
    let raw = d.join("raw.tsv");
    std::fs::write(&raw, "a\tb\n").unwrap();
    let fmt = qembed(&["ingest", path(&raw), "--format", "csv", "--out", path(d)]);
    assert_eq!(fmt.status.code(), Some(2));
    assert_eq!(qembed(&["train", "--bogus"]).status.code(), Some(2));

    // data errors: too many malformed rows, a corrupt corpus
    std::fs::write(&raw, "a\tb\t1\nbroken\n").unwrap();
    let malformed = qembed(&["ingest", path(&raw), "--format", "pairs_labeled", "--out", path(d)]);
    assert_eq!(malformed.status.code(), Some(3));
    let corpus = d.join("corpus.jsonl");
    std::fs::write(&corpus, "{\"id\": 1}\n").unwrap();
    let checkpoint = fixture().join("checkpoint.qemb");
    let bad_corpus = qembed(&[
        "search",
        "w01",
        "--checkpoint",
        path(&checkpoint),
        "--corpus",
        path(&corpus),
    ]);
    assert_eq!(bad_corpus.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&bad_corpus.stderr).contains("corpus.jsonl:1"));

    // numeric failure: an all-zero model embeds everything to the zero vector
    let cfg = EncoderConfig {
        d: 4,
        n_layers: 0,
        n_heads: 1,
        d_ff: 4,
        max_len: 4,
        seed: 0,
    };
    let vocab = build_vocab(&["w01 w02"], 1).unwrap();
    let mut params = ModelParams::init(&cfg, vocab.len()).unwrap();
    params.values_mut().iter_mut().for_each(|v| *v = 0.0);
    let zero_ckpt = d.join("zero.qemb");
    save_checkpoint(&params, &vocab, &zero_ckpt).unwrap();
    write_corpus(
        &corpus,
        &[Document {
            id: 1,
            text: "w01".into(),
        }],
    )
    .unwrap();
    let numeric = qembed(&[
        "search",
        "w02",
        "--checkpoint",
        path(&zero_ckpt),
        "--corpus",
        path(&corpus),
    ]);
    assert_eq!(
        numeric.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&numeric.stderr)
    );
}
