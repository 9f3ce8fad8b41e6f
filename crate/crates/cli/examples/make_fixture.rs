//! Regenerates the synthetic end-to-end fixture under
//! `tests/fixtures/synthetic`: data files, config, a trained checkpoint,
//! calibrated filters and the expected metrics report.
//!
//! cargo run -p qembed-cli --example make_fixture

use std::path::Path;

use qembed::jsonl::write_jsonl;
use qembed::retrieval::write_corpus;
use qembed::synthetic::{cluster_pairs, distractors, topic_pairs, PoolSpec, Split};
use qembed::training::PairExample;
use qembed_cli::commands::{cmd_calibrate, cmd_eval, cmd_train, CHECKPOINT_FILE, FILTERS_FILE, METRICS_FILE};
use qembed_cli::config::RunConfig;
use serde_json::json;

const CONFIG: &str = r#"seed = 7

[encoder]
d = 16
n_layers = 1
n_heads = 2
d_ff = 32
max_len = 12

[train]
epochs = 3
learning_rate = 0.01
curriculum = "rr"

[[tasks]]
name = "dup"
loss = "contrastive"
data = "dup_train.jsonl"
batch_size = 16

[[tasks]]
name = "topic"
loss = "multiple_negatives"
data = "topic_train.jsonl"
batch_size = 16

[[calibration]]
task = "dup"
policy = "best_accuracy"
data = "dup_train.jsonl"

[[eval]]
kind = "classification"
task = "dup"
data = "dup_test.jsonl"

[[eval]]
kind = "qe_retrieval"
task = "dup"
data = "qe_pairs.jsonl"
distractors = "distractors.jsonl"
target_size = 150
ks = [1, 3, 5]

[[eval]]
kind = "answer_selection"
task = "dup"
data = "answers.jsonl"

[[eval]]
kind = "exact_match"
task = "dup"
data = "qca.jsonl"
"#;

fn parity(sentence: &str) -> usize {
    sentence
        .split(' ')
        .next()
        .and_then(|t| t[1..].parse::<usize>().ok())
        .unwrap()
        % 2
}

fn main() -> qembed::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/synthetic");
    std::fs::create_dir_all(&dir)?;
    let spec = PoolSpec::default();

    write_jsonl(&dir.join("dup_train.jsonl"), cluster_pairs(spec, Split::Parity, 240, 1))?;
    write_jsonl(&dir.join("dup_test.jsonl"), cluster_pairs(spec, Split::Parity, 120, 2))?;
    write_jsonl(
        &dir.join("topic_train.jsonl"),
        topic_pairs(spec, Split::Halves, ["low", "high"], 160, 3),
    )?;

    let qe: Vec<PairExample> = cluster_pairs(spec, Split::Parity, 80, 4)
        .into_iter()
        .filter(|p| p.label == Some(1))
        .map(|p| PairExample::positive(p.text_a, p.text_b))
        .collect();
    write_jsonl(&dir.join("qe_pairs.jsonl"), qe)?;
    write_corpus(dir.join("distractors.jsonl"), &distractors(spec, 200, 0, 5))?;

    // questions with three candidate sentences each; a candidate answers
    // the question when it comes from the same cluster
    let pool = cluster_pairs(spec, Split::Parity, 120, 6);
    let mut answers = Vec::new();
    let mut qca = Vec::new();
    for group in pool.chunks(3) {
        let q = &group[0].text_a;
        let cands: Vec<&str> = group.iter().map(|p| p.text_b.as_str()).collect();
        for c in &cands {
            answers.push(PairExample::labeled(q.clone(), *c, u8::from(parity(c) == parity(q))));
        }
        if let Some(hit) = cands.iter().find(|c| parity(c) == parity(q)) {
            let answer: Vec<&str> = hit.split(' ').take(2).collect();
            let context: Vec<String> = cands.iter().map(|c| format!("{c}.")).collect();
            qca.push(json!({"question": q, "context": context.join(" "), "answer": answer.join(" ")}));
        }
    }
    write_jsonl(&dir.join("answers.jsonl"), answers)?;
    write_jsonl(&dir.join("qca.jsonl"), qca)?;

    let config_path = dir.join("config.toml");
    std::fs::write(&config_path, CONFIG)?;

    let scratch = tempfile::tempdir()?;
    let mut cfg = RunConfig::load(&config_path)?;
    cfg.out_dir = scratch.path().to_path_buf();
    cmd_train(&cfg)?;
    cmd_calibrate(&cfg, None)?;
    cmd_eval(&cfg, None, None)?;
    for (from, to) in [
        (CHECKPOINT_FILE, CHECKPOINT_FILE),
        (FILTERS_FILE, FILTERS_FILE),
        (METRICS_FILE, "expected_metrics.jsonl"),
    ] {
        std::fs::copy(scratch.path().join(from), dir.join(to))?;
    }
    print!("{}", std::fs::read_to_string(dir.join("expected_metrics.jsonl"))?);
    Ok(())
}
