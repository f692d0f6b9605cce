//! Command-line behavior: documented examples, exit codes, and the
//! machine-readable error records.

use std::path::Path;
use std::process::{Command, Output};

fn mtb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtb"))
        .args(args)
        .output()
        .expect("spawn mtb")
}

fn write_documents(path: &Path, lines: &[&str]) {
    let mut text = String::from("{\"format\":\"mtb.documents\",\"version\":1}\n");
    for line in lines {
        text.push_str(line);
        text.push('\n');
    }
    std::fs::write(path, text).unwrap();
}

#[test]
fn extract_on_three_mention_demo_doc_yields_three_statements() {
    let dir = tempfile::tempdir().unwrap();
    let docs = dir.path().join("docs.jsonl");
    write_documents(
        &docs,
        &[concat!(
            "{\"doc_id\":\"demo\",\"tokens\":[\"t0\",\"t1\",\"t2\",\"t3\",\"t4\",\"t5\",",
            "\"t6\",\"t7\",\"t8\",\"t9\"],\"mentions\":[",
            "{\"start\":1,\"end\":2,\"entity_id\":\"A\"},",
            "{\"start\":4,\"end\":5,\"entity_id\":\"B\"},",
            "{\"start\":8,\"end\":9,\"entity_id\":\"C\"}]}"
        )],
    );
    let vocab = dir.path().join("vocab.txt");
    let out = dir.path().join("statements.jsonl");
    let result = mtb(&[
        "extract",
        "--in",
        docs.to_str().unwrap(),
        "--vocab",
        vocab.to_str().unwrap(),
        "--build-vocab",
        "--window",
        "40",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(result.status.success());
    let text = std::fs::read_to_string(&out).unwrap();
    // Header plus one statement per mention pair: (A,B), (A,C), (B,C).
    assert_eq!(text.lines().count(), 4);
    assert!(text.lines().next().unwrap().contains("mtb.statements"));
}

#[test]
fn pairgen_with_zero_max_pairs_writes_empty_output_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let statements = dir.path().join("statements.jsonl");
    std::fs::write(
        &statements,
        concat!(
            "{\"format\":\"mtb.statements\",\"version\":1}\n",
            "{\"x\":[0,10,11,12,1],\"s1\":{\"start\":1,\"end\":2},\"s2\":{\"start\":3,\"end\":4},",
            "\"e1\":\"A\",\"e2\":\"B\",\"source\":{\"doc_id\":\"d0\",\"offset\":0}}\n"
        ),
    )
    .unwrap();
    let out = dir.path().join("pairs.jsonl");
    let result = mtb(&[
        "pairgen",
        "--in",
        statements.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--max-pairs",
        "0",
    ]);
    assert!(result.status.success(), "{}", String::from_utf8_lossy(&result.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 1); // header only
}

#[test]
fn malformed_input_line_reports_its_number_and_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let docs = dir.path().join("docs.jsonl");
    write_documents(&docs, &["{\"doc_id\":\"ok\",\"tokens\":[\"a\"],\"mentions\":[]}", "not json"]);
    let result = mtb(&[
        "extract",
        "--in",
        docs.to_str().unwrap(),
        "--vocab",
        dir.path().join("v.txt").to_str().unwrap(),
        "--build-vocab",
        "--out",
        dir.path().join("s.jsonl").to_str().unwrap(),
    ]);
    assert!(!result.status.success());
    let stderr = String::from_utf8_lossy(&result.stderr);
    let record: serde_json::Value = serde_json::from_str(stderr.trim()).expect("json error record");
    assert_eq!(record["line"], 3);
    assert!(record["error"].as_str().unwrap().contains("line 3"));
}

#[test]
fn unknown_format_version_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let docs = dir.path().join("docs.jsonl");
    std::fs::write(&docs, "{\"format\":\"mtb.documents\",\"version\":9}\n").unwrap();
    let result = mtb(&[
        "extract",
        "--in",
        docs.to_str().unwrap(),
        "--vocab",
        dir.path().join("v.txt").to_str().unwrap(),
        "--build-vocab",
        "--out",
        dir.path().join("s.jsonl").to_str().unwrap(),
    ]);
    assert!(!result.status.success());
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("version"), "stderr: {stderr}");
}

#[test]
fn checkpoint_with_wrong_vocabulary_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let d = |name: &str| root.join(name).to_string_lossy().to_string();

    // Build a tiny corpus and checkpoint.
    assert!(mtb(&[
        "synth", "--relations", "2", "--templates-per-relation", "1", "--entities", "8",
        "--docs", "20", "--seed", "1", "--pairs-per-relation", "2", "--out-dir", &d(""),
    ])
    .status
    .success());
    assert!(mtb(&[
        "extract", "--in", &d("docs.jsonl"), "--vocab", &d("vocab.txt"), "--build-vocab",
        "--out", &d("statements.jsonl"),
    ])
    .status
    .success());
    assert!(mtb(&[
        "pairgen", "--in", &d("statements.jsonl"), "--out", &d("pairs.jsonl"), "--max-pairs",
        "40", "--seed", "2",
    ])
    .status
    .success());
    std::fs::write(
        root.join("train.toml"),
        r#"
[encoder]
layers = 1
hidden = 16
heads = 2
ffn_mult = 2
max_len = 32
input_variant = "entity_markers"
output_variant = "entity_start"
post_layer = "linear_dense"

[train]
mode = "mtb_pretrain"
batch_size = 4
steps = 2
seed = 3

[train.optimizer]
kind = "sgd"
lr = 0.01
"#,
    )
    .unwrap();
    assert!(mtb(&[
        "train", "--config", &d("train.toml"), "--data", &d("pairs.jsonl"), "--vocab",
        &d("vocab.txt"), "--out", &d("run"),
    ])
    .status
    .success());

    // Tamper with the vocabulary, then try to evaluate.
    let mut vocab = std::fs::read_to_string(root.join("vocab.txt")).unwrap();
    vocab.push_str("sneaky\n");
    std::fs::write(root.join("vocab.txt"), vocab).unwrap();

    let result = mtb(&[
        "eval", "fewshot", "--ckpt", &d("run/ckpt-final"), "--data", &d("labeled.jsonl"),
        "--vocab", &d("vocab.txt"), "--n-way", "2", "--episodes", "5", "--seed", "1",
    ]);
    assert!(!result.status.success());
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("hash mismatch"), "stderr: {stderr}");
}

#[test]
fn quickstart_runs_every_stage_in_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let d = |name: &str| root.join(name).to_string_lossy().to_string();

    std::fs::write(
        root.join("pretrain.toml"),
        r#"
[encoder]
layers = 1
hidden = 32
heads = 2
ffn_mult = 2
max_len = 48
input_variant = "entity_markers"
output_variant = "entity_start"
post_layer = "linear_dense"
seed = 1

[train]
mode = "mtb_pretrain"
batch_size = 8
steps = 30
seed = 5
log_every = 10

[train.optimizer]
kind = "adam"
lr = 1e-3
"#,
    )
    .unwrap();
    std::fs::write(
        root.join("finetune.toml"),
        r#"
[encoder]
layers = 1
hidden = 32
heads = 2
ffn_mult = 2
max_len = 48
input_variant = "entity_markers"
output_variant = "entity_start"
post_layer = "linear_dense"
seed = 1

[train]
mode = "supervised_finetune"
batch_size = 8
steps = 30
seed = 5
lambda_mlm = 0.0
log_every = 10

[train.optimizer]
kind = "adam"
lr = 1e-3
"#,
    )
    .unwrap();

    // Temp-dir paths contain no whitespace, so stages can be written as
    // flat command lines.
    let stages = vec![
        format!(
            "synth --relations 4 --templates-per-relation 2 --entities 24 --docs 160 --seed 9 --out-dir {}",
            d("")
        ),
        format!(
            "extract --in {} --vocab {} --build-vocab --window 40 --cap 50 --cap-seed 3 --out {}",
            d("docs.jsonl"),
            d("vocab.txt"),
            d("statements.jsonl")
        ),
        format!(
            "pairgen --in {} --out {} --alpha 0.7 --seed 4 --max-pairs 600",
            d("statements.jsonl"),
            d("pairs.jsonl")
        ),
        format!(
            "train --config {} --data {} --vocab {} --out {}",
            d("pretrain.toml"),
            d("pairs.jsonl"),
            d("vocab.txt"),
            d("pretrain")
        ),
        format!(
            "eval fewshot --ckpt {} --data {} --vocab {} --n-way 4 --k-shot 1 --episodes 50 --seed 2 --report {}",
            d("pretrain/ckpt-final"),
            d("labeled.jsonl"),
            d("vocab.txt"),
            d("fewshot.json")
        ),
        format!(
            "train --config {} --data {} --relations {} --vocab {} --init {} --out {}",
            d("finetune.toml"),
            d("labeled.jsonl"),
            d("relations.txt"),
            d("vocab.txt"),
            d("pretrain/ckpt-final"),
            d("finetune")
        ),
        format!(
            "eval supervised --ckpt {} --data {} --vocab {} --relations {} --report {}",
            d("finetune/ckpt-final"),
            d("labeled.jsonl"),
            d("vocab.txt"),
            d("relations.txt"),
            d("supervised.json")
        ),
        format!(
            "sweep --config {} --init {} --train-data {} --eval-data {} --relations {} --vocab {} --grid 0,2 --fewshot-n 4 --fewshot-episodes 25 --seed 3 --report {}",
            d("finetune.toml"),
            d("pretrain/ckpt-final"),
            d("labeled.jsonl"),
            d("labeled.jsonl"),
            d("relations.txt"),
            d("vocab.txt"),
            d("sweep.jsonl")
        ),
        format!(
            "plot --metrics {} --sweep {} --out-dir {}",
            d("pretrain/metrics.jsonl"),
            d("sweep.jsonl"),
            d("plots")
        ),
    ];
    for stage in &stages {
        let args: Vec<&str> = stage.split_whitespace().collect();
        let result = mtb(&args);
        assert!(
            result.status.success(),
            "stage {:?} failed: {}",
            args[0],
            String::from_utf8_lossy(&result.stderr)
        );
    }
    for artifact in [
        "fewshot.json",
        "supervised.json",
        "sweep.jsonl",
        "plots/loss.svg",
        "plots/metrics.csv",
        "plots/sweep.svg",
        "plots/sweep.csv",
    ] {
        assert!(root.join(artifact).exists(), "missing {artifact}");
    }
}
