//! End-to-end runs of the tckit binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tckit::corpus::{generate_toy_corpus, save_corpus};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tckit"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn tckit")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Writes toy data plus a small training config; returns their paths.
struct Fixture {
    dir: tempfile::TempDir,
    train: PathBuf,
    test: PathBuf,
    labels: PathBuf,
    config: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let toy = generate_toy_corpus(8, 3, 5);
    let train = dir.path().join("train.jsonl");
    let test = dir.path().join("test.jsonl");
    let labels = dir.path().join("labels.txt");
    save_corpus(&train, &toy.train).unwrap();
    save_corpus(&test, &toy.test).unwrap();
    fs::write(&labels, toy.labels.labels().join("\n")).unwrap();
    let config = dir.path().join("config.json");
    fs::write(
        &config,
        r#"{
  "encoder": {
    "vocab_size": 256, "d_model": 16, "n_heads": 2, "n_layers": 1,
    "d_ff": 32, "max_seq_len": 32, "dropout_rate": 0.1, "layer_norm_eps": 1e-12
  },
  "learning_rate": 2e-3, "epochs": 2, "batch_size": 8, "seed": 3
}"#,
    )
    .unwrap();
    Fixture { dir, train, test, labels, config }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn help_exits_zero_and_unknown_flag_exits_two() {
    let help = run(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(stdout_of(&help).contains("pretrain"));

    let unknown = run(&["pretrain", "--no-such-flag"]);
    assert_eq!(unknown.status.code(), Some(2));

    let missing = run(&[
        "pretrain",
        "--data",
        "/nonexistent/corpus.jsonl",
        "--labels",
        "/nonexistent/labels.txt",
        "--out",
        "/tmp/tckit-nonexistent-out",
    ]);
    assert_eq!(missing.status.code(), Some(2), "missing file is a usage error");

    let bad_config = {
        let f = fixture();
        let cfg = f.dir.path().join("bad.json");
        fs::write(&cfg, "{ not json").unwrap();
        run(&[
            "pretrain",
            "--config",
            p(&cfg),
            "--data",
            p(&f.train),
            "--labels",
            p(&f.labels),
            "--out",
            p(&f.dir.path().join("out")),
        ])
    };
    assert_eq!(bad_config.status.code(), Some(2), "invalid config is a usage error");
}

#[test]
fn pretrain_writes_checkpoint_and_metrics_deterministically() {
    let f = fixture();
    let out1 = f.dir.path().join("run1");
    let out2 = f.dir.path().join("run2");
    for out in [&out1, &out2] {
        let r = run(&[
            "pretrain",
            "--config",
            p(&f.config),
            "--data",
            p(&f.train),
            "--labels",
            p(&f.labels),
            "--objective",
            "moco",
            "--momentum",
            "0.999",
            "--seed",
            "7",
            "--out",
            p(out),
        ]);
        assert_eq!(r.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&r.stderr));
        assert!(out.join("manifest.json").exists());
        assert!(out.join("tensors.bin").exists());
        assert!(out.join("metrics.jsonl").exists());
    }
    // Checkpoints are byte-identical; metrics too, once the wall-clock
    // field is stripped.
    assert_eq!(
        fs::read(out1.join("tensors.bin")).unwrap(),
        fs::read(out2.join("tensors.bin")).unwrap()
    );
    assert_eq!(
        fs::read(out1.join("manifest.json")).unwrap(),
        fs::read(out2.join("manifest.json")).unwrap()
    );
    let strip = |path: &Path| -> Vec<String> {
        fs::read_to_string(path)
            .unwrap()
            .lines()
            .map(|l| {
                let cut = l.find(",\"seconds\":").expect("metrics line has seconds");
                format!("{}}}", &l[..cut])
            })
            .collect()
    };
    assert_eq!(strip(&out1.join("metrics.jsonl")), strip(&out2.join("metrics.jsonl")));
}

#[test]
fn classify_similarity_prints_a_report() {
    let f = fixture();
    let ckpt = f.dir.path().join("ckpt");
    let r = run(&[
        "pretrain",
        "--config",
        p(&f.config),
        "--data",
        p(&f.train),
        "--labels",
        p(&f.labels),
        "--objective",
        "simcse",
        "--out",
        p(&ckpt),
    ]);
    assert_eq!(r.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&r.stderr));

    let r = run(&[
        "classify",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&f.test),
        "--labels",
        p(&f.labels),
        "--support",
        p(&f.train),
        "--mode",
        "similarity",
        "--whitening",
    ]);
    assert_eq!(r.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&r.stderr));
    let report: serde_json::Value = serde_json::from_str(&stdout_of(&r)).unwrap();
    let acc = report["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(report["n_test"].as_u64().unwrap(), 12);

    // Similarity mode without --support is a usage error.
    let r = run(&[
        "classify",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&f.test),
        "--labels",
        p(&f.labels),
        "--mode",
        "similarity",
    ]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn finetune_then_classify_with_head() {
    let f = fixture();
    let ckpt = f.dir.path().join("ckpt");
    let tuned = f.dir.path().join("tuned");
    let r = run(&[
        "pretrain",
        "--config",
        p(&f.config),
        "--data",
        p(&f.train),
        "--labels",
        p(&f.labels),
        "--out",
        p(&ckpt),
    ]);
    assert_eq!(r.status.code(), Some(0));
    let r = run(&[
        "finetune",
        "--config",
        p(&f.config),
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&f.train),
        "--labels",
        p(&f.labels),
        "--out",
        p(&tuned),
    ]);
    assert_eq!(r.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&r.stderr));

    let report_path = f.dir.path().join("report.json");
    let r = run(&[
        "classify",
        "--checkpoint",
        p(&tuned),
        "--data",
        p(&f.test),
        "--labels",
        p(&f.labels),
        "--mode",
        "finetune",
        "--out",
        p(&report_path),
    ]);
    assert_eq!(r.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&r.stderr));
    let on_disk: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    let printed: serde_json::Value = serde_json::from_str(&stdout_of(&r)).unwrap();
    assert_eq!(on_disk, printed);

    // Classifying with the un-tuned checkpoint (no head) fails at runtime.
    let r = run(&[
        "classify",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&f.test),
        "--labels",
        p(&f.labels),
        "--mode",
        "finetune",
    ]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn embed_emits_vectors_in_both_modes() {
    let f = fixture();
    let ckpt = f.dir.path().join("ckpt");
    let r = run(&[
        "pretrain",
        "--config",
        p(&f.config),
        "--data",
        p(&f.train),
        "--labels",
        p(&f.labels),
        "--out",
        p(&ckpt),
    ]);
    assert_eq!(r.status.code(), Some(0));

    let filled = run(&["embed", "--checkpoint", p(&ckpt), "--data", p(&f.test), "--prompt", "1"]);
    assert_eq!(filled.status.code(), Some(0));
    let lines: Vec<serde_json::Value> = stdout_of(&filled)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 12);
    assert_eq!(lines[0]["vector"].as_array().unwrap().len(), 16);
    assert!(lines[0]["label_or_mask"].as_str().unwrap() != "[MASK]");
    assert_eq!(lines[0]["id"], 0);

    let out_path = f.dir.path().join("masked.jsonl");
    let masked = run(&[
        "embed",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&f.test),
        "--labels",
        p(&f.labels),
        "--masked",
        "--out",
        p(&out_path),
    ]);
    assert_eq!(masked.status.code(), Some(0));
    let body = fs::read_to_string(&out_path).unwrap();
    let rec: serde_json::Value = serde_json::from_str(body.lines().next().unwrap()).unwrap();
    assert_eq!(rec["label_or_mask"], "[MASK]");
}

#[test]
fn custom_template_file_and_thread_cap() {
    let f = fixture();
    let ckpt = f.dir.path().join("ckpt");
    // Pre-train with a template supplied as a file.
    let template_path = f.dir.path().join("my_prompt.txt");
    fs::write(&template_path, "这条{label}新闻说：{text}\n").unwrap();
    let r = run(&[
        "pretrain",
        "--config",
        p(&f.config),
        "--data",
        p(&f.train),
        "--labels",
        p(&f.labels),
        "--prompt",
        p(&template_path),
        "--out",
        p(&ckpt),
    ]);
    assert_eq!(r.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&r.stderr));

    // Embeddings are identical however many worker threads run.
    let embed_args = |out: &Path| {
        vec![
            "embed".to_string(),
            "--checkpoint".into(),
            ckpt.to_str().unwrap().into(),
            "--data".into(),
            f.test.to_str().unwrap().into(),
            "--prompt".into(),
            template_path.to_str().unwrap().into(),
            "--out".into(),
            out.to_str().unwrap().into(),
        ]
    };
    let out1 = f.dir.path().join("e1.jsonl");
    let out3 = f.dir.path().join("e3.jsonl");
    let r = bin().args(embed_args(&out1)).env("TCKIT_THREADS", "1").output().unwrap();
    assert_eq!(r.status.code(), Some(0));
    let r = bin().args(embed_args(&out3)).env("TCKIT_THREADS", "3").output().unwrap();
    assert_eq!(r.status.code(), Some(0));
    assert_eq!(fs::read(&out1).unwrap(), fs::read(&out3).unwrap());

    // A malformed template file is a usage-level config error.
    let bad = f.dir.path().join("bad_prompt.txt");
    fs::write(&bad, "no slots here\n").unwrap();
    let r = run(&[
        "embed",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&f.test),
        "--prompt",
        p(&bad),
    ]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn eval_scores_prediction_files() {
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("pred.txt");
    let gold = dir.path().join("gold.txt");
    fs::write(&pred, "A\nB\nA\nA\n").unwrap();
    fs::write(&gold, "A\nB\nB\nA\n").unwrap();
    let r = run(&["eval", "--pred", p(&pred), "--gold", p(&gold)]);
    assert_eq!(r.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_str(&stdout_of(&r)).unwrap();
    assert_eq!(report["accuracy"].as_f64().unwrap(), 0.75);
    assert_eq!(report["n_test"], 4);
}
